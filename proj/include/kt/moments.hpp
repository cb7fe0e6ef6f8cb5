#pragma once

#include "kt/gaussian.hpp"

namespace kt::moments {

// Variances below this floor are clamped before any division by sigma.
inline constexpr double kVarFloor = 1e-18;

// Standard normal CDF, erf-based.
double norm_cdf(double x);

// Standard normal PDF, evaluated in log space for large |x|.
double norm_pdf(double x);

// E[max(0, u)] for u ~ N(mu, var):  mu * Phi(mu/sigma) + sigma * phi(mu/sigma).
double relu_mean(double mu, double var);

// Cov(max(0,u_j), max(0,u_k)) to second order in the input covariance:
//   Phi_j Phi_k * S_jk + phi_j phi_k * S_jk^2 / (2 sigma_j sigma_k).
double relu_cov_entry(double mu_j, double mu_k, double var_j, double var_k,
                      double cov_jk);

// Cov(u, max(0,u)) for u ~ N(mu, var); mu_z must equal relu_mean(mu, var):
//   (mu^2 + var) * Phi(mu/sigma) + mu * var * N(0; mu, var) - mu * mu_z.
double relu_cross_cov_diag(double mu, double var, double mu_z);

// Elementwise ReLU moments for a full layer: means via relu_mean, covariance
// entries via relu_cov_entry, and the diagonal of the input/output
// cross-covariance via relu_cross_cov_diag.
void relu_layer_moments(const GaussianState& u, GaussianState& z, Vec& uz_diag);

struct SoftmaxMoments {
    Vec mean;       // blockwise softmax of u.mean
    Mat cov;        // J Sigma_uu J^T
    Mat up_cross;   // Sigma_uu J^T  (cross-covariance of u with p)
};

// First-order propagation through a blockwise softmax. The softmax is applied
// independently to each consecutive block of `block_size` entries; J is the
// block-diagonal Jacobian diag(p) - p p^T evaluated at the block means.
SoftmaxMoments softmax_moments(const GaussianState& u, int block_size);

// Geometry of one bias-augmented linear layer applied per token:
// u[(t,a)] = w_a . [z_t; 1] with w laid out as out_width blocks of
// (in_width + 1) entries, bias last.
struct LayerShape {
    int tokens = 1;
    int in_width = 0;
    int out_width = 0;
    int in_dim() const { return tokens * in_width; }
    int out_dim() const { return tokens * out_width; }
    int w_dim() const { return out_width * (in_width + 1); }
};

// Moments of u = W z for random weights independent of the random input.
// Uses E[u_j u_k] = tr((Sigma_zz' + mu_z' mu_z'^T)(Sigma_ww' + mu_w' mu_w'^T))
// over the matching augmented blocks; the block-diagonal weight operator is
// never materialized.
GaussianState linear_forward_moments(const GaussianState& w,
                                     const GaussianState& z,
                                     const LayerShape& shape);

// Sigma_{w,u} = Sigma_ww Zbar^T where Zbar is the expected input-block matrix
// with u = Zbar w.
CrossCov linear_cross_cov_wu(const GaussianState& w, const Vec& z_mean,
                             const LayerShape& shape);

// Sigma_{z,u} = Sigma_zz Mbar^T with Mbar the expected weight operator
// (bias columns dropped).
CrossCov linear_cross_cov_zu(const GaussianState& z, const Vec& w_mean,
                             const LayerShape& shape);

}  // namespace kt::moments
