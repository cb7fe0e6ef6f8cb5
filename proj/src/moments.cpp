#include "kt/moments.hpp"

#include <cmath>
#include <stdexcept>

namespace kt::moments {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

void check_var(double var, const char* who) {
    if (!(var >= 0.0)) {
        throw std::domain_error(std::string(who) + ": negative variance");
    }
}

double clamp_var(double var) { return var < kVarFloor ? kVarFloor : var; }

}  // namespace

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

double norm_pdf(double x) {
    const double e = 0.5 * x * x;
    if (e > 700.0) return 0.0;
    return kInvSqrt2Pi * std::exp(-e);
}

double relu_mean(double mu, double var) {
    check_var(var, "relu_mean");
    const double sigma = std::sqrt(clamp_var(var));
    const double a = mu / sigma;
    return mu * norm_cdf(a) + sigma * norm_pdf(a);
}

double relu_cov_entry(double mu_j, double mu_k, double var_j, double var_k,
                      double cov_jk) {
    if (!(var_j > 0.0) || !(var_k > 0.0)) {
        throw std::domain_error("relu_cov_entry: nonpositive variance");
    }
    const double sj = std::sqrt(clamp_var(var_j));
    const double sk = std::sqrt(clamp_var(var_k));
    // Numerical drift can push |rho| slightly past 1; clamp to the valid cone.
    const double bound = sj * sk;
    const double s = cov_jk > bound ? bound : (cov_jk < -bound ? -bound : cov_jk);
    const double aj = mu_j / sj;
    const double ak = mu_k / sk;
    return norm_cdf(aj) * norm_cdf(ak) * s +
           norm_pdf(aj) * norm_pdf(ak) * s * s / (2.0 * sj * sk);
}

double relu_cross_cov_diag(double mu, double var, double mu_z) {
    if (!(var > 0.0)) {
        throw std::domain_error("relu_cross_cov_diag: nonpositive variance");
    }
    const double v = clamp_var(var);
    const double sigma = std::sqrt(v);
    const double a = mu / sigma;
    // N(0; mu, var) = phi(mu/sigma) / sigma
    return (mu * mu + v) * norm_cdf(a) + mu * v * (norm_pdf(a) / sigma) -
           mu * mu_z;
}

void relu_layer_moments(const GaussianState& u, GaussianState& z, Vec& uz_diag) {
    const int n = u.dim();
    z.mean.resize(n);
    z.cov.resize(n, n);
    uz_diag.resize(n);
    Vec var = u.cov.diagonal().cwiseMax(kVarFloor);
    for (int j = 0; j < n; ++j) {
        z.mean[j] = relu_mean(u.mean[j], var[j]);
        uz_diag[j] = relu_cross_cov_diag(u.mean[j], var[j], z.mean[j]);
    }
    for (int j = 0; j < n; ++j) {
        for (int k = j; k < n; ++k) {
            const double c =
                relu_cov_entry(u.mean[j], u.mean[k], var[j], var[k], u.cov(j, k));
            z.cov(j, k) = c;
            z.cov(k, j) = c;
        }
    }
    repair_covariance(z.cov, "relu_layer_moments");
}

SoftmaxMoments softmax_moments(const GaussianState& u, int block_size) {
    const int n = u.dim();
    if (block_size <= 0 || n % block_size != 0) {
        throw std::domain_error("softmax_moments: dimension not a multiple of block size");
    }
    const int blocks = n / block_size;
    SoftmaxMoments out;
    out.mean.resize(n);
    Mat jac = Mat::Zero(n, n);
    for (int b = 0; b < blocks; ++b) {
        const int o = b * block_size;
        const Vec m = u.mean.segment(o, block_size);
        Vec e = (m.array() - m.maxCoeff()).exp();
        Vec p = e / e.sum();
        out.mean.segment(o, block_size) = p;
        jac.block(o, o, block_size, block_size) =
            Mat(p.asDiagonal()) - p * p.transpose();
    }
    out.up_cross = u.cov * jac.transpose();
    out.cov = jac * out.up_cross;
    repair_covariance(out.cov, "softmax_moments");
    return out;
}

namespace {

// Augmented per-token second-moment matrix E[[z;1][z;1]^T].
Mat augmented_second_moment(const GaussianState& z, int tokens, int width) {
    const int m1 = width + 1;
    Mat ez = Mat::Zero(tokens * m1, tokens * m1);
    for (int t = 0; t < tokens; ++t) {
        for (int v = 0; v < tokens; ++v) {
            auto blk = ez.block(t * m1, v * m1, m1, m1);
            blk.topLeftCorner(width, width) =
                z.cov.block(t * width, v * width, width, width) +
                z.mean.segment(t * width, width) *
                    z.mean.segment(v * width, width).transpose();
            blk.topRightCorner(width, 1) = z.mean.segment(t * width, width);
            blk.bottomLeftCorner(1, width) =
                z.mean.segment(v * width, width).transpose();
            blk(width, width) = 1.0;
        }
    }
    return ez;
}

void check_shapes(const GaussianState& w, const GaussianState& z,
                  const LayerShape& s, const char* who) {
    if (w.dim() != s.w_dim() || z.dim() != s.in_dim() ||
        w.cov.rows() != w.dim() || z.cov.rows() != z.dim()) {
        throw std::domain_error(std::string(who) + ": dimension mismatch");
    }
}

}  // namespace

GaussianState linear_forward_moments(const GaussianState& w,
                                     const GaussianState& z,
                                     const LayerShape& s) {
    check_shapes(w, z, s, "linear_forward_moments");
    const int m1 = s.in_width + 1;
    const int n_out = s.out_width;
    const Mat ez = augmented_second_moment(z, s.tokens, s.in_width);
    const Mat ew = w.cov + w.mean * w.mean.transpose();

    GaussianState u;
    u.mean.resize(s.out_dim());
    for (int t = 0; t < s.tokens; ++t) {
        Vec za(m1);
        za.head(s.in_width) = z.mean.segment(t * s.in_width, s.in_width);
        za[s.in_width] = 1.0;
        for (int a = 0; a < n_out; ++a) {
            u.mean[t * n_out + a] = w.mean.segment(a * m1, m1).dot(za);
        }
    }

    u.cov.resize(s.out_dim(), s.out_dim());
    for (int j = 0; j < s.out_dim(); ++j) {
        const int t = j / n_out, a = j % n_out;
        for (int k = j; k < s.out_dim(); ++k) {
            const int v = k / n_out, c = k % n_out;
            const double e2 = ew.block(a * m1, c * m1, m1, m1)
                                  .cwiseProduct(ez.block(t * m1, v * m1, m1, m1))
                                  .sum();
            const double val = e2 - u.mean[j] * u.mean[k];
            u.cov(j, k) = val;
            u.cov(k, j) = val;
        }
    }
    repair_covariance(u.cov, "linear_forward_moments");
    return u;
}

CrossCov linear_cross_cov_wu(const GaussianState& w, const Vec& z_mean,
                             const LayerShape& s) {
    if (w.dim() != s.w_dim() || z_mean.size() != s.in_dim()) {
        throw std::domain_error("linear_cross_cov_wu: dimension mismatch");
    }
    const int m1 = s.in_width + 1;
    Mat out(s.w_dim(), s.out_dim());
    for (int t = 0; t < s.tokens; ++t) {
        Vec za(m1);
        za.head(s.in_width) = z_mean.segment(t * s.in_width, s.in_width);
        za[s.in_width] = 1.0;
        for (int a = 0; a < s.out_width; ++a) {
            out.col(t * s.out_width + a).noalias() =
                w.cov.middleCols(a * m1, m1) * za;
        }
    }
    return CrossCov{std::move(out)};
}

CrossCov linear_cross_cov_zu(const GaussianState& z, const Vec& w_mean,
                             const LayerShape& s) {
    if (w_mean.size() != s.w_dim() || z.dim() != s.in_dim()) {
        throw std::domain_error("linear_cross_cov_zu: dimension mismatch");
    }
    const int m1 = s.in_width + 1;
    Mat out(s.in_dim(), s.out_dim());
    for (int t = 0; t < s.tokens; ++t) {
        for (int a = 0; a < s.out_width; ++a) {
            out.col(t * s.out_width + a).noalias() =
                z.cov.middleCols(t * s.in_width, s.in_width) *
                w_mean.segment(a * m1, s.in_width);
        }
    }
    return CrossCov{std::move(out)};
}

}  // namespace kt::moments
