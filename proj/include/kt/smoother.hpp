#pragma once

#include "kt/batch.hpp"
#include "kt/head.hpp"

namespace kt::smoother {

// Observation injected at the head output: one-hot target rows and the data
// covariance (scalar c means c * I; 0 is replaced by a small jitter).
// mean_noise, when present, is added to the injected mean; it carries the
// stochastic-target perturbation used by the uncertainty experiments.
struct MeasurementModel {
    Mat targets;              // y x d_o
    double sigma_scalar = 0;  // used when sigma is empty
    Mat sigma;                // optional full matrix
    Vec mean_noise;           // optional, dim y * d_o

    void validate(int out_dim, bool onehot_required) const;
    Mat expanded_sigma(int dim) const;
};

inline constexpr double kSigmaJitter = 1e-9;

struct OutputPosterior {
    Vec mean;
    Mat cov;
};

// Algorithm step at the output layer: the posterior output distribution is a
// direct assignment of the vectorized targets and the data covariance, not a
// gain-weighted blend.
OutputPosterior inject_measurement(const head::LayerTrace& trace,
                                   const MeasurementModel& m);

struct LayerUpdate {
    Vec u_mean;
    Mat u_cov;
    Vec w_mean;
    Mat w_cov;
    Vec z_prev_mean;  // updated z^{i-1}
    Mat z_prev_cov;
};

// One RTS layer update given the updated distribution of z^i. `layer` is
// 0-based. Gains: K_u = Sigma_uz Sigma_zz^{-1} (diagonal Sigma_uz at ReLU
// layers, the full output cross-covariance at the last layer),
// K_w = Sigma_wu Sigma_uu^{-1}, and K_z = Sigma_{z^{i-1},u} Sigma_uu^{-1}
// driven by the u innovation.
LayerUpdate rts_layer_update(const head::LayerTrace& trace, int layer,
                             const head::WeightState& weights,
                             const Vec& z_post_mean, const Mat& z_post_cov,
                             const head::HeadConfig& config,
                             bool deep_psd_check = true);

// One full sequential step: forward pass on the preprocessed batch,
// measurement injection, RTS updates from the top layer down. Only the weight
// posteriors persist. deep_psd_check controls whether the large per-layer
// weight covariances get a full eigenvalue check on this call.
head::WeightState sequential_update(const head::WeightState& weights,
                                    const PreprocessedBatch& batch,
                                    const MeasurementModel& m,
                                    const head::HeadConfig& config,
                                    bool deep_psd_check = true);

}  // namespace kt::smoother
