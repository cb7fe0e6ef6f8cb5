#include "kt/smoother.hpp"

#include <cmath>

namespace kt::smoother {

using head::HeadConfig;
using head::LayerTrace;
using head::WeightState;
using moments::LayerShape;

void MeasurementModel::validate(int out_dim, bool onehot_required) const {
    if (targets.cols() != out_dim) {
        throw std::invalid_argument("measurement: target width mismatch");
    }
    if (onehot_required) {
        for (Eigen::Index r = 0; r < targets.rows(); ++r) {
            double sum = 0;
            for (Eigen::Index c = 0; c < targets.cols(); ++c) {
                const double v = targets(r, c);
                if (v != 0.0 && v != 1.0) {
                    throw std::invalid_argument("measurement: target row not one-hot");
                }
                sum += v;
            }
            if (sum != 1.0) {
                throw std::invalid_argument("measurement: target row not one-hot");
            }
        }
    }
    if (sigma.size() == 0 && sigma_scalar < 0.0) {
        throw std::invalid_argument("measurement: negative data covariance");
    }
    const auto dim = targets.size();
    if (mean_noise.size() != 0 && mean_noise.size() != dim) {
        throw std::invalid_argument("measurement: noise dimension mismatch");
    }
    if (sigma.size() != 0 && (sigma.rows() != dim || sigma.cols() != dim)) {
        throw std::invalid_argument("measurement: sigma dimension mismatch");
    }
}

Mat MeasurementModel::expanded_sigma(int dim) const {
    if (sigma.size() != 0) return sigma;
    const double s = sigma_scalar > 0.0 ? sigma_scalar : kSigmaJitter;
    return s * Mat::Identity(dim, dim);
}

OutputPosterior inject_measurement(const LayerTrace& trace,
                                   const MeasurementModel& m) {
    const GaussianState& out = trace.layers.back().z;
    const int dim = out.dim();
    if (m.targets.size() != dim) {
        throw std::invalid_argument("inject_measurement: dimension mismatch");
    }
    OutputPosterior post;
    post.mean.resize(dim);
    const int width = static_cast<int>(m.targets.cols());
    for (Eigen::Index r = 0; r < m.targets.rows(); ++r) {
        post.mean.segment(r * width, width) = m.targets.row(r).transpose();
    }
    if (m.mean_noise.size() != 0) post.mean += m.mean_noise;
    post.cov = m.expanded_sigma(dim);
    return post;
}

LayerUpdate rts_layer_update(const LayerTrace& trace, int layer,
                             const WeightState& weights, const Vec& z_post_mean,
                             const Mat& z_post_cov, const HeadConfig& config,
                             bool deep_psd_check) {
    const int last = config.layer_count() - 1;
    const auto& lt = trace.layers[layer];
    const GaussianState& z_prev = layer == 0 ? trace.input : trace.layers[layer - 1].z;
    const LayerShape shape = config.shape(layer, trace.tokens);
    const int layer_1based = layer + 1;

    // u update: K_u = Sigma_uz Sigma_zz^{-1}
    Mat uz;  // (u_dim x z_dim), here square
    if (layer == last) {
        uz = trace.up_cross;
    } else {
        uz = Mat(lt.uz_diag.asDiagonal());
    }
    const Mat k_u =
        solve_spd(lt.z.cov, uz.transpose(), layer_1based).transpose();
    LayerUpdate out;
    out.u_mean = lt.u.mean + k_u * (z_post_mean - lt.z.mean);
    out.u_cov = lt.u.cov + k_u * (z_post_cov - lt.z.cov) * k_u.transpose();
    repair_covariance_loose(out.u_cov, "rts u update", layer_1based);

    const Vec u_innov_mean = out.u_mean - lt.u.mean;
    const Mat u_innov_cov = out.u_cov - lt.u.cov;

    // w update: K_w = Sigma_wu Sigma_uu^{-1}
    const auto& wl = weights.layers[layer];
    GaussianState w{wl.mu, wl.cov};
    const Mat wu = moments::linear_cross_cov_wu(w, z_prev.mean, shape).m;
    const Mat k_w = solve_spd(lt.u.cov, wu.transpose(), layer_1based).transpose();
    out.w_mean = wl.mu + k_w * u_innov_mean;
    out.w_cov = wl.cov + k_w * u_innov_cov * k_w.transpose();
    if (deep_psd_check) {
        repair_covariance_loose(out.w_cov, "rts w update", layer_1based);
    } else {
        symmetrize(out.w_cov);
    }

    // z^{i-1} update: K_z = Sigma_{z,u} Sigma_uu^{-1}, driven by the u
    // innovation (the cross-covariance of z with w is zero under the
    // independence assumption, so the weight-innovation form would freeze the
    // hidden states).
    if (z_prev.cov.cwiseAbs().maxCoeff() == 0.0) {
        out.z_prev_mean = z_prev.mean;
        out.z_prev_cov = z_prev.cov;
    } else {
        const Mat zu = moments::linear_cross_cov_zu(z_prev, wl.mu, shape).m;
        const Mat k_z =
            solve_spd(lt.u.cov, zu.transpose(), layer_1based).transpose();
        out.z_prev_mean = z_prev.mean + k_z * u_innov_mean;
        out.z_prev_cov = z_prev.cov + k_z * u_innov_cov * k_z.transpose();
        repair_covariance_loose(out.z_prev_cov, "rts z update", layer_1based);
    }
    return out;
}

WeightState sequential_update(const WeightState& weights,
                              const PreprocessedBatch& batch,
                              const MeasurementModel& m, const HeadConfig& config,
                              bool deep_psd_check) {
    m.validate(config.out_dim, config.output == head::OutputKind::kSoftmax);
    const int tokens = batch.rows();
    if (tokens == 0 || batch.h.cols() != config.embed_dim ||
        m.targets.rows() != tokens) {
        throw std::invalid_argument("sequential_update: batch shape mismatch");
    }
    Vec z0(tokens * config.embed_dim);
    for (int t = 0; t < tokens; ++t) {
        z0.segment(t * config.embed_dim, config.embed_dim) =
            batch.h.row(t).transpose();
    }
    const LayerTrace trace = forward(
        weights, GaussianState::isotropic(std::move(z0), config.input_epsilon),
        config);

    const OutputPosterior top = inject_measurement(trace, m);
    WeightState updated = weights;
    Vec z_mean = top.mean;
    Mat z_cov = top.cov;
    for (int layer = config.layer_count() - 1; layer >= 0; --layer) {
        LayerUpdate up = rts_layer_update(trace, layer, weights, z_mean, z_cov,
                                          config, deep_psd_check);
        updated.layers[layer].mu = std::move(up.w_mean);
        updated.layers[layer].cov = std::move(up.w_cov);
        z_mean = std::move(up.z_prev_mean);
        z_cov = std::move(up.z_prev_cov);
    }
    return updated;
}

}  // namespace kt::smoother
