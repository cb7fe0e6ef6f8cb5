#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kt/gaussian.hpp"
#include "kt/moments.hpp"

namespace kt::head {

enum class OutputKind { kSoftmax, kIdentity };

// Shape and hyperparameters of the replacement head. widths[i] is the neuron
// count of layer i+1; the last width equals out_dim. The identity output mode
// (no softmax) exists for linear-Gaussian testing.
struct HeadConfig {
    std::vector<int> widths;
    int embed_dim = 16;
    int out_dim = 17;
    double epsilon = 1e-6;        // initial weight covariance scale
    double input_epsilon = 1e-6;  // covariance assigned to deterministic inputs
    OutputKind output = OutputKind::kSoftmax;

    int layer_count() const { return static_cast<int>(widths.size()); }
    int in_width(int layer) const {  // 0-based layer
        return layer == 0 ? embed_dim : widths[layer - 1];
    }
    moments::LayerShape shape(int layer, int tokens) const {
        return {tokens, in_width(layer), widths[layer]};
    }
    void validate() const;
    // Extra constraints required by the identity-preserving initialization.
    void validate_for_init() const;

    static HeadConfig standard(int d, int d_o, double eps, double input_eps);
};

// Per-layer weight distribution: mean vector over the layer's weight vector
// (per-neuron blocks, bias entry last) and one dense symmetric covariance.
struct WeightState {
    struct Layer {
        Vec mu;
        Mat cov;
    };
    std::vector<Layer> layers;
    int layer_count() const { return static_cast<int>(layers.size()); }
};

// Forward-pass moments retained for the backward pass. layers[i].z is the
// post-activation state (softmax output at the last layer); uz_diag holds the
// diagonal of Sigma_{u,z} at ReLU layers. up_cross is the full output-layer
// cross-covariance.
struct LayerTrace {
    struct Layer {
        GaussianState u;
        GaussianState z;
        Vec uz_diag;
    };
    GaussianState input;
    std::vector<Layer> layers;
    Mat up_cross;
    int tokens = 1;
};

// Identity-preserving initialization from the original output projection
// w_out ((d+1) x d_o, bias row last): the head reproduces
// softmax(f1(h)^T w_out) up to the epsilon jitter.
WeightState init_head(const HeadConfig& config, const Mat& w_out);

LayerTrace forward(const WeightState& weights, const GaussianState& z0,
                   const HeadConfig& config);

struct Prediction {
    Mat p_mean;  // y x d_o
    Mat p_cov;   // (y d_o) x (y d_o)
};

// Moments of the head output for a deterministic input batch H (y x d rows).
Prediction predict(const WeightState& weights, const Mat& h,
                   const HeadConfig& config);

// Output mean only, single token. Identical to forward()'s output mean but
// skips every off-diagonal covariance (two-layer heads only; falls back to the
// full forward pass otherwise).
Vec predict_mean(const WeightState& weights, const Vec& h,
                 const HeadConfig& config);

// Versioned structured-text checkpoint; round-trips bit-exactly.
void save_weights(const WeightState& weights, const HeadConfig& config,
                  const std::string& path);
std::pair<WeightState, HeadConfig> load_weights(const std::string& path);

}  // namespace kt::head
