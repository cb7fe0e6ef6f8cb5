#include "kt/head.hpp"

#include <cmath>

#include "kt/checkpoint.hpp"

namespace kt::head {

using moments::LayerShape;

void HeadConfig::validate() const {
    if (widths.empty()) throw std::invalid_argument("head: no layers");
    if (embed_dim <= 0 || out_dim <= 0) throw std::invalid_argument("head: bad dims");
    for (int w : widths) {
        if (w <= 0) throw std::invalid_argument("head: nonpositive width");
    }
    if (widths.back() != out_dim) {
        throw std::invalid_argument("head: last width must equal out_dim");
    }
    if (!(epsilon > 0.0)) throw std::invalid_argument("head: epsilon must be > 0");
    if (input_epsilon < 0.0) {
        throw std::invalid_argument("head: input_epsilon must be >= 0");
    }
}

void HeadConfig::validate_for_init() const {
    validate();
    if (layer_count() < 2) {
        throw std::invalid_argument("head: initialization needs at least 2 layers");
    }
    for (int i = 0; i + 1 < layer_count(); ++i) {
        if (widths[i] < 2 * embed_dim) {
            throw std::invalid_argument(
                "head: hidden widths must be at least twice the embedding dim");
        }
    }
}

HeadConfig HeadConfig::standard(int d, int d_o, double eps, double input_eps) {
    HeadConfig c;
    c.embed_dim = d;
    c.out_dim = d_o;
    c.widths = {2 * d, d_o};
    c.epsilon = eps;
    c.input_epsilon = input_eps;
    return c;
}

namespace {

// Split matrix [I; zeros; -I] over the non-bias input rows of a layer whose
// previous width is `in_width`, embedding dimension d.
Mat split_rows(int in_width, int d) {
    Mat m = Mat::Zero(in_width + 1, d);
    m.topRows(d) = Mat::Identity(d, d);
    m.block(in_width - d, 0, d, d) = -Mat::Identity(d, d);
    return m;
}

Vec flatten_columns(const Mat& per_neuron) {
    Vec out(per_neuron.size());
    const int m1 = static_cast<int>(per_neuron.rows());
    for (Eigen::Index a = 0; a < per_neuron.cols(); ++a) {
        out.segment(a * m1, m1) = per_neuron.col(a);
    }
    return out;
}

}  // namespace

WeightState init_head(const HeadConfig& config, const Mat& w_out) {
    config.validate_for_init();
    const int d = config.embed_dim;
    if (w_out.rows() != d + 1 || w_out.cols() != config.out_dim) {
        throw std::invalid_argument("init_head: output projection shape mismatch");
    }
    const int num_layers = config.layer_count();
    WeightState ws;
    ws.layers.resize(num_layers);

    // First layer: positive and negative copy of the input, zero bias row.
    {
        const int n1 = config.widths[0];
        Mat per_neuron = Mat::Zero(d + 1, n1);
        per_neuron.block(0, 0, d, d) = Mat::Identity(d, d);
        per_neuron.block(0, n1 - d, d, d) = -Mat::Identity(d, d);
        ws.layers[0].mu = flatten_columns(per_neuron);
    }
    // Middle layers: recombine the two copies and split again.
    for (int i = 1; i + 1 < num_layers; ++i) {
        const int n_prev = config.widths[i - 1];
        const int n_i = config.widths[i];
        Mat split_cols(d, n_i);
        split_cols.setZero();
        split_cols.leftCols(d) = Mat::Identity(d, d);
        split_cols.rightCols(d) = -Mat::Identity(d, d);
        Mat per_neuron = split_rows(n_prev, d) * split_cols;
        ws.layers[i].mu = flatten_columns(per_neuron);
    }
    // Last layer: recombine, route the bias slot, apply the output projection.
    {
        const int n_prev = config.widths[num_layers - 2];
        Mat recombine = Mat::Zero(n_prev + 1, d + 1);
        recombine.block(0, 0, d, d) = Mat::Identity(d, d);
        recombine.block(n_prev - d, 0, d, d) = -Mat::Identity(d, d);
        recombine(n_prev, d) = 1.0;
        Mat per_neuron = recombine * w_out;
        ws.layers[num_layers - 1].mu = flatten_columns(per_neuron);
    }
    for (int i = 0; i < num_layers; ++i) {
        const int n = static_cast<int>(ws.layers[i].mu.size());
        ws.layers[i].cov = config.epsilon * Mat::Identity(n, n);
    }
    return ws;
}

LayerTrace forward(const WeightState& weights, const GaussianState& z0,
                   const HeadConfig& config) {
    config.validate();
    if (weights.layer_count() != config.layer_count()) {
        throw std::invalid_argument("forward: weight/config layer count mismatch");
    }
    if (z0.dim() % config.embed_dim != 0 || z0.dim() == 0) {
        throw std::invalid_argument("forward: input dimension not a multiple of d");
    }
    const int tokens = z0.dim() / config.embed_dim;
    const int num_layers = config.layer_count();

    LayerTrace trace;
    trace.tokens = tokens;
    trace.input = z0;
    trace.layers.resize(num_layers);

    const GaussianState* z_prev = &trace.input;
    for (int i = 0; i < num_layers; ++i) {
        auto& layer = trace.layers[i];
        const LayerShape shape = config.shape(i, tokens);
        GaussianState w{weights.layers[i].mu, weights.layers[i].cov};
        try {
            layer.u = moments::linear_forward_moments(w, *z_prev, shape);
            if (i + 1 < num_layers) {
                moments::relu_layer_moments(layer.u, layer.z, layer.uz_diag);
            } else if (config.output == OutputKind::kSoftmax) {
                auto sm = moments::softmax_moments(layer.u, config.out_dim);
                layer.z = GaussianState{std::move(sm.mean), std::move(sm.cov)};
                trace.up_cross = std::move(sm.up_cross);
            } else {
                layer.z = layer.u;
                trace.up_cross = layer.u.cov;
            }
        } catch (const NumericalBreakdown& e) {
            throw NumericalBreakdown(e.what(), i + 1);
        }
        z_prev = &layer.z;
    }
    return trace;
}

Prediction predict(const WeightState& weights, const Mat& h,
                   const HeadConfig& config) {
    if (h.cols() != config.embed_dim) {
        throw std::invalid_argument("predict: input width mismatch");
    }
    const int tokens = static_cast<int>(h.rows());
    Vec z0(tokens * config.embed_dim);
    for (int t = 0; t < tokens; ++t) {
        z0.segment(t * config.embed_dim, config.embed_dim) = h.row(t).transpose();
    }
    LayerTrace trace = forward(
        weights, GaussianState::isotropic(std::move(z0), config.input_epsilon),
        config);
    const GaussianState& out = trace.layers.back().z;
    Prediction pred;
    pred.p_mean.resize(tokens, config.out_dim);
    for (int t = 0; t < tokens; ++t) {
        pred.p_mean.row(t) = out.mean.segment(t * config.out_dim, config.out_dim);
    }
    pred.p_cov = out.cov;
    return pred;
}

Vec predict_mean(const WeightState& weights, const Vec& h,
                 const HeadConfig& config) {
    if (config.layer_count() != 2 || config.output != OutputKind::kSoftmax) {
        Mat hm(1, h.size());
        hm.row(0) = h.transpose();
        return predict(weights, hm, config).p_mean.row(0).transpose();
    }
    const int d = config.embed_dim;
    const int n1 = config.widths[0];
    const int m1 = d + 1;
    Vec za(m1);
    za.head(d) = h;
    za[d] = 1.0;

    // Means need only the per-neuron variances of the first layer.
    const auto& w1 = weights.layers[0];
    Vec z1(n1);
    for (int a = 0; a < n1; ++a) {
        const auto mu_a = w1.mu.segment(a * m1, m1);
        const auto cov_aa = w1.cov.block(a * m1, a * m1, m1, m1);
        const double mean_u = mu_a.dot(za);
        double var_u = za.dot(cov_aa * za);
        if (config.input_epsilon > 0.0) {
            var_u += config.input_epsilon *
                     (cov_aa.diagonal().head(d).sum() + mu_a.head(d).squaredNorm());
        }
        z1[a] = moments::relu_mean(mean_u, std::max(var_u, moments::kVarFloor));
    }

    const auto& w2 = weights.layers[1];
    const int m2 = n1 + 1;
    Vec logits(config.out_dim);
    Vec z1a(m2);
    z1a.head(n1) = z1;
    z1a[n1] = 1.0;
    for (int c = 0; c < config.out_dim; ++c) {
        logits[c] = w2.mu.segment(c * m2, m2).dot(z1a);
    }
    Vec e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

namespace {
constexpr const char* kMagic = "kalmantune-head";
}

void save_weights(const WeightState& weights, const HeadConfig& config,
                  const std::string& path) {
    TensorFile tf(kMagic);
    tf.put_scalar("layers", config.layer_count());
    tf.put_scalar("embed_dim", config.embed_dim);
    tf.put_scalar("out_dim", config.out_dim);
    tf.put_scalar("epsilon", config.epsilon);
    tf.put_scalar("input_epsilon", config.input_epsilon);
    tf.put_scalar("softmax_output",
                  config.output == OutputKind::kSoftmax ? 1.0 : 0.0);
    for (int i = 0; i < config.layer_count(); ++i) {
        tf.put_scalar("width_" + std::to_string(i + 1), config.widths[i]);
    }
    for (int i = 0; i < weights.layer_count(); ++i) {
        const std::string suffix = std::to_string(i + 1);
        tf.put_tensor("mu_w_" + suffix, weights.layers[i].mu);
        tf.put_tensor("cov_w_" + suffix, weights.layers[i].cov);
    }
    tf.save(path);
}

std::pair<WeightState, HeadConfig> load_weights(const std::string& path) {
    TensorFile tf = TensorFile::load(path, kMagic, 1);
    HeadConfig config;
    const int num_layers = static_cast<int>(tf.scalar("layers"));
    config.embed_dim = static_cast<int>(tf.scalar("embed_dim"));
    config.out_dim = static_cast<int>(tf.scalar("out_dim"));
    config.epsilon = tf.scalar("epsilon");
    config.input_epsilon = tf.scalar("input_epsilon");
    config.output = tf.scalar("softmax_output") != 0.0 ? OutputKind::kSoftmax
                                                       : OutputKind::kIdentity;
    config.widths.resize(num_layers);
    for (int i = 0; i < num_layers; ++i) {
        config.widths[i] =
            static_cast<int>(tf.scalar("width_" + std::to_string(i + 1)));
    }
    WeightState ws;
    ws.layers.resize(num_layers);
    for (int i = 0; i < num_layers; ++i) {
        const std::string suffix = std::to_string(i + 1);
        ws.layers[i].mu = tf.tensor_vec("mu_w_" + suffix);
        ws.layers[i].cov = tf.tensor("cov_w_" + suffix);
    }
    config.validate();
    return {std::move(ws), config};
}

}  // namespace kt::head
