#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "kt/checkpoint.hpp"
#include "kt/head.hpp"
#include "kt/rng.hpp"
#include "oracles.hpp"

using kt::GaussianState;
using kt::Mat;
using kt::Vec;
namespace kh = kt::head;

namespace {

Vec softmax(const Vec& logits) {
    Vec e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

Vec reference_output(const Mat& w_out, const Vec& h) {
    Vec ha(h.size() + 1);
    ha.head(h.size()) = h;
    ha[h.size()] = 1.0;
    return softmax(w_out.transpose() * ha);
}

Mat random_mat(int r, int c, kt::Rng& rng, double s = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = s * rng.gaussian();
    return m;
}

}  // namespace

TEST_CASE("initialized head reproduces the original projection") {
    kt::Rng rng(71);
    auto config = kh::HeadConfig::standard(2, 3, 1e-12, 1e-12);
    for (int rep = 0; rep < 50; ++rep) {
        const Mat w_out = random_mat(3, 3, rng);
        auto ws = kh::init_head(config, w_out);
        Vec h(2);
        h << rng.gaussian(), rng.gaussian();
        Mat hm(1, 2);
        hm.row(0) = h.transpose();
        auto pred = kh::predict(ws, hm, config);
        const Vec expect = reference_output(w_out, h);
        CHECK((pred.p_mean.row(0).transpose() - expect).cwiseAbs().maxCoeff() <=
              1e-6);
        CHECK(pred.p_mean.row(0).sum() == doctest::Approx(1.0).epsilon(1e-10));
    }
}

TEST_CASE("initialization identity holds at the experiment scale") {
    kt::Rng rng(72);
    auto config = kh::HeadConfig::standard(16, 17, 1e-12, 1e-12);
    const Mat w_out = random_mat(17, 17, rng, 0.5);
    auto ws = kh::init_head(config, w_out);
    for (int rep = 0; rep < 10; ++rep) {
        Vec h = random_mat(16, 1, rng).col(0);
        CHECK((kh::predict_mean(ws, h, config) - reference_output(w_out, h))
                  .cwiseAbs()
                  .maxCoeff() <= 1e-6);
    }
}

TEST_CASE("initialization structure: zero bias rows, low-rank middle layers") {
    kt::Rng rng(73);
    kh::HeadConfig config;
    config.embed_dim = 3;
    config.out_dim = 4;
    config.widths = {7, 6, 4};
    config.epsilon = 1e-10;
    const Mat w_out = random_mat(4, 4, rng);
    auto ws = kh::init_head(config, w_out);

    // bias entries (last slot of each neuron block) are zero below the top layer
    for (int layer = 0; layer + 1 < config.layer_count(); ++layer) {
        const int m1 = config.in_width(layer) + 1;
        for (int a = 0; a < config.widths[layer]; ++a) {
            CHECK(ws.layers[layer].mu[a * m1 + m1 - 1] == 0.0);
        }
    }
    // middle-layer mean matrix is an outer product of rank-d factors
    const int m1 = config.widths[0] + 1;
    Mat mid(m1, config.widths[1]);
    for (int a = 0; a < config.widths[1]; ++a) {
        mid.col(a) = ws.layers[1].mu.segment(a * m1, m1);
    }
    Eigen::JacobiSVD<Mat> svd(mid);
    int rank = 0;
    for (int i = 0; i < svd.singularValues().size(); ++i) {
        if (svd.singularValues()[i] > 1e-9) ++rank;
    }
    CHECK(rank <= config.embed_dim);

    // configuration errors
    kh::HeadConfig bad = config;
    bad.widths = {5, 6, 4};  // 5 < 2*3
    CHECK_THROWS_AS(kh::init_head(bad, w_out), std::invalid_argument);
    CHECK_THROWS_AS(kh::init_head(config, random_mat(3, 4, rng)),
                    std::invalid_argument);
}

TEST_CASE("forward reduces to the deterministic network at zero variance") {
    kt::Rng rng(74);
    auto config = kh::HeadConfig::standard(2, 3, 1e-12, 1e-12);
    const Mat w_out = random_mat(3, 3, rng);
    auto ws = kh::init_head(config, w_out);
    for (auto& layer : ws.layers) layer.cov.setZero();

    Vec h(2);
    h << 0.4, -1.2;
    auto trace = kh::forward(ws, GaussianState::deterministic(h), config);
    // z1 = [max(h,0); max(-h,0)]
    Vec z1(4);
    z1 << 0.4, 0.0, 0.0, 1.2;
    CHECK((trace.layers[0].z.mean - z1).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((trace.layers[1].z.mean - reference_output(w_out, h)).cwiseAbs().maxCoeff() <=
          1e-9);
}

TEST_CASE("forward matches an end-to-end oracle that samples the weights") {
    kt::Rng rng(75);
    auto config = kh::HeadConfig::standard(2, 3, 1e-12, 0.0);
    const Mat w_out = random_mat(3, 3, rng, 0.7);
    auto ws = kh::init_head(config, w_out);
    for (auto& layer : ws.layers) {
        layer.cov = 0.01 * Mat::Identity(layer.mu.size(), layer.mu.size());
        layer.mu += 0.05 * random_mat(static_cast<int>(layer.mu.size()), 1, rng).col(0);
    }
    Vec h(2);
    h << 0.8, -0.3;
    auto trace = kh::forward(ws, GaussianState::deterministic(h), config);
    const GaussianState& out = trace.layers.back().z;

    // sample weights, propagate the deterministic network exactly
    oracle::MvnSampler w1(ws.layers[0].mu, ws.layers[0].cov);
    oracle::MvnSampler w2(ws.layers[1].mu, ws.layers[1].cov);
    oracle::MomentAccumulator acc(Vec::Zero(1), out.mean);
    kt::Rng srng(307);
    const long n = 1000000;
    for (long i = 0; i < n; ++i) {
        const Vec v1 = w1.draw(srng);
        const Vec v2 = w2.draw(srng);
        Vec z1(4);
        for (int a = 0; a < 4; ++a) {
            z1[a] = std::max(0.0, v1.segment(a * 3, 2).dot(h) + v1[a * 3 + 2]);
        }
        Vec logits(3);
        for (int c = 0; c < 3; ++c) {
            logits[c] = v2.segment(c * 5, 4).dot(z1) + v2[c * 5 + 4];
        }
        acc.add(Vec::Zero(1), softmax(logits));
    }
    const Vec mc_mean = acc.mean_y();
    const Vec mc_mean_se = acc.mean_y_se();
    const Mat mc_cov = acc.cov_yy();
    const Mat mc_cov_se = acc.cov_yy_se();

    // tolerance: sampling error plus the documented relu/softmax truncation
    const auto& u_l = trace.layers.back().u;
    const double mean_tol = oracle::softmax_mean_truncation_bound(u_l, 3) + 2e-3;
    const double cov_tol = oracle::softmax_cov_truncation_bound(u_l, 3) + 2e-3;
    for (int i = 0; i < 3; ++i) {
        CHECK(std::abs(out.mean[i] - mc_mean[i]) <= 4 * mc_mean_se[i] + mean_tol);
        for (int j = 0; j < 3; ++j) {
            CHECK(std::abs(out.cov(i, j) - mc_cov(i, j)) <=
                  4 * mc_cov_se(i, j) + cov_tol);
        }
    }
}

TEST_CASE("trace shapes scale with the token count") {
    kt::Rng rng(76);
    auto config = kh::HeadConfig::standard(3, 4, 1e-8, 1e-8);
    auto ws = kh::init_head(config, random_mat(4, 4, rng));
    for (int tokens : {1, 3, 7}) {
        Vec z0 = random_mat(3 * tokens, 1, rng).col(0);
        auto trace =
            kh::forward(ws, GaussianState::isotropic(z0, config.input_epsilon), config);
        REQUIRE(trace.layers.size() == 2);
        CHECK(trace.layers[0].u.dim() == tokens * 6);
        CHECK(trace.layers[0].z.dim() == tokens * 6);
        CHECK(trace.layers[1].z.dim() == tokens * 4);
        CHECK(trace.layers[0].z.mean.minCoeff() >= 0.0);
        for (int t = 0; t < tokens; ++t) {
            CHECK(trace.layers[1].z.mean.segment(4 * t, 4).sum() ==
                  doctest::Approx(1.0).epsilon(1e-10));
        }
        for (const auto& layer : trace.layers) {
            CHECK(layer.u.valid());
            CHECK(layer.z.valid());
        }
    }
    CHECK_THROWS_AS(
        kh::forward(ws, GaussianState::isotropic(Vec::Ones(4), 1e-8), config),
        std::invalid_argument);
}

TEST_CASE("forward is deterministic") {
    kt::Rng rng(77);
    auto config = kh::HeadConfig::standard(2, 3, 1e-6, 1e-6);
    auto ws = kh::init_head(config, random_mat(3, 3, rng));
    Vec z0 = random_mat(2, 1, rng).col(0);
    auto t1 = kh::forward(ws, GaussianState::isotropic(z0, 1e-6), config);
    auto t2 = kh::forward(ws, GaussianState::isotropic(z0, 1e-6), config);
    CHECK((t1.layers[1].z.mean - t2.layers[1].z.mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK((t1.layers[1].z.cov - t2.layers[1].z.cov).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("predict_mean agrees with the full forward pass") {
    kt::Rng rng(78);
    auto config = kh::HeadConfig::standard(4, 5, 1e-4, 1e-4);
    auto ws = kh::init_head(config, random_mat(5, 5, rng));
    for (auto& layer : ws.layers) {
        Mat r = random_mat(static_cast<int>(layer.mu.size()),
                           static_cast<int>(layer.mu.size()), rng, 0.1);
        layer.cov += r * r.transpose() / layer.mu.size();
        layer.mu += 0.3 * random_mat(static_cast<int>(layer.mu.size()), 1, rng).col(0);
    }
    for (int rep = 0; rep < 5; ++rep) {
        Vec h = random_mat(4, 1, rng).col(0);
        Mat hm(1, 4);
        hm.row(0) = h.transpose();
        auto pred = kh::predict(ws, hm, config);
        CHECK((kh::predict_mean(ws, h, config) - pred.p_mean.row(0).transpose())
                  .cwiseAbs()
                  .maxCoeff() <= 1e-12);
    }
}

TEST_CASE("weight checkpoints round-trip bit-exactly") {
    kt::Rng rng(79);
    auto config = kh::HeadConfig::standard(3, 4, 1e-7, 2e-7);
    auto ws = kh::init_head(config, random_mat(4, 4, rng));
    ws.layers[0].mu[2] = 0.1 + 1e-17;  // exercise full precision

    const std::string path = "/tmp/kt_head_ckpt_test.txt";
    kh::save_weights(ws, config, path);
    auto [loaded, lcfg] = kh::load_weights(path);
    REQUIRE(loaded.layer_count() == ws.layer_count());
    for (int i = 0; i < ws.layer_count(); ++i) {
        CHECK((loaded.layers[i].mu - ws.layers[i].mu).cwiseAbs().maxCoeff() == 0.0);
        CHECK((loaded.layers[i].cov - ws.layers[i].cov).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK(lcfg.widths == config.widths);
    CHECK(lcfg.epsilon == config.epsilon);

    // truncating the file yields a parse error naming the tensor
    std::string text;
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        char buf[4096];
        size_t got;
        while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, got);
        std::fclose(f);
    }
    const auto header = text.find("tensor cov_w_2");
    REQUIRE(header != std::string::npos);
    const auto cut = text.find('\n', text.find('\n', header) + 1);  // one data row kept
    REQUIRE(cut != std::string::npos);
    const std::string trunc_path = "/tmp/kt_head_ckpt_trunc.txt";
    {
        std::FILE* f = std::fopen(trunc_path.c_str(), "wb");
        std::fwrite(text.data(), 1, cut, f);
        std::fclose(f);
    }
    try {
        kh::load_weights(trunc_path);
        FAIL("expected checkpoint error");
    } catch (const kt::CheckpointError& e) {
        CHECK(std::string(e.what()).find("cov_w_2") != std::string::npos);
    }
    std::filesystem::remove(path);
    std::filesystem::remove(trunc_path);
}
