#include "kt/gaussian.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>

namespace kt {

namespace {

std::atomic<long> g_repair_count{0};

bool repair_logging_enabled() {
    static const bool enabled = std::getenv("KT_LOG_PSD_REPAIR") != nullptr;
    return enabled;
}

void log_repair(const char* context, int layer, double min_eig, double trace) {
    g_repair_count.fetch_add(1, std::memory_order_relaxed);
    if (repair_logging_enabled()) {
        std::fprintf(stderr, "psd repair: %s layer=%d min_eig=%.3e trace=%.3e\n",
                     context, layer, min_eig, trace);
    }
}

}  // namespace

bool GaussianState::valid() const {
    if (cov.rows() != cov.cols() || cov.rows() != mean.size()) return false;
    if (cov.rows() == 0) return true;
    const double scale = cov.cwiseAbs().maxCoeff();
    const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * std::max(scale, 1e-300)) return false;
    const int n = static_cast<int>(cov.rows());
    if (n == 0) return true;
    const double deadband = 1e-14 * std::max(1.0, scale);
    const double floor = -1e-8 * std::abs(cov.trace()) / n - deadband;
    return min_eigenvalue(cov) >= floor;
}

void symmetrize(Mat& a) {
    a = ((a + a.transpose()) * 0.5).eval();
}

double min_eigenvalue(const Mat& a) {
    if (a.rows() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

namespace {

void repair_covariance_impl(Mat& cov, const char* context, int layer,
                            bool loose) {
    symmetrize(cov);
    const int n = static_cast<int>(cov.rows());
    if (n == 0) return;
    if (!cov.allFinite()) {
        throw NumericalBreakdown("non-finite covariance in " + std::string(context),
                                 layer);
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    const double lo = es.eigenvalues().minCoeff();
    const double tr = cov.trace();
    const double scale = cov.cwiseAbs().maxCoeff();
    const double deadband = 1e-14 * std::max(1.0, scale);
    const double soft = -1e-8 * std::abs(tr) / n - deadband;
    if (lo >= soft) return;
    // The loose floor accommodates the structural indefiniteness introduced by
    // the diagonal input/output cross-covariance at ReLU layers; the strict
    // floor only tolerates floating-point drift.
    const double hard = loose ? 10.0 * scale
                              : std::max(1e-4 * std::abs(tr), deadband);
    if (lo < -hard) {
        throw NumericalBreakdown("covariance eigenvalue below hard floor in " +
                                     std::string(context),
                                 layer);
    }
    log_repair(context, layer, lo, tr);
    Vec d = es.eigenvalues().cwiseMax(0.0);
    cov = es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
    symmetrize(cov);
}

}  // namespace

void repair_covariance(Mat& cov, const char* context, int layer) {
    repair_covariance_impl(cov, context, layer, false);
}

void repair_covariance_loose(Mat& cov, const char* context, int layer) {
    repair_covariance_impl(cov, context, layer, true);
}

long psd_repair_count() { return g_repair_count.load(std::memory_order_relaxed); }

void reset_psd_repair_count() { g_repair_count.store(0, std::memory_order_relaxed); }

Mat solve_spd(const Mat& s, const Mat& b, int layer) {
    const int n = static_cast<int>(s.rows());
    if (n == 0) return Mat(0, b.cols());
    Mat sym = (s + s.transpose()) * 0.5;
    Eigen::SelfAdjointEigenSolver<Mat> es(sym);
    const double hi = es.eigenvalues().maxCoeff();
    if (!(hi > 0.0)) {
        throw NumericalBreakdown("covariance has no positive mass to invert", layer);
    }
    const double base = std::max(sym.trace() / n, 0.0);
    for (double rel : {0.0, 1e-9, 1e-6}) {
        const double jitter = rel * std::max(base, 1e-300);
        const double lo = es.eigenvalues().minCoeff() + jitter;
        if (lo > 0.0 && (hi + jitter) / lo <= 1e12) {
            Vec inv = (es.eigenvalues().array() + jitter).inverse();
            return es.eigenvectors() * inv.asDiagonal() *
                   (es.eigenvectors().transpose() * b);
        }
    }
    throw NumericalBreakdown("singular covariance despite regularization", layer);
}

}  // namespace kt
