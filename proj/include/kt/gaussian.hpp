#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace kt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown when a covariance degenerates past repair or a solve cannot be
// regularized. `layer` is the 1-based layer index when known, else 0.
class NumericalBreakdown : public std::runtime_error {
public:
    NumericalBreakdown(const std::string& what, int layer = 0)
        : std::runtime_error(what), layer_(layer) {}
    int layer() const { return layer_; }

private:
    int layer_;
};

// Mean/covariance pair for a jointly Gaussian random vector.
struct GaussianState {
    Vec mean;
    Mat cov;

    GaussianState() = default;
    GaussianState(Vec m, Mat c) : mean(std::move(m)), cov(std::move(c)) {}

    int dim() const { return static_cast<int>(mean.size()); }

    static GaussianState deterministic(Vec m) {
        const auto n = m.size();
        return GaussianState(std::move(m), Mat::Zero(n, n));
    }
    static GaussianState isotropic(Vec m, double var) {
        const auto n = m.size();
        return GaussianState(std::move(m), var * Mat::Identity(n, n));
    }

    // Invariants: cov square and matching mean, symmetric to 1e-10 * max|cov|,
    // smallest eigenvalue >= -1e-8 * trace / n.
    bool valid() const;
};

// Cross-covariance between two random vectors, rows index the first.
struct CrossCov {
    Mat m;
    int rows() const { return static_cast<int>(m.rows()); }
    int cols() const { return static_cast<int>(m.cols()); }
};

void symmetrize(Mat& a);

double min_eigenvalue(const Mat& a);

// Repair policy for covariance-producing operations: symmetrize, and when the
// smallest eigenvalue falls below -1e-8 * trace / n, clip negative eigenvalues
// to zero. Eigenvalues below the hard floor -1e-4 * trace raise
// NumericalBreakdown instead. Every clip is counted and reported through the
// repair log.
void repair_covariance(Mat& cov, const char* context, int layer = 0);

// Same projection with a wide hard floor (a quarter of the matrix scale).
// Used by the backward pass, where the diagonal cross-covariance
// approximation produces bounded indefiniteness by construction.
void repair_covariance_loose(Mat& cov, const char* context, int layer = 0);

long psd_repair_count();
void reset_psd_repair_count();

// Solve S X = B for symmetric positive semidefinite S. Adds diagonal jitter
// (1e-9 then 1e-6 of trace/n) when the condition number exceeds 1e12 or S is
// not positive definite; throws NumericalBreakdown if that fails too.
Mat solve_spd(const Mat& s, const Mat& b, int layer = 0);

}  // namespace kt
