#pragma once

#include "kt/gaussian.hpp"

namespace kt {

// Prefix-expanded training pair: one representation row per autoregressive
// step and the matching one-hot target row.
struct PreprocessedBatch {
    Mat h;  // rows x d
    Mat y;  // rows x d_o, one-hot rows
    int rows() const { return static_cast<int>(h.rows()); }
};

}  // namespace kt
