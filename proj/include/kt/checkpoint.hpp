#pragma once

#include <map>
#include <string>
#include <vector>

#include "kt/gaussian.hpp"

namespace kt {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Minimal named-tensor text container. Layout:
//   <magic> v<version>
//   scalar <name> <value>
//   tensor <name> <rows> <cols>
//   <cols values per row, 17 significant digits>
//   end
// Values round-trip bit-exactly through %.17g.
class TensorFile {
public:
    explicit TensorFile(std::string magic) : magic_(std::move(magic)) {}

    void put_scalar(const std::string& name, double v);
    void put_tensor(const std::string& name, const Mat& m);
    void put_tensor(const std::string& name, const Vec& v);

    double scalar(const std::string& name) const;
    const Mat& tensor(const std::string& name) const;
    Vec tensor_vec(const std::string& name) const;
    bool has_tensor(const std::string& name) const;

    void save(const std::string& path) const;
    static TensorFile load(const std::string& path, const std::string& magic,
                           int version);

    int version = 1;

private:
    std::string magic_;
    std::vector<std::pair<std::string, double>> scalars_;
    std::vector<std::pair<std::string, Mat>> tensors_;
    std::map<std::string, int> tensor_index_;
    std::map<std::string, double> scalar_index_;
};

}  // namespace kt
