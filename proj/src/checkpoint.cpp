#include "kt/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kt {

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void TensorFile::put_scalar(const std::string& name, double v) {
    scalars_.emplace_back(name, v);
    scalar_index_[name] = v;
}

void TensorFile::put_tensor(const std::string& name, const Mat& m) {
    tensor_index_[name] = static_cast<int>(tensors_.size());
    tensors_.emplace_back(name, m);
}

void TensorFile::put_tensor(const std::string& name, const Vec& v) {
    put_tensor(name, Mat(v.transpose()));
}

double TensorFile::scalar(const std::string& name) const {
    auto it = scalar_index_.find(name);
    if (it == scalar_index_.end()) {
        throw CheckpointError("missing scalar " + name);
    }
    return it->second;
}

const Mat& TensorFile::tensor(const std::string& name) const {
    auto it = tensor_index_.find(name);
    if (it == tensor_index_.end()) {
        throw CheckpointError("missing tensor " + name);
    }
    return tensors_[it->second].second;
}

Vec TensorFile::tensor_vec(const std::string& name) const {
    const Mat& m = tensor(name);
    if (m.rows() != 1) {
        throw CheckpointError("tensor " + name + " is not a vector");
    }
    return m.row(0).transpose();
}

bool TensorFile::has_tensor(const std::string& name) const {
    return tensor_index_.count(name) > 0;
}

void TensorFile::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw CheckpointError("cannot open " + path + " for writing");
    out << magic_ << " v" << version << "\n";
    for (const auto& [name, v] : scalars_) {
        out << "scalar " << name << " " << fmt17(v) << "\n";
    }
    for (const auto& [name, m] : tensors_) {
        out << "tensor " << name << " " << m.rows() << " " << m.cols() << "\n";
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                if (c) out << " ";
                out << fmt17(m(r, c));
            }
            out << "\n";
        }
    }
    out << "end\n";
    if (!out) throw CheckpointError("write failed for " + path);
}

TensorFile TensorFile::load(const std::string& path, const std::string& magic,
                            int version) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw CheckpointError("empty file " + path);
    const std::string expect = magic + " v" + std::to_string(version);
    if (header != expect) {
        throw CheckpointError("version mismatch in " + path + ": got '" +
                              header + "', expected '" + expect + "'");
    }
    TensorFile tf(magic);
    tf.version = version;
    std::string line;
    bool closed = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "end") {
            closed = true;
            break;
        }
        if (kind == "scalar") {
            std::string name;
            double v;
            if (!(ls >> name >> v)) throw CheckpointError("malformed scalar line");
            tf.put_scalar(name, v);
        } else if (kind == "tensor") {
            std::string name;
            Eigen::Index rows, cols;
            if (!(ls >> name >> rows >> cols) || rows < 0 || cols < 0) {
                throw CheckpointError("malformed tensor header");
            }
            Mat m(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r) {
                std::string row_line;
                if (!std::getline(in, row_line)) {
                    throw CheckpointError("truncated tensor " + name);
                }
                const char* p = row_line.c_str();
                char* endp = nullptr;
                for (Eigen::Index c = 0; c < cols; ++c) {
                    const double v = std::strtod(p, &endp);
                    if (endp == p) {
                        throw CheckpointError("truncated tensor " + name);
                    }
                    m(r, c) = v;
                    p = endp;
                }
            }
            tf.put_tensor(name, m);
        } else {
            throw CheckpointError("unknown record '" + kind + "' in " + path);
        }
    }
    if (!closed) throw CheckpointError("truncated file " + path + ": missing end marker");
    return tf;
}

}  // namespace kt
