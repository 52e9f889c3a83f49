#pragma once

#include <Eigen/Dense>
#include <string>

#include "apl/error.hpp"

namespace apl {

// Dense 2-D tensor of 64-bit floats, row-major. Scalars are 1x1, row vectors
// 1xN. Everything the model needs is rank <= 2.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

inline bool is_scalar(const Tensor& t) { return t.rows() == 1 && t.cols() == 1; }

inline Tensor scalar(double v) {
    Tensor t(1, 1);
    t(0, 0) = v;
    return t;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

inline void require_finite(const char* op, const Tensor& t) {
    if (!t.allFinite()) {
        throw NumericFault(std::string(op) + ": non-finite value in " + shape_str(t) + " output");
    }
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a.data()[i] != b.data()[i]) return false;
    }
    return true;
}

} // namespace apl
