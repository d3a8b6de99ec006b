#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "ltrec/errors.hpp"

namespace ltrec {

// Dense row-major f64 tensor, either a column vector (n x 1) or a small
// matrix (m x n). Model dims in this project stay tiny, so there is no
// broadcasting machinery: ops require exact shape agreement.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    static Tensor zeros(int r, int c = 1) { return Tensor(r, c); }

    static Tensor scalar(double x) {
        Tensor t(1, 1);
        t.v[0] = x;
        return t;
    }

    static Tensor vec(std::initializer_list<double> xs) {
        Tensor t(static_cast<int>(xs.size()), 1);
        int i = 0;
        for (double x : xs) t.v[i++] = x;
        return t;
    }

    static Tensor vec(const std::vector<double>& xs) {
        Tensor t(static_cast<int>(xs.size()), 1);
        t.v = xs;
        return t;
    }

    // Row-major matrix from nested initializer list.
    static Tensor mat(std::initializer_list<std::initializer_list<double>> rows_) {
        int r = static_cast<int>(rows_.size());
        int c = r > 0 ? static_cast<int>(rows_.begin()->size()) : 0;
        Tensor t(r, c);
        int i = 0;
        for (const auto& row : rows_) {
            if (static_cast<int>(row.size()) != c)
                throw ShapeError("Tensor::mat: ragged initializer");
            for (double x : row) t.v[i++] = x;
        }
        return t;
    }

    int size() const { return rows * cols; }

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    double& operator[](int i) { return v[i]; }
    double operator[](int i) const { return v[i]; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    bool is_scalar() const { return rows == 1 && cols == 1; }
    bool is_vector() const { return cols == 1; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double squared_norm() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return s;
    }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

}  // namespace ltrec
