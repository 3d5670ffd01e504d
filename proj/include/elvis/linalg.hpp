#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "elvis/error.hpp"

namespace elvis {

// Dense row-major matrix. Training math runs in double; the benchmark
// inference path instantiates float.
template <typename T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data length does not equal rows*cols");
        }
    }

    static BasicMatrix identity(std::size_t n) {
        BasicMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept {
        return data_[r * cols_ + c];
    }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<T> column(std::size_t c) const {
        std::vector<T> out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }
    void set_column(std::size_t c, std::span<const T> values) {
        if (values.size() != rows_) throw DimensionError("set_column: length mismatch");
        for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = values[r];
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    BasicMatrix transposed() const {
        BasicMatrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    template <typename U>
    BasicMatrix<U> cast() const {
        BasicMatrix<U> out(rows_, cols_);
        auto dst = out.data();
        for (std::size_t k = 0; k < data_.size(); ++k) dst[k] = static_cast<U>(data_[k]);
        return out;
    }

    friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;
using Vector = std::vector<double>;

// out = qᵀ·x for column-stacked descriptor matrices q (D×Mq) and x (D×Mx).
template <typename T>
BasicMatrix<T> matmul_transposed_left(const BasicMatrix<T>& q, const BasicMatrix<T>& x);

extern template Matrix matmul_transposed_left(const Matrix&, const Matrix&);
extern template MatrixF matmul_transposed_left(const MatrixF&, const MatrixF&);

// Exact GELU, x·Φ(x), with Φ from the error function.
double gelu(double x);
// d/dx gelu(x) = Φ(x) + x·φ(x).
double gelu_derivative(double x);

double sigmoid(double x);
float sigmoid(float x);

Vector layer_norm(std::span<const double> v, std::span<const double> gain,
                  std::span<const double> bias, double eps);

struct NormalizedVector {
    Vector values;
    double norm = 0.0;
    bool degenerate = false;
};

// Vectors whose norm is below this are treated as zero and left unchanged.
inline constexpr double kDegenerateNorm = 1e-12;

NormalizedVector l2_normalize(std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);

bool all_finite(std::span<const double> values);

}  // namespace elvis
