#include "elvis/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace elvis {

template <typename T>
BasicMatrix<T> matmul_transposed_left(const BasicMatrix<T>& q, const BasicMatrix<T>& x) {
    if (q.rows() != x.rows()) {
        throw DimensionError("matmul_transposed_left: q has " + std::to_string(q.rows()) +
                             " rows but x has " + std::to_string(x.rows()));
    }
    const std::size_t depth = q.rows();
    const std::size_t mq = q.cols();
    const std::size_t mx = x.cols();
    BasicMatrix<T> out(mq, mx);

    // Blocking over output rows keeps the accumulating tile cache resident
    // while every row of x streams past it once per block.
    constexpr std::size_t kBlock = 16;
    for (std::size_t i0 = 0; i0 < mq; i0 += kBlock) {
        const std::size_t i1 = std::min(mq, i0 + kBlock);
        for (std::size_t d = 0; d < depth; ++d) {
            const T* xrow = x.row(d).data();
            const T* qrow = q.row(d).data();
            for (std::size_t i = i0; i < i1; ++i) {
                const T qi = qrow[i];
                T* orow = out.row(i).data();
                for (std::size_t j = 0; j < mx; ++j) orow[j] += qi * xrow[j];
            }
        }
    }
    return out;
}

template Matrix matmul_transposed_left(const Matrix&, const Matrix&);
template MatrixF matmul_transposed_left(const MatrixF&, const MatrixF&);

namespace {
// Φ through erfc keeps the far left tail instead of rounding 1 + erf to 0.
double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
}  // namespace

double gelu(double x) { return x * normal_cdf(x); }

double gelu_derivative(double x) {
    const double cdf = normal_cdf(x);
    const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

float sigmoid(float x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

Vector layer_norm(std::span<const double> v, std::span<const double> gain,
                  std::span<const double> bias, double eps) {
    if (gain.size() != v.size() || bias.size() != v.size()) {
        throw DimensionError("layer_norm: gain/bias length mismatch");
    }
    if (v.empty()) return {};
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= n;
    double var = 0.0;
    for (double a : v) var += (a - mean) * (a - mean);
    var /= n;
    const double denom = std::sqrt(var + eps);
    Vector out(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double centered = denom > 0.0 ? (v[k] - mean) / denom : 0.0;
        out[k] = centered * gain[k] + bias[k];
    }
    return out;
}

NormalizedVector l2_normalize(std::span<const double> v) {
    NormalizedVector out;
    out.values.assign(v.begin(), v.end());
    out.norm = std::sqrt(dot(v, v));
    if (!(out.norm > kDegenerateNorm)) {
        out.degenerate = true;
        return out;
    }
    for (double& a : out.values) a /= out.norm;
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double a) { return std::isfinite(a); });
}

}  // namespace elvis
