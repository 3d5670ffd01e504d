#pragma once

// Shared fixtures and reference implementations for the test binaries. The
// references are deliberately naive: plain loops, no log-domain tricks.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "elvis/descriptors.hpp"
#include "elvis/learning.hpp"
#include "elvis/linalg.hpp"
#include "elvis/model.hpp"

namespace testing {

using elvis::Matrix;
using elvis::Vector;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = u(rng);
    return m;
}

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Vector v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline elvis::RawDescriptorSet random_raw(const std::string& id, std::size_t dim, std::size_t count,
                                          std::mt19937_64& rng) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    elvis::RawDescriptorSet s;
    s.image_id = id;
    s.descriptors = elvis::MatrixF(dim, count);
    for (auto& v : s.descriptors.data()) v = n(rng);
    s.strengths.resize(count);
    for (auto& v : s.strengths) v = u(rng);
    return s;
}

// Unit-norm columns.
inline elvis::ProjectedDescriptorSet random_unit_set(const std::string& id, std::size_t dim, std::size_t count,
                                                     std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    elvis::ProjectedDescriptorSet s;
    s.image_id = id;
    s.descriptors = Matrix(dim, count);
    s.degenerate.assign(count, false);
    for (std::size_t c = 0; c < count; ++c) {
        Vector col(dim);
        for (auto& v : col) v = n(rng);
        s.descriptors.set_column(c, elvis::l2_normalize(col).values);
    }
    return s;
}

// Scaling-domain Sinkhorn on K = exp(gain/λ): column update then row update,
// repeated until the column residual after a row update is below `tol`.
inline Matrix naive_sinkhorn(const Matrix& gain, const Vector& a, const Vector& b, double lambda,
                             double tol = 1e-12, std::size_t max_iter = 2'000'000) {
    const std::size_t n = gain.rows(), m = gain.cols();
    Matrix k(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) k(i, j) = std::exp(gain(i, j) / lambda);
    Vector u(n, 1.0), v(m, 1.0);
    for (std::size_t it = 0; it < max_iter; ++it) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += k(i, j) * u[i];
            v[j] = b[j] / s;
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += k(i, j) * v[j];
            u[i] = a[i] / s;
        }
        double residual = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += u[i] * k(i, j) * v[j];
            residual = std::max(residual, std::abs(s - b[j]));
        }
        if (residual < tol) break;
    }
    Matrix p(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) p(i, j) = u[i] * k(i, j) * v[j];
    return p;
}

inline Matrix naive_matmul_tl(const Matrix& q, const Matrix& x) {
    Matrix out(q.cols(), x.cols());
    for (std::size_t i = 0; i < q.cols(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double s = 0.0;
            for (std::size_t d = 0; d < q.rows(); ++d) s += q(d, i) * x(d, j);
            out(i, j) = s;
        }
    return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
    return worst;
}

// Flattened view of every learnable tensor.
inline std::vector<double*> parameter_slots(elvis::ModelParams& p) {
    std::vector<double*> out;
    elvis::for_each_tensor(p, [&](const std::string&, const std::vector<std::size_t>&, std::span<double> v) {
        for (double& x : v) out.push_back(&x);
    });
    return out;
}

inline std::vector<std::string> parameter_names(elvis::ModelParams& p) {
    std::vector<std::string> out;
    elvis::for_each_tensor(p, [&](const std::string& name, const std::vector<std::size_t>&, std::span<double> v) {
        for (std::size_t k = 0; k < v.size(); ++k) out.push_back(name + "[" + std::to_string(k) + "]");
    });
    return out;
}

struct GradCheck {
    double worst = 0.0;  // max over parameters of the error measure below
    std::string worst_name;
    std::size_t checked = 0;
    double max_abs_grad = 0.0;  // largest finite-difference gradient seen
    double max_abs_err = 0.0;
    double worst_rel_significant = 0.0;  // relative error over gradients above 1e-3
};

// Central differences of `loss` around `params`. `worst` is the largest
// relative error among parameters whose absolute error exceeds `abs_floor`.
inline GradCheck check_gradients(elvis::ModelParams params, const elvis::ModelParams& analytic,
                                 const std::function<double(const elvis::ModelParams&)>& loss, double h,
                                 double abs_floor) {
    GradCheck out;
    auto slots = parameter_slots(params);
    elvis::ModelParams analytic_copy = analytic;
    auto grads = parameter_slots(analytic_copy);
    auto names = parameter_names(params);
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const double saved = *slots[k];
        *slots[k] = saved + h;
        const double up = loss(params);
        *slots[k] = saved - h;
        const double down = loss(params);
        *slots[k] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(numeric - *grads[k]);
        const double rel = err / std::max(std::abs(numeric), std::abs(*grads[k]));
        const double measure = err <= abs_floor ? 0.0 : rel;
        out.max_abs_grad = std::max(out.max_abs_grad, std::abs(numeric));
        out.max_abs_err = std::max(out.max_abs_err, err);
        if (std::abs(numeric) > 1e-3) out.worst_rel_significant = std::max(out.worst_rel_significant, rel);
        if (measure > out.worst) {
            out.worst = measure;
            out.worst_name = names[k];
        }
        ++out.checked;
    }
    return out;
}

// One tiny random instance of the full model (D′ = 6, D = 4, M = 3, two OT
// iterations) with every parameter pushed off its init, checked against
// central differences of the pair loss.
inline GradCheck gradient_check_instance(std::uint64_t seed, elvis::Architecture arch = {}, bool warp = true,
                                         double h = 1e-5, double abs_floor = 1e-7) {
    std::mt19937_64 rng(seed);
    elvis::ModelShape shape;
    shape.raw_dim = 6;
    shape.dim = 4;
    shape.f_hidden = 5;
    shape.g_hidden = 6;
    shape.arch = arch;
    shape.warp = warp;
    shape.score_scale = 6.0;
    if (!arch.projection) shape.raw_dim = shape.dim;
    elvis::ModelParams params = elvis::init_model(shape, seed);
    std::normal_distribution<double> jitter(0.0, 0.3);
    elvis::for_each_tensor(params, [&](const std::string&, const std::vector<std::size_t>&, std::span<double> v) {
        for (double& x : v) x += jitter(rng);
    });
    const std::size_t raw_dim = shape.raw_dim;
    const auto q = random_raw("q", raw_dim, 3, rng);
    const auto x = random_raw("x", raw_dim, 3, rng);
    const bool positive = seed % 2 == 0;
    const elvis::OtConfig ot{0.1, 2, true};
    elvis::LossConfig loss_cfg;
    loss_cfg.warp = warp;
    loss_cfg.temperature = 2.0;

    elvis::ModelParams grads = elvis::zeros_like(params);
    elvis::pair_loss_and_grad(q, x, positive, params, ot, loss_cfg, grads);
    return check_gradients(
        params, grads,
        [&](const elvis::ModelParams& p) { return elvis::pair_loss(q, x, positive, p, ot, loss_cfg).loss; }, h,
        abs_floor);
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("elvis_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
