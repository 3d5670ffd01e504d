#include "elvis/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace elvis {

void OtConfig::validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
        throw UsageError("OT lambda must be positive, got " + std::to_string(lambda));
    }
    if (iterations < 1) {
        throw UsageError("OT iterations must be at least 1, got " + std::to_string(iterations));
    }
}

void DustbinHead::validate(std::size_t descriptor_dim) const {
    const std::size_t d = w1.cols();
    if (d != descriptor_dim || w1.rows() != b1.size() || w2.size() != w1.rows()) {
        throw DimensionError("dustbin head expects " + std::to_string(d) +
                             "-dim descriptors with consistent hidden width; got descriptor dim " +
                             std::to_string(descriptor_dim));
    }
}

Vector dustbin_gains(const Matrix& descriptors, const DustbinHead& head, Matrix* pre_activations) {
    head.validate(descriptors.rows());
    const std::size_t hidden = head.w1.rows();
    const std::size_t count = descriptors.cols();
    Matrix pre(hidden, count);
    for (std::size_t o = 0; o < hidden; ++o) {
        auto out = pre.row(o);
        std::fill(out.begin(), out.end(), head.b1[o]);
        for (std::size_t d = 0; d < descriptors.rows(); ++d) {
            const double w = head.w1(o, d);
            const auto in = descriptors.row(d);
            for (std::size_t c = 0; c < count; ++c) out[c] += w * in[c];
        }
    }
    Vector gains(count, head.b2);
    for (std::size_t o = 0; o < hidden; ++o) {
        const auto row = pre.row(o);
        for (std::size_t c = 0; c < count; ++c) gains[c] += head.w2[o] * gelu(row[c]);
    }
    if (pre_activations) *pre_activations = std::move(pre);
    return gains;
}

Vector dustbin_gains(const ProjectedDescriptorSet& desc, const DustbinHead& head) {
    return dustbin_gains(desc.descriptors, head);
}

Matrix AugmentedSimilarity::assembled() const {
    const std::size_t mq = m_q();
    const std::size_t mx = m_x();
    Matrix out(mq + 1, mx + 1);
    for (std::size_t i = 0; i < mq; ++i) {
        for (std::size_t j = 0; j < mx; ++j) out(i, j) = s(i, j);
        out(i, mx) = u[i];
    }
    for (std::size_t j = 0; j < mx; ++j) out(mq, j) = v[j];
    out(mq, mx) = omega;
    return out;
}

AugmentedSimilarity assemble_augmented(Matrix s, Vector u, Vector v, double omega) {
    if (u.size() != s.rows() || v.size() != s.cols()) {
        throw DimensionError("assemble_augmented: gains of length " + std::to_string(u.size()) + "/" +
                             std::to_string(v.size()) + " for a " + std::to_string(s.rows()) + "x" +
                             std::to_string(s.cols()) + " block");
    }
    return AugmentedSimilarity{std::move(s), std::move(u), std::move(v), omega};
}

Marginals dustbin_marginals(std::size_t m_q, std::size_t m_x) {
    Marginals m;
    m.rows.assign(m_q + 1, 1.0);
    m.rows.back() = static_cast<double>(m_x);
    m.cols.assign(m_x + 1, 1.0);
    m.cols.back() = static_cast<double>(m_q);
    return m;
}

Marginals uniform_marginals(std::size_t m_q, std::size_t m_x) {
    return Marginals{Vector(m_q, 1.0), Vector(m_x, 1.0)};
}

namespace {

void check_problem(const Matrix& gain, std::span<const double> a, std::span<const double> b) {
    if (gain.rows() != a.size() || gain.cols() != b.size()) {
        throw DimensionError("sinkhorn: marginals do not match a " + std::to_string(gain.rows()) +
                             "x" + std::to_string(gain.cols()) + " problem");
    }
    if (gain.empty()) throw DimensionError("sinkhorn: empty problem");
    if (!all_finite(gain.data())) throw NumericError("sinkhorn: non-finite entry in similarity matrix");
    for (double m : a)
        if (!(m > 0.0)) throw DimensionError("sinkhorn: marginals must be positive");
    for (double m : b)
        if (!(m > 0.0)) throw DimensionError("sinkhorn: marginals must be positive");
}

double marginal_residual(const Matrix& p, std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    Vector col(p.cols(), 0.0);
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double r = 0.0;
        const auto row = p.row(i);
        for (std::size_t j = 0; j < p.cols(); ++j) {
            r += row[j];
            col[j] += row[j];
        }
        worst = std::max(worst, std::abs(r - a[i]));
    }
    for (std::size_t j = 0; j < p.cols(); ++j) worst = std::max(worst, std::abs(col[j] - b[j]));
    return worst;
}

// Log-domain updates driven by two kernels exponentiated once per solve:
// exp(k - column max) and exp(k - row max). Each log-sum-exp becomes a
// shift plus the log of a dot product with exp(dual - max dual); a sum too
// small to trust is recomputed exactly.
class KernelUpdates {
public:
    explicit KernelUpdates(const Matrix& k) : k_(k), col_kernel_(k.rows(), k.cols()), row_kernel_(k.rows(), k.cols()) {
        const std::size_t n = k.rows(), m = k.cols();
        col_shift_.assign(m, -std::numeric_limits<double>::infinity());
        row_shift_.assign(n, -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = k.row(i);
            for (std::size_t j = 0; j < m; ++j) {
                col_shift_[j] = std::max(col_shift_[j], row[j]);
                row_shift_[i] = std::max(row_shift_[i], row[j]);
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = k.row(i);
            auto ck = col_kernel_.row(i);
            for (std::size_t j = 0; j < m; ++j) ck[j] = std::exp(row[j] - col_shift_[j]);
        }
        // exp(k - row max) = exp(k - col max) · exp(col max) · exp(-row max),
        // as long as those factors stay finite and normal.
        const double lo = *std::min_element(row_shift_.begin(), row_shift_.end());
        const double hi = *std::max_element(col_shift_.begin(), col_shift_.end());
        const bool factored = hi - lo < kFactorRange;
        Vector col_factor(m), row_factor(n);
        if (factored) {
            for (std::size_t j = 0; j < m; ++j) col_factor[j] = std::exp(col_shift_[j] - hi);
            for (std::size_t i = 0; i < n; ++i) row_factor[i] = std::exp(hi - row_shift_[i]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = k.row(i);
            const auto ck = col_kernel_.row(i);
            auto rk = row_kernel_.row(i);
            if (factored) {
                for (std::size_t j = 0; j < m; ++j) rk[j] = ck[j] * col_factor[j] * row_factor[i];
            } else {
                for (std::size_t j = 0; j < m; ++j) rk[j] = std::exp(row[j] - row_shift_[i]);
            }
        }
        weights_.resize(std::max(n, m));
        sums_.resize(m);
    }

    void columns(const Vector& alpha, const Vector& log_b, Vector& beta) {
        const std::size_t n = k_.rows(), m = k_.cols();
        const double top = *std::max_element(alpha.begin(), alpha.end());
        for (std::size_t i = 0; i < n; ++i) weights_[i] = std::exp(alpha[i] - top);
        std::fill(sums_.begin(), sums_.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto ck = col_kernel_.row(i);
            const double w = weights_[i];
            for (std::size_t j = 0; j < m; ++j) sums_[j] += ck[j] * w;
        }
        for (std::size_t j = 0; j < m; ++j) {
            double lse;
            if (sums_[j] > kTrustedSum) {
                lse = col_shift_[j] + top + std::log(sums_[j]);
            } else {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, k_(i, j) + alpha[i]);
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += std::exp(k_(i, j) + alpha[i] - mx);
                lse = mx + std::log(acc);
            }
            beta[j] = log_b[j] - lse;
        }
    }

    void rows(const Vector& beta, const Vector& log_a, Vector& alpha) {
        const std::size_t n = k_.rows(), m = k_.cols();
        const double top = *std::max_element(beta.begin(), beta.end());
        for (std::size_t j = 0; j < m; ++j) weights_[j] = std::exp(beta[j] - top);
        for (std::size_t i = 0; i < n; ++i) {
            const auto rk = row_kernel_.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += rk[j] * weights_[j];
            double lse;
            if (acc > kTrustedSum) {
                lse = row_shift_[i] + top + std::log(acc);
            } else {
                const auto row = k_.row(i);
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j] + beta[j]);
                double exact = 0.0;
                for (std::size_t j = 0; j < m; ++j) exact += std::exp(row[j] + beta[j] - mx);
                lse = mx + std::log(exact);
            }
            alpha[i] = log_a[i] - lse;
        }
    }

    // exp(k_ij + alpha_i + beta_j), factored through the column kernel when
    // the factors are representable.
    void plan(const Vector& alpha, const Vector& beta, Matrix& p) const {
        const std::size_t n = k_.rows(), m = k_.cols();
        const double top = *std::max_element(alpha.begin(), alpha.end());
        Vector row_factor(n), col_factor(m);
        bool factored = true;
        for (std::size_t i = 0; i < n; ++i) row_factor[i] = std::exp(alpha[i] - top);
        for (std::size_t j = 0; j < m; ++j) {
            const double e = col_shift_[j] + beta[j] + top;
            factored = factored && e < 700.0;
            col_factor[j] = std::exp(e);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto ck = col_kernel_.row(i);
            const auto row = k_.row(i);
            auto prow = p.row(i);
            for (std::size_t j = 0; j < m; ++j) {
                const double direct = factored ? ck[j] * row_factor[i] * col_factor[j] : 0.0;
                // Products near the bottom of the range lose precision.
                prow[j] = direct > 1e-280 ? direct : std::exp(row[j] + alpha[i] + beta[j]);
            }
        }
    }

private:
    // Below this, underflowed terms could matter relative to the sum.
    static constexpr double kTrustedSum = 1e-250;
    // Largest spread of k handled by factoring the row kernel.
    static constexpr double kFactorRange = 600.0;

    const Matrix& k_;
    Matrix col_kernel_, row_kernel_;
    Vector col_shift_, row_shift_, weights_, sums_;
};

TransportPlan solve_log_domain(const Matrix& gain, std::span<const double> a,
                               std::span<const double> b, const OtConfig& cfg, SinkhornTrace* trace) {
    const std::size_t n = gain.rows();
    const std::size_t m = gain.cols();
    const double inv_lambda = 1.0 / cfg.lambda;
    Matrix k(n, m);
    for (std::size_t idx = 0; idx < gain.size(); ++idx) k.data()[idx] = gain.data()[idx] * inv_lambda;

    Vector log_a(n), log_b(m);
    for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a[i]);
    for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b[j]);

    Vector alpha(n, 0.0), beta(m, 0.0);
    if (trace) {
        trace->row_duals.assign(1, alpha);
        trace->col_duals.assign(1, Vector{});
    }
    KernelUpdates updates(k);
    for (int t = 0; t < cfg.iterations; ++t) {
        updates.columns(alpha, log_b, beta);
        updates.rows(beta, log_a, alpha);
        if (trace) {
            trace->col_duals.push_back(beta);
            trace->row_duals.push_back(alpha);
        }
    }

    TransportPlan plan;
    plan.p = Matrix(n, m);
    updates.plan(alpha, beta, plan.p);
    if (!all_finite(plan.p.data())) throw NumericError("sinkhorn: transport plan is not finite");
    plan.iterations_run = cfg.iterations;
    plan.marginal_residual = marginal_residual(plan.p, a, b);
    return plan;
}

// Plain scaling iterations on exp(gain/λ). Overflows for large gain/λ, so it
// refuses rather than returning garbage.
TransportPlan solve_scaling_domain(const Matrix& gain, std::span<const double> a,
                                   std::span<const double> b, const OtConfig& cfg) {
    const std::size_t n = gain.rows();
    const std::size_t m = gain.cols();
    Matrix kernel(n, m);
    for (std::size_t idx = 0; idx < gain.size(); ++idx) {
        kernel.data()[idx] = std::exp(gain.data()[idx] / cfg.lambda);
    }
    auto require_finite = [](double value) {
        if (!std::isfinite(value) || value <= 0.0) {
            throw NumericError("scaling-domain sinkhorn overflowed; use the log-domain solver");
        }
    };
    for (double e : kernel.data()) require_finite(e);

    Vector row_scale(n, 1.0), col_scale(m, 1.0);
    for (int t = 0; t < cfg.iterations; ++t) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += kernel(i, j) * row_scale[i];
            require_finite(s);
            col_scale[j] = b[j] / s;
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += kernel(i, j) * col_scale[j];
            require_finite(s);
            row_scale[i] = a[i] / s;
        }
    }
    TransportPlan plan;
    plan.p = Matrix(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) plan.p(i, j) = row_scale[i] * kernel(i, j) * col_scale[j];
    if (!all_finite(plan.p.data())) throw NumericError("sinkhorn: transport plan is not finite");
    plan.iterations_run = cfg.iterations;
    plan.marginal_residual = marginal_residual(plan.p, a, b);
    return plan;
}

}  // namespace

TransportPlan sinkhorn_plan(const Matrix& gain, std::span<const double> a, std::span<const double> b,
                            const OtConfig& cfg, SinkhornTrace* trace) {
    cfg.validate();
    check_problem(gain, a, b);
    if (!cfg.log_domain) {
        if (trace) throw UsageError("sinkhorn: gradient traces require the log-domain solver");
        return solve_scaling_domain(gain, a, b, cfg);
    }
    return solve_log_domain(gain, a, b, cfg, trace);
}

Matrix sinkhorn_plan_backward(const Matrix& gain, std::span<const double> a,
                              std::span<const double> b, const OtConfig& cfg,
                              const SinkhornTrace& trace, const Matrix& plan,
                              const Matrix& plan_grad) {
    const std::size_t n = gain.rows();
    const std::size_t m = gain.cols();
    const auto steps = static_cast<std::size_t>(cfg.iterations);
    if (trace.row_duals.size() != steps + 1 || trace.col_duals.size() != steps + 1) {
        throw DimensionError("sinkhorn backward: trace does not match iteration count");
    }
    if (plan_grad.rows() != n || plan_grad.cols() != m || plan.rows() != n || plan.cols() != m) {
        throw DimensionError("sinkhorn backward: gradient shape mismatch");
    }
    const double inv_lambda = 1.0 / cfg.lambda;
    Vector log_a(n), log_b(m);
    for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a[i]);
    for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b[j]);

    // Work on log P = k + alpha ⊕ beta with k = gain/λ.
    Matrix k_grad(n, m);
    Vector alpha_grad(n, 0.0), beta_grad(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double z = plan_grad(i, j) * plan(i, j);
            k_grad(i, j) = z;
            alpha_grad[i] += z;
            beta_grad[j] += z;
        }
    }

    for (std::size_t t = steps; t >= 1; --t) {
        const Vector& alpha = trace.row_duals[t];
        const Vector& alpha_prev = trace.row_duals[t - 1];
        const Vector& beta = trace.col_duals[t];

        // alpha^t_i = log a_i - LSE_j(k_ij + beta^t_j); the Jacobian is minus
        // the row-softmax.
        for (std::size_t i = 0; i < n; ++i) {
            const double ga = alpha_grad[i];
            if (ga == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) {
                const double r = std::exp(gain(i, j) * inv_lambda + beta[j] + alpha[i] - log_a[i]);
                k_grad(i, j) -= ga * r;
                beta_grad[j] -= ga * r;
            }
        }
        // beta^t_j = log b_j - LSE_i(k_ij + alpha^{t-1}_i).
        Vector alpha_prev_grad(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double gb = beta_grad[j];
                if (gb == 0.0) continue;
                const double c = std::exp(gain(i, j) * inv_lambda + alpha_prev[i] + beta[j] - log_b[j]);
                k_grad(i, j) -= gb * c;
                alpha_prev_grad[i] -= gb * c;
            }
        }
        alpha_grad = std::move(alpha_prev_grad);
        std::fill(beta_grad.begin(), beta_grad.end(), 0.0);
    }

    for (double& g : k_grad.data()) g *= inv_lambda;
    return k_grad;
}

TransportPlan sinkhorn(const AugmentedSimilarity& aug, const OtConfig& cfg) {
    if (aug.u.size() != aug.m_q() || aug.v.size() != aug.m_x()) {
        throw DimensionError("sinkhorn: dustbin gains do not match similarity block");
    }
    const Marginals marg = dustbin_marginals(aug.m_q(), aug.m_x());
    return sinkhorn_plan(aug.assembled(), marg.rows, marg.cols, cfg);
}

Matrix refined_block(const TransportPlan& plan) {
    if (plan.p.rows() < 2 || plan.p.cols() < 2) {
        throw DimensionError("refined_block: plan has no dustbin row/column");
    }
    Matrix out(plan.p.rows() - 1, plan.p.cols() - 1);
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = plan.p(i, j);
    return out;
}

}  // namespace elvis
