#pragma once

#include <span>
#include <vector>

#include "elvis/descriptors.hpp"
#include "elvis/linalg.hpp"

namespace elvis {

struct OtConfig {
    double lambda = 0.1;  // entropy weight
    int iterations = 10;  // column update + row update pairs
    bool log_domain = true;

    void validate() const;
};

// Two-layer MLP h: ℝ^D → ℝ predicting a dustbin gain per descriptor.
struct DustbinHead {
    Matrix w1;  // D × D
    Vector b1;  // D
    Vector w2;  // D
    double b2 = 0.0;

    std::size_t dim() const noexcept { return w1.cols(); }
    void validate(std::size_t descriptor_dim) const;
};

// h evaluated on every column of a D×M descriptor matrix. `pre_activations`,
// when given, receives the hidden × M first-layer outputs.
Vector dustbin_gains(const Matrix& descriptors, const DustbinHead& head,
                     Matrix* pre_activations = nullptr);
Vector dustbin_gains(const ProjectedDescriptorSet& desc, const DustbinHead& head);

// Ŝ = [[S, u], [vᵀ, ω]].
struct AugmentedSimilarity {
    Matrix s;  // Mq × Mx
    Vector u;  // Mq, query-side dustbin gains
    Vector v;  // Mx
    double omega = 1.0;

    std::size_t m_q() const noexcept { return s.rows(); }
    std::size_t m_x() const noexcept { return s.cols(); }
    Matrix assembled() const;
};

AugmentedSimilarity assemble_augmented(Matrix s, Vector u, Vector v, double omega);

// Dustbin marginals: a = [1_Mq, Mx], b = [1_Mx, Mq]. Both total Mq + Mx.
struct Marginals {
    Vector rows;
    Vector cols;
};
Marginals dustbin_marginals(std::size_t m_q, std::size_t m_x);
Marginals uniform_marginals(std::size_t m_q, std::size_t m_x);

struct TransportPlan {
    Matrix p;
    int iterations_run = 0;
    // Largest absolute deviation of any row or column sum from its target.
    double marginal_residual = 0.0;
};

// Dual potentials after every half-step of the log-domain solver, scaled
// by 1/λ: row_duals[t] for t = 0..T (row_duals[0] is the zero start) and
// col_duals[t] for t = 1..T (col_duals[0] unused).
struct SinkhornTrace {
    std::vector<Vector> row_duals;
    std::vector<Vector> col_duals;
};

// Entropic OT maximizing ⟨P, gain⟩ + λH(P) with row sums `a` and column
// sums `b`. Each iteration updates the column potentials and then the row
// potentials, so row sums of the returned plan are exact.
TransportPlan sinkhorn_plan(const Matrix& gain, std::span<const double> a, std::span<const double> b,
                            const OtConfig& cfg, SinkhornTrace* trace = nullptr);

// Vector-Jacobian product of sinkhorn_plan (log domain) with respect to the
// gain matrix, unrolled over every recorded iteration.
Matrix sinkhorn_plan_backward(const Matrix& gain, std::span<const double> a,
                              std::span<const double> b, const OtConfig& cfg,
                              const SinkhornTrace& trace, const Matrix& plan,
                              const Matrix& plan_grad);

TransportPlan sinkhorn(const AugmentedSimilarity& aug, const OtConfig& cfg);

// Top-left Mq×Mx block of an augmented plan.
Matrix refined_block(const TransportPlan& plan);

}  // namespace elvis
