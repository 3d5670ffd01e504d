#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "elvis/transport.hpp"
#include "support.hpp"

using namespace elvis;

namespace {

AugmentedSimilarity random_augmented(std::size_t mq, std::size_t mx, std::mt19937_64& rng) {
    return assemble_augmented(testing::random_matrix(mq, mx, rng), testing::random_vector(mq, rng),
                              testing::random_vector(mx, rng), 1.0);
}

Vector row_sums(const Matrix& p) {
    Vector out(p.rows(), 0.0);
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (double v : p.row(i)) out[i] += v;
    return out;
}

Vector col_sums(const Matrix& p) {
    Vector out(p.cols(), 0.0);
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t j = 0; j < p.cols(); ++j) out[j] += p(i, j);
    return out;
}

}  // namespace

TEST_CASE("OtConfig validation") {
    CHECK_NOTHROW(OtConfig{}.validate());
    CHECK_THROWS_AS((OtConfig{0.0, 10, true}.validate()), UsageError);
    CHECK_THROWS_AS((OtConfig{-1.0, 10, true}.validate()), UsageError);
    CHECK_THROWS_AS((OtConfig{0.1, 0, true}.validate()), UsageError);
}

TEST_CASE("dustbin_gains: zero weights give b2 everywhere") {
    DustbinHead h;
    h.w1 = Matrix(3, 3);
    h.b1.assign(3, 0.0);
    h.w2.assign(3, 0.0);
    h.b2 = 0.7;
    std::mt19937_64 rng(41);
    const auto desc = testing::random_unit_set("d", 3, 5, rng);
    CHECK(dustbin_gains(desc, h) == Vector(5, 0.7));
}

TEST_CASE("dustbin_gains: hand-evaluated two-dim head") {
    DustbinHead h;
    h.w1 = Matrix(2, 2, {1.0, -2.0, 0.5, 0.25});
    h.b1 = {0.1, -0.3};
    h.w2 = {2.0, -1.0};
    h.b2 = 0.05;
    Matrix x(2, 1, {0.6, 0.8});
    // hidden pre-activations: 0.6 - 1.6 + 0.1 = -0.9 and 0.3 + 0.2 - 0.3 = 0.2
    // gelu(-0.9) = -0.9·Φ(-0.9) = -0.9·0.18406012534675947
    // gelu(0.2)  =  0.2·Φ(0.2)  =  0.2·0.57925970943910299
    const double expected = 0.05 + 2.0 * (-0.9 * 0.18406012534675947) - 1.0 * (0.2 * 0.57925970943910299);
    Matrix pre;
    const Vector g = dustbin_gains(x, h, &pre);
    REQUIRE(g.size() == 1);
    CHECK(std::abs(g[0] - expected) < 1e-12);
    CHECK(pre(0, 0) == doctest::Approx(-0.9));
    CHECK(pre(1, 0) == doctest::Approx(0.2));
}

TEST_CASE("dustbin_gains: one gain per descriptor and dimension checks") {
    std::mt19937_64 rng(42);
    DustbinHead h;
    h.w1 = testing::random_matrix(8, 8, rng);
    h.b1 = testing::random_vector(8, rng);
    h.w2 = testing::random_vector(8, rng);
    for (std::size_t count : {1u, 7u, 40u}) {
        CHECK(dustbin_gains(testing::random_unit_set("d", 8, count, rng), h).size() == count);
    }
    CHECK_THROWS_AS(dustbin_gains(testing::random_unit_set("d", 6, 3, rng), h), DimensionError);
}

TEST_CASE("assemble_augmented layout") {
    const auto aug = assemble_augmented(Matrix(1, 1, {0.5}), {0.2}, {0.3}, 1.0);
    CHECK(aug.assembled() == Matrix(2, 2, {0.5, 0.2, 0.3, 1.0}));

    std::mt19937_64 rng(43);
    const auto big = assemble_augmented(testing::random_matrix(2, 3, rng), {1, 2}, {3, 4, 5}, -7.5);
    const Matrix m = big.assembled();
    CHECK(m.rows() == 3);
    CHECK(m.cols() == 4);
    CHECK(m(2, 3) == -7.5);
    CHECK(m(0, 3) == 1);
    CHECK(m(1, 3) == 2);
    CHECK(m(2, 0) == 3);
    CHECK(m(2, 2) == 5);
    CHECK(m(1, 2) == big.s(1, 2));
    CHECK_THROWS_AS(assemble_augmented(Matrix(2, 2), {1}, {1, 2}, 1.0), DimensionError);
}

TEST_CASE("sinkhorn: 1x1 zero block gives the all-half plan") {
    for (double lambda : {0.01, 0.1, 1.0, 7.0}) {
        const auto plan = sinkhorn(assemble_augmented(Matrix(1, 1), {0.0}, {0.0}, 0.0), {lambda, 10, true});
        for (double v : plan.p.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(refined_block(plan) == Matrix(1, 1, {plan.p(0, 0)}));
    }
}

TEST_CASE("sinkhorn: row sums exact after the last update") {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t mq = 1 + trial % 9, mx = 1 + (trial * 7) % 11;
        const auto aug = random_augmented(mq, mx, rng);
        const auto plan = sinkhorn(aug, {0.1, 1 + trial % 12, true});
        const auto marg = dustbin_marginals(mq, mx);
        const Vector r = row_sums(plan.p);
        for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(r[i] - marg.rows[i]) < 1e-9);
        const Vector c = col_sums(plan.p);
        for (std::size_t j = 0; j < c.size(); ++j) CHECK(std::abs(c[j] - marg.cols[j]) <= plan.marginal_residual + 1e-12);
        double total = 0.0;
        for (double v : plan.p.data()) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::abs(total - static_cast<double>(mq + mx)) < 1e-6);
    }
}

TEST_CASE("sinkhorn: log domain at 500 iterations matches the scaling-domain oracle") {
    // Similarity blocks of unit descriptors with gains in [0, 1], the shape
    // the model produces.
    std::mt19937_64 rng(45);
    for (int trial = 0; trial < 10; ++trial) {
        const auto q = testing::random_unit_set("q", 32, 5, rng);
        const auto x = testing::random_unit_set("x", 32, 5, rng);
        const auto aug = assemble_augmented(matmul_transposed_left(q.descriptors, x.descriptors),
                                            testing::random_vector(5, rng, 0, 1), testing::random_vector(5, rng, 0, 1), 1.0);
        const auto marg = dustbin_marginals(5, 5);
        const Matrix oracle = testing::naive_sinkhorn(aug.assembled(), marg.rows, marg.cols, 0.1);
        const auto plan = sinkhorn(aug, {0.1, 500, true});
        CHECK(testing::max_abs_diff(plan.p.data(), oracle.data()) < 1e-8);
    }
}

TEST_CASE("sinkhorn: slowly mixing uniform blocks reach the oracle given enough iterations") {
    // iid entries in [-1, 1] at λ = 0.1 can need far more than 500
    // iterations; the fixed point is still the oracle's.
    std::mt19937_64 rng(45);
    for (int trial = 0; trial < 10; ++trial) {
        const auto aug = random_augmented(5, 5, rng);
        const auto marg = dustbin_marginals(5, 5);
        const Matrix oracle = testing::naive_sinkhorn(aug.assembled(), marg.rows, marg.cols, 0.1);
        const auto plan = sinkhorn(aug, {0.1, 50000, true});
        CHECK(testing::max_abs_diff(plan.p.data(), oracle.data()) < 1e-8);
    }
}

TEST_CASE("sinkhorn: log and scaling domains agree when the scaling one does not overflow") {
    std::mt19937_64 rng(46);
    for (int trial = 0; trial < 10; ++trial) {
        const auto aug = random_augmented(4, 6, rng);
        for (int iters : {1, 3, 10}) {
            const auto a = sinkhorn(aug, {0.1, iters, true});
            const auto b = sinkhorn(aug, {0.1, iters, false});
            CHECK(testing::max_abs_diff(a.p.data(), b.p.data()) < 1e-8);
        }
    }
}

TEST_CASE("sinkhorn: scaling domain refuses to overflow") {
    const auto aug = assemble_augmented(Matrix(1, 1, {100.0}), {0.0}, {0.0}, 0.0);
    CHECK_THROWS_AS(sinkhorn(aug, {0.1, 10, false}), NumericError);
    CHECK_NOTHROW(sinkhorn(aug, {0.1, 10, true}));
}

TEST_CASE("sinkhorn: non-finite input is rejected") {
    const auto aug = assemble_augmented(Matrix(1, 1, {NAN}), {0.0}, {0.0}, 0.0);
    CHECK_THROWS_AS(sinkhorn(aug, OtConfig{}), NumericError);
}

TEST_CASE("sinkhorn: marginal residual does not grow with iterations") {
    std::mt19937_64 rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        const auto aug = random_augmented(3 + trial % 6, 2 + trial % 7, rng);
        double prev = INFINITY;
        for (int iters : {1, 3, 5, 10, 20}) {
            const double r = sinkhorn(aug, {0.1, iters, true}).marginal_residual;
            CHECK(r <= prev + 1e-12);
            prev = r;
        }
    }
}

TEST_CASE("sinkhorn: adding a constant to every entry leaves P unchanged") {
    std::mt19937_64 rng(48);
    for (int trial = 0; trial < 10; ++trial) {
        auto aug = random_augmented(4, 5, rng);
        const auto base = sinkhorn(aug, OtConfig{});
        for (double c : {-3.0, 0.7, 12.0}) {
            auto shifted = aug;
            for (double& v : shifted.s.data()) v += c;
            for (double& v : shifted.u) v += c;
            for (double& v : shifted.v) v += c;
            shifted.omega += c;
            CHECK(testing::max_abs_diff(sinkhorn(shifted, OtConfig{}).p.data(), base.p.data()) < 1e-9);
        }
    }
}

TEST_CASE("sinkhorn_plan: column shifts of any size leave P unchanged") {
    // The first half step absorbs column shifts exactly. Shifts of ±60 at
    // λ = 0.1 spread gain/λ over more than a thousand, which forces every
    // fallback path of the solver.
    std::mt19937_64 rng(49);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix gain = testing::random_matrix(6, 7, rng);
        const auto marg = dustbin_marginals(5, 6);
        const auto base = sinkhorn_plan(gain, marg.rows, marg.cols, OtConfig{});
        for (double scale : {1.0, 10.0, 60.0}) {
            const Vector c = testing::random_vector(7, rng, -scale, scale);
            Matrix shifted = gain;
            for (std::size_t i = 0; i < 6; ++i)
                for (std::size_t j = 0; j < 7; ++j) shifted(i, j) += c[j];
            const auto plan = sinkhorn_plan(shifted, marg.rows, marg.cols, OtConfig{});
            CHECK(all_finite(plan.p.data()));
            CHECK(testing::max_abs_diff(plan.p.data(), base.p.data()) < 1e-9);
        }
    }
}

TEST_CASE("sinkhorn_plan: row shifts of any size leave the converged P unchanged") {
    std::mt19937_64 rng(50);
    const OtConfig converged{0.1, 4000, true};
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix gain = testing::random_matrix(5, 6, rng, -0.2, 0.2);
        const auto marg = dustbin_marginals(4, 5);
        const auto base = sinkhorn_plan(gain, marg.rows, marg.cols, converged);
        for (double scale : {1.0, 60.0}) {
            const Vector r = testing::random_vector(5, rng, -scale, scale);
            Matrix shifted = gain;
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += r[i];
            const auto plan = sinkhorn_plan(shifted, marg.rows, marg.cols, converged);
            CHECK(all_finite(plan.p.data()));
            CHECK(testing::max_abs_diff(plan.p.data(), base.p.data()) < 1e-9);
        }
    }
}

TEST_CASE("refined block entries lie in [0, 1]") {
    std::mt19937_64 rng(49);
    for (int trial = 0; trial < 20; ++trial) {
        const auto plan = sinkhorn(random_augmented(6, 4, rng), OtConfig{});
        const Matrix r = refined_block(plan);
        CHECK(r.rows() == 6);
        CHECK(r.cols() == 4);
        for (double v : r.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("strongly diagonal block refines to near identity") {
    const std::size_t m = 4;
    Matrix s(m, m);
    for (std::size_t i = 0; i < m; ++i) s(i, i) = 10.0;
    const auto aug = assemble_augmented(s, Vector(m, -10.0), Vector(m, -10.0), 1.0);
    const Matrix r = refined_block(sinkhorn(aug, {0.1, 200, true}));
    const Matrix id = Matrix::identity(m);
    CHECK(testing::max_abs_diff(r.data(), id.data()) < 1e-3);
}

TEST_CASE("a large dustbin gain empties the descriptor's row") {
    std::mt19937_64 rng(50);
    const auto q = testing::random_unit_set("q", 8, 5, rng);
    const auto x = testing::random_unit_set("x", 8, 5, rng);
    Vector u(5, 0.0);
    u[2] = 20.0;
    const auto aug = assemble_augmented(matmul_transposed_left(q.descriptors, x.descriptors), u, Vector(5, 0.0), 1.0);
    const Matrix r = refined_block(sinkhorn(aug, OtConfig{}));
    for (double v : r.row(2)) CHECK(v < 1e-4);
}

TEST_CASE("unequal counts use marginals that both total Mq + Mx") {
    const auto m = dustbin_marginals(3, 7);
    CHECK(m.rows == Vector{1, 1, 1, 7});
    CHECK(m.cols == Vector{1, 1, 1, 1, 1, 1, 1, 3});
}

TEST_CASE("sinkhorn trace records every half step") {
    std::mt19937_64 rng(51);
    const auto aug = random_augmented(3, 4, rng);
    const auto marg = dustbin_marginals(3, 4);
    SinkhornTrace trace;
    const auto plan = sinkhorn_plan(aug.assembled(), marg.rows, marg.cols, {0.1, 6, true}, &trace);
    CHECK(trace.row_duals.size() == 7);
    CHECK(trace.col_duals.size() == 7);
    CHECK(plan.iterations_run == 6);
    for (double v : trace.row_duals[0]) CHECK(v == 0.0);
}

TEST_CASE("sinkhorn backward matches central differences of a linear functional") {
    std::mt19937_64 rng(52);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t n = 3 + trial % 3, m = 2 + trial % 4;
        const Matrix gain = testing::random_matrix(n, m, rng);
        const Vector a = testing::random_vector(n, rng, 0.5, 2.0);
        Vector b = testing::random_vector(m, rng, 0.5, 2.0);
        double sa = 0, sb = 0;
        for (double v : a) sa += v;
        for (double v : b) sb += v;
        for (double& v : b) v *= sa / sb;
        const Matrix weights = testing::random_matrix(n, m, rng);
        const OtConfig cfg{0.3, 1 + trial, true};

        auto objective = [&](const Matrix& g) {
            const auto p = sinkhorn_plan(g, a, b, cfg).p;
            double s = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) s += weights.data()[k] * p.data()[k];
            return s;
        };
        SinkhornTrace trace;
        const auto plan = sinkhorn_plan(gain, a, b, cfg, &trace);
        const Matrix grad = sinkhorn_plan_backward(gain, a, b, cfg, trace, plan.p, weights);
        for (std::size_t k = 0; k < gain.size(); ++k) {
            Matrix up = gain, down = gain;
            up.data()[k] += 1e-6;
            down.data()[k] -= 1e-6;
            const double fd = (objective(up) - objective(down)) / 2e-6;
            CHECK(std::abs(fd - grad.data()[k]) < 1e-7 + 1e-5 * std::abs(fd));
        }
    }
}
