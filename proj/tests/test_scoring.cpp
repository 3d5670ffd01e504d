#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "elvis/scoring.hpp"
#include "support.hpp"

using namespace elvis;

namespace {

SimilarityModel random_model(std::size_t dim, std::uint64_t seed, Architecture arch = {}) {
    ModelShape shape;
    shape.raw_dim = dim;
    shape.dim = dim;
    shape.arch = arch;
    shape.arch.projection = false;
    shape.warp = false;
    return init_model(shape, seed).similarity;
}

// Monotone f and constant gains: a model that favors strong matches.
SimilarityModel favorable_model(std::size_t dim) {
    SimilarityModel m;
    m.arch.projection = false;
    m.dustbin.w1 = Matrix(dim, dim);
    m.dustbin.b1.assign(dim, 0.0);
    m.dustbin.w2.assign(dim, 0.0);
    m.dustbin.b2 = 0.5;
    m.f.w1 = {10.0};
    m.f.b1 = {0.0};
    m.f.w2 = {1.0};
    m.f.b2 = -1.0;
    return m;
}

VoteSet scan_votes(const Matrix& m) {
    VoteSet v;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < m.cols(); ++j)
            if (m(i, j) > m(i, best)) best = j;
        v.row_votes.push_back(m(i, best));
        v.row_argmax.push_back(best);
    }
    for (std::size_t j = 0; j < m.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < m.rows(); ++i)
            if (m(i, j) > m(best, j)) best = i;
        v.col_votes.push_back(m(best, j));
        v.col_argmax.push_back(best);
    }
    return v;
}

double sum(const Vector& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("select_votes: small example") {
    const auto v = select_votes(Matrix(2, 2, {0.1, 0.7, 0.4, 0.2}));
    CHECK(v.row_votes == Vector{0.7, 0.4});
    CHECK(v.col_votes == Vector{0.4, 0.7});
    CHECK(v.row_argmax == std::vector<std::size_t>{1, 0});
    CHECK(v.col_argmax == std::vector<std::size_t>{1, 0});
}

TEST_CASE("select_votes: identity gives unit votes on the diagonal") {
    const auto v = select_votes(Matrix::identity(4));
    CHECK(v.row_votes == Vector(4, 1.0));
    CHECK(v.col_votes == Vector(4, 1.0));
    CHECK(v.row_argmax == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(v.col_argmax == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("select_votes: ties go to the lowest index") {
    const auto v = select_votes(Matrix(2, 3, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5}));
    CHECK(v.row_argmax == std::vector<std::size_t>{0, 0});
    CHECK(v.col_argmax == std::vector<std::size_t>{0, 0, 0});
}

TEST_CASE("select_votes: random 20x30 matches an exhaustive scan") {
    std::mt19937_64 rng(51);
    for (int trial = 0; trial < 10; ++trial) {
        Matrix m = testing::random_matrix(20, 30, rng);
        for (auto& x : m.data()) x = std::round(x * 8.0) / 8.0;  // force ties
        const auto got = select_votes(m);
        const auto want = scan_votes(m);
        CHECK(got.row_votes == want.row_votes);
        CHECK(got.col_votes == want.col_votes);
        CHECK(got.row_argmax == want.row_argmax);
        CHECK(got.col_argmax == want.col_argmax);
    }
}

TEST_CASE("select_votes of the transpose swaps rows and columns") {
    std::mt19937_64 rng(52);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix m = testing::random_matrix(1 + trial % 7, 1 + trial % 5, rng);
        const auto a = select_votes(m);
        const auto b = select_votes(m.transposed());
        CHECK(a.row_votes == b.col_votes);
        CHECK(a.col_votes == b.row_votes);
        CHECK(a.row_argmax == b.col_argmax);
        CHECK(a.col_argmax == b.row_argmax);
    }
}

TEST_CASE("apply_f: zero weights give one half everywhere") {
    VoteFunction f;
    f.w1.assign(16, 0.0);
    f.b1.assign(16, 0.0);
    f.w2.assign(16, 0.0);
    const auto v = select_votes(Matrix(2, 3, {0.1, 0.9, 0.3, 0.2, 0.0, 1.0}));
    const Vector out = apply_f(v, f);
    CHECK(out.size() == 5);
    for (double x : out) CHECK(x == 0.5);
}

TEST_CASE("apply_f: one hidden unit evaluated by hand") {
    VoteFunction f;
    f.w1 = {2.0};
    f.b1 = {-0.1};
    f.w2 = {1.5};
    f.b2 = 0.2;
    // hidden pre-activation 2·0.3 - 0.1 = 0.5, Φ(0.5) = 0.69146246127401310
    const double hidden = 0.5 * 0.69146246127401310;
    const double expected = 1.0 / (1.0 + std::exp(-(0.2 + 1.5 * hidden)));
    VoteSet v;
    v.row_votes = {0.3};
    v.row_argmax = {0};
    const Vector out = apply_f(v, f);
    REQUIRE(out.size() == 1);
    CHECK(std::abs(out[0] - expected) < 1e-12);
}

TEST_CASE("apply_f output stays in (0, 1)") {
    std::mt19937_64 rng(53);
    const auto model = random_model(4, 53);
    const auto v = select_votes(testing::random_matrix(30, 30, rng, -5.0, 5.0));
    for (double x : apply_f(v, model.f)) {
        CHECK(x > 0.0);
        CHECK(x < 1.0);
    }
}

TEST_CASE("transform_vote without f clamps to [0, 1]") {
    SimilarityModel m;
    m.arch.vote_function = false;
    CHECK(transform_vote(-0.2, m) == 0.0);
    CHECK(transform_vote(0.4, m) == 0.4);
    CHECK(transform_vote(1.7, m) == 1.0);
}

TEST_CASE("chamfer: identity pair sums to 4") {
    ProjectedDescriptorSet a;
    a.descriptors = Matrix::identity(2);
    a.degenerate.assign(2, false);
    CHECK(chamfer_similarity(a, a) == 4.0);
}

TEST_CASE("chamfer: one identical unit vector gives 2") {
    ProjectedDescriptorSet a;
    a.descriptors = Matrix(2, 1, {0.6, 0.8});
    a.degenerate.assign(1, false);
    CHECK(chamfer_similarity(a, a) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("chamfer: random sets match the exhaustive double max") {
    std::mt19937_64 rng(54);
    for (int trial = 0; trial < 10; ++trial) {
        const auto q = testing::random_unit_set("q", 16, 5 + trial, rng);
        const auto x = testing::random_unit_set("x", 16, 9 + 2 * trial, rng);
        const auto v = scan_votes(testing::naive_matmul_tl(q.descriptors, x.descriptors));
        CHECK(chamfer_similarity(q, x) == doctest::Approx(sum(v.row_votes) + sum(v.col_votes)).epsilon(1e-12));
    }
}

TEST_CASE("chamfer_ot: single orthogonal pair equals twice the oracle plan entry") {
    ProjectedDescriptorSet q, x;
    q.descriptors = Matrix(2, 1, {1.0, 0.0});
    x.descriptors = Matrix(2, 1, {0.0, 1.0});
    q.degenerate = x.degenerate = {false};
    const Matrix gain(2, 2, {0.0, 1.0, 1.0, 1.0});
    const Matrix oracle = testing::naive_sinkhorn(gain, {1.0, 1.0}, {1.0, 1.0}, 0.1);
    // This block mixes slowly: about a thousand iterations to reach 1e-12.
    CHECK(std::abs(chamfer_ot_similarity(q, x, {0.1, 5000, true}) - 2.0 * oracle(0, 0)) < 1e-10);
}

TEST_CASE("chamfer_ot: identical sets beat unrelated sets") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        const auto q = testing::random_unit_set("q", 32, 20, rng);
        const auto other = testing::random_unit_set("x", 32, 20, rng);
        CHECK(chamfer_ot_similarity(q, q, OtConfig{}) > chamfer_ot_similarity(q, other, OtConfig{}));
    }
}

TEST_CASE("chamfer_ot: zero similarity block stays finite") {
    ProjectedDescriptorSet q;
    q.descriptors = Matrix(3, 4);
    q.degenerate.assign(4, true);
    const double s = chamfer_ot_similarity(q, q, OtConfig{});
    CHECK(std::isfinite(s));
    CHECK(s > 0.0);
}

TEST_CASE("pair_similarity: constant f gives M") {
    std::mt19937_64 rng(56);
    auto model = random_model(8, 56);
    std::fill(model.f.w1.begin(), model.f.w1.end(), 0.0);
    std::fill(model.f.b1.begin(), model.f.b1.end(), 0.0);
    std::fill(model.f.w2.begin(), model.f.w2.end(), 0.0);
    model.f.b2 = 0.0;
    for (std::size_t m : {1u, 5u, 17u}) {
        const auto q = testing::random_unit_set("q", 8, m, rng);
        const auto x = testing::random_unit_set("x", 8, m, rng);
        CHECK(pair_similarity(q, x, model, OtConfig{}).score == doctest::Approx(static_cast<double>(m)).epsilon(1e-14));
    }
}

TEST_CASE("pair_similarity: score equals the sum of its vote strengths") {
    std::mt19937_64 rng(57);
    const auto model = random_model(8, 57);
    for (int trial = 0; trial < 10; ++trial) {
        const auto q = testing::random_unit_set("q", 8, 3 + trial, rng);
        const auto x = testing::random_unit_set("x", 8, 12 - trial, rng);
        const auto s = pair_similarity(q, x, model, OtConfig{}, true);
        REQUIRE(s.per_vote_strengths);
        REQUIRE(s.votes);
        CHECK(s.per_vote_strengths->size() == q.count() + x.count());
        CHECK(std::abs(s.score - sum(*s.per_vote_strengths)) < 1e-9);
        CHECK_FALSE(pair_similarity(q, x, model, OtConfig{}).votes);
    }
}

TEST_CASE("pair_similarity: 0 < score < Mq + Mx") {
    std::mt19937_64 rng(58);
    for (int trial = 0; trial < 20; ++trial) {
        const auto model = random_model(6, 100 + trial);
        const auto q = testing::random_unit_set("q", 6, 1 + trial % 9, rng);
        const auto x = testing::random_unit_set("x", 6, 1 + (trial * 5) % 13, rng);
        const double s = pair_similarity(q, x, model, OtConfig{}).score;
        CHECK(s > 0.0);
        CHECK(s < static_cast<double>(q.count() + x.count()));
    }
}

TEST_CASE("pair_similarity: swapping query and database side keeps the score at convergence") {
    std::mt19937_64 rng(59);
    const OtConfig converged{0.1, 3000, true};
    for (int trial = 0; trial < 10; ++trial) {
        const auto model = random_model(32, 200 + trial);
        const auto q = testing::random_unit_set("q", 32, 6, rng);
        const auto x = testing::random_unit_set("x", 32, 6, rng);
        CHECK(std::abs(pair_similarity(q, x, model, converged).score - pair_similarity(x, q, model, converged).score) <
              1e-9);
    }
}

TEST_CASE("pair_similarity: self-match beats an unrelated set under a favorable model") {
    std::mt19937_64 rng(60);
    const auto model = favorable_model(32);
    for (int trial = 0; trial < 20; ++trial) {
        const auto q = testing::random_unit_set("q", 32, 15, rng);
        const auto other = testing::random_unit_set("x", 32, 15, rng);
        CHECK(pair_similarity(q, q, model, OtConfig{}).score > pair_similarity(q, other, model, OtConfig{}).score);
    }
}

TEST_CASE("pair_similarity: precomputed gains agree with the one-shot call") {
    std::mt19937_64 rng(61);
    const auto model = random_model(8, 61);
    const auto q = testing::random_unit_set("q", 8, 7, rng);
    const auto x = testing::random_unit_set("x", 8, 9, rng);
    const double a = pair_similarity(q, x, model, OtConfig{}).score;
    const double b = pair_similarity(q, model_gains(q, model), x, model_gains(x, model), model, OtConfig{}).score;
    CHECK(a == b);
}

TEST_CASE("pair_similarity: ablations") {
    std::mt19937_64 rng(62);
    const auto q = testing::random_unit_set("q", 8, 6, rng);
    const auto x = testing::random_unit_set("x", 8, 6, rng);
    const auto x_short = testing::random_unit_set("x", 8, 4, rng);

    Architecture no_bin;
    no_bin.dustbin = false;
    const auto plain = random_model(8, 62, no_bin);
    const double s = pair_similarity(q, x, plain, OtConfig{}).score;
    CHECK(s > 0.0);
    CHECK(s < 12.0);
    CHECK_THROWS_AS(pair_similarity(q, x_short, plain, OtConfig{}), DimensionError);

    Architecture scalar;
    scalar.descriptor_gain = false;
    auto sg = random_model(8, 63, scalar);
    CHECK(model_gains(q, sg) == Vector(6, 1.0));
    sg.scalar_gain = 0.3;
    CHECK(model_gains(q, sg) == Vector(6, 0.3));
    CHECK(std::isfinite(pair_similarity(q, x_short, sg, OtConfig{}).score));

    Architecture no_f;
    no_f.vote_function = false;
    const auto clamp_model = random_model(8, 64, no_f);
    const auto br = pair_similarity(q, x, clamp_model, OtConfig{}, true);
    for (double v : *br.per_vote_strengths) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("pair_similarity: ranking is unchanged by a monotone map of scores") {
    std::mt19937_64 rng(65);
    const auto model = random_model(16, 65);
    const auto q = testing::random_unit_set("q", 16, 10, rng);
    std::vector<double> s, warped;
    for (int k = 0; k < 15; ++k) {
        const auto x = testing::random_unit_set("x", 16, 10, rng);
        s.push_back(pair_similarity(q, x, model, OtConfig{}).score);
        warped.push_back(std::tanh(0.3 * s.back()) + 2.0 * s.back());
    }
    auto order = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
        return idx;
    };
    CHECK(order(s) == order(warped));
}

TEST_CASE("inspect_pair: record count, refined cross-check and gain lengths") {
    std::mt19937_64 rng(66);
    const auto model = random_model(8, 66);
    for (auto [mq, mx] : {std::pair<std::size_t, std::size_t>{4, 6}, {20, 30}}) {
        const auto q = testing::random_unit_set("q", 8, mq, rng);
        const auto x = testing::random_unit_set("x", 8, mx, rng);
        const auto rep = inspect_pair(q, x, model, OtConfig{}, 25);
        CHECK(rep.top_votes.size() == std::min<std::size_t>(25, mq + mx));
        CHECK(rep.query_gains.size() == mq);
        CHECK(rep.db_gains.size() == mx);
        CHECK(rep.score == doctest::Approx(pair_similarity(q, x, model, OtConfig{}).score).epsilon(1e-12));
        const Matrix s = testing::naive_matmul_tl(q.descriptors, x.descriptors);
        for (std::size_t k = 0; k < rep.top_votes.size(); ++k) {
            const auto& r = rep.top_votes[k];
            CHECK(r.refined_similarity == rep.refined(r.query_index, r.db_index));
            CHECK(std::abs(r.raw_similarity - s(r.query_index, r.db_index)) < 1e-12);
            if (k > 0) CHECK(r.strength <= rep.top_votes[k - 1].strength);
        }
    }
}

TEST_CASE("InferenceScorer tracks the double-precision path") {
    std::mt19937_64 rng(67);
    for (Architecture arch : {Architecture{}, Architecture{true, false, true, false}, Architecture{true, true, false, false},
                              Architecture{false, true, true, false}}) {
        const auto model = random_model(32, 67, arch);
        InferenceScorer scorer(model, OtConfig{});
        for (int trial = 0; trial < 5; ++trial) {
            // Ragged sizes exercise the edges of the blocked product.
            const std::size_t mq = 37 + trial, mx = arch.dustbin ? 53 - 3 * trial : mq;
            const auto q = testing::random_unit_set("q", 32, mq, rng);
            const auto x = testing::random_unit_set("x", 32, mx, rng);
            const double ref = pair_similarity(q, x, model, OtConfig{}).score;
            const float fast = scorer.score(prepare_image(q, model), prepare_image(x, model));
            CHECK(std::abs(fast - ref) < 1e-4 * std::max(1.0, std::abs(ref)));
        }
    }
}

TEST_CASE("InferenceScorer stays on the double path when gains dwarf similarities") {
    // Gains of ±40 at λ = 0.1 push kernel entries far below float range and
    // force the exact log-domain fallback.
    std::mt19937_64 rng(68);
    auto model = random_model(16, 68, Architecture{true, false, true, false});
    for (double gain : {-40.0, 40.0}) {
        model.scalar_gain = gain;
        InferenceScorer scorer(model, OtConfig{});
        const auto q = testing::random_unit_set("q", 16, 21, rng);
        const auto x = testing::random_unit_set("x", 16, 18, rng);
        const double ref = pair_similarity(q, x, model, OtConfig{}).score;
        const float fast = scorer.score(prepare_image(q, model), prepare_image(x, model));
        CHECK(std::isfinite(fast));
        CHECK(std::abs(fast - ref) < 1e-4 * std::max(1.0, std::abs(ref)));
    }
}

TEST_CASE("prepare_descriptors: top-M then the descriptor stage") {
    std::mt19937_64 rng(68);
    const auto raw = testing::random_raw("r", 8, 30, rng);
    const auto model = random_model(8, 68);
    const auto p = prepare_descriptors(raw, model, 10);
    CHECK(p.count() == 10);
    const auto ref = normalize_raw(select_top_m(raw, 10));
    CHECK(p.descriptors == ref.descriptors);
    CHECK(p.image_id == ref.image_id);
}
