#include "elvis/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "fast_math.hpp"

namespace elvis {

VoteSet select_votes(const Matrix& m) {
    if (m.empty()) throw DimensionError("select_votes: empty matrix");
    VoteSet votes;
    votes.row_votes.assign(m.rows(), -std::numeric_limits<double>::infinity());
    votes.row_argmax.assign(m.rows(), 0);
    votes.col_votes.assign(m.cols(), -std::numeric_limits<double>::infinity());
    votes.col_argmax.assign(m.cols(), 0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto row = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) {
            // Strict comparisons keep the first (lowest-index) maximum.
            if (row[j] > votes.row_votes[i]) {
                votes.row_votes[i] = row[j];
                votes.row_argmax[i] = j;
            }
            if (row[j] > votes.col_votes[j]) {
                votes.col_votes[j] = row[j];
                votes.col_argmax[j] = i;
            }
        }
    }
    return votes;
}

Vector apply_f(const VoteSet& votes, const VoteFunction& f) {
    f.validate("vote function");
    Vector out;
    out.reserve(votes.row_votes.size() + votes.col_votes.size());
    for (double v : votes.row_votes) out.push_back(f(v));
    for (double v : votes.col_votes) out.push_back(f(v));
    return out;
}

double transform_vote(double vote, const SimilarityModel& model) {
    if (model.arch.vote_function) return model.f(vote);
    return std::clamp(vote, 0.0, 1.0);
}

ProjectedDescriptorSet prepare_descriptors(const RawDescriptorSet& raw, const SimilarityModel& model,
                                           std::size_t m) {
    const RawDescriptorSet selected = select_top_m(raw, m);
    if (model.arch.projection) return project(selected, model.projection);
    return normalize_raw(selected);
}

Vector model_gains(const ProjectedDescriptorSet& desc, const SimilarityModel& model) {
    if (!model.arch.dustbin) return {};
    if (model.arch.descriptor_gain) return dustbin_gains(desc, model.dustbin);
    return Vector(desc.count(), model.scalar_gain);
}

namespace {

void check_pair(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x) {
    if (q.count() == 0 || x.count() == 0) throw DimensionError("pair similarity: empty descriptor set");
    if (q.dim() != x.dim()) {
        throw DimensionError("pair similarity: descriptor dims differ (" + std::to_string(q.dim()) +
                             " vs " + std::to_string(x.dim()) + ")");
    }
}

// Refined block S′ for a model; also returns the raw S when asked.
Matrix refine(const Matrix& s, std::span<const double> q_gains, std::span<const double> x_gains,
              const SimilarityModel& model, const OtConfig& cfg) {
    if (model.arch.dustbin) {
        AugmentedSimilarity aug = assemble_augmented(s, Vector(q_gains.begin(), q_gains.end()),
                                                     Vector(x_gains.begin(), x_gains.end()), model.omega);
        return refined_block(sinkhorn(aug, cfg));
    }
    if (s.rows() != s.cols()) {
        throw DimensionError("OT without dustbins needs equal descriptor counts, got " +
                             std::to_string(s.rows()) + " and " + std::to_string(s.cols()));
    }
    const Marginals marg = uniform_marginals(s.rows(), s.cols());
    return sinkhorn_plan(s, marg.rows, marg.cols, cfg).p;
}

}  // namespace

PairScore pair_similarity(const ProjectedDescriptorSet& q, std::span<const double> q_gains,
                          const ProjectedDescriptorSet& x, std::span<const double> x_gains,
                          const SimilarityModel& model, const OtConfig& cfg, bool breakdown) {
    check_pair(q, x);
    const Matrix s = matmul_transposed_left(q.descriptors, x.descriptors);
    const Matrix refined = refine(s, q_gains, x_gains, model, cfg);
    VoteSet votes = select_votes(refined);

    Vector strengths;
    strengths.reserve(votes.row_votes.size() + votes.col_votes.size());
    for (double v : votes.row_votes) strengths.push_back(transform_vote(v, model));
    for (double v : votes.col_votes) strengths.push_back(transform_vote(v, model));

    PairScore out;
    out.score = std::accumulate(strengths.begin(), strengths.end(), 0.0);
    if (breakdown) {
        out.votes = std::move(votes);
        out.per_vote_strengths = std::move(strengths);
    }
    return out;
}

PairScore pair_similarity(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x,
                          const SimilarityModel& model, const OtConfig& cfg, bool breakdown) {
    check_pair(q, x);
    const Vector u = model_gains(q, model);
    const Vector v = model_gains(x, model);
    return pair_similarity(q, u, x, v, model, cfg, breakdown);
}

double chamfer_similarity(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x) {
    check_pair(q, x);
    const VoteSet votes = select_votes(matmul_transposed_left(q.descriptors, x.descriptors));
    return std::accumulate(votes.row_votes.begin(), votes.row_votes.end(), 0.0) +
           std::accumulate(votes.col_votes.begin(), votes.col_votes.end(), 0.0);
}

double chamfer_ot_similarity(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x,
                             const OtConfig& cfg) {
    check_pair(q, x);
    AugmentedSimilarity aug = assemble_augmented(matmul_transposed_left(q.descriptors, x.descriptors),
                                                 Vector(q.count(), 1.0), Vector(x.count(), 1.0), 1.0);
    const VoteSet votes = select_votes(refined_block(sinkhorn(aug, cfg)));
    return std::accumulate(votes.row_votes.begin(), votes.row_votes.end(), 0.0) +
           std::accumulate(votes.col_votes.begin(), votes.col_votes.end(), 0.0);
}

PairInspection inspect_pair(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x,
                            const SimilarityModel& model, const OtConfig& cfg, std::size_t top) {
    check_pair(q, x);
    PairInspection out;
    out.query_gains = model_gains(q, model);
    out.db_gains = model_gains(x, model);
    const Matrix s = matmul_transposed_left(q.descriptors, x.descriptors);
    out.refined = refine(s, out.query_gains, out.db_gains, model, cfg);
    const VoteSet votes = select_votes(out.refined);

    std::vector<VoteRecord> records;
    records.reserve(q.count() + x.count());
    for (std::size_t i = 0; i < votes.row_votes.size(); ++i) {
        const std::size_t j = votes.row_argmax[i];
        records.push_back({true, i, j, s(i, j), out.refined(i, j), transform_vote(votes.row_votes[i], model)});
    }
    for (std::size_t j = 0; j < votes.col_votes.size(); ++j) {
        const std::size_t i = votes.col_argmax[j];
        records.push_back({false, i, j, s(i, j), out.refined(i, j), transform_vote(votes.col_votes[j], model)});
    }
    for (const auto& r : records) out.score += r.strength;
    std::stable_sort(records.begin(), records.end(),
                     [](const VoteRecord& a, const VoteRecord& b) { return a.strength > b.strength; });
    records.resize(std::min(top, records.size()));
    out.top_votes = std::move(records);
    return out;
}

// ---------------------------------------------------------------------------

PreparedImage prepare_image(const ProjectedDescriptorSet& desc, const SimilarityModel& model) {
    PreparedImage out;
    out.descriptors = desc.descriptors.cast<float>();
    const Vector gains = model_gains(desc, model);
    out.gains.assign(gains.begin(), gains.end());
    return out;
}

InferenceScorer::InferenceScorer(const SimilarityModel& model, const OtConfig& cfg)
    : arch_(model.arch), omega_(static_cast<float>(model.omega)), cfg_(cfg) {
    cfg_.validate();
    if (arch_.vote_function) {
        model.f.validate("vote function");
        f_w1_.assign(model.f.w1.begin(), model.f.w1.end());
        f_b1_.assign(model.f.b1.begin(), model.f.b1.end());
        f_w2_.assign(model.f.w2.begin(), model.f.w2.end());
        f_b2_ = static_cast<float>(model.f.b2);
    }
}

float InferenceScorer::vote_transform(float v) const {
    if (!arch_.vote_function) return std::clamp(v, 0.0f, 1.0f);
    constexpr float kInvSqrt2 = 0.70710678118654752f;
    float z = f_b2_;
    for (std::size_t k = 0; k < f_w1_.size(); ++k) {
        const float a = f_w1_[k] * v + f_b1_[k];
        z += f_w2_[k] * (0.5f * a * (1.0f + std::erf(a * kInvSqrt2)));
    }
    return sigmoid(z);
}

namespace {

// k[i*ld + j] = scale * Σ_d q(d, i) x(d, j). Both sides are packed into
// depth-major panels (4 columns of q, 16 of x) and multiplied in 4 × 16
// register blocks.
void scaled_cross(const MatrixF& q, const MatrixF& x, float scale, float* k, std::size_t ld,
                  std::vector<float>& q_panels, std::vector<float>& x_panels) {
    const std::size_t depth = q.rows(), mq = q.cols(), mx = x.cols();
    const float* qd = q.data().data();
    const float* xd = x.data().data();
    constexpr std::size_t kRows = 4, kCols = 16;
    const std::size_t i_end = mq - mq % kRows, j_end = mx - mx % kCols;
    q_panels.resize(i_end * depth);
    x_panels.resize(j_end * depth);
    for (std::size_t i0 = 0; i0 < i_end; i0 += kRows)
        for (std::size_t d = 0; d < depth; ++d)
            for (std::size_t r = 0; r < kRows; ++r) q_panels[i0 * depth + d * kRows + r] = qd[d * mq + i0 + r];
    for (std::size_t j0 = 0; j0 < j_end; j0 += kCols)
        for (std::size_t d = 0; d < depth; ++d)
            std::memcpy(&x_panels[j0 * depth + d * kCols], xd + d * mx + j0, kCols * sizeof(float));

    // Two 8-wide accumulators per row (GCC/Clang vector extension).
    using V8 = float __attribute__((vector_size(32)));
    for (std::size_t j0 = 0; j0 < j_end; j0 += kCols) {
        const float* xp = x_panels.data() + j0 * depth;
        for (std::size_t i0 = 0; i0 < i_end; i0 += kRows) {
            const float* qp = q_panels.data() + i0 * depth;
            V8 acc[kRows][2] = {};
            for (std::size_t d = 0; d < depth; ++d) {
                V8 x0, x1;
                std::memcpy(&x0, xp + d * kCols, sizeof(V8));
                std::memcpy(&x1, xp + d * kCols + 8, sizeof(V8));
                for (std::size_t r = 0; r < kRows; ++r) {
                    acc[r][0] += qp[d * kRows + r] * x0;
                    acc[r][1] += qp[d * kRows + r] * x1;
                }
            }
            for (std::size_t r = 0; r < kRows; ++r) {
                acc[r][0] *= scale;
                acc[r][1] *= scale;
                std::memcpy(k + (i0 + r) * ld + j0, &acc[r][0], sizeof(V8));
                std::memcpy(k + (i0 + r) * ld + j0 + 8, &acc[r][1], sizeof(V8));
            }
        }
    }
    // Ragged edges.
    auto plain = [&](std::size_t i, std::size_t j) {
        float acc = 0.0f;
        for (std::size_t d = 0; d < depth; ++d) acc += qd[d * mq + i] * xd[d * mx + j];
        k[i * ld + j] = acc * scale;
    };
    for (std::size_t i = 0; i < i_end; ++i)
        for (std::size_t j = j_end; j < mx; ++j) plain(i, j);
    for (std::size_t i = i_end; i < mq; ++i)
        for (std::size_t j = 0; j < mx; ++j) plain(i, j);
}

}  // namespace

float InferenceScorer::score(const PreparedImage& q, const PreparedImage& x) {
    const std::size_t depth = q.descriptors.rows();
    const std::size_t mq = q.descriptors.cols();
    const std::size_t mx = x.descriptors.cols();
    if (depth != x.descriptors.rows() || mq == 0 || mx == 0) {
        throw DimensionError("inference scorer: incompatible descriptor sets");
    }
    const bool dustbin = arch_.dustbin;
    if (dustbin && (q.gains.size() != mq || x.gains.size() != mx)) {
        throw DimensionError("inference scorer: dustbin gains missing");
    }
    if (!dustbin && mq != mx) throw DimensionError("OT without dustbins needs equal descriptor counts");

    const std::size_t n = dustbin ? mq + 1 : mq;
    const std::size_t m = dustbin ? mx + 1 : mx;
    const float inv_lambda = static_cast<float>(1.0 / cfg_.lambda);
    kernel_.assign(n * m, 0.0f);
    float* k = kernel_.data();
    scaled_cross(q.descriptors, x.descriptors, inv_lambda, k, m, q_panels_, x_panels_);
    if (dustbin) {
        for (std::size_t i = 0; i < mq; ++i) k[i * m + mx] = q.gains[i] * inv_lambda;
        for (std::size_t j = 0; j < mx; ++j) k[mq * m + j] = x.gains[j] * inv_lambda;
        k[mq * m + mx] = omega_ * inv_lambda;
    }

    log_a_.assign(n, 0.0f);
    log_b_.assign(m, 0.0f);
    if (dustbin) {
        log_a_[mq] = std::log(static_cast<float>(mx));
        log_b_[mx] = std::log(static_cast<float>(mq));
    }
    alpha_.assign(n, 0.0f);
    beta_.assign(m, 0.0f);
    colmax_.assign(m, -std::numeric_limits<float>::infinity());
    colsum_.resize(m);
    weight_.resize(std::max(n, m));
    float* alpha = alpha_.data();
    float* beta = beta_.data();
    float* shift = colmax_.data();
    float* colsum = colsum_.data();
    float* w = weight_.data();

    // E_ij = exp(k_ij - shift_j) with shift_j the column max, so every
    // iteration is two matrix-vector products against E. A sum too small to
    // trust is recomputed exactly in the log domain.
    for (std::size_t i = 0; i < n; ++i) {
        const float* krow = k + i * m;
#pragma omp simd
        for (std::size_t j = 0; j < m; ++j) shift[j] = std::max(shift[j], krow[j]);
    }
    expk_.resize(n * m);
    float* e = expk_.data();
    for (std::size_t i = 0; i < n; ++i) {
        const float* krow = k + i * m;
        float* erow = e + i * m;
#pragma omp simd
        for (std::size_t j = 0; j < m; ++j) erow[j] = detail::fast_expf(krow[j] - shift[j]);
    }
    constexpr float kTrusted = 1e-30f;

    for (int t = 0; t < cfg_.iterations; ++t) {
        const float top_a = *std::max_element(alpha, alpha + n);
        for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(alpha[i] - top_a);
        std::fill(colsum, colsum + m, 0.0f);
        for (std::size_t i = 0; i < n; ++i) {
            const float* erow = e + i * m;
            const float wi = w[i];
#pragma omp simd
            for (std::size_t j = 0; j < m; ++j) colsum[j] += erow[j] * wi;
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (colsum[j] > kTrusted) {
                beta[j] = log_b_[j] - (shift[j] + top_a + std::log(colsum[j]));
                continue;
            }
            float hi = -std::numeric_limits<float>::infinity();
            for (std::size_t i = 0; i < n; ++i) hi = std::max(hi, k[i * m + j] + alpha[i]);
            float s = 0.0f;
            for (std::size_t i = 0; i < n; ++i) s += std::exp(k[i * m + j] + alpha[i] - hi);
            beta[j] = log_b_[j] - (hi + std::log(s));
        }

        float top_g = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < m; ++j) top_g = std::max(top_g, shift[j] + beta[j]);
        for (std::size_t j = 0; j < m; ++j) w[j] = std::exp(shift[j] + beta[j] - top_g);
        for (std::size_t i = 0; i < n; ++i) {
            const float* erow = e + i * m;
            float s = 0.0f;
#pragma omp simd reduction(+ : s)
            for (std::size_t j = 0; j < m; ++j) s += erow[j] * w[j];
            if (s > kTrusted) {
                alpha[i] = log_a_[i] - (top_g + std::log(s));
                continue;
            }
            const float* krow = k + i * m;
            float hi = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < m; ++j) hi = std::max(hi, krow[j] + beta[j]);
            float exact = 0.0f;
            for (std::size_t j = 0; j < m; ++j) exact += std::exp(krow[j] + beta[j] - hi);
            alpha[i] = log_a_[i] - (hi + std::log(exact));
        }
    }

    // Votes straight from the log plan: max_j P_ij = exp(alpha_i + max_j(k_ij + beta_j)).
    float* colmax = colsum;
    std::fill(colmax, colmax + m, -std::numeric_limits<float>::infinity());
    float total = 0.0f;
    for (std::size_t i = 0; i < mq; ++i) {
        const float* krow = k + i * m;
        const float ai = alpha[i];
        float best = -std::numeric_limits<float>::infinity();
#pragma omp simd reduction(max : best)
        for (std::size_t j = 0; j < mx; ++j) best = std::max(best, krow[j] + beta[j]);
#pragma omp simd
        for (std::size_t j = 0; j < mx; ++j) colmax[j] = std::max(colmax[j], krow[j] + ai);
        total += vote_transform(std::exp(ai + best));
    }
    for (std::size_t j = 0; j < mx; ++j) total += vote_transform(std::exp(beta[j] + colmax[j]));
    return total;
}

}  // namespace elvis
