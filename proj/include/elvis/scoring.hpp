#pragma once

#include <optional>
#include <vector>

#include "elvis/descriptors.hpp"
#include "elvis/model.hpp"
#include "elvis/transport.hpp"

namespace elvis {

// Strongest entry of every row and every column.
struct VoteSet {
    Vector row_votes;
    Vector col_votes;
    std::vector<std::size_t> row_argmax;
    std::vector<std::size_t> col_argmax;
};

// Ties resolve to the lowest index.
VoteSet select_votes(const Matrix& m);

// f applied to every vote, row votes first then column votes.
Vector apply_f(const VoteSet& votes, const VoteFunction& f);

// The vote transform of a model: f, or clamp(x, 0, 1) when the model was
// built without a vote function.
double transform_vote(double vote, const SimilarityModel& model);

struct PairScore {
    double score = 0.0;
    std::optional<VoteSet> votes;
    std::optional<Vector> per_vote_strengths;  // row votes then column votes
};

// Top-M selection followed by the model's descriptor stage (projection, or
// plain ℓ2 normalization without one).
ProjectedDescriptorSet prepare_descriptors(const RawDescriptorSet& raw, const SimilarityModel& model,
                                           std::size_t m);

// Dustbin gains of one image under the model: h per descriptor, or the
// scalar gain repeated. Empty when the model has no dustbins.
Vector model_gains(const ProjectedDescriptorSet& desc, const SimilarityModel& model);

// s(q, x) = Σ f(row votes of S′) + Σ f(column votes of S′).
PairScore pair_similarity(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x,
                          const SimilarityModel& model, const OtConfig& cfg, bool breakdown = false);

// Same, with dustbin gains computed ahead of time (database side precompute).
PairScore pair_similarity(const ProjectedDescriptorSet& q, std::span<const double> q_gains,
                          const ProjectedDescriptorSet& x, std::span<const double> x_gains,
                          const SimilarityModel& model, const OtConfig& cfg, bool breakdown = false);

// Σ_i max_j S_ij + Σ_j max_i S_ij on the raw similarity matrix.
double chamfer_similarity(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x);

// Chamfer on the refined block of vanilla OT with every dustbin gain and ω
// fixed to 1.
double chamfer_ot_similarity(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x,
                             const OtConfig& cfg);

// One correspondence of the inspection report.
struct VoteRecord {
    bool from_query = true;   // row vote (query descriptor) or column vote
    std::size_t query_index = 0;
    std::size_t db_index = 0;
    double raw_similarity = 0.0;
    double refined_similarity = 0.0;
    double strength = 0.0;  // transformed vote
};

struct PairInspection {
    double score = 0.0;
    std::vector<VoteRecord> top_votes;  // strongest first
    Vector query_gains;
    Vector db_gains;
    Matrix refined;
};

PairInspection inspect_pair(const ProjectedDescriptorSet& q, const ProjectedDescriptorSet& x,
                            const SimilarityModel& model, const OtConfig& cfg, std::size_t top = 25);

// ---------------------------------------------------------------------------
// 32-bit inference path used for latency measurements.

// Database-side state that can be computed once and stored.
struct PreparedImage {
    MatrixF descriptors;       // D × M
    std::vector<float> gains;  // M (empty without dustbins)
};

PreparedImage prepare_image(const ProjectedDescriptorSet& desc, const SimilarityModel& model);

// Scores pairs of prepared images in single precision. Holds scratch
// buffers, so use one instance per thread.
class InferenceScorer {
public:
    InferenceScorer(const SimilarityModel& model, const OtConfig& cfg);

    float score(const PreparedImage& q, const PreparedImage& x);

private:
    float vote_transform(float v) const;

    Architecture arch_;
    float omega_;
    std::vector<float> f_w1_, f_b1_, f_w2_;
    float f_b2_ = 0.0f;
    OtConfig cfg_;

    std::vector<float> q_panels_, x_panels_, kernel_, expk_, weight_, alpha_, beta_, log_a_, log_b_, colmax_, colsum_;
};

}  // namespace elvis
