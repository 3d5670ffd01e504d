#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "elvis/descriptors.hpp"
#include "elvis/model.hpp"
#include "elvis/scoring.hpp"
#include "elvis/transport.hpp"

namespace elvis {

// ---------------------------------------------------------------------------
// Loss

struct LossConfig {
    bool warp = true;            // warped BCE through g; otherwise BCE on sigmoid(score / temperature)
    double temperature = 10.0;   // only without g
    double log_clamp = 1e-12;
};

struct WarpedBce {
    double loss = 0.0;
    double dloss_dscore = 0.0;
    WarpFunction grad;  // gradient w.r.t. every parameter of g
};

// −log g(p) for positives, −log(1 − g(p)) for negatives, with the argument
// of the log clamped from below.
WarpedBce warped_bce(double score, bool positive, const WarpFunction& g, double log_clamp = 1e-12);

struct TemperedBce {
    double loss = 0.0;
    double dloss_dscore = 0.0;
};
TemperedBce tempered_bce(double score, bool positive, double temperature, double log_clamp = 1e-12);

// ---------------------------------------------------------------------------
// Forward trace and reverse-mode gradients of one pair

// Intermediates of one image's descriptor stage and dustbin head.
struct ImageTrace {
    Matrix input;     // D′ × M raw descriptors (double)
    Matrix linear;    // D × M, before layer norm
    Matrix ln_out;    // D × M, after layer norm
    Vector norms;     // ℓ2 norm of every ln_out column
    std::vector<bool> degenerate;
    Matrix out;       // D × M unit columns entering S
    Matrix gain_pre;  // hidden × M dustbin head pre-activations
    Vector gains;     // M
};

struct PairTrace {
    ImageTrace q;
    ImageTrace x;
    Matrix s;            // Mq × Mx
    Matrix ot_gain;      // Ŝ (or S without dustbins)
    Marginals marginals;
    SinkhornTrace sinkhorn;
    TransportPlan plan;
    Matrix refined;
    VoteSet votes;
    Vector strengths;  // transformed votes, rows then columns
    double score = 0.0;
};

// Runs the full similarity pipeline on already top-M-selected descriptor
// sets and keeps everything the backward pass needs.
PairTrace forward_pair(const RawDescriptorSet& q, const RawDescriptorSet& x, const SimilarityModel& model,
                       const OtConfig& cfg);

// Accumulates d(loss)/d(parameters) into `grads` given d(loss)/d(score).
// Differentiates through every unrolled Sinkhorn iteration; max selections
// route their gradient to the single recorded argmax.
void backward_pair(const PairTrace& trace, double dloss_dscore, const SimilarityModel& model,
                   const OtConfig& cfg, ModelParams& grads);

struct PairLoss {
    double loss = 0.0;
    double score = 0.0;
};

PairLoss pair_loss(const RawDescriptorSet& q, const RawDescriptorSet& x, bool positive,
                   const ModelParams& params, const OtConfig& cfg, const LossConfig& loss_cfg);

// Loss plus gradients, accumulated into `grads` scaled by `weight`.
PairLoss pair_loss_and_grad(const RawDescriptorSet& q, const RawDescriptorSet& x, bool positive,
                            const ModelParams& params, const OtConfig& cfg, const LossConfig& loss_cfg,
                            ModelParams& grads, double weight = 1.0);

// ---------------------------------------------------------------------------
// Optimizer

struct OptimState {
    std::uint64_t step = 0;
    ModelParams first_moment;
    ModelParams second_moment;
    double lr_peak = 5e-4;
    std::uint64_t warmup_steps = 0;
    std::uint64_t total_steps = 1;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

OptimState make_optim_state(const ModelParams& params, double lr_peak, std::uint64_t warmup_steps,
                            std::uint64_t total_steps, double weight_decay);

// Linear warmup to lr_peak, then half-cosine decay to zero at total_steps.
double cosine_lr(std::uint64_t step, const OptimState& state);

// One decoupled-weight-decay Adam update at learning rate cosine_lr(step+1).
// Returns the learning rate used.
double adamw_step(ModelParams& params, const ModelParams& grads, OptimState& state);

// ---------------------------------------------------------------------------
// Sampling

struct TrainPair {
    std::string query_id;
    std::string candidate_id;
    bool positive = false;

    friend bool operator==(const TrainPair&, const TrainPair&) = default;
};

struct PairPool {
    std::vector<TrainPair> positives;
    std::vector<TrainPair> negatives;
};

struct Batch {
    std::vector<TrainPair> pairs;
    std::size_t descriptor_count = 0;  // M for every image in the batch
};

class PoolExhaustedError : public Error {
public:
    using Error::Error;
};

// Balanced batches: exactly half positives, half negatives. Each label's pool
// is walked in a shuffled order and reshuffled once used up.
class PairSampler {
public:
    PairSampler(PairPool pool, std::size_t m_min, std::size_t m_max, std::uint64_t seed);

    Batch sample_batch(std::size_t batch_size);

    const PairPool& pool() const noexcept { return pool_; }

private:
    void take(std::vector<TrainPair>& from, std::size_t& cursor, std::size_t count,
              std::vector<TrainPair>& out);

    PairPool pool_;
    std::size_t m_min_;
    std::size_t m_max_;
    std::mt19937_64 rng_;
    std::size_t pos_cursor_ = 0;
    std::size_t neg_cursor_ = 0;
};

// Anchor/positive/negative triplets, each realized as two pairs. Negatives
// are mined from the top of the anchor's global ranking.
struct TripletMining {
    std::size_t positives_per_anchor = 4;
    std::size_t hard_negative_depth = 20;
};

PairPool build_pair_pool(const std::unordered_map<std::string, std::vector<std::string>>& positives,
                         const std::unordered_map<std::string, std::vector<std::string>>& ranked_candidates,
                         const TripletMining& mining, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    ModelShape shape;
    OtConfig ot;
    LossConfig loss;
    std::size_t batch_pairs = 400;  // 200 triplets
    std::size_t epochs = 10;
    std::size_t steps_per_epoch = 0;  // 0: pool size / batch
    double lr_peak = 5e-4;
    double warmup_fraction = 0.1;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t m_min = 100;
    std::size_t m_max = 400;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::filesystem::path checkpoint_dir;  // empty: no per-epoch checkpoints
};

struct LossRecord {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    ModelParams params;
    std::vector<LossRecord> curve;
    std::vector<double> epoch_mean_loss;
};

using DescriptorLookup = std::function<const RawDescriptorSet&(const std::string&)>;

TrainResult train(const DescriptorLookup& lookup, const PairPool& pool, const TrainConfig& cfg);

// Same, continuing from given parameters.
TrainResult train(const DescriptorLookup& lookup, const PairPool& pool, const TrainConfig& cfg,
                  ModelParams initial);

}  // namespace elvis
