#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "elvis/learning.hpp"
#include "elvis/transport.hpp"

namespace elvis {

// Plain-text `key = value` run configuration shared by every subcommand.
// Lines starting with '#' are comments. Unknown keys are rejected.
struct RunConfig {
    // Files
    std::string descriptors;   // ELVD
    std::string rankings;      // initial rankings, JSON lines
    std::string ground_truth;  // JSON lines
    std::string checkpoint;    // ELVC
    std::string output;        // output directory

    // Similarity
    double lambda = 0.1;
    int iterations = 10;
    std::size_t m = 400;  // descriptors per image at inference
    std::size_t dim = 128;
    std::size_t f_hidden = 16;
    std::size_t g_hidden = 64;
    bool dustbin = true;
    bool descriptor_gain = true;
    bool vote_function = true;
    bool projection = true;
    bool warp = true;
    double temperature = 10.0;  // loss without g
    double score_scale = 400.0;

    // Training
    std::size_t batch_pairs = 400;
    std::size_t epochs = 10;
    std::size_t steps_per_epoch = 0;
    double lr_peak = 5e-4;
    double warmup_fraction = 0.1;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t m_min = 100;
    std::size_t m_max = 400;
    std::size_t positives_per_anchor = 4;
    std::size_t hard_negative_depth = 20;

    // Re-ranking and runtime
    std::string method = "elvis";
    std::size_t rerank_k = 400;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    // Throws UsageError naming the key on an unknown key or bad value.
    void set(const std::string& key, const std::string& value);
    // Range checks (λ > 0, iterations ≥ 1, k ≥ 1, ...).
    void validate() const;
    // Every key, one per line, in a form `load_config` reads back.
    std::string to_text() const;

    Architecture architecture() const;
    OtConfig ot() const;
    ModelShape shape(std::size_t raw_dim) const;
    TrainConfig train_config(std::size_t raw_dim) const;
};

RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

// Writes to_text() as `<dir>/config.txt`.
void echo_config(const RunConfig& cfg, const std::filesystem::path& dir);

}  // namespace elvis
