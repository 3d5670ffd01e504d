#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "elvis/descriptors.hpp"
#include "elvis/model.hpp"
#include "elvis/transport.hpp"

namespace elvis {

struct RankedEntry {
    std::string candidate_id;
    double score = 0.0;

    friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

// Candidates in rank order. Position is authoritative: after a partial
// re-rank the untouched tail may carry scores larger than the head.
struct RankedList {
    std::string query_id;
    std::vector<RankedEntry> entries;

    // Throws FormatError on a duplicate candidate id.
    void validate() const;

    friend bool operator==(const RankedList&, const RankedList&) = default;
};

using GroundTruth = std::map<std::string, std::set<std::string>>;

// ---------------------------------------------------------------------------
// Re-ranking

using PairScorer = std::function<double(const std::string& query_id, const std::string& candidate_id)>;

// Re-scores the first min(k, size) entries and stable-sorts them by the new
// score (original rank breaks ties). The tail keeps its order and scores.
RankedList rerank(const RankedList& list, std::size_t k, const PairScorer& scorer);

// Re-ranks every list. Each worker builds its own scorer; output order
// follows input order.
std::vector<RankedList> rerank_all(std::span<const RankedList> lists, std::size_t k,
                                   const std::function<PairScorer()>& make_scorer, std::size_t threads = 1);

enum class RerankMethod { none, chamfer, chamfer_ot, elvis };

RerankMethod parse_rerank_method(const std::string& name);
std::string to_string(RerankMethod method);

// Descriptors of every image a re-rank touches, prepared once: top-M
// selection, the method's descriptor stage and, for ELViS, dustbin gains.
class PreparedCollection {
public:
    using Lookup = std::function<RawDescriptorSet(const std::string&)>;

    PreparedCollection(RerankMethod method, const SimilarityModel* model, std::size_t m);

    // Prepares each id not seen before. Throws NotFoundError via `lookup`.
    void add(std::span<const std::string> ids, const Lookup& lookup, std::size_t threads = 1);

    const ProjectedDescriptorSet& descriptors(const std::string& id) const;
    const Vector& gains(const std::string& id) const;
    std::size_t size() const noexcept { return items_.size(); }

private:
    struct Item {
        ProjectedDescriptorSet desc;
        Vector gains;
    };
    RerankMethod method_;
    const SimilarityModel* model_;
    std::size_t m_;
    std::map<std::string, Item> items_;
};

// Scorer for one method over a prepared collection. Returns an empty
// function for RerankMethod::none.
PairScorer make_pair_scorer(const PreparedCollection& prepared, RerankMethod method,
                            const SimilarityModel* model, const OtConfig& cfg);

// ---------------------------------------------------------------------------
// Metrics

// (1/R) Σ precision at each hit, R = all positives of the query.
double average_precision(const RankedList& list, const std::set<std::string>& positives);

// AP of the first k entries with denominator min(R, k).
double average_precision_at(const RankedList& list, const std::set<std::string>& positives, std::size_t k);

// Means over lists whose query has at least one positive. Throw UsageError
// when no list qualifies.
double mean_average_precision(std::span<const RankedList> lists, const GroundTruth& gt);
double map_at_k(std::span<const RankedList> lists, const GroundTruth& gt, std::size_t k);

struct MetricSpec {
    std::size_t k = 0;  // 0: plain mAP
    std::string name() const;
};
// "map" or "map@K" (case-insensitive).
MetricSpec parse_metric(const std::string& text);

struct MetricRow {
    std::string dataset;
    std::string method;
    std::string metric;
    double value = 0.0;
};
void write_metric_csv(std::span<const MetricRow> rows, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// JSON-lines files
//   rankings:     {"query": id, "ranking": [[candidate_id, score], ...]}
//   ground truth: {"query": id, "positives": [id, ...]}

std::vector<RankedList> read_rankings(const std::filesystem::path& path);
void write_rankings(std::span<const RankedList> lists, const std::filesystem::path& path);
GroundTruth read_ground_truth(const std::filesystem::path& path);
void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic retrieval sets

struct SyntheticSpec {
    std::size_t instance_count = 50;
    std::size_t images_per_instance = 20;
    std::size_t descriptor_dim = 32;        // D′
    std::size_t descriptors_per_image = 48;
    double shared_fraction = 0.5;           // of descriptors_per_image, drawn from the instance template
    std::size_t template_size = 0;          // instance bank size; 0: twice the shared count
    double noise_sigma = 0.1;               // per-coordinate noise on template draws
    // Background clutter added on top of descriptors_per_image: a burst of
    // noisy copies of one prototype, drawn per image from a small bank shared
    // by every instance, so unrelated images can match through it.
    std::size_t distractor_descriptor_count = 0;
    std::size_t clutter_prototypes = 4;
    double clutter_sigma = 0.03;
    double strength_bias = 0.3;             // added to template descriptors' strengths
    std::size_t queries_per_instance = 0;   // 0: every image is a query
    std::size_t shortlist = 100;            // length of the initial rankings
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticData {
    std::vector<RawDescriptorSet> images;
    std::vector<std::size_t> instance_of;  // parallel to images
    GroundTruth ground_truth;              // one entry per query
    std::vector<RankedList> initial;       // one list per query, itself excluded
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Inputs of build_pair_pool: the other images of each query's instance, and
// the candidate ids of each ranked list in rank order.
std::unordered_map<std::string, std::vector<std::string>> positives_by_query(const GroundTruth& gt);
std::unordered_map<std::string, std::vector<std::string>> candidates_by_query(std::span<const RankedList> lists);

// Ranks every image of `images` against every other image by cosine of the
// mean descriptor and keeps the first `shortlist`.
std::vector<RankedList> mean_descriptor_rankings(std::span<const RawDescriptorSet> images,
                                                 std::span<const std::size_t> query_indices,
                                                 std::size_t shortlist);

}  // namespace elvis
