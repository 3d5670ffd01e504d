#include "elvis/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "elvis/scoring.hpp"

namespace elvis {

using json = nlohmann::json;

void RankedList::validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.candidate_id).second) {
            throw FormatError("ranking of '" + query_id + "' lists '" + e.candidate_id + "' twice");
        }
    }
}

// ---------------------------------------------------------------------------
// Re-ranking

RankedList rerank(const RankedList& list, std::size_t k, const PairScorer& scorer) {
    if (k == 0) throw UsageError("re-rank depth k must be at least 1");
    RankedList out = list;
    if (!scorer) return out;
    const std::size_t head = std::min(k, out.entries.size());
    for (std::size_t i = 0; i < head; ++i) {
        out.entries[i].score = scorer(list.query_id, out.entries[i].candidate_id);
    }
    std::stable_sort(out.entries.begin(), out.entries.begin() + static_cast<std::ptrdiff_t>(head),
                     [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
    return out;
}

std::vector<RankedList> rerank_all(std::span<const RankedList> lists, std::size_t k,
                                   const std::function<PairScorer()>& make_scorer, std::size_t threads) {
    if (threads == 0) throw UsageError("threads must be at least 1");
    std::vector<RankedList> out(lists.size());
    threads = std::max<std::size_t>(1, std::min(threads, lists.size()));
    std::vector<std::exception_ptr> errors(threads);
    auto work = [&](std::size_t w) {
        try {
            const PairScorer scorer = make_scorer ? make_scorer() : PairScorer{};
            for (std::size_t i = w; i < lists.size(); i += threads) out[i] = rerank(lists[i], k, scorer);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

RerankMethod parse_rerank_method(const std::string& name) {
    if (name == "none") return RerankMethod::none;
    if (name == "chamfer") return RerankMethod::chamfer;
    if (name == "chamfer-ot") return RerankMethod::chamfer_ot;
    if (name == "elvis") return RerankMethod::elvis;
    throw UsageError("unknown method '" + name + "' (expected elvis, chamfer, chamfer-ot or none)");
}

std::string to_string(RerankMethod method) {
    switch (method) {
        case RerankMethod::none: return "none";
        case RerankMethod::chamfer: return "chamfer";
        case RerankMethod::chamfer_ot: return "chamfer-ot";
        case RerankMethod::elvis: return "elvis";
    }
    return "?";
}

PreparedCollection::PreparedCollection(RerankMethod method, const SimilarityModel* model, std::size_t m)
    : method_(method), model_(model), m_(m) {
    if (m_ == 0) throw UsageError("descriptor count M must be at least 1");
    if (method_ == RerankMethod::elvis && model_ == nullptr) {
        throw UsageError("method elvis needs a model checkpoint");
    }
}

void PreparedCollection::add(std::span<const std::string> ids, const Lookup& lookup, std::size_t threads) {
    std::vector<std::string> todo;
    std::unordered_set<std::string> queued;
    for (const auto& id : ids) {
        if (!items_.contains(id) && queued.insert(id).second) todo.push_back(id);
    }
    std::vector<Item> ready(todo.size());
    threads = std::max<std::size_t>(1, std::min(threads, todo.size()));
    std::vector<std::exception_ptr> errors(threads);
    auto work = [&](std::size_t w) {
        try {
            for (std::size_t i = w; i < todo.size(); i += threads) {
                const RawDescriptorSet raw = lookup(todo[i]);
                Item& item = ready[i];
                if (method_ == RerankMethod::elvis) {
                    item.desc = prepare_descriptors(raw, *model_, m_);
                    item.gains = model_gains(item.desc, *model_);
                } else {
                    item.desc = normalize_raw(select_top_m(raw, m_));
                }
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    for (std::size_t i = 0; i < todo.size(); ++i) items_.emplace(todo[i], std::move(ready[i]));
}

const ProjectedDescriptorSet& PreparedCollection::descriptors(const std::string& id) const {
    const auto it = items_.find(id);
    if (it == items_.end()) throw NotFoundError("no prepared descriptors for image '" + id + "'");
    return it->second.desc;
}

const Vector& PreparedCollection::gains(const std::string& id) const {
    const auto it = items_.find(id);
    if (it == items_.end()) throw NotFoundError("no prepared descriptors for image '" + id + "'");
    return it->second.gains;
}

PairScorer make_pair_scorer(const PreparedCollection& prepared, RerankMethod method,
                            const SimilarityModel* model, const OtConfig& cfg) {
    switch (method) {
        case RerankMethod::none:
            return {};
        case RerankMethod::chamfer:
            return [&prepared](const std::string& q, const std::string& x) {
                return chamfer_similarity(prepared.descriptors(q), prepared.descriptors(x));
            };
        case RerankMethod::chamfer_ot:
            return [&prepared, cfg](const std::string& q, const std::string& x) {
                return chamfer_ot_similarity(prepared.descriptors(q), prepared.descriptors(x), cfg);
            };
        case RerankMethod::elvis:
            if (model == nullptr) throw UsageError("method elvis needs a model checkpoint");
            return [&prepared, model, cfg](const std::string& q, const std::string& x) {
                return pair_similarity(prepared.descriptors(q), prepared.gains(q), prepared.descriptors(x),
                                       prepared.gains(x), *model, cfg)
                    .score;
            };
    }
    return {};
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

double truncated_ap(const RankedList& list, const std::set<std::string>& positives, std::size_t depth,
                    std::size_t denominator) {
    if (positives.empty()) throw UsageError("AP is undefined for a query without positives");
    double sum = 0.0;
    std::size_t hits = 0;
    const std::size_t n = std::min(depth, list.entries.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (positives.contains(list.entries[i].candidate_id)) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(denominator);
}

template <typename ApFn>
double mean_over_queries(std::span<const RankedList> lists, const GroundTruth& gt, ApFn ap) {
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& list : lists) {
        const auto it = gt.find(list.query_id);
        if (it == gt.end() || it->second.empty()) continue;
        sum += ap(list, it->second);
        ++counted;
    }
    if (counted == 0) throw UsageError("no ranked query has a positive in the ground truth");
    return sum / static_cast<double>(counted);
}

}  // namespace

double average_precision(const RankedList& list, const std::set<std::string>& positives) {
    return truncated_ap(list, positives, list.entries.size(), positives.size());
}

double average_precision_at(const RankedList& list, const std::set<std::string>& positives, std::size_t k) {
    if (k == 0) throw UsageError("mAP@K needs K >= 1");
    return truncated_ap(list, positives, k, std::min(positives.size(), k));
}

double mean_average_precision(std::span<const RankedList> lists, const GroundTruth& gt) {
    return mean_over_queries(lists, gt, [](const RankedList& l, const auto& p) { return average_precision(l, p); });
}

double map_at_k(std::span<const RankedList> lists, const GroundTruth& gt, std::size_t k) {
    if (k == 0) throw UsageError("mAP@K needs K >= 1");
    return mean_over_queries(lists, gt,
                             [k](const RankedList& l, const auto& p) { return average_precision_at(l, p, k); });
}

std::string MetricSpec::name() const { return k == 0 ? "map" : "map@" + std::to_string(k); }

MetricSpec parse_metric(const std::string& text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "map") return {};
    if (lower.rfind("map@", 0) == 0 && lower.size() > 4) {
        const std::string digits = lower.substr(4);
        if (std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) {
            const std::size_t k = std::stoul(digits);
            if (k >= 1) return {k};
        }
    }
    throw UsageError("unknown metric '" + text + "' (expected map or map@K with K >= 1)");
}

void write_metric_csv(std::span<const MetricRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "dataset,method,metric,value\n";
    out << std::setprecision(10);
    for (const auto& r : rows) out << r.dataset << ',' << r.method << ',' << r.metric << ',' << r.value << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        try {
            fn(json::parse(line));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::vector<RankedList> read_rankings(const std::filesystem::path& path) {
    std::vector<RankedList> lists;
    for_each_json_line(path, [&](const json& j) {
        RankedList list;
        list.query_id = j.at("query").get<std::string>();
        if (!j.at("ranking").is_array()) throw FormatError("\"ranking\" must be an array");
        for (const auto& e : j.at("ranking")) {
            if (!e.is_array() || e.size() != 2) throw FormatError("ranking entries must be [id, score] pairs");
            list.entries.push_back({e[0].get<std::string>(), e[1].get<double>()});
        }
        list.validate();
        lists.push_back(std::move(list));
    });
    return lists;
}

void write_rankings(std::span<const RankedList> lists, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(lists.size());
    for (const auto& list : lists) {
        json ranking = json::array();
        for (const auto& e : list.entries) ranking.push_back(json::array({e.candidate_id, e.score}));
        lines.push_back(json{{"query", list.query_id}, {"ranking", std::move(ranking)}}.dump());
    }
    write_lines(lines, path);
}

GroundTruth read_ground_truth(const std::filesystem::path& path) {
    GroundTruth gt;
    for_each_json_line(path, [&](const json& j) {
        if (!j.at("positives").is_array()) throw FormatError("\"positives\" must be an array");
        auto& positives = gt[j.at("query").get<std::string>()];
        for (const auto& id : j.at("positives")) positives.insert(id.get<std::string>());
    });
    return gt;
}

void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    for (const auto& [query, positives] : gt) {
        lines.push_back(json{{"query", query}, {"positives", positives}}.dump());
    }
    write_lines(lines, path);
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate() const {
    if (instance_count < 2) throw UsageError("synthetic set needs at least 2 instances");
    if (images_per_instance < 2) throw UsageError("synthetic set needs at least 2 images per instance");
    if (descriptor_dim == 0 || descriptors_per_image == 0) throw UsageError("synthetic dims must be positive");
    if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) throw UsageError("shared_fraction must lie in [0, 1]");
    if (!(noise_sigma >= 0.0) || !(clutter_sigma >= 0.0)) throw UsageError("noise levels must be non-negative");
    if (distractor_descriptor_count > 0 && clutter_prototypes == 0) {
        throw UsageError("clutter needs at least one prototype");
    }
    if (queries_per_instance > images_per_instance) throw UsageError("more queries than images per instance");
    if (shortlist == 0) throw UsageError("shortlist must be at least 1");
}

namespace {

Vector random_unit(std::size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(dim);
    for (auto& x : v) x = normal(rng);
    return l2_normalize(v).values;
}

Vector noisy_unit(const Vector& center, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, sigma > 0.0 ? sigma : 1.0);
    Vector v = center;
    if (sigma > 0.0)
        for (auto& x : v) x += normal(rng);
    return l2_normalize(v).values;
}

std::string image_name(std::size_t instance, std::size_t image) {
    std::ostringstream os;
    os << "i" << std::setw(4) << std::setfill('0') << instance << "_" << std::setw(3) << image;
    return os.str();
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t dim = spec.descriptor_dim;
    const std::size_t shared =
        static_cast<std::size_t>(std::llround(spec.shared_fraction * static_cast<double>(spec.descriptors_per_image)));
    const std::size_t bank = spec.template_size ? spec.template_size : std::max<std::size_t>(1, 2 * shared);

    std::vector<Vector> clutter;
    for (std::size_t c = 0; c < spec.clutter_prototypes; ++c) clutter.push_back(random_unit(dim, rng));

    SyntheticData data;
    for (std::size_t inst = 0; inst < spec.instance_count; ++inst) {
        std::vector<Vector> templ;
        for (std::size_t t = 0; t < bank; ++t) templ.push_back(random_unit(dim, rng));
        for (std::size_t img = 0; img < spec.images_per_instance; ++img) {
            struct Draw {
                Vector v;
                double strength;
            };
            std::vector<Draw> draws;
            std::vector<std::size_t> order(bank);
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t k = 0; k < shared; ++k) {
                const double s = (1.0 - spec.strength_bias) * unit(rng) + spec.strength_bias;
                draws.push_back({noisy_unit(templ[order[k % bank]], spec.noise_sigma, rng), s});
            }
            for (std::size_t k = shared; k < spec.descriptors_per_image; ++k) {
                draws.push_back({random_unit(dim, rng), (1.0 - spec.strength_bias) * unit(rng)});
            }
            // One bursty clutter patch per image, around a prototype picked
            // independently of the instance.
            const std::size_t proto = std::min(
                static_cast<std::size_t>(unit(rng) * static_cast<double>(clutter.size())), clutter.size() - 1);
            for (std::size_t k = 0; k < spec.distractor_descriptor_count; ++k) {
                draws.push_back({noisy_unit(clutter[proto], spec.clutter_sigma, rng), unit(rng)});
            }
            std::shuffle(draws.begin(), draws.end(), rng);

            RawDescriptorSet set;
            set.image_id = image_name(inst, img);
            set.descriptors = MatrixF(dim, draws.size());
            set.strengths.resize(draws.size());
            for (std::size_t c = 0; c < draws.size(); ++c) {
                for (std::size_t r = 0; r < dim; ++r) set.descriptors(r, c) = static_cast<float>(draws[c].v[r]);
                set.strengths[c] = static_cast<float>(draws[c].strength);
            }
            data.images.push_back(std::move(set));
            data.instance_of.push_back(inst);
        }
    }

    const std::size_t per_query = spec.queries_per_instance ? spec.queries_per_instance : spec.images_per_instance;
    std::vector<std::size_t> queries;
    for (std::size_t idx = 0; idx < data.images.size(); ++idx) {
        if (idx % spec.images_per_instance < per_query) queries.push_back(idx);
    }
    for (std::size_t q : queries) {
        auto& positives = data.ground_truth[data.images[q].image_id];
        const std::size_t inst = data.instance_of[q];
        for (std::size_t idx = inst * spec.images_per_instance; idx < (inst + 1) * spec.images_per_instance; ++idx) {
            if (idx != q) positives.insert(data.images[idx].image_id);
        }
    }
    data.initial = mean_descriptor_rankings(data.images, queries, spec.shortlist);
    return data;
}

std::vector<RankedList> mean_descriptor_rankings(std::span<const RawDescriptorSet> images,
                                                 std::span<const std::size_t> query_indices,
                                                 std::size_t shortlist) {
    std::vector<Vector> means;
    means.reserve(images.size());
    for (const auto& img : images) {
        img.validate();
        Vector m(img.dim(), 0.0);
        for (std::size_t r = 0; r < img.dim(); ++r) {
            const auto row = img.descriptors.row(r);
            for (float v : row) m[r] += v;
        }
        means.push_back(l2_normalize(m).values);
    }
    std::vector<RankedList> lists;
    lists.reserve(query_indices.size());
    for (std::size_t q : query_indices) {
        if (q >= images.size()) throw DimensionError("query index out of range");
        std::vector<RankedEntry> all;
        all.reserve(images.size() - 1);
        for (std::size_t c = 0; c < images.size(); ++c) {
            if (c == q) continue;
            if (means[c].size() != means[q].size()) throw DimensionError("images have different descriptor dims");
            all.push_back({images[c].image_id, dot(means[q], means[c])});
        }
        std::stable_sort(all.begin(), all.end(), [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
        if (all.size() > shortlist) all.resize(shortlist);
        lists.push_back({images[q].image_id, std::move(all)});
    }
    return lists;
}

std::unordered_map<std::string, std::vector<std::string>> positives_by_query(const GroundTruth& gt) {
    std::unordered_map<std::string, std::vector<std::string>> out;
    for (const auto& [q, pos] : gt) out[q].assign(pos.begin(), pos.end());
    return out;
}

std::unordered_map<std::string, std::vector<std::string>> candidates_by_query(std::span<const RankedList> lists) {
    std::unordered_map<std::string, std::vector<std::string>> out;
    for (const auto& list : lists) {
        auto& ids = out[list.query_id];
        for (const auto& e : list.entries) ids.push_back(e.candidate_id);
    }
    return out;
}

}  // namespace elvis
