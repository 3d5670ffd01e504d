#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "elvis/config.hpp"
#include "elvis/descriptors.hpp"
#include "elvis/learning.hpp"
#include "elvis/retrieval.hpp"
#include "elvis/scoring.hpp"

namespace elvis::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Options shared by every config-driven subcommand. Explicit flags win over
// --set, which wins over --config.
struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::map<std::string, std::string> flags;

    void attach(CLI::App& app, const std::vector<std::string>& keys) {
        app.add_option("--config", config_path, "key = value configuration file");
        app.add_option("--set", overrides, "override one config key (key=value), repeatable");
        for (const auto& key : keys) {
            std::string flag = "--" + key;
            std::replace(flag.begin(), flag.end(), '_', '-');
            app.add_option_function<std::string>(
                flag, [this, key](const std::string& v) { flags[key] = v; }, "config key " + key);
        }
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path, cfg);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        for (const auto& [k, v] : flags) cfg.set(k, v);
        cfg.validate();
        return cfg;
    }
};

void require_path(const std::string& value, const char* key) {
    if (value.empty()) throw UsageError(std::string("missing required setting '") + key + "'");
}

// Reads every id once and serves references for the training loop.
class CachedLookup {
public:
    CachedLookup(const DescriptorDataset& ds, const PairPool& pool) {
        auto load = [&](const std::string& id) {
            if (!sets_.contains(id)) sets_.emplace(id, ds.read_image(id));
        };
        for (const auto* label : {&pool.positives, &pool.negatives})
            for (const auto& p : *label) {
                load(p.query_id);
                load(p.candidate_id);
            }
    }
    const RawDescriptorSet& operator()(const std::string& id) const {
        const auto it = sets_.find(id);
        if (it == sets_.end()) throw NotFoundError("image '" + id + "' not in dataset");
        return it->second;
    }

private:
    std::map<std::string, RawDescriptorSet> sets_;
};

int cmd_generate(const SyntheticSpec& spec, const fs::path& out_dir, std::ostream& out) {
    const SyntheticData data = generate_synthetic(spec);
    fs::create_directories(out_dir);
    write_dataset(data.images, out_dir / "descriptors.elvd");
    write_ground_truth(data.ground_truth, out_dir / "ground_truth.jsonl");
    write_rankings(data.initial, out_dir / "rankings.jsonl");
    out << "wrote " << data.images.size() << " images, " << data.initial.size() << " queries to "
        << out_dir.string() << '\n';
    return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
    require_path(cfg.descriptors, "descriptors");
    require_path(cfg.rankings, "rankings");
    require_path(cfg.ground_truth, "ground_truth");
    require_path(cfg.output, "output");
    const fs::path dir = cfg.output;
    echo_config(cfg, dir);

    const DescriptorDataset ds = DescriptorDataset::open(cfg.descriptors);
    const GroundTruth gt = read_ground_truth(cfg.ground_truth);
    const std::vector<RankedList> rankings = read_rankings(cfg.rankings);
    TripletMining mining;
    mining.positives_per_anchor = cfg.positives_per_anchor;
    mining.hard_negative_depth = cfg.hard_negative_depth;
    const PairPool pool = build_pair_pool(positives_by_query(gt), candidates_by_query(rankings), mining, cfg.seed);
    const CachedLookup lookup(ds, pool);

    TrainConfig tc = cfg.train_config(ds.header().dim);
    tc.checkpoint_dir = dir;
    const TrainResult result =
        train([&lookup](const std::string& id) -> const RawDescriptorSet& { return lookup(id); }, pool, tc);

    save_checkpoint(result.params, dir / "model.elvc");
    std::ofstream csv(dir / "loss.csv");
    csv << "step,lr,loss\n" << std::setprecision(17);
    for (const auto& r : result.curve) csv << r.step << ',' << r.lr << ',' << r.loss << '\n';
    if (!csv) throw IoError("cannot write " + (dir / "loss.csv").string());

    out << "pairs: " << pool.positives.size() << " positive, " << pool.negatives.size() << " negative\n";
    for (std::size_t e = 0; e < result.epoch_mean_loss.size(); ++e) {
        out << "epoch " << e + 1 << " mean loss " << result.epoch_mean_loss[e] << '\n';
    }
    if (result.params.g) {
        // The trained warp is expected, not forced, to be monotone.
        const bool monotone = nondecreasing_on_grid(*result.params.g, 0.0, 2.0 * tc.shape.score_scale);
        out << "g nondecreasing on [0, " << 2.0 * tc.shape.score_scale << "]: " << (monotone ? "yes" : "no") << '\n';
    }
    out << "parameters: " << parameter_count(result.params) << '\n';
    out << "checkpoint: " << (dir / "model.elvc").string() << '\n';
    return kExitOk;
}

int cmd_rerank(const RunConfig& cfg, std::ostream& out) {
    require_path(cfg.rankings, "rankings");
    require_path(cfg.output, "output");
    const RerankMethod method = parse_rerank_method(cfg.method);
    const std::vector<RankedList> lists = read_rankings(cfg.rankings);
    const fs::path dir = cfg.output;
    echo_config(cfg, dir);

    std::vector<RankedList> result;
    if (method == RerankMethod::none) {
        result = lists;
    } else {
        require_path(cfg.descriptors, "descriptors");
        std::optional<ModelParams> params;
        if (method == RerankMethod::elvis) {
            require_path(cfg.checkpoint, "checkpoint");
            params = load_checkpoint(cfg.checkpoint);
        }
        const SimilarityModel* model = params ? &params->similarity : nullptr;
        const DescriptorDataset ds = DescriptorDataset::open(cfg.descriptors);

        std::vector<std::string> ids;
        for (const auto& list : lists) {
            ids.push_back(list.query_id);
            const std::size_t head = std::min(cfg.rerank_k, list.entries.size());
            for (std::size_t i = 0; i < head; ++i) ids.push_back(list.entries[i].candidate_id);
        }
        PreparedCollection prepared(method, model, cfg.m);
        prepared.add(ids, [&ds](const std::string& id) { return ds.read_image(id); }, cfg.threads);
        const OtConfig ot = cfg.ot();
        result = rerank_all(lists, cfg.rerank_k,
                            [&] { return make_pair_scorer(prepared, method, model, ot); }, cfg.threads);
    }
    write_rankings(result, dir / "rankings.jsonl");
    out << "re-ranked " << result.size() << " queries with " << cfg.method << " -> "
        << (dir / "rankings.jsonl").string() << '\n';
    return kExitOk;
}

struct EvalArgs {
    std::string rankings;
    std::string ground_truth;
    std::vector<std::string> metrics{"map"};
    std::string dataset = "dataset";
    std::string method = "method";
    std::string output;
};

int cmd_eval(const EvalArgs& args, std::ostream& out) {
    const std::vector<RankedList> lists = read_rankings(args.rankings);
    const GroundTruth gt = read_ground_truth(args.ground_truth);
    std::vector<MetricRow> rows;
    for (const auto& text : args.metrics) {
        const MetricSpec metric = parse_metric(text);
        const double value = metric.k == 0 ? mean_average_precision(lists, gt) : map_at_k(lists, gt, metric.k);
        rows.push_back({args.dataset, args.method, metric.name(), value});
    }
    if (!args.output.empty()) write_metric_csv(rows, args.output);
    out << "dataset,method,metric,value\n" << std::setprecision(10);
    for (const auto& r : rows) out << r.dataset << ',' << r.method << ',' << r.metric << ',' << r.value << '\n';
    return kExitOk;
}

struct BenchArgs {
    std::size_t m = 600;
    std::size_t raw_dim = 768;
    std::size_t batches = 20;
    std::size_t batch_size = 500;
};

int cmd_bench(const RunConfig& cfg, const BenchArgs& args, std::ostream& out) {
    ModelParams params = cfg.checkpoint.empty() ? init_model(cfg.shape(args.raw_dim), cfg.seed)
                                                : load_checkpoint(cfg.checkpoint);
    const BenchReport r = run_bench(params, cfg.ot(), args.m, args.batches, args.batch_size, cfg.seed);
    json j = {{"pairs", r.pairs},
              {"batch_size", r.batch_size},
              {"batches", r.batches},
              {"m", r.m},
              {"dim", r.dim},
              {"iterations", r.iterations},
              {"threads", 1},
              {"per_pair_us_mean", r.mean_us},
              {"per_pair_us_median", r.median_us},
              {"parameters", r.parameters},
              {"parameters_without_projection", r.parameters_without_projection}};
    out << j.dump(2) << '\n';
    return kExitOk;
}

struct InspectArgs {
    std::string query;
    std::string candidate;
    std::size_t top = 25;
    std::string output;
};

int cmd_inspect(const RunConfig& cfg, const InspectArgs& args, std::ostream& out) {
    require_path(cfg.descriptors, "descriptors");
    require_path(cfg.checkpoint, "checkpoint");
    const ModelParams params = load_checkpoint(cfg.checkpoint);
    const DescriptorDataset ds = DescriptorDataset::open(cfg.descriptors);
    const auto q = prepare_descriptors(ds.read_image(args.query), params.similarity, cfg.m);
    const auto x = prepare_descriptors(ds.read_image(args.candidate), params.similarity, cfg.m);
    const PairInspection ins = inspect_pair(q, x, params.similarity, cfg.ot(), args.top);

    json votes = json::array();
    for (const auto& v : ins.top_votes) {
        votes.push_back({{"side", v.from_query ? "query" : "database"},
                         {"query_index", v.query_index},
                         {"db_index", v.db_index},
                         {"raw_similarity", v.raw_similarity},
                         {"refined_similarity", v.refined_similarity},
                         {"strength", v.strength}});
    }
    const json j = {{"query", args.query},
                    {"candidate", args.candidate},
                    {"score", ins.score},
                    {"votes", votes},
                    {"query_gains", ins.query_gains},
                    {"db_gains", ins.db_gains}};
    if (args.output.empty()) {
        out << j.dump(2) << '\n';
    } else {
        std::ofstream f(args.output);
        f << j.dump(2) << '\n';
        if (!f) throw IoError("cannot write " + args.output);
    }
    return kExitOk;
}

}  // namespace

BenchReport run_bench(const ModelParams& params, const OtConfig& cfg, std::size_t m, std::size_t batches,
                      std::size_t batch_size, std::uint64_t seed) {
    if (batches == 0 || batch_size == 0 || m == 0) throw UsageError("bench sizes must be positive");
    const SimilarityModel& model = params.similarity;
    // Without a projection the model fixes no input width unless h does.
    std::size_t raw_dim = 128;
    if (model.arch.projection) {
        raw_dim = model.projection.input_dim();
    } else if (model.arch.dustbin && model.arch.descriptor_gain) {
        raw_dim = model.dustbin.dim();
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);

    // A pool of distinct images; pairs cycle through it.
    const std::size_t pool_size = 32;
    std::vector<PreparedImage> images;
    for (std::size_t k = 0; k < pool_size; ++k) {
        RawDescriptorSet raw;
        raw.image_id = "bench" + std::to_string(k);
        raw.descriptors = MatrixF(raw_dim, m);
        for (auto& v : raw.descriptors.data()) v = normal(rng);
        raw.strengths.assign(m, 1.0f);
        images.push_back(prepare_image(prepare_descriptors(raw, model, m), model));
    }

    InferenceScorer scorer(model, cfg);
    float sink = 0.0f;
    auto run_batch = [&](std::size_t b) {
        for (std::size_t p = 0; p < batch_size; ++p) {
            const std::size_t i = (b * batch_size + p) % pool_size;
            const std::size_t j = (i + 1 + p % (pool_size - 1)) % pool_size;
            sink += scorer.score(images[i], images[j]);
        }
    };
    run_batch(0);  // warm-up

    std::vector<double> per_pair;
    for (std::size_t b = 0; b < batches; ++b) {
        const auto t0 = std::chrono::steady_clock::now();
        run_batch(b + 1);
        const auto t1 = std::chrono::steady_clock::now();
        per_pair.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() / static_cast<double>(batch_size));
    }
    if (!std::isfinite(sink)) throw NumericError("benchmark produced a non-finite score");

    BenchReport r;
    r.pairs = batches * batch_size;
    r.batch_size = batch_size;
    r.batches = batches;
    r.m = m;
    r.dim = images.front().descriptors.rows();
    r.iterations = cfg.iterations;
    double sum = 0.0;
    for (double v : per_pair) sum += v;
    r.mean_us = sum / static_cast<double>(per_pair.size());
    std::sort(per_pair.begin(), per_pair.end());
    const std::size_t n = per_pair.size();
    r.median_us = n % 2 ? per_pair[n / 2] : 0.5 * (per_pair[n / 2 - 1] + per_pair[n / 2]);
    r.parameters = parameter_count(params);
    r.parameters_without_projection = r.parameters - projection_parameter_count(params);
    return r;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"ELViS local-descriptor similarity: train, re-rank, evaluate, benchmark"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "elvis 1.0");

    // generate
    SyntheticSpec spec;
    std::string gen_out;
    auto* gen = app.add_subcommand("generate", "write a synthetic retrieval set");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--instances", spec.instance_count);
    gen->add_option("--images", spec.images_per_instance, "images per instance");
    gen->add_option("--dim", spec.descriptor_dim, "raw descriptor dimension");
    gen->add_option("--descriptors", spec.descriptors_per_image, "informative descriptors per image");
    gen->add_option("--shared", spec.shared_fraction, "fraction drawn from the instance template");
    gen->add_option("--template-size", spec.template_size);
    gen->add_option("--noise", spec.noise_sigma);
    gen->add_option("--distractors", spec.distractor_descriptor_count, "clutter descriptors per image");
    gen->add_option("--clutter-prototypes", spec.clutter_prototypes);
    gen->add_option("--clutter-noise", spec.clutter_sigma);
    gen->add_option("--queries-per-instance", spec.queries_per_instance);
    gen->add_option("--shortlist", spec.shortlist);
    gen->add_option("--seed", spec.seed);

    const std::vector<std::string> file_keys = {"descriptors", "rankings", "ground_truth", "checkpoint",
                                                "output", "seed", "threads"};
    auto with = [&](std::vector<std::string> extra) {
        extra.insert(extra.end(), file_keys.begin(), file_keys.end());
        return extra;
    };

    ConfigArgs train_cfg, rerank_cfg, bench_cfg, inspect_cfg;
    auto* train_cmd = app.add_subcommand("train", "train a model on descriptors and ground truth");
    train_cfg.attach(*train_cmd, with({"epochs", "batch_pairs", "lr_peak", "lambda", "iterations", "dim", "m_min",
                                       "m_max", "dustbin", "descriptor_gain", "vote_function", "projection", "warp"}));

    auto* rerank_cmd = app.add_subcommand("rerank", "re-rank initial shortlists");
    rerank_cfg.attach(*rerank_cmd, with({"method", "rerank_k", "m", "lambda", "iterations"}));

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "compute mAP / mAP@K of rankings");
    eval_cmd->add_option("--rankings", eval_args.rankings)->required();
    eval_cmd->add_option("--ground-truth", eval_args.ground_truth)->required();
    eval_cmd->add_option("--metric", eval_args.metrics, "map or map@K, repeatable");
    eval_cmd->add_option("--dataset", eval_args.dataset, "label for the report");
    eval_cmd->add_option("--method", eval_args.method, "label for the report");
    eval_cmd->add_option("--output", eval_args.output, "CSV report path");

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "per-pair similarity latency");
    bench_cfg.attach(*bench_cmd, {"checkpoint", "seed", "lambda", "iterations", "dim"});
    bench_cmd->add_option("--m", bench_args.m, "descriptors per image");
    bench_cmd->add_option("--raw-dim", bench_args.raw_dim, "raw descriptor dimension without a checkpoint");
    bench_cmd->add_option("--batches", bench_args.batches);
    bench_cmd->add_option("--batch-size", bench_args.batch_size);

    InspectArgs inspect_args;
    auto* inspect_cmd = app.add_subcommand("inspect", "strongest correspondences of one pair as JSON");
    inspect_cfg.attach(*inspect_cmd, {"descriptors", "checkpoint", "m", "lambda", "iterations"});
    inspect_cmd->add_option("--query", inspect_args.query)->required();
    inspect_cmd->add_option("--candidate", inspect_args.candidate)->required();
    inspect_cmd->add_option("--top", inspect_args.top);
    inspect_cmd->add_option("--output", inspect_args.output, "JSON path (default stdout)");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << "elvis 1.0\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (*gen) return cmd_generate(spec, gen_out, out);
        if (*train_cmd) return cmd_train(train_cfg.resolve(), out);
        if (*rerank_cmd) return cmd_rerank(rerank_cfg.resolve(), out);
        if (*eval_cmd) return cmd_eval(eval_args, out);
        if (*bench_cmd) return cmd_bench(bench_cfg.resolve(), bench_args, out);
        if (*inspect_cmd) {
            RunConfig cfg = inspect_cfg.resolve();
            return cmd_inspect(cfg, inspect_args, out);
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitOther;
    }
    return kExitUsage;
}

}  // namespace elvis::cli
