#include "elvis/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace elvis {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    if constexpr (std::is_unsigned_v<T>) {
        if (!value.empty() && value.front() == '-') throw UsageError(key + ": expected a non-negative integer, got '" + value + "'");
    }
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) throw UsageError(key + ": cannot parse '" + value + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw UsageError(key + ": expected true or false, got '" + value + "'");
}

// One accessor per key: set from text and print back.
struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field field(T RunConfig::*member) {
    Field f;
    f.set = [member](RunConfig& c, const std::string& key, const std::string& value) {
        if constexpr (std::is_same_v<T, std::string>) {
            c.*member = value;
        } else if constexpr (std::is_same_v<T, bool>) {
            c.*member = parse_bool(key, value);
        } else {
            c.*member = parse_number<T>(key, value);
        }
    };
    f.get = [member](const RunConfig& c) {
        if constexpr (std::is_same_v<T, std::string>) {
            return c.*member;
        } else if constexpr (std::is_same_v<T, bool>) {
            return std::string(c.*member ? "true" : "false");
        } else {
            // Shortest text that reads back to the same value.
            char buf[64];
            const auto res = std::to_chars(buf, buf + sizeof buf, c.*member);
            return std::string(buf, res.ptr);
        }
    };
    return f;
}

const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"descriptors", field(&RunConfig::descriptors)},
        {"rankings", field(&RunConfig::rankings)},
        {"ground_truth", field(&RunConfig::ground_truth)},
        {"checkpoint", field(&RunConfig::checkpoint)},
        {"output", field(&RunConfig::output)},
        {"lambda", field(&RunConfig::lambda)},
        {"iterations", field(&RunConfig::iterations)},
        {"m", field(&RunConfig::m)},
        {"dim", field(&RunConfig::dim)},
        {"f_hidden", field(&RunConfig::f_hidden)},
        {"g_hidden", field(&RunConfig::g_hidden)},
        {"dustbin", field(&RunConfig::dustbin)},
        {"descriptor_gain", field(&RunConfig::descriptor_gain)},
        {"vote_function", field(&RunConfig::vote_function)},
        {"projection", field(&RunConfig::projection)},
        {"warp", field(&RunConfig::warp)},
        {"temperature", field(&RunConfig::temperature)},
        {"score_scale", field(&RunConfig::score_scale)},
        {"batch_pairs", field(&RunConfig::batch_pairs)},
        {"epochs", field(&RunConfig::epochs)},
        {"steps_per_epoch", field(&RunConfig::steps_per_epoch)},
        {"lr_peak", field(&RunConfig::lr_peak)},
        {"warmup_fraction", field(&RunConfig::warmup_fraction)},
        {"weight_decay", field(&RunConfig::weight_decay)},
        {"beta1", field(&RunConfig::beta1)},
        {"beta2", field(&RunConfig::beta2)},
        {"adam_eps", field(&RunConfig::adam_eps)},
        {"m_min", field(&RunConfig::m_min)},
        {"m_max", field(&RunConfig::m_max)},
        {"positives_per_anchor", field(&RunConfig::positives_per_anchor)},
        {"hard_negative_depth", field(&RunConfig::hard_negative_depth)},
        {"method", field(&RunConfig::method)},
        {"rerank_k", field(&RunConfig::rerank_k)},
        {"seed", field(&RunConfig::seed)},
        {"threads", field(&RunConfig::threads)},
    };
    return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& [name, f] : fields()) {
        if (name == key) {
            f.set(*this, key, value);
            return;
        }
    }
    throw UsageError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw UsageError(msg);
    };
    require(lambda > 0.0, "lambda must be > 0");
    require(iterations >= 1, "iterations must be >= 1");
    require(m >= 1, "m must be >= 1");
    require(dim >= 1, "dim must be >= 1");
    require(f_hidden >= 1 && g_hidden >= 1, "hidden widths must be >= 1");
    require(temperature > 0.0, "temperature must be > 0");
    require(score_scale > 0.0, "score_scale must be > 0");
    require(batch_pairs >= 2 && batch_pairs % 2 == 0, "batch_pairs must be a positive even number");
    require(epochs >= 1, "epochs must be >= 1");
    require(lr_peak >= 0.0, "lr_peak must be >= 0");
    require(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "warmup_fraction must lie in [0, 1]");
    require(weight_decay >= 0.0, "weight_decay must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
    require(adam_eps > 0.0, "adam_eps must be > 0");
    require(m_min >= 1 && m_min <= m_max, "need 1 <= m_min <= m_max");
    require(positives_per_anchor >= 1, "positives_per_anchor must be >= 1");
    require(hard_negative_depth >= 1, "hard_negative_depth must be >= 1");
    require(method == "elvis" || method == "chamfer" || method == "chamfer-ot" || method == "none",
            "method must be one of elvis, chamfer, chamfer-ot, none");
    require(rerank_k >= 1, "rerank_k must be >= 1");
    require(threads >= 1, "threads must be >= 1");
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [name, f] : fields()) os << name << " = " << f.get(*this) << '\n';
    return os.str();
}

Architecture RunConfig::architecture() const {
    Architecture a;
    a.dustbin = dustbin;
    a.descriptor_gain = descriptor_gain;
    a.vote_function = vote_function;
    a.projection = projection;
    return a;
}

OtConfig RunConfig::ot() const {
    OtConfig o;
    o.lambda = lambda;
    o.iterations = iterations;
    return o;
}

ModelShape RunConfig::shape(std::size_t raw_dim) const {
    ModelShape s;
    s.raw_dim = raw_dim;
    s.dim = projection ? dim : raw_dim;
    s.f_hidden = f_hidden;
    s.g_hidden = g_hidden;
    s.arch = architecture();
    s.warp = warp;
    s.score_scale = score_scale;
    return s;
}

TrainConfig RunConfig::train_config(std::size_t raw_dim) const {
    TrainConfig t;
    t.shape = shape(raw_dim);
    t.ot = ot();
    t.loss.warp = warp;
    t.loss.temperature = temperature;
    t.batch_pairs = batch_pairs;
    t.epochs = epochs;
    t.steps_per_epoch = steps_per_epoch;
    t.lr_peak = lr_peak;
    t.warmup_fraction = warmup_fraction;
    t.weight_decay = weight_decay;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.adam_eps = adam_eps;
    t.m_min = m_min;
    t.m_max = m_max;
    t.seed = seed;
    t.threads = threads;
    return t;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string body = trim(line);
        if (body.empty() || body.front() == '#') continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        try {
            base.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
        } catch (const UsageError& e) {
            throw UsageError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str(), std::move(base));
}

void echo_config(const RunConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.txt");
    if (!out) throw IoError("cannot write " + (dir / "config.txt").string());
    out << cfg.to_text();
}

}  // namespace elvis
