#include "elvis/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace elvis {

double ScalarMlp::logit(double x) const {
    double z = b2;
    for (std::size_t k = 0; k < w1.size(); ++k) z += w2[k] * gelu(w1[k] * x + b1[k]);
    return z;
}

double ScalarMlp::operator()(double x) const { return sigmoid(logit(x)); }

void ScalarMlp::validate(const char* what) const {
    if (w1.empty() || b1.size() != w1.size() || w2.size() != w1.size()) {
        throw DimensionError(std::string(what) + ": inconsistent hidden widths");
    }
}

namespace {

Vector uniform_vector(std::size_t n, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Vector v(n);
    for (double& a : v) a = dist(rng);
    return v;
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
    return Matrix(rows, cols, uniform_vector(rows * cols, bound, rng));
}

template <typename Mlp>
Mlp init_scalar_mlp(std::size_t hidden, double input_scale, bool increasing, std::mt19937_64& rng) {
    Mlp mlp;
    // Default linear-layer init (fan-in bounds), with the first layer's
    // weight shrunk by the expected input magnitude.
    mlp.w1 = uniform_vector(hidden, 1.0 / input_scale, rng);
    mlp.b1 = uniform_vector(hidden, 1.0, rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    mlp.w2 = uniform_vector(hidden, bound, rng);
    mlp.b2 = uniform_vector(1, bound, rng)[0];
    if (increasing) {
        // Nonnegative weights and hidden units kept right of GELU's dip over
        // inputs in [0, 2·input_scale].
        for (auto& w : mlp.w1) w = std::abs(w);
        for (auto& w : mlp.w2) w = std::abs(w);
        for (auto& b : mlp.b1) b = 0.5 * b + 0.25;
        // Centre the output at 1/2 for an input of input_scale.
        mlp.b2 = 0.0;
        mlp.b2 = -mlp.logit(input_scale);
    }
    return mlp;
}

}  // namespace

bool nondecreasing_on_grid(const ScalarMlp& mlp, double lo, double hi, std::size_t points) {
    if (points < 2) throw UsageError("monotonicity grid needs at least 2 points");
    double prev = mlp.logit(lo);
    for (std::size_t k = 1; k < points; ++k) {
        const double x = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
        const double y = mlp.logit(x);
        if (y < prev) return false;
        prev = y;
    }
    return true;
}

ModelParams init_model(const ModelShape& shape, std::uint64_t seed) {
    if (shape.raw_dim == 0 || shape.f_hidden == 0 || shape.g_hidden == 0) {
        throw UsageError("init_model: dimensions must be positive");
    }
    if (shape.arch.projection && shape.dim == 0) throw UsageError("init_model: D must be positive");
    if (!(shape.score_scale > 0.0)) throw UsageError("init_model: score_scale must be positive");

    std::mt19937_64 rng(seed);
    ModelParams params;
    SimilarityModel& sim = params.similarity;
    sim.arch = shape.arch;
    const std::size_t d = shape.arch.projection ? shape.dim : shape.raw_dim;

    if (shape.arch.projection) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(shape.raw_dim));
        sim.projection.weight = uniform_matrix(shape.dim, shape.raw_dim, bound, rng);
        sim.projection.bias = uniform_vector(shape.dim, bound, rng);
        sim.projection.ln_gain.assign(shape.dim, 1.0);
        sim.projection.ln_bias.assign(shape.dim, 0.0);
    }
    if (shape.arch.dustbin && shape.arch.descriptor_gain) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        sim.dustbin.w1 = uniform_matrix(d, d, bound, rng);
        sim.dustbin.b1 = uniform_vector(d, bound, rng);
        sim.dustbin.w2 = uniform_vector(d, bound, rng);
        // Start next to the fixed unit gains of the parameter-free baseline.
        sim.dustbin.b2 = 1.0;
    }
    sim.scalar_gain = 1.0;
    sim.omega = 1.0;
    if (shape.arch.vote_function) {
        sim.f = init_scalar_mlp<VoteFunction>(shape.f_hidden, 1.0, false, rng);
    }
    if (shape.warp) {
        params.g = init_scalar_mlp<WarpFunction>(shape.g_hidden, shape.score_scale, true, rng);
    }
    return params;
}

ModelParams zeros_like(const ModelParams& like) {
    ModelParams out = like;
    for_each_tensor(out, [](const std::string&, const std::vector<std::size_t>&, std::span<double> v) {
        std::fill(v.begin(), v.end(), 0.0);
    });
    return out;
}

std::size_t parameter_count(const ModelParams& params) {
    std::size_t n = 0;
    for_each_tensor(params, [&](const std::string&, const std::vector<std::size_t>&,
                                std::span<const double> v) { n += v.size(); });
    return n;
}

std::size_t projection_parameter_count(const ModelParams& params) {
    std::size_t n = 0;
    for_each_tensor(params, [&](const std::string& name, const std::vector<std::size_t>&,
                                std::span<const double> v) {
        if (name.starts_with("projection.")) n += v.size();
    });
    return n;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

template <typename U>
void put_le(std::ostream& os, U value) {
    unsigned char bytes[sizeof(U)];
    for (std::size_t k = 0; k < sizeof(U); ++k) bytes[k] = static_cast<unsigned char>(value >> (8 * k));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const std::filesystem::path& path) {
    unsigned char bytes[sizeof(U)];
    is.read(reinterpret_cast<char*>(bytes), sizeof(U));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
        throw FormatError(path.string() + ": truncated checkpoint");
    }
    U value = 0;
    for (std::size_t k = 0; k < sizeof(U); ++k) value |= static_cast<U>(U(bytes[k]) << (8 * k));
    return value;
}

}  // namespace

void write_checkpoint_tensors(std::span<const NamedTensor> tensors, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, 4);
    put_le(os, kCheckpointVersion);
    put_le(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put_le(os, static_cast<std::uint16_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put_le(os, static_cast<std::uint32_t>(t.shape.size()));
        std::size_t expected = 1;
        for (auto d : t.shape) {
            put_le(os, d);
            expected *= d;
        }
        if (expected != t.values.size()) {
            throw DimensionError("checkpoint tensor '" + t.name + "' shape does not match payload");
        }
        for (double v : t.values) put_le(os, std::bit_cast<std::uint64_t>(v));
    }
    os.flush();
    if (!os) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> read_checkpoint_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[4] = {};
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a checkpoint (expected magic 'ELVC')");
    }
    const auto version = get_le<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported ELVC version " + std::to_string(version));
    }
    const auto count = get_le<std::uint32_t>(is, path);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedTensor t;
        const auto name_len = get_le<std::uint16_t>(is, path);
        t.name.resize(name_len);
        is.read(t.name.data(), name_len);
        if (is.gcount() != name_len) throw FormatError(path.string() + ": truncated checkpoint");
        const auto rank = get_le<std::uint32_t>(is, path);
        if (rank > 8) throw FormatError(path.string() + ": implausible tensor rank");
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.shape.push_back(get_le<std::uint32_t>(is, path));
            n *= t.shape.back();
        }
        t.values.resize(n);
        for (double& v : t.values) v = std::bit_cast<double>(get_le<std::uint64_t>(is, path));
        out.push_back(std::move(t));
    }
    return out;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    std::vector<NamedTensor> tensors;
    for_each_tensor(params, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                std::span<const double> values) {
        NamedTensor t;
        t.name = name;
        for (auto d : shape) t.shape.push_back(static_cast<std::uint32_t>(d));
        t.values.assign(values.begin(), values.end());
        tensors.push_back(std::move(t));
    });
    write_checkpoint_tensors(tensors, path);
}

ModelParams model_from_tensors(std::span<const NamedTensor> tensors) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) {
        if (!by_name.emplace(t.name, &t).second) {
            throw FormatError("checkpoint: duplicate tensor '" + t.name + "'");
        }
    }
    auto has_prefix = [&](const std::string& prefix) {
        for (const auto& [name, _] : by_name)
            if (name.starts_with(prefix)) return true;
        return false;
    };

    ModelParams params;
    SimilarityModel& sim = params.similarity;
    sim.arch.projection = has_prefix("projection.");
    sim.arch.dustbin = by_name.contains("omega");
    sim.arch.descriptor_gain = !by_name.contains("dustbin.gain");
    sim.arch.vote_function = has_prefix("f.");
    if (!sim.arch.dustbin) {
        if (has_prefix("dustbin.")) throw FormatError("checkpoint: dustbin tensors without omega");
        sim.arch.descriptor_gain = true;
    }

    // Shapes come from the file; for_each_tensor then fills values by name.
    auto need = [&](const std::string& name) -> const NamedTensor& {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
        return *it->second;
    };
    auto vec_len = [&](const std::string& name) { return need(name).values.size(); };

    if (sim.arch.projection) {
        const auto& w = need("projection.weight");
        if (w.shape.size() != 2) throw FormatError("checkpoint: projection.weight must be rank 2");
        sim.projection.weight = Matrix(w.shape[0], w.shape[1]);
        sim.projection.bias.resize(vec_len("projection.bias"));
        sim.projection.ln_gain.resize(vec_len("projection.ln_gain"));
        sim.projection.ln_bias.resize(vec_len("projection.ln_bias"));
    }
    if (sim.arch.dustbin && sim.arch.descriptor_gain) {
        const auto& w = need("dustbin.w1");
        if (w.shape.size() != 2) throw FormatError("checkpoint: dustbin.w1 must be rank 2");
        sim.dustbin.w1 = Matrix(w.shape[0], w.shape[1]);
        sim.dustbin.b1.resize(vec_len("dustbin.b1"));
        sim.dustbin.w2.resize(vec_len("dustbin.w2"));
    }
    auto size_mlp = [&](ScalarMlp& mlp, const std::string& prefix) {
        mlp.w1.resize(vec_len(prefix + ".w1"));
        mlp.b1.resize(vec_len(prefix + ".b1"));
        mlp.w2.resize(vec_len(prefix + ".w2"));
    };
    if (sim.arch.vote_function) size_mlp(sim.f, "f");
    if (has_prefix("g.")) {
        params.g.emplace();
        size_mlp(*params.g, "g");
    }

    std::size_t consumed = 0;
    for_each_tensor(params, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                std::span<double> values) {
        const NamedTensor& t = need(name);
        if (t.shape.size() != shape.size() || t.values.size() != values.size()) {
            throw FormatError("checkpoint: tensor '" + name + "' has unexpected shape");
        }
        std::copy(t.values.begin(), t.values.end(), values.begin());
        ++consumed;
    });
    if (consumed != by_name.size()) throw FormatError("checkpoint: unrecognized tensors present");

    if (sim.arch.projection) {
        const std::size_t d = sim.projection.output_dim();
        if (sim.projection.bias.size() != d || sim.projection.ln_gain.size() != d ||
            sim.projection.ln_bias.size() != d) {
            throw FormatError("checkpoint: projection tensors disagree on output dim");
        }
    }
    if (sim.arch.dustbin && sim.arch.descriptor_gain) {
        const auto& h = sim.dustbin;
        if (h.w1.rows() != h.b1.size() || h.w2.size() != h.w1.rows()) {
            throw FormatError("checkpoint: dustbin head tensors disagree on hidden width");
        }
        if (sim.arch.projection && h.w1.cols() != sim.projection.output_dim()) {
            throw FormatError("checkpoint: dustbin head input does not match projection output");
        }
    }
    if (sim.arch.vote_function) sim.f.validate("checkpoint f");
    if (params.g) params.g->validate("checkpoint g");
    return params;
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    const auto tensors = read_checkpoint_tensors(path);
    return model_from_tensors(tensors);
}

}  // namespace elvis
