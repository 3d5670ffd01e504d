#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "elvis/descriptors.hpp"
#include "elvis/linalg.hpp"
#include "elvis/transport.hpp"

namespace elvis {

// Scalar → scalar two-layer MLP with GELU hidden units and sigmoid output:
//   y = sigmoid(b2 + Σ_k w2_k · gelu(w1_k · x + b1_k))
struct ScalarMlp {
    Vector w1;
    Vector b1;
    Vector w2;
    double b2 = 0.0;

    std::size_t hidden() const noexcept { return w1.size(); }
    double logit(double x) const;
    double operator()(double x) const;
    void validate(const char* what) const;
};

// True when the MLP never decreases over `points` evenly spaced inputs in
// [lo, hi]. A diagnostic for the trained warp g, not an enforced property.
bool nondecreasing_on_grid(const ScalarMlp& mlp, double lo, double hi, std::size_t points = 1001);

// Vote strength function f (hidden width 16 by default).
struct VoteFunction : ScalarMlp {};
// Loss warp g (hidden width 64 by default). Only the loss evaluates it.
struct WarpFunction : ScalarMlp {};

// Structural switches reproducing the component ablations.
struct Architecture {
    bool dustbin = true;            // false: plain doubly-stochastic OT, Mq == Mx required
    bool descriptor_gain = true;    // false: a single learnable gain for every descriptor
    bool vote_function = true;      // false: votes pass through clamp(x, 0, 1)
    bool projection = true;         // false: ℓ2-normalized raw descriptors

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Everything inference needs. The loss warp g lives outside this type, so
// no scoring entry point can reach it.
struct SimilarityModel {
    Architecture arch;
    ProjectionParams projection;  // unused when !arch.projection
    DustbinHead dustbin;          // unused when !arch.descriptor_gain or !arch.dustbin
    double scalar_gain = 1.0;     // used when arch.dustbin && !arch.descriptor_gain
    double omega = 1.0;           // unused when !arch.dustbin
    VoteFunction f;               // unused when !arch.vote_function
};

struct ModelParams {
    SimilarityModel similarity;
    std::optional<WarpFunction> g;
};

struct ModelShape {
    std::size_t raw_dim = 768;  // D′
    std::size_t dim = 128;      // D
    std::size_t f_hidden = 16;
    std::size_t g_hidden = 64;
    Architecture arch;
    bool warp = true;  // include g
    // Typical magnitude of pair scores; scales g's first-layer init so the
    // warp starts out unsaturated.
    double score_scale = 400.0;
};

ModelParams init_model(const ModelShape& shape, std::uint64_t seed);

// Same tensors as `like`, all zero. Serves as the gradient slot.
ModelParams zeros_like(const ModelParams& like);

// Visits every learnable tensor in a fixed order with its checkpoint name and
// shape. Scalars have an empty shape.
template <typename Params, typename Fn>
void for_each_tensor(Params& params, Fn&& fn);

std::size_t parameter_count(const ModelParams& params);
std::size_t projection_parameter_count(const ModelParams& params);

// ELVC checkpoint. Little-endian:
//   "ELVC" | u32 version | u32 tensor_count
//   per tensor: u16 name_len | name | u32 rank | rank × u32 dims | f64 payload
inline constexpr char kCheckpointMagic[4] = {'E', 'L', 'V', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
// Architecture is inferred from which tensors are present.
ModelParams load_checkpoint(const std::filesystem::path& path);

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::vector<double> values;
};
std::vector<NamedTensor> read_checkpoint_tensors(const std::filesystem::path& path);
void write_checkpoint_tensors(std::span<const NamedTensor> tensors, const std::filesystem::path& path);
ModelParams model_from_tensors(std::span<const NamedTensor> tensors);

// ---------------------------------------------------------------------------

namespace detail {
template <typename Mlp, typename Fn>
void visit_mlp(Mlp& mlp, const std::string& prefix, Fn& fn) {
    fn(prefix + ".w1", std::vector<std::size_t>{mlp.w1.size()}, std::span(mlp.w1));
    fn(prefix + ".b1", std::vector<std::size_t>{mlp.b1.size()}, std::span(mlp.b1));
    fn(prefix + ".w2", std::vector<std::size_t>{mlp.w2.size()}, std::span(mlp.w2));
    fn(prefix + ".b2", std::vector<std::size_t>{}, std::span(&mlp.b2, 1));
}
}  // namespace detail

template <typename Params, typename Fn>
void for_each_tensor(Params& params, Fn&& fn) {
    auto& sim = params.similarity;
    if (sim.arch.projection) {
        auto& proj = sim.projection;
        fn(std::string("projection.weight"),
           std::vector<std::size_t>{proj.weight.rows(), proj.weight.cols()}, proj.weight.data());
        fn(std::string("projection.bias"), std::vector<std::size_t>{proj.bias.size()}, std::span(proj.bias));
        fn(std::string("projection.ln_gain"), std::vector<std::size_t>{proj.ln_gain.size()},
           std::span(proj.ln_gain));
        fn(std::string("projection.ln_bias"), std::vector<std::size_t>{proj.ln_bias.size()},
           std::span(proj.ln_bias));
    }
    if (sim.arch.dustbin) {
        if (sim.arch.descriptor_gain) {
            auto& h = sim.dustbin;
            fn(std::string("dustbin.w1"), std::vector<std::size_t>{h.w1.rows(), h.w1.cols()}, h.w1.data());
            fn(std::string("dustbin.b1"), std::vector<std::size_t>{h.b1.size()}, std::span(h.b1));
            fn(std::string("dustbin.w2"), std::vector<std::size_t>{h.w2.size()}, std::span(h.w2));
            fn(std::string("dustbin.b2"), std::vector<std::size_t>{}, std::span(&h.b2, 1));
        } else {
            fn(std::string("dustbin.gain"), std::vector<std::size_t>{}, std::span(&sim.scalar_gain, 1));
        }
        fn(std::string("omega"), std::vector<std::size_t>{}, std::span(&sim.omega, 1));
    }
    if (sim.arch.vote_function) detail::visit_mlp(sim.f, "f", fn);
    if (params.g) detail::visit_mlp(*params.g, "g", fn);
}

}  // namespace elvis
