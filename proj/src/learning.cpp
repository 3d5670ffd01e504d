#include "elvis/learning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace elvis {

// ---------------------------------------------------------------------------
// Loss

namespace {

// Backward through y = sigmoid(logit(x)) of a scalar MLP given dL/dlogit.
// Accumulates parameter grads into `grad` (same widths) and returns dL/dx.
double scalar_mlp_backward(const ScalarMlp& mlp, double x, double dlogit, ScalarMlp& grad) {
    grad.b2 += dlogit;
    double dx = 0.0;
    for (std::size_t k = 0; k < mlp.w1.size(); ++k) {
        const double a = mlp.w1[k] * x + mlp.b1[k];
        grad.w2[k] += dlogit * gelu(a);
        const double da = dlogit * mlp.w2[k] * gelu_derivative(a);
        grad.w1[k] += da * x;
        grad.b1[k] += da;
        dx += da * mlp.w1[k];
    }
    return dx;
}

// −log(max(sigmoid(±z), clamp)) and its derivative w.r.t. z.
std::pair<double, double> clamped_log_loss(double z, bool positive, double clamp) {
    // Probability of the observed label, computed without cancellation.
    const double p_label = positive ? sigmoid(z) : sigmoid(-z);
    if (p_label <= clamp) return {-std::log(clamp), 0.0};
    const double dz = positive ? -(1.0 - p_label) : (1.0 - p_label);
    return {-std::log(p_label), dz};
}

}  // namespace

WarpedBce warped_bce(double score, bool positive, const WarpFunction& g, double log_clamp) {
    g.validate("warp function");
    WarpedBce out;
    out.grad.w1.assign(g.w1.size(), 0.0);
    out.grad.b1.assign(g.b1.size(), 0.0);
    out.grad.w2.assign(g.w2.size(), 0.0);
    out.grad.b2 = 0.0;
    const auto [loss, dlogit] = clamped_log_loss(g.logit(score), positive, log_clamp);
    out.loss = loss;
    out.dloss_dscore = scalar_mlp_backward(g, score, dlogit, out.grad);
    return out;
}

TemperedBce tempered_bce(double score, bool positive, double temperature, double log_clamp) {
    if (!(temperature > 0.0)) throw UsageError("BCE temperature must be positive");
    const auto [loss, dz] = clamped_log_loss(score / temperature, positive, log_clamp);
    return {loss, dz / temperature};
}

// ---------------------------------------------------------------------------
// Forward

namespace {

ImageTrace forward_image(const RawDescriptorSet& raw, const SimilarityModel& model) {
    raw.validate();
    ImageTrace t;
    t.input = raw.descriptors.cast<double>();
    const std::size_t count = raw.count();

    if (model.arch.projection) {
        const ProjectionParams& proj = model.projection;
        if (proj.input_dim() != raw.dim()) {
            throw DimensionError("forward: projection expects " + std::to_string(proj.input_dim()) +
                                 "-dim input, got " + std::to_string(raw.dim()));
        }
        const std::size_t d = proj.output_dim();
        t.linear = Matrix(d, count);
        t.ln_out = Matrix(d, count);
        t.out = Matrix(d, count);
        t.norms.resize(count);
        t.degenerate.resize(count);
        Vector input(raw.dim()), linear(d);
        for (std::size_t c = 0; c < count; ++c) {
            for (std::size_t r = 0; r < raw.dim(); ++r) input[r] = t.input(r, c);
            for (std::size_t o = 0; o < d; ++o) linear[o] = proj.bias[o] + dot(proj.weight.row(o), input);
            const Vector normed = layer_norm(linear, proj.ln_gain, proj.ln_bias, proj.ln_eps);
            const NormalizedVector unit = l2_normalize(normed);
            t.linear.set_column(c, linear);
            t.ln_out.set_column(c, normed);
            t.out.set_column(c, unit.values);
            t.norms[c] = unit.norm;
            t.degenerate[c] = unit.degenerate;
        }
    } else {
        const ProjectedDescriptorSet unit = normalize_raw(raw);
        t.out = unit.descriptors;
        t.degenerate = unit.degenerate;
    }

    if (model.arch.dustbin) {
        if (model.arch.descriptor_gain) {
            t.gains = dustbin_gains(t.out, model.dustbin, &t.gain_pre);
        } else {
            t.gains.assign(count, model.scalar_gain);
        }
    }
    return t;
}

// Accumulates parameter grads of the descriptor stage given dL/d(out).
void backward_image(const ImageTrace& t, const Matrix& out_grad, const SimilarityModel& model,
                    SimilarityModel& grads) {
    if (!model.arch.projection) return;
    const ProjectionParams& proj = model.projection;
    ProjectionParams& gproj = grads.projection;
    const std::size_t d = proj.output_dim();
    const std::size_t count = t.out.cols();
    const double n = static_cast<double>(d);

    Vector ln_grad(d), xhat(d), z_grad(d);
    for (std::size_t c = 0; c < count; ++c) {
        // ℓ2 normalization: dy = (dn − n (n·dn)) / ‖y‖; identity when degenerate.
        double proj_on_out = 0.0;
        for (std::size_t o = 0; o < d; ++o) proj_on_out += t.out(o, c) * out_grad(o, c);
        for (std::size_t o = 0; o < d; ++o) {
            ln_grad[o] = t.degenerate[c] ? out_grad(o, c)
                                         : (out_grad(o, c) - t.out(o, c) * proj_on_out) / t.norms[c];
        }

        // Layer norm.
        double mean = 0.0;
        for (std::size_t o = 0; o < d; ++o) mean += t.linear(o, c);
        mean /= n;
        double var = 0.0;
        for (std::size_t o = 0; o < d; ++o) var += (t.linear(o, c) - mean) * (t.linear(o, c) - mean);
        var /= n;
        const double sd = std::sqrt(var + proj.ln_eps);
        for (std::size_t o = 0; o < d; ++o) xhat[o] = sd > 0.0 ? (t.linear(o, c) - mean) / sd : 0.0;
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t o = 0; o < d; ++o) {
            gproj.ln_gain[o] += ln_grad[o] * xhat[o];
            gproj.ln_bias[o] += ln_grad[o];
            const double gx = ln_grad[o] * proj.ln_gain[o];
            mean_g += gx;
            mean_gx += gx * xhat[o];
        }
        mean_g /= n;
        mean_gx /= n;
        for (std::size_t o = 0; o < d; ++o) {
            const double gx = ln_grad[o] * proj.ln_gain[o];
            z_grad[o] = sd > 0.0 ? (gx - mean_g - xhat[o] * mean_gx) / sd : 0.0;
        }

        // Linear layer.
        for (std::size_t o = 0; o < d; ++o) {
            gproj.bias[o] += z_grad[o];
            auto wrow = gproj.weight.row(o);
            for (std::size_t r = 0; r < wrow.size(); ++r) wrow[r] += z_grad[o] * t.input(r, c);
        }
    }
}

// Dustbin head backward: accumulates head grads and adds dL/d(descriptors).
void backward_gains(const ImageTrace& t, std::span<const double> gain_grad, const DustbinHead& head,
                    DustbinHead& ghead, Matrix& desc_grad) {
    const std::size_t hidden = head.w1.rows();
    const std::size_t d = head.w1.cols();
    const std::size_t count = t.out.cols();
    Matrix pre_grad(hidden, count);
    for (std::size_t c = 0; c < count; ++c) ghead.b2 += gain_grad[c];
    for (std::size_t o = 0; o < hidden; ++o) {
        const auto pre = t.gain_pre.row(o);
        auto pg = pre_grad.row(o);
        for (std::size_t c = 0; c < count; ++c) {
            ghead.w2[o] += gain_grad[c] * gelu(pre[c]);
            pg[c] = gain_grad[c] * head.w2[o] * gelu_derivative(pre[c]);
            ghead.b1[o] += pg[c];
        }
        for (std::size_t k = 0; k < d; ++k) {
            const auto in = t.out.row(k);
            auto dg = desc_grad.row(k);
            double acc = 0.0;
            const double w = head.w1(o, k);
            for (std::size_t c = 0; c < count; ++c) {
                acc += pg[c] * in[c];
                dg[c] += w * pg[c];
            }
            ghead.w1(o, k) += acc;
        }
    }
}

}  // namespace

PairTrace forward_pair(const RawDescriptorSet& q, const RawDescriptorSet& x, const SimilarityModel& model,
                       const OtConfig& cfg) {
    cfg.validate();
    PairTrace t;
    t.q = forward_image(q, model);
    t.x = forward_image(x, model);
    if (t.q.out.rows() != t.x.out.rows()) throw DimensionError("forward: descriptor dims differ");
    t.s = matmul_transposed_left(t.q.out, t.x.out);
    const std::size_t mq = t.s.rows();
    const std::size_t mx = t.s.cols();

    if (model.arch.dustbin) {
        t.ot_gain = assemble_augmented(t.s, t.q.gains, t.x.gains, model.omega).assembled();
        t.marginals = dustbin_marginals(mq, mx);
    } else {
        if (mq != mx) throw DimensionError("OT without dustbins needs equal descriptor counts");
        t.ot_gain = t.s;
        t.marginals = uniform_marginals(mq, mx);
    }
    t.plan = sinkhorn_plan(t.ot_gain, t.marginals.rows, t.marginals.cols, cfg, &t.sinkhorn);
    t.refined = model.arch.dustbin ? refined_block(t.plan) : t.plan.p;
    t.votes = select_votes(t.refined);
    t.strengths.reserve(mq + mx);
    for (double v : t.votes.row_votes) t.strengths.push_back(transform_vote(v, model));
    for (double v : t.votes.col_votes) t.strengths.push_back(transform_vote(v, model));
    t.score = std::accumulate(t.strengths.begin(), t.strengths.end(), 0.0);
    return t;
}

void backward_pair(const PairTrace& t, double dloss_dscore, const SimilarityModel& model, const OtConfig& cfg,
                   ModelParams& grads) {
    SimilarityModel& g = grads.similarity;
    if (!(g.arch == model.arch)) throw DimensionError("backward: gradient slot has a different architecture");
    const std::size_t mq = t.s.rows();
    const std::size_t mx = t.s.cols();

    // Votes: each transformed vote enters the score with weight one.
    auto vote_grad = [&](double vote) {
        if (model.arch.vote_function) {
            const double y = model.f(vote);
            return scalar_mlp_backward(model.f, vote, dloss_dscore * y * (1.0 - y), g.f);
        }
        return (vote >= 0.0 && vote <= 1.0) ? dloss_dscore : 0.0;
    };
    Matrix plan_grad(t.plan.p.rows(), t.plan.p.cols());
    for (std::size_t i = 0; i < mq; ++i) plan_grad(i, t.votes.row_argmax[i]) += vote_grad(t.votes.row_votes[i]);
    for (std::size_t j = 0; j < mx; ++j) plan_grad(t.votes.col_argmax[j], j) += vote_grad(t.votes.col_votes[j]);

    const Matrix ot_grad = sinkhorn_plan_backward(t.ot_gain, t.marginals.rows, t.marginals.cols, cfg,
                                                  t.sinkhorn, t.plan.p, plan_grad);

    Matrix s_grad(mq, mx);
    for (std::size_t i = 0; i < mq; ++i)
        for (std::size_t j = 0; j < mx; ++j) s_grad(i, j) = ot_grad(i, j);

    // S = Qᵀ X.
    const std::size_t d = t.q.out.rows();
    Matrix q_grad(d, mq), x_grad(d, mx);
    for (std::size_t k = 0; k < d; ++k) {
        const auto qrow = t.q.out.row(k);
        const auto xrow = t.x.out.row(k);
        auto qg = q_grad.row(k);
        auto xg = x_grad.row(k);
        for (std::size_t i = 0; i < mq; ++i) {
            const auto srow = s_grad.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < mx; ++j) {
                acc += xrow[j] * srow[j];
                xg[j] += qrow[i] * srow[j];
            }
            qg[i] += acc;
        }
    }

    if (model.arch.dustbin) {
        Vector u_grad(mq), v_grad(mx);
        for (std::size_t i = 0; i < mq; ++i) u_grad[i] = ot_grad(i, mx);
        for (std::size_t j = 0; j < mx; ++j) v_grad[j] = ot_grad(mq, j);
        g.omega += ot_grad(mq, mx);
        if (model.arch.descriptor_gain) {
            backward_gains(t.q, u_grad, model.dustbin, g.dustbin, q_grad);
            backward_gains(t.x, v_grad, model.dustbin, g.dustbin, x_grad);
        } else {
            g.scalar_gain += std::accumulate(u_grad.begin(), u_grad.end(), 0.0) +
                             std::accumulate(v_grad.begin(), v_grad.end(), 0.0);
        }
    }

    backward_image(t.q, q_grad, model, g);
    backward_image(t.x, x_grad, model, g);
}

namespace {

struct LossTerm {
    double loss;
    double dscore;
};

LossTerm evaluate_loss(double score, bool positive, const ModelParams& params, const LossConfig& loss_cfg,
                       ModelParams* grads, double weight) {
    if (loss_cfg.warp) {
        if (!params.g) throw UsageError("warped loss requested but the model has no g");
        WarpedBce bce = warped_bce(score, positive, *params.g, loss_cfg.log_clamp);
        if (grads) {
            WarpFunction& gg = *grads->g;
            for (std::size_t k = 0; k < gg.w1.size(); ++k) {
                gg.w1[k] += weight * bce.grad.w1[k];
                gg.b1[k] += weight * bce.grad.b1[k];
                gg.w2[k] += weight * bce.grad.w2[k];
            }
            gg.b2 += weight * bce.grad.b2;
        }
        return {bce.loss, bce.dloss_dscore};
    }
    const TemperedBce bce = tempered_bce(score, positive, loss_cfg.temperature, loss_cfg.log_clamp);
    return {bce.loss, bce.dloss_dscore};
}

}  // namespace

PairLoss pair_loss(const RawDescriptorSet& q, const RawDescriptorSet& x, bool positive,
                   const ModelParams& params, const OtConfig& cfg, const LossConfig& loss_cfg) {
    const PairTrace t = forward_pair(q, x, params.similarity, cfg);
    const LossTerm term = evaluate_loss(t.score, positive, params, loss_cfg, nullptr, 0.0);
    return {term.loss, t.score};
}

PairLoss pair_loss_and_grad(const RawDescriptorSet& q, const RawDescriptorSet& x, bool positive,
                            const ModelParams& params, const OtConfig& cfg, const LossConfig& loss_cfg,
                            ModelParams& grads, double weight) {
    const PairTrace t = forward_pair(q, x, params.similarity, cfg);
    const LossTerm term = evaluate_loss(t.score, positive, params, loss_cfg, &grads, weight);
    if (std::isfinite(term.loss)) backward_pair(t, weight * term.dscore, params.similarity, cfg, grads);
    return {term.loss, t.score};
}

// ---------------------------------------------------------------------------
// Optimizer

OptimState make_optim_state(const ModelParams& params, double lr_peak, std::uint64_t warmup_steps,
                            std::uint64_t total_steps, double weight_decay) {
    if (!(lr_peak >= 0.0)) throw UsageError("learning rate must be non-negative");
    if (total_steps == 0) throw UsageError("total_steps must be positive");
    if (warmup_steps > total_steps) throw UsageError("warmup longer than the schedule");
    OptimState s;
    s.first_moment = zeros_like(params);
    s.second_moment = zeros_like(params);
    s.lr_peak = lr_peak;
    s.warmup_steps = warmup_steps;
    s.total_steps = total_steps;
    s.weight_decay = weight_decay;
    return s;
}

double cosine_lr(std::uint64_t step, const OptimState& state) {
    if (step >= state.total_steps) return 0.0;
    if (step < state.warmup_steps) {
        return state.lr_peak * static_cast<double>(step) / static_cast<double>(state.warmup_steps);
    }
    const double span = static_cast<double>(state.total_steps - state.warmup_steps);
    const double progress = static_cast<double>(step - state.warmup_steps) / span;
    return state.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double adamw_step(ModelParams& params, const ModelParams& grads, OptimState& state) {
    state.step += 1;
    const double lr = cosine_lr(state.step, state);
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);

    std::vector<std::span<const double>> g_spans;
    std::vector<std::span<double>> m_spans, v_spans;
    for_each_tensor(grads, [&](const std::string&, const std::vector<std::size_t>&, std::span<const double> v) {
        g_spans.push_back(v);
    });
    for_each_tensor(state.first_moment,
                    [&](const std::string&, const std::vector<std::size_t>&, std::span<double> v) {
                        m_spans.push_back(v);
                    });
    for_each_tensor(state.second_moment,
                    [&](const std::string&, const std::vector<std::size_t>&, std::span<double> v) {
                        v_spans.push_back(v);
                    });
    std::size_t k = 0;
    for_each_tensor(params, [&](const std::string& name, const std::vector<std::size_t>&, std::span<double> p) {
        if (k >= g_spans.size() || g_spans[k].size() != p.size() || m_spans[k].size() != p.size()) {
            throw DimensionError("adamw: gradient/moment shape mismatch at '" + name + "'");
        }
        const auto g = g_spans[k];
        auto m = m_spans[k];
        auto v = v_spans[k];
        for (std::size_t idx = 0; idx < p.size(); ++idx) {
            m[idx] = state.beta1 * m[idx] + (1.0 - state.beta1) * g[idx];
            v[idx] = state.beta2 * v[idx] + (1.0 - state.beta2) * g[idx] * g[idx];
            const double m_hat = m[idx] / c1;
            const double v_hat = v[idx] / c2;
            p[idx] *= 1.0 - lr * state.weight_decay;
            p[idx] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
        ++k;
    });
    if (k != g_spans.size()) throw DimensionError("adamw: gradient has extra tensors");
    return lr;
}

// ---------------------------------------------------------------------------
// Sampling

PairSampler::PairSampler(PairPool pool, std::size_t m_min, std::size_t m_max, std::uint64_t seed)
    : pool_(std::move(pool)), m_min_(m_min), m_max_(m_max), rng_(seed) {
    if (m_min_ == 0 || m_min_ > m_max_) throw UsageError("descriptor count range must satisfy 1 <= min <= max");
    std::shuffle(pool_.positives.begin(), pool_.positives.end(), rng_);
    std::shuffle(pool_.negatives.begin(), pool_.negatives.end(), rng_);
}

void PairSampler::take(std::vector<TrainPair>& from, std::size_t& cursor, std::size_t count,
                       std::vector<TrainPair>& out) {
    if (cursor + count > from.size()) {
        std::shuffle(from.begin(), from.end(), rng_);
        cursor = 0;
    }
    for (std::size_t k = 0; k < count; ++k) out.push_back(from[cursor++]);
}

Batch PairSampler::sample_batch(std::size_t batch_size) {
    if (batch_size == 0 || batch_size % 2 != 0) {
        throw UsageError("batch size must be a positive even number, got " + std::to_string(batch_size));
    }
    const std::size_t half = batch_size / 2;
    if (pool_.positives.size() < half) {
        throw PoolExhaustedError("pair pool has " + std::to_string(pool_.positives.size()) +
                                 " positives, batch needs " + std::to_string(half));
    }
    if (pool_.negatives.size() < half) {
        throw PoolExhaustedError("pair pool has " + std::to_string(pool_.negatives.size()) +
                                 " negatives, batch needs " + std::to_string(half));
    }
    Batch batch;
    batch.pairs.reserve(batch_size);
    take(pool_.positives, pos_cursor_, half, batch.pairs);
    take(pool_.negatives, neg_cursor_, half, batch.pairs);
    std::uniform_int_distribution<std::size_t> m_dist(m_min_, m_max_);
    batch.descriptor_count = m_dist(rng_);
    return batch;
}

PairPool build_pair_pool(const std::unordered_map<std::string, std::vector<std::string>>& positives,
                         const std::unordered_map<std::string, std::vector<std::string>>& ranked_candidates,
                         const TripletMining& mining, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    // Deterministic anchor order regardless of hash-map iteration.
    std::vector<std::string> anchors;
    anchors.reserve(positives.size());
    for (const auto& [anchor, _] : positives) anchors.push_back(anchor);
    std::sort(anchors.begin(), anchors.end());

    PairPool pool;
    for (const auto& anchor : anchors) {
        std::vector<std::string> pos = positives.at(anchor);
        pos.erase(std::remove(pos.begin(), pos.end(), anchor), pos.end());
        if (pos.empty()) continue;
        std::sort(pos.begin(), pos.end());
        std::shuffle(pos.begin(), pos.end(), rng);

        std::vector<std::string> hard;
        if (const auto it = ranked_candidates.find(anchor); it != ranked_candidates.end()) {
            for (const auto& cand : it->second) {
                if (hard.size() >= mining.hard_negative_depth) break;
                if (cand == anchor || std::find(pos.begin(), pos.end(), cand) != pos.end()) continue;
                hard.push_back(cand);
            }
        }
        if (hard.empty()) continue;
        std::shuffle(hard.begin(), hard.end(), rng);

        const std::size_t n = std::min(mining.positives_per_anchor, pos.size());
        for (std::size_t k = 0; k < n; ++k) {
            pool.positives.push_back({anchor, pos[k], true});
            pool.negatives.push_back({anchor, hard[k % hard.size()], false});
        }
    }
    return pool;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

void add_into(ModelParams& dst, const ModelParams& src) {
    std::vector<std::span<const double>> spans;
    for_each_tensor(src, [&](const std::string&, const std::vector<std::size_t>&, std::span<const double> v) {
        spans.push_back(v);
    });
    std::size_t k = 0;
    for_each_tensor(dst, [&](const std::string&, const std::vector<std::size_t>&, std::span<double> v) {
        const auto s = spans[k++];
        for (std::size_t idx = 0; idx < v.size(); ++idx) v[idx] += s[idx];
    });
}

bool params_finite(const ModelParams& params) {
    bool ok = true;
    for_each_tensor(params, [&](const std::string&, const std::vector<std::size_t>&, std::span<const double> v) {
        ok = ok && all_finite(v);
    });
    return ok;
}

void validate(const TrainConfig& cfg) {
    cfg.ot.validate();
    if (cfg.batch_pairs == 0 || cfg.batch_pairs % 2 != 0) throw UsageError("batch size must be even and positive");
    if (cfg.epochs == 0) throw UsageError("epochs must be at least 1");
    if (cfg.threads == 0) throw UsageError("threads must be at least 1");
    if (cfg.m_min == 0 || cfg.m_min > cfg.m_max) throw UsageError("descriptor count range invalid");
    if (!(cfg.warmup_fraction >= 0.0 && cfg.warmup_fraction <= 1.0)) {
        throw UsageError("warmup fraction must lie in [0, 1]");
    }
    if (cfg.loss.warp != cfg.shape.warp) throw UsageError("loss warp flag and model shape disagree");
}

struct ChunkResult {
    ModelParams grads;
    double loss_sum = 0.0;
    std::string failure;
};

}  // namespace

TrainResult train(const DescriptorLookup& lookup, const PairPool& pool, const TrainConfig& cfg) {
    return train(lookup, pool, cfg, init_model(cfg.shape, cfg.seed));
}

TrainResult train(const DescriptorLookup& lookup, const PairPool& pool, const TrainConfig& cfg,
                  ModelParams initial) {
    validate(cfg);
    PairSampler sampler(pool, cfg.m_min, cfg.m_max, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const std::size_t half = cfg.batch_pairs / 2;
    const std::size_t per_label = std::min(pool.positives.size(), pool.negatives.size());
    if (per_label < half) {
        throw PoolExhaustedError("pair pool too small for a batch of " + std::to_string(cfg.batch_pairs));
    }
    const std::size_t steps_per_epoch = cfg.steps_per_epoch ? cfg.steps_per_epoch : std::max<std::size_t>(1, per_label / half);
    const std::uint64_t total = cfg.epochs * steps_per_epoch;
    const auto warmup = static_cast<std::uint64_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total)));

    TrainResult result;
    result.params = std::move(initial);
    ModelParams& params = result.params;
    OptimState state = make_optim_state(params, cfg.lr_peak, warmup, total, cfg.weight_decay);
    state.beta1 = cfg.beta1;
    state.beta2 = cfg.beta2;
    state.eps = cfg.adam_eps;

    const std::size_t threads = std::min(cfg.threads, cfg.batch_pairs);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const Batch batch = sampler.sample_batch(cfg.batch_pairs);
            std::map<std::string, RawDescriptorSet> selected;
            for (const auto& pair : batch.pairs) {
                for (const auto* id : {&pair.query_id, &pair.candidate_id}) {
                    if (!selected.contains(*id)) selected.emplace(*id, select_top_m(lookup(*id), batch.descriptor_count));
                }
            }

            const double weight = 1.0 / static_cast<double>(batch.pairs.size());
            std::vector<ChunkResult> chunks(threads);
            auto run_chunk = [&](std::size_t c) {
                ChunkResult& out = chunks[c];
                out.grads = zeros_like(params);
                const std::size_t begin = batch.pairs.size() * c / threads;
                const std::size_t end = batch.pairs.size() * (c + 1) / threads;
                try {
                    for (std::size_t k = begin; k < end; ++k) {
                        const TrainPair& pair = batch.pairs[k];
                        const PairLoss pl = pair_loss_and_grad(selected.at(pair.query_id), selected.at(pair.candidate_id),
                                                               pair.positive, params, cfg.ot, cfg.loss, out.grads, weight);
                        if (!std::isfinite(pl.loss)) {
                            std::ostringstream msg;
                            msg << "non-finite loss at epoch " << epoch << " step " << s << " for pair ("
                                << pair.query_id << ", " << pair.candidate_id << ", label "
                                << (pair.positive ? 1 : 0) << "), score " << pl.score << ", M "
                                << batch.descriptor_count;
                            out.failure = msg.str();
                            return;
                        }
                        out.loss_sum += pl.loss;
                    }
                } catch (const std::exception& e) {
                    out.failure = e.what();
                }
            };
            if (threads == 1) {
                run_chunk(0);
            } else {
                std::vector<std::jthread> workers;
                for (std::size_t c = 0; c < threads; ++c) workers.emplace_back(run_chunk, c);
            }

            ModelParams grads = zeros_like(params);
            double loss_sum = 0.0;
            for (const auto& chunk : chunks) {
                if (!chunk.failure.empty()) {
                    if (!cfg.checkpoint_dir.empty()) {
                        std::ofstream dump(cfg.checkpoint_dir / "nan_dump.txt");
                        dump << chunk.failure << '\n';
                        save_checkpoint(params, cfg.checkpoint_dir / "nan_params.elvc");
                    }
                    throw NumericError(chunk.failure);
                }
                add_into(grads, chunk.grads);
                loss_sum += chunk.loss_sum;
            }
            const double lr = adamw_step(params, grads, state);
            if (!params_finite(params)) throw NumericError("parameters became non-finite at step " + std::to_string(state.step));
            const double mean_loss = loss_sum * weight;
            result.curve.push_back({state.step, lr, mean_loss});
            epoch_loss += mean_loss;
        }
        result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
        if (!cfg.checkpoint_dir.empty()) {
            save_checkpoint(params, cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1) + ".elvc"));
        }
    }
    return result;
}

}  // namespace elvis
