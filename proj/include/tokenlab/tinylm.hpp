#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenlab/capture.hpp"
#include "tokenlab/errors.hpp"
#include "tokenlab/objective.hpp"
#include "tokenlab/rng.hpp"

namespace tokenlab::tinylm {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 0;
    int n_layers = 0;
    int n_heads = 0;
    int max_seq_len = 0;
    int probe_layer = -1;  // -1 resolves to the middle layer

    int probe() const { return probe_layer < 0 ? n_layers / 2 : probe_layer; }
    int head_dim() const { return d_model / n_heads; }
    int mlp_dim() const { return 4 * d_model; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_seq_len < 1) {
            throw config_error("model config: all dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw config_error("model config: d_model must be divisible by n_heads");
        }
        if (probe() < 0 || probe() >= n_layers) {
            throw config_error("model config: probe_layer out of range");
        }
    }
};

struct ParamLayout {
    struct Entry {
        std::string name;
        std::size_t offset = 0;
        std::size_t size = 0;
    };
    std::vector<Entry> entries;
    std::size_t total = 0;

    std::size_t add(std::string name, std::size_t n) {
        entries.push_back({std::move(name), total, n});
        total += n;
        return entries.back().offset;
    }
    const Entry& find(std::string_view name) const {
        for (const auto& e : entries) {
            if (e.name == name) return e;
        }
        throw input_error("parameter layout: unknown entry " + std::string(name));
    }
};

inline std::shared_ptr<const ParamLayout> make_layout(const ModelConfig& cfg) {
    auto layout = std::make_shared<ParamLayout>();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto m = static_cast<std::size_t>(cfg.mlp_dim());
    layout->add("tok_emb", static_cast<std::size_t>(cfg.vocab_size) * d);
    layout->add("pos_emb", static_cast<std::size_t>(cfg.max_seq_len) * d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        layout->add(p + "ln1.gain", d);
        layout->add(p + "ln1.bias", d);
        layout->add(p + "attn.wq", d * d);
        layout->add(p + "attn.bq", d);
        layout->add(p + "attn.wk", d * d);
        layout->add(p + "attn.bk", d);
        layout->add(p + "attn.wv", d * d);
        layout->add(p + "attn.bv", d);
        layout->add(p + "attn.wo", d * d);
        layout->add(p + "attn.bo", d);
        layout->add(p + "ln2.gain", d);
        layout->add(p + "ln2.bias", d);
        layout->add(p + "mlp.w1", m * d);
        layout->add(p + "mlp.b1", m);
        layout->add(p + "mlp.w2", d * m);
        layout->add(p + "mlp.b2", d);
    }
    layout->add("final_ln.gain", d);
    layout->add("final_ln.bias", d);
    layout->add("head.w", static_cast<std::size_t>(cfg.vocab_size) * d);
    layout->add("head.b", static_cast<std::size_t>(cfg.vocab_size));
    return layout;
}

class Parameters {
public:
    explicit Parameters(const ModelConfig& cfg)
        : config(cfg), layout(make_layout(cfg)), values(layout->total, 0.0) {
        cfg.validate();
    }

    ModelConfig config;
    std::shared_ptr<const ParamLayout> layout;
    std::vector<double> values;

    std::span<double> view(std::string_view name) {
        const auto& e = layout->find(name);
        return {values.data() + e.offset, e.size};
    }
    std::span<const double> view(std::string_view name) const {
        const auto& e = layout->find(name);
        return {values.data() + e.offset, e.size};
    }
};

using GradientVector = std::vector<double>;

// Scaled-normal initialization: every weight matrix is N(0, 0.02); the two
// residual-exit projections per block (attn.wo, mlp.w2) are scaled down by
// 1/sqrt(2 * n_layers); normalization gains start at 1, all biases at 0.
inline Parameters init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Parameters params(cfg);
    RngStream rng = RngStream::derive(seed, {0x7061726d73ULL});
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    for (const auto& entry : params.layout->entries) {
        std::span<double> dst{params.values.data() + entry.offset, entry.size};
        const auto& n = entry.name;
        const bool is_gain = n.ends_with(".gain");
        const bool is_bias = n.ends_with(".bias") || n.ends_with(".bq") || n.ends_with(".bk") ||
                             n.ends_with(".bv") || n.ends_with(".bo") || n.ends_with(".b1") ||
                             n.ends_with(".b2") || n == "head.b";
        const bool is_resid_proj = n.ends_with("attn.wo") || n.ends_with("mlp.w2");
        if (is_gain) {
            std::fill(dst.begin(), dst.end(), 1.0);
        } else if (is_bias) {
            std::fill(dst.begin(), dst.end(), 0.0);
        } else {
            const double std_dev = is_resid_proj ? resid_std : base_std;
            for (auto& v : dst) v = std_dev * rng.next_normal();
        }
    }
    return params;
}

struct LayerCache {
    std::vector<double> ln1_xhat, ln1_out;  // L x d
    std::vector<double> ln1_rstd;           // L
    std::vector<double> q, k, v;            // L x d
    std::vector<double> att_probs;          // heads x L x L, zero above diagonal
    std::vector<double> ctx;                // L x d
    std::vector<double> ln2_xhat, ln2_out;  // L x d
    std::vector<double> ln2_rstd;           // L
    std::vector<double> mlp_pre, mlp_act;   // L x 4d
};

struct ForwardTrace {
    int seq_len = 0;
    std::vector<int> tokens;
    std::vector<double> embed;  // L x d
    std::vector<LayerCache> layers;
    std::vector<double> final_xhat;  // L x d
    std::vector<double> final_rstd;  // L
    std::vector<double> logits;      // L x V
    AttentionCapture capture;

    std::span<const double> logits_row(int pos) const {
        const auto v = logits.size() / static_cast<std::size_t>(seq_len);
        return {logits.data() + static_cast<std::size_t>(pos) * v, v};
    }
};

namespace detail {

inline constexpr double kLnEps = 1e-5;

inline void matvec(std::span<const double> w, std::span<const double> x, std::span<double> y) {
    const std::size_t out = y.size();
    const std::size_t in = x.size();
    for (std::size_t o = 0; o < out; ++o) {
        const double* row = w.data() + o * in;
        double acc = 0.0;
        for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = acc;
    }
}

// dx += W^T dy
inline void matvec_transpose_acc(std::span<const double> w, std::span<const double> dy,
                                 std::span<double> dx) {
    const std::size_t out = dy.size();
    const std::size_t in = dx.size();
    for (std::size_t o = 0; o < out; ++o) {
        const double g = dy[o];
        if (g == 0.0) continue;
        const double* row = w.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) dx[i] += g * row[i];
    }
}

// dW += dy x^T, db += dy
inline void outer_acc(std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                      std::span<double> db) {
    const std::size_t out = dy.size();
    const std::size_t in = x.size();
    for (std::size_t o = 0; o < out; ++o) {
        const double g = dy[o];
        db[o] += g;
        if (g == 0.0) continue;
        double* row = dw.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) row[i] += g * x[i];
    }
}

inline void layer_norm(std::span<const double> x, std::span<const double> gain,
                       std::span<const double> bias, std::span<double> xhat, std::span<double> out,
                       double& rstd_out) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd_out = rstd;
}

inline void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                                double rstd, std::span<const double> gain, std::span<double> dgain,
                                std::span<double> dbias, std::span<double> dx_acc) {
    const std::size_t d = dy.size();
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        const double dxhat = dy[i] * gain[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat[i];
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double dxhat = dy[i] * gain[i];
        dx_acc[i] += rstd * (dxhat - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;
    return cdf + x * pdf;
}

inline void softmax_inplace(std::span<double> v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double sum = 0.0;
    for (auto& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (auto& x : v) x /= sum;
}

// Per-layer key/value history. Doubles as the incremental-decoding cache and
// the working state of the tracing forward pass, so both run identical
// per-position arithmetic.
struct RunState {
    explicit RunState(const ModelConfig& cfg)
        : kcache(static_cast<std::size_t>(cfg.n_layers)),
          vcache(static_cast<std::size_t>(cfg.n_layers)) {}
    std::vector<std::vector<double>> kcache, vcache;  // [layer], pos-major, L x d
};

struct CaptureSpec {
    bool enabled = false;
    bool all_layers = false;
    int from_position = 0;
};

// Runs one position through the model: appends this position's k/v to the
// state, optionally records backward caches into `trace`, optionally appends
// head-averaged attention rows to `capture`, and writes the logits row.
inline void run_position(const Parameters& params, int token, int pos, RunState& state,
                         ForwardTrace* trace, const CaptureSpec& cap, AttentionCapture* capture,
                         std::span<double> logits_out) {
    const auto& cfg = params.config;
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t mlp = static_cast<std::size_t>(cfg.mlp_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t n_ctx = static_cast<std::size_t>(pos) + 1;
    const std::size_t poff = static_cast<std::size_t>(pos) * d;

    std::vector<double> x(d);
    {
        const auto tok_emb = params.view("tok_emb");
        const auto pos_emb = params.view("pos_emb");
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = tok_emb[static_cast<std::size_t>(token) * d + i] +
                   pos_emb[static_cast<std::size_t>(pos) * d + i];
        }
        if (trace) std::copy(x.begin(), x.end(), trace->embed.begin() + poff);
    }

    std::vector<double> norm_xhat(d), norm_out(d), q(d), probs(n_ctx), ctx(d), attn_out(d);
    std::vector<double> mlp_pre(mlp), mlp_act(mlp), mlp_out(d);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pfx = "layer" + std::to_string(l) + ".";
        auto& kc = state.kcache[static_cast<std::size_t>(l)];
        auto& vc = state.vcache[static_cast<std::size_t>(l)];
        kc.resize(n_ctx * d);
        vc.resize(n_ctx * d);
        LayerCache* lc = trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;

        double rstd = 0.0;
        layer_norm(x, params.view(pfx + "ln1.gain"), params.view(pfx + "ln1.bias"), norm_xhat,
                   norm_out, rstd);
        if (lc) {
            std::copy(norm_xhat.begin(), norm_xhat.end(), lc->ln1_xhat.begin() + poff);
            std::copy(norm_out.begin(), norm_out.end(), lc->ln1_out.begin() + poff);
            lc->ln1_rstd[static_cast<std::size_t>(pos)] = rstd;
        }

        matvec(params.view(pfx + "attn.wq"), norm_out, q);
        std::span<double> k{kc.data() + poff, d};
        std::span<double> v{vc.data() + poff, d};
        matvec(params.view(pfx + "attn.wk"), norm_out, k);
        matvec(params.view(pfx + "attn.wv"), norm_out, v);
        {
            const auto bq = params.view(pfx + "attn.bq");
            const auto bk = params.view(pfx + "attn.bk");
            const auto bv = params.view(pfx + "attn.bv");
            for (std::size_t i = 0; i < d; ++i) {
                q[i] += bq[i];
                k[i] += bk[i];
                v[i] += bv[i];
            }
        }
        if (lc) std::copy(q.begin(), q.end(), lc->q.begin() + poff);

        const bool want_row = capture && cap.enabled && pos >= cap.from_position &&
                              (cap.all_layers || l == cfg.probe());
        std::vector<double> avg_row;
        if (want_row) avg_row.assign(n_ctx, 0.0);

        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t hoff = h * hd;
            for (std::size_t j = 0; j < n_ctx; ++j) {
                const double* kj = kc.data() + j * d + hoff;
                double acc = 0.0;
                for (std::size_t i = 0; i < hd; ++i) acc += q[hoff + i] * kj[i];
                probs[j] = acc * scale;
            }
            softmax_inplace({probs.data(), n_ctx});
            if (lc) {
                const auto L = static_cast<std::size_t>(trace->seq_len);
                std::copy_n(probs.data(), n_ctx,
                            lc->att_probs.begin() + (h * L + static_cast<std::size_t>(pos)) * L);
            }
            if (want_row) {
                for (std::size_t j = 0; j < n_ctx; ++j) avg_row[j] += probs[j];
            }
            for (std::size_t j = 0; j < n_ctx; ++j) {
                const double pj = probs[j];
                const double* vj = vc.data() + j * d + hoff;
                for (std::size_t i = 0; i < hd; ++i) ctx[hoff + i] += pj * vj[i];
            }
        }
        if (want_row) {
            for (auto& a : avg_row) a /= static_cast<double>(heads);
            capture->layer_rows[l].push_back(std::move(avg_row));
        }
        if (lc) std::copy(ctx.begin(), ctx.end(), lc->ctx.begin() + poff);

        matvec(params.view(pfx + "attn.wo"), ctx, attn_out);
        {
            const auto bo = params.view(pfx + "attn.bo");
            for (std::size_t i = 0; i < d; ++i) x[i] += attn_out[i] + bo[i];
        }

        layer_norm(x, params.view(pfx + "ln2.gain"), params.view(pfx + "ln2.bias"), norm_xhat,
                   norm_out, rstd);
        if (lc) {
            std::copy(norm_xhat.begin(), norm_xhat.end(), lc->ln2_xhat.begin() + poff);
            std::copy(norm_out.begin(), norm_out.end(), lc->ln2_out.begin() + poff);
            lc->ln2_rstd[static_cast<std::size_t>(pos)] = rstd;
        }

        matvec(params.view(pfx + "mlp.w1"), norm_out, mlp_pre);
        {
            const auto b1 = params.view(pfx + "mlp.b1");
            for (std::size_t i = 0; i < mlp; ++i) {
                mlp_pre[i] += b1[i];
                mlp_act[i] = gelu(mlp_pre[i]);
            }
        }
        matvec(params.view(pfx + "mlp.w2"), mlp_act, mlp_out);
        {
            const auto b2 = params.view(pfx + "mlp.b2");
            for (std::size_t i = 0; i < d; ++i) x[i] += mlp_out[i] + b2[i];
        }
        if (lc) {
            const std::size_t moff = static_cast<std::size_t>(pos) * mlp;
            std::copy(mlp_pre.begin(), mlp_pre.end(), lc->mlp_pre.begin() + moff);
            std::copy(mlp_act.begin(), mlp_act.end(), lc->mlp_act.begin() + moff);
        }
    }

    double rstd = 0.0;
    layer_norm(x, params.view("final_ln.gain"), params.view("final_ln.bias"), norm_xhat, norm_out,
               rstd);
    if (trace) {
        std::copy(norm_xhat.begin(), norm_xhat.end(), trace->final_xhat.begin() + poff);
        trace->final_rstd[static_cast<std::size_t>(pos)] = rstd;
    }
    matvec(params.view("head.w"), norm_out, logits_out);
    {
        const auto hb = params.view("head.b");
        for (std::size_t i = 0; i < logits_out.size(); ++i) logits_out[i] += hb[i];
    }
}

inline void validate_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) {
        throw input_error("tinylm: empty input");
    }
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        throw input_error("tinylm: input longer than max_seq_len");
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw input_error("tinylm: token id out of range");
        }
    }
}

}  // namespace detail

inline ForwardTrace forward(const Parameters& params, std::span<const int> tokens,
                            bool capture_all_layers = false) {
    const auto& cfg = params.config;
    detail::validate_tokens(cfg, tokens);
    const std::size_t L = tokens.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t mlp = static_cast<std::size_t>(cfg.mlp_dim());
    const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);

    ForwardTrace trace;
    trace.seq_len = static_cast<int>(L);
    trace.tokens.assign(tokens.begin(), tokens.end());
    trace.embed.resize(L * d);
    trace.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& lc : trace.layers) {
        lc.ln1_xhat.resize(L * d);
        lc.ln1_out.resize(L * d);
        lc.ln1_rstd.resize(L);
        lc.q.resize(L * d);
        lc.att_probs.assign(heads * L * L, 0.0);
        lc.ctx.resize(L * d);
        lc.ln2_xhat.resize(L * d);
        lc.ln2_out.resize(L * d);
        lc.ln2_rstd.resize(L);
        lc.mlp_pre.resize(L * mlp);
        lc.mlp_act.resize(L * mlp);
    }
    trace.final_xhat.resize(L * d);
    trace.final_rstd.resize(L);
    trace.logits.resize(L * static_cast<std::size_t>(cfg.vocab_size));
    trace.capture.first_position = 0;

    detail::RunState state(cfg);
    detail::CaptureSpec cap{true, capture_all_layers, 0};
    for (std::size_t pos = 0; pos < L; ++pos) {
        std::span<double> row{trace.logits.data() + pos * static_cast<std::size_t>(cfg.vocab_size),
                              static_cast<std::size_t>(cfg.vocab_size)};
        detail::run_position(params, tokens[pos], static_cast<int>(pos), state, &trace, cap,
                             &trace.capture, row);
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        trace.layers[static_cast<std::size_t>(l)].k = std::move(state.kcache[static_cast<std::size_t>(l)]);
        trace.layers[static_cast<std::size_t>(l)].v = std::move(state.vcache[static_cast<std::size_t>(l)]);
    }
    return trace;
}

// Accumulates d(scalar)/d(params) into `grad`, given d(scalar)/d(logits) as a
// row-major L x V buffer matching trace.logits. Exact reverse-mode over the
// recorded forward trace.
inline void backward_accumulate(const Parameters& params, const ForwardTrace& trace,
                                std::span<const double> dlogits, GradientVector& grad) {
    const auto& cfg = params.config;
    const std::size_t L = static_cast<std::size_t>(trace.seq_len);
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
    const std::size_t mlp = static_cast<std::size_t>(cfg.mlp_dim());
    const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (grad.size() != params.values.size()) {
        throw input_error("backward: gradient buffer size mismatch");
    }
    if (dlogits.size() != L * V) {
        throw input_error("backward: dlogits size mismatch");
    }

    auto gview = [&](const std::string& name) -> std::span<double> {
        const auto& e = params.layout->find(name);
        return {grad.data() + e.offset, e.size};
    };

    // Gradient of the residual stream at the current depth, per position.
    std::vector<double> dx(L * d, 0.0);

    {
        const auto head_w = params.view("head.w");
        const auto gain = params.view("final_ln.gain");
        const auto bias = params.view("final_ln.bias");
        auto dhead_w = gview("head.w");
        auto dhead_b = gview("head.b");
        auto dgain = gview("final_ln.gain");
        auto dbias = gview("final_ln.bias");
        std::vector<double> dnorm(d), norm_out(d);
        for (std::size_t pos = 0; pos < L; ++pos) {
            std::span<const double> dl{dlogits.data() + pos * V, V};
            for (std::size_t i = 0; i < d; ++i) {
                norm_out[i] = gain[i] * trace.final_xhat[pos * d + i] + bias[i];
            }
            detail::outer_acc(dl, norm_out, dhead_w, dhead_b);
            std::fill(dnorm.begin(), dnorm.end(), 0.0);
            detail::matvec_transpose_acc(head_w, dl, dnorm);
            detail::layer_norm_backward(dnorm, {trace.final_xhat.data() + pos * d, d},
                                        trace.final_rstd[pos], gain, dgain, dbias,
                                        {dx.data() + pos * d, d});
        }
    }

    std::vector<double> dnorm_out(d), dctx(d), dq(d), da(d), dmlp_act(mlp), dmlp_pre(mlp);
    std::vector<double> dscores;
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const std::string pfx = "layer" + std::to_string(l) + ".";
        const auto& lc = trace.layers[static_cast<std::size_t>(l)];
        const auto w2 = params.view(pfx + "mlp.w2");
        const auto w1 = params.view(pfx + "mlp.w1");
        const auto wo = params.view(pfx + "attn.wo");
        const auto wq = params.view(pfx + "attn.wq");
        const auto wk = params.view(pfx + "attn.wk");
        const auto wv = params.view(pfx + "attn.wv");
        auto dw2 = gview(pfx + "mlp.w2");
        auto db2 = gview(pfx + "mlp.b2");
        auto dw1 = gview(pfx + "mlp.w1");
        auto db1 = gview(pfx + "mlp.b1");
        auto dwo = gview(pfx + "attn.wo");
        auto dbo = gview(pfx + "attn.bo");
        auto dwq = gview(pfx + "attn.wq");
        auto dbq = gview(pfx + "attn.bq");
        auto dwk = gview(pfx + "attn.wk");
        auto dbk = gview(pfx + "attn.bk");
        auto dwv = gview(pfx + "attn.wv");
        auto dbv = gview(pfx + "attn.bv");

        // MLP sublayer; the residual add leaves dx flowing through unchanged.
        for (std::size_t pos = 0; pos < L; ++pos) {
            std::span<double> dxp{dx.data() + pos * d, d};
            detail::outer_acc(dxp, {lc.mlp_act.data() + pos * mlp, mlp}, dw2, db2);
            std::fill(dmlp_act.begin(), dmlp_act.end(), 0.0);
            detail::matvec_transpose_acc(w2, dxp, dmlp_act);
            for (std::size_t i = 0; i < mlp; ++i) {
                dmlp_pre[i] = dmlp_act[i] * detail::gelu_grad(lc.mlp_pre[pos * mlp + i]);
            }
            detail::outer_acc(dmlp_pre, {lc.ln2_out.data() + pos * d, d}, dw1, db1);
            std::fill(dnorm_out.begin(), dnorm_out.end(), 0.0);
            detail::matvec_transpose_acc(w1, dmlp_pre, dnorm_out);
            detail::layer_norm_backward(dnorm_out, {lc.ln2_xhat.data() + pos * d, d},
                                        lc.ln2_rstd[pos], params.view(pfx + "ln2.gain"),
                                        gview(pfx + "ln2.gain"), gview(pfx + "ln2.bias"), dxp);
        }

        // Attention sublayer. dk/dv accumulate contributions across query
        // positions before being pushed through the k/v projections.
        std::vector<double> dk(L * d, 0.0), dv(L * d, 0.0), dln1_out(L * d, 0.0);
        for (std::size_t pos = 0; pos < L; ++pos) {
            std::span<double> dxp{dx.data() + pos * d, d};
            std::copy(dxp.begin(), dxp.end(), da.begin());
            detail::outer_acc(da, {lc.ctx.data() + pos * d, d}, dwo, dbo);
            std::fill(dctx.begin(), dctx.end(), 0.0);
            detail::matvec_transpose_acc(wo, da, dctx);

            const std::size_t n_ctx = pos + 1;
            std::fill(dq.begin(), dq.end(), 0.0);
            dscores.assign(n_ctx, 0.0);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t hoff = h * hd;
                const double* probs = lc.att_probs.data() + (h * L + pos) * L;
                const double* qrow = lc.q.data() + pos * d + hoff;
                double dot = 0.0;
                for (std::size_t j = 0; j < n_ctx; ++j) {
                    const double* vj = lc.v.data() + j * d + hoff;
                    double dp = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) dp += dctx[hoff + i] * vj[i];
                    dscores[j] = dp;
                    dot += dp * probs[j];
                    double* dvj = dv.data() + j * d + hoff;
                    const double pj = probs[j];
                    for (std::size_t i = 0; i < hd; ++i) dvj[i] += pj * dctx[hoff + i];
                }
                for (std::size_t j = 0; j < n_ctx; ++j) {
                    const double ds = probs[j] * (dscores[j] - dot) * scale;
                    if (ds == 0.0) continue;
                    const double* kj = lc.k.data() + j * d + hoff;
                    double* dkj = dk.data() + j * d + hoff;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dq[hoff + i] += ds * kj[i];
                        dkj[i] += ds * qrow[i];
                    }
                }
            }
            detail::outer_acc(dq, {lc.ln1_out.data() + pos * d, d}, dwq, dbq);
            detail::matvec_transpose_acc(wq, dq, {dln1_out.data() + pos * d, d});
        }
        for (std::size_t pos = 0; pos < L; ++pos) {
            detail::outer_acc({dk.data() + pos * d, d}, {lc.ln1_out.data() + pos * d, d}, dwk, dbk);
            detail::matvec_transpose_acc(wk, {dk.data() + pos * d, d},
                                         {dln1_out.data() + pos * d, d});
            detail::outer_acc({dv.data() + pos * d, d}, {lc.ln1_out.data() + pos * d, d}, dwv, dbv);
            detail::matvec_transpose_acc(wv, {dv.data() + pos * d, d},
                                         {dln1_out.data() + pos * d, d});
        }
        for (std::size_t pos = 0; pos < L; ++pos) {
            detail::layer_norm_backward({dln1_out.data() + pos * d, d},
                                        {lc.ln1_xhat.data() + pos * d, d}, lc.ln1_rstd[pos],
                                        params.view(pfx + "ln1.gain"), gview(pfx + "ln1.gain"),
                                        gview(pfx + "ln1.bias"), {dx.data() + pos * d, d});
        }
    }

    {
        auto dtok = gview("tok_emb");
        auto dpos = gview("pos_emb");
        for (std::size_t pos = 0; pos < L; ++pos) {
            const auto tok = static_cast<std::size_t>(trace.tokens[pos]);
            for (std::size_t i = 0; i < d; ++i) {
                dtok[tok * d + i] += dx[pos * d + i];
                dpos[pos * d + i] += dx[pos * d + i];
            }
        }
    }
}

// One rollout response prepared for a gradient step: the full token sequence,
// sampling-time ("old") response-token log-probs, and per-token advantages
// and weights.
struct RolloutItem {
    std::vector<int> tokens;  // prompt followed by response
    int prompt_len = 0;
    std::vector<double> old_logp;
    std::vector<double> advantages;
    std::vector<double> weights;

    int response_len() const { return static_cast<int>(tokens.size()) - prompt_len; }
};

struct LossGradResult {
    double loss = 0.0;
    GradientVector grad;
    std::vector<std::vector<double>> per_token_loss;
    double denom = 0.0;
};

// Weighted DAPO-style clipped objective over a batch of rollouts with its
// exact parameter gradient. Batch-level denominators: selected-mean divides
// by the total weight over the batch, the all-token modes divide by the total
// number of valid response tokens, so disjoint masks add up to the full-token
// objective.
inline LossGradResult loss_grad(const Parameters& params, std::span<const RolloutItem> batch,
                                const objective::LossSpec& spec) {
    const auto& cfg = params.config;
    double denom = 0.0;
    std::size_t total_tokens = 0;
    for (const auto& item : batch) {
        if (item.prompt_len < 1 || item.prompt_len > static_cast<int>(item.tokens.size())) {
            throw input_error("loss_grad: bad prompt length");
        }
        const auto T = static_cast<std::size_t>(item.response_len());
        if (item.old_logp.size() != T || item.advantages.size() != T || item.weights.size() != T) {
            throw input_error("loss_grad: per-token arrays do not match response length");
        }
        for (double w : item.weights) {
            if (w < 0.0) throw input_error("loss_grad: negative token weight");
            denom += w;
        }
        total_tokens += T;
    }
    if (spec.normalization == objective::Normalization::selected_mean) {
        if (denom <= 0.0) {
            throw degenerate_error("loss_grad: selected-mean with all-zero weights");
        }
    } else {
        if (total_tokens == 0) {
            throw degenerate_error("loss_grad: batch has no response tokens");
        }
        denom = static_cast<double>(total_tokens);
    }

    LossGradResult result;
    result.denom = denom;
    result.grad.assign(params.values.size(), 0.0);
    result.per_token_loss.reserve(batch.size());

    for (const auto& item : batch) {
        const int T = item.response_len();
        if (T == 0) {
            result.per_token_loss.emplace_back();
            continue;
        }
        const auto trace = forward(params, item.tokens);
        const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
        std::vector<double> dlogits(static_cast<std::size_t>(trace.seq_len) * V, 0.0);
        std::vector<double> token_losses(static_cast<std::size_t>(T));
        std::vector<double> prob(V);
        for (int t = 0; t < T; ++t) {
            const int pos = item.prompt_len + t - 1;  // position whose output predicts token t
            const int target = item.tokens[static_cast<std::size_t>(item.prompt_len + t)];
            const auto row = trace.logits_row(pos);
            std::copy(row.begin(), row.end(), prob.begin());
            detail::softmax_inplace(prob);
            const double new_logp = std::log(prob[static_cast<std::size_t>(target)]);
            const double ratio = std::exp(new_logp - item.old_logp[static_cast<std::size_t>(t)]);
            const double adv = item.advantages[static_cast<std::size_t>(t)];
            token_losses[static_cast<std::size_t>(t)] =
                objective::per_token_clip_loss(ratio, adv, spec);
            const double w = item.weights[static_cast<std::size_t>(t)];
            result.loss += w * token_losses[static_cast<std::size_t>(t)] / denom;
            // dl/dlogp = dl/dr * r; then through log-softmax.
            const double coeff =
                (w / denom) * objective::per_token_clip_loss_dratio(ratio, adv, spec) * ratio;
            if (coeff != 0.0) {
                double* drow = dlogits.data() + static_cast<std::size_t>(pos) * V;
                for (std::size_t i = 0; i < V; ++i) drow[i] -= coeff * prob[i];
                drow[static_cast<std::size_t>(target)] += coeff;
            }
        }
        backward_accumulate(params, trace, dlogits, result.grad);
        result.per_token_loss.push_back(std::move(token_losses));
    }
    return result;
}

struct SamplingConfig {
    double temperature = 1.0;
    double top_p = 0.95;
    int max_new = 64;
    int stop_token = -1;  // -1 disables the stop condition
    bool greedy = false;
};

struct SampleResult {
    std::vector<int> tokens;                      // response tokens only
    std::vector<double> logp;                     // under the truncated-renormalized distribution
    std::vector<double> logp_full;                // under the untempered full softmax
    std::vector<std::vector<double>> pred_dists;  // untempered softmax row per response token
    AttentionCapture capture;                     // probe layer, prompt-final position onward
};

// Autoregressive sampling with temperature scaling and nucleus truncation.
// The capture starts at the prompt-final position so every generated token's
// decision row is available.
inline SampleResult sample(const Parameters& params, std::span<const int> prompt,
                           const SamplingConfig& sampling, RngStream& rng) {
    const auto& cfg = params.config;
    if (prompt.empty()) {
        throw input_error("sample: empty prompt");
    }
    detail::validate_tokens(cfg, prompt);
    if (!sampling.greedy && !(sampling.temperature > 0.0)) {
        throw input_error("sample: temperature must be positive");
    }
    if (!(sampling.top_p > 0.0) || sampling.top_p > 1.0) {
        throw input_error("sample: top_p must be in (0, 1]");
    }

    SampleResult result;
    result.capture.first_position = static_cast<int>(prompt.size()) - 1;

    detail::RunState state(cfg);
    detail::CaptureSpec cap{true, false, static_cast<int>(prompt.size()) - 1};
    const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
    std::vector<double> logits(V), full_dist(V), sampling_dist(V);
    std::vector<int> order(V);

    // Prefill; only the final prompt position's logits are needed.
    for (std::size_t pos = 0; pos < prompt.size(); ++pos) {
        detail::run_position(params, prompt[pos], static_cast<int>(pos), state, nullptr, cap,
                             &result.capture, logits);
    }

    int pos = static_cast<int>(prompt.size()) - 1;
    const int budget = std::min(sampling.max_new, cfg.max_seq_len - static_cast<int>(prompt.size()));
    for (int step = 0; step < budget; ++step) {
        std::copy(logits.begin(), logits.end(), full_dist.begin());
        detail::softmax_inplace(full_dist);

        int chosen;
        double chosen_logp;
        if (sampling.greedy) {
            chosen = static_cast<int>(std::distance(
                full_dist.begin(), std::max_element(full_dist.begin(), full_dist.end())));
            chosen_logp = 0.0;  // degenerate one-hot distribution in the limit
        } else {
            for (std::size_t i = 0; i < V; ++i) sampling_dist[i] = logits[i] / sampling.temperature;
            detail::softmax_inplace(sampling_dist);
            // Nucleus set: smallest top-probability prefix with mass >= top_p.
            std::size_t cut = V;
            double mass = 1.0;
            std::iota(order.begin(), order.end(), 0);
            if (sampling.top_p < 1.0) {
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    return sampling_dist[static_cast<std::size_t>(a)] >
                           sampling_dist[static_cast<std::size_t>(b)];
                });
                mass = 0.0;
                for (std::size_t i = 0; i < V; ++i) {
                    mass += sampling_dist[static_cast<std::size_t>(order[i])];
                    if (mass >= sampling.top_p) {
                        cut = i + 1;
                        break;
                    }
                }
                if (cut == V) mass = 1.0;
            }
            const double u = rng.next_uniform() * mass;
            double acc = 0.0;
            std::size_t pick = cut - 1;
            for (std::size_t i = 0; i < cut; ++i) {
                acc += sampling_dist[static_cast<std::size_t>(order[i])];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
            chosen = order[pick];
            chosen_logp = std::log(sampling_dist[static_cast<std::size_t>(chosen)] / mass);
        }

        result.tokens.push_back(chosen);
        result.logp.push_back(sampling.greedy ? 0.0 : chosen_logp);
        result.logp_full.push_back(std::log(full_dist[static_cast<std::size_t>(chosen)]));
        result.pred_dists.push_back(full_dist);
        if (chosen == sampling.stop_token || step + 1 == budget) {
            break;
        }
        ++pos;
        detail::run_position(params, chosen, pos, state, nullptr, cap, &result.capture, logits);
    }
    return result;
}

}  // namespace tokenlab::tinylm
