#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenlab/config.hpp"
#include "tokenlab/entropy.hpp"
#include "tokenlab/errors.hpp"
#include "tokenlab/objective.hpp"
#include "tokenlab/probes.hpp"
#include "tokenlab/reweight.hpp"
#include "tokenlab/rng.hpp"
#include "tokenlab/selection.hpp"
#include "tokenlab/tasks.hpp"
#include "tokenlab/tinylm.hpp"

namespace tokenlab::harness {

// Stream-id tags for deriving independent rng streams under one run seed.
namespace stream {
inline constexpr std::uint64_t data = 1;
inline constexpr std::uint64_t rollout = 2;
inline constexpr std::uint64_t mask = 3;
inline constexpr std::uint64_t probe_mask = 4;
inline constexpr std::uint64_t val_data = 5;
inline constexpr std::uint64_t val_rollout = 6;
inline constexpr std::uint64_t sparse = 7;
inline constexpr std::uint64_t probe_data = 8;
inline constexpr std::uint64_t probe_rollout = 9;
}  // namespace stream

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsRow {
    int step = 0;
    double mean_reward = 0.0;
    double mean_response_len = 0.0;
    double loss = std::numeric_limits<double>::quiet_NaN();
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
    probes::GroupStats entropy_full, entropy_anchor, entropy_explorer;
    int excluded_responses = 0;
    std::optional<probes::GeometryReport> geo_anchor, geo_explorer, geo_random;
    bool collapse_short = false;
    bool collapse_instability = false;
    bool collapse_degeneration = false;
    double w_low = std::numeric_limits<double>::quiet_NaN();
    double w_high = std::numeric_limits<double>::quiet_NaN();
    double val_mean_at_k = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string geo_fields(const std::optional<probes::GeometryReport>& geo) {
    if (!geo) return "nan,nan,nan";
    const double cosine = geo->cosine ? *geo->cosine : std::numeric_limits<double>::quiet_NaN();
    return fmt(geo->norm_ratio) + "," + fmt(cosine) + "," + fmt(geo->proj_ratio);
}

}  // namespace detail

inline std::string metrics_header() {
    return "step,mean_reward,mean_response_len,loss,grad_norm,"
           "entropy_full_mean,entropy_full_std,entropy_anchor_mean,entropy_anchor_std,"
           "entropy_explorer_mean,entropy_explorer_std,excluded_responses,"
           "geo_anchor_norm_ratio,geo_anchor_cosine,geo_anchor_proj_ratio,"
           "geo_explorer_norm_ratio,geo_explorer_cosine,geo_explorer_proj_ratio,"
           "geo_random_norm_ratio,geo_random_cosine,geo_random_proj_ratio,"
           "collapse_short,collapse_instability,collapse_degeneration,"
           "w_low,w_high,val_mean_at_k";
}

inline std::string metrics_row_csv(const MetricsRow& row) {
    std::string out = std::to_string(row.step);
    out += "," + detail::fmt(row.mean_reward);
    out += "," + detail::fmt(row.mean_response_len);
    out += "," + detail::fmt(row.loss);
    out += "," + detail::fmt(row.grad_norm);
    out += "," + detail::fmt(row.entropy_full.mean) + "," + detail::fmt(row.entropy_full.stddev);
    out += "," + detail::fmt(row.entropy_anchor.mean) + "," + detail::fmt(row.entropy_anchor.stddev);
    out += "," + detail::fmt(row.entropy_explorer.mean) + "," +
           detail::fmt(row.entropy_explorer.stddev);
    out += "," + std::to_string(row.excluded_responses);
    out += "," + detail::geo_fields(row.geo_anchor);
    out += "," + detail::geo_fields(row.geo_explorer);
    out += "," + detail::geo_fields(row.geo_random);
    out += std::string(",") + (row.collapse_short ? "1" : "0");
    out += std::string(",") + (row.collapse_instability ? "1" : "0");
    out += std::string(",") + (row.collapse_degeneration ? "1" : "0");
    out += "," + detail::fmt(row.w_low);
    out += "," + detail::fmt(row.w_high);
    out += "," + detail::fmt(row.val_mean_at_k);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned text format, %.17g values round-trip exactly.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const tinylm::Parameters& params) {
    std::ofstream out(path);
    if (!out) {
        throw io_error("save_checkpoint: cannot open " + path);
    }
    const auto& cfg = params.config;
    out << "tokenlab-checkpoint v1\n";
    out << "model " << cfg.vocab_size << " " << cfg.d_model << " " << cfg.n_layers << " "
        << cfg.n_heads << " " << cfg.max_seq_len << " " << cfg.probe() << "\n";
    out << "params " << params.values.size() << "\n";
    for (double v : params.values) {
        out << detail::fmt(v) << "\n";
    }
}

inline tinylm::Parameters load_checkpoint(const std::string& path,
                                          const tinylm::ModelConfig& expected) {
    std::ifstream in(path);
    if (!in) {
        throw io_error("load_checkpoint: cannot open " + path);
    }
    std::string header;
    std::getline(in, header);
    if (header != "tokenlab-checkpoint v1") {
        throw io_error("load_checkpoint: unrecognized header in " + path);
    }
    std::string tag;
    tinylm::ModelConfig stored;
    in >> tag >> stored.vocab_size >> stored.d_model >> stored.n_layers >> stored.n_heads >>
        stored.max_seq_len >> stored.probe_layer;
    if (tag != "model") {
        throw io_error("load_checkpoint: missing model line");
    }
    if (stored.vocab_size != expected.vocab_size || stored.d_model != expected.d_model ||
        stored.n_layers != expected.n_layers || stored.n_heads != expected.n_heads ||
        stored.max_seq_len != expected.max_seq_len || stored.probe() != expected.probe()) {
        throw io_error("load_checkpoint: checkpoint/config mismatch");
    }
    std::size_t count = 0;
    in >> tag >> count;
    if (tag != "params") {
        throw io_error("load_checkpoint: missing params line");
    }
    tinylm::Parameters params(expected);
    if (count != params.values.size()) {
        throw io_error("load_checkpoint: parameter count mismatch");
    }
    for (auto& v : params.values) {
        if (!(in >> v)) {
            throw io_error("load_checkpoint: truncated parameter data");
        }
    }
    return params;
}

// ---------------------------------------------------------------------------
// Optimizer: decoupled-weight-decay adaptive moments with linear warmup and
// global-norm gradient clipping.
// ---------------------------------------------------------------------------

class AdamW {
public:
    AdamW(std::size_t n_params, double lr, double beta1, double beta2, double eps,
          double weight_decay, int warmup_steps)
        : lr_(lr),
          beta1_(beta1),
          beta2_(beta2),
          eps_(eps),
          weight_decay_(weight_decay),
          warmup_steps_(warmup_steps),
          m_(n_params, 0.0),
          v_(n_params, 0.0) {}

    void step(tinylm::Parameters& params, std::span<const double> grad) {
        ++t_;
        const double warm =
            warmup_steps_ > 0 ? std::min(1.0, static_cast<double>(t_) / warmup_steps_) : 1.0;
        const double lr = lr_ * warm;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.values.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            params.values[i] -=
                lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * params.values[i]);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int warmup_steps_;
    int t_ = 0;
    std::vector<double> m_, v_;
};

inline double global_norm(std::span<const double> grad) {
    double n2 = 0.0;
    for (double g : grad) n2 += g * g;
    return std::sqrt(n2);
}

inline void clip_global_norm(std::vector<double>& grad, double max_norm) {
    const double norm = global_norm(grad);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& g : grad) g *= scale;
    }
}

// ---------------------------------------------------------------------------
// Rollout collection shared by training and probing.
// ---------------------------------------------------------------------------

struct ResponseRecord {
    int prompt_index = 0;
    int rollout_index = 0;
    tasks::ProblemInstance problem;
    std::vector<int> prompt_tokens;
    tinylm::SampleResult sample;
    std::string response_text;
    double reward = 0.0;
    double advantage = 0.0;
    std::vector<double> h_raw, h_norm, h_pred;
    std::vector<double> weights;  // filled by apply_selection
    bool excluded = false;

    int response_len() const { return static_cast<int>(sample.tokens.size()); }
};

class ProblemSource {
public:
    ProblemSource(const ExperimentConfig& cfg) : cfg_(cfg) {
        if (!cfg.task_dataset.empty()) {
            dataset_ = tasks::load_problems(cfg.task_dataset);
            if (dataset_.empty()) {
                throw io_error("task.dataset is empty: " + cfg.task_dataset);
            }
        }
    }

    tasks::ProblemInstance get(std::uint64_t tag, int step, int index) const {
        if (!dataset_.empty()) {
            const std::size_t i =
                (static_cast<std::size_t>(step) * 131 + static_cast<std::size_t>(index)) %
                dataset_.size();
            return dataset_[i];
        }
        RngStream rng = RngStream::derive(
            cfg_.seed, {tag, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(index)});
        return tasks::generate_problem(cfg_.task_difficulty, rng);
    }

private:
    const ExperimentConfig& cfg_;
    std::vector<tasks::ProblemInstance> dataset_;
};

inline std::vector<ResponseRecord> collect_rollouts(const tinylm::Parameters& params,
                                                    const ExperimentConfig& cfg,
                                                    const ProblemSource& source, int step,
                                                    std::uint64_t data_tag,
                                                    std::uint64_t rollout_tag, int n_prompts,
                                                    int n_responses, double top_p) {
    const auto& vocab = tasks::Vocabulary::standard();
    std::vector<ResponseRecord> records;
    records.reserve(static_cast<std::size_t>(n_prompts * n_responses));
    for (int pi = 0; pi < n_prompts; ++pi) {
        const auto problem = source.get(data_tag, step, pi);
        const auto prompt_tokens = vocab.encode(problem.prompt);
        if (static_cast<int>(prompt_tokens.size()) + cfg.rollout_max_new > cfg.model.max_seq_len) {
            throw config_error("prompt plus rollout budget exceeds model.max_seq_len");
        }
        std::vector<double> rewards(static_cast<std::size_t>(n_responses));
        const std::size_t base = records.size();
        for (int r = 0; r < n_responses; ++r) {
            ResponseRecord rec;
            rec.prompt_index = pi;
            rec.rollout_index = r;
            rec.problem = problem;
            rec.prompt_tokens = prompt_tokens;
            RngStream rng = RngStream::derive(
                cfg.seed, {rollout_tag, static_cast<std::uint64_t>(step),
                           static_cast<std::uint64_t>(pi), static_cast<std::uint64_t>(r)});
            tinylm::SamplingConfig sampling;
            sampling.temperature = cfg.rollout_temperature;
            sampling.top_p = top_p;
            sampling.max_new = cfg.rollout_max_new;
            sampling.stop_token = vocab.end_token();
            rec.sample = tinylm::sample(params, prompt_tokens, sampling, rng);
            rec.response_text = vocab.decode(rec.sample.tokens);
            rec.reward = objective::verify_reward(rec.response_text, problem.answer,
                                                  rec.response_len(), cfg.reward);
            rewards[static_cast<std::size_t>(r)] = rec.reward;
            const int T = rec.response_len();
            const int plen = static_cast<int>(prompt_tokens.size());
            for (int t = 0; t < T; ++t) {
                const auto& row = rec.sample.capture.row_at(cfg.model.probe(), plen - 1 + t);
                rec.h_raw.push_back(entropy::raw_entropy(row));
                rec.h_norm.push_back(entropy::normalized_entropy(row));
                rec.h_pred.push_back(entropy::prediction_entropy(
                    rec.sample.pred_dists[static_cast<std::size_t>(t)]));
            }
            records.push_back(std::move(rec));
        }
        const auto advantages = objective::group_advantages(rewards);
        for (int r = 0; r < n_responses; ++r) {
            records[base + static_cast<std::size_t>(r)].advantage =
                advantages[static_cast<std::size_t>(r)];
        }
    }
    return records;
}

// Per-token |l_t| at selection time; the importance ratio of each sampled
// token is its full-softmax log-prob against the frozen sampling-time one.
inline std::vector<double> loss_magnitudes(const ResponseRecord& rec,
                                           const objective::LossSpec& spec) {
    std::vector<double> mags;
    mags.reserve(rec.sample.tokens.size());
    for (std::size_t t = 0; t < rec.sample.tokens.size(); ++t) {
        const double ratio = std::exp(rec.sample.logp_full[t] - rec.sample.logp[t]);
        mags.push_back(std::abs(objective::per_token_clip_loss(ratio, rec.advantage, spec)));
    }
    return mags;
}

// Fills per-token weights according to the selection rule. Responses that a
// hard rule cannot cover (partition failures, empty masks, empty responses)
// are flagged excluded and dropped from the loss batch.
inline void apply_selection(std::vector<ResponseRecord>& records, const ExperimentConfig& cfg,
                            int step) {
    const double p = cfg.select_fraction;
    auto from_mask = [](ResponseRecord& rec, const selection::TokenMask& mask) {
        rec.weights.assign(mask.included.size(), 0.0);
        for (std::size_t i = 0; i < mask.included.size(); ++i) {
            rec.weights[i] = mask.included[i] ? 1.0 : 0.0;
        }
        if (mask.empty_selection()) rec.excluded = true;
    };

    if (cfg.select_rule == SelectionRule::soft) {
        std::vector<double> batch_entropies;
        for (const auto& rec : records) {
            batch_entropies.insert(batch_entropies.end(), rec.h_norm.begin(), rec.h_norm.end());
        }
        if (batch_entropies.empty()) {
            for (auto& rec : records) rec.excluded = true;
            return;
        }
        const auto weights = reweight::soft_weights(batch_entropies, cfg.rw, step);
        std::size_t at = 0;
        for (auto& rec : records) {
            const auto T = rec.h_norm.size();
            rec.weights.assign(weights.begin() + static_cast<std::ptrdiff_t>(at),
                               weights.begin() + static_cast<std::ptrdiff_t>(at + T));
            at += T;
            if (T == 0) rec.excluded = true;
        }
        return;
    }

    for (auto& rec : records) {
        const int T = rec.response_len();
        if (T == 0) {
            rec.excluded = true;
            rec.weights.clear();
            continue;
        }
        switch (cfg.select_rule) {
            case SelectionRule::full:
                rec.weights.assign(static_cast<std::size_t>(T), 1.0);
                break;
            case SelectionRule::random: {
                RngStream rng = RngStream::derive(
                    cfg.seed, {stream::mask, static_cast<std::uint64_t>(step),
                               static_cast<std::uint64_t>(rec.prompt_index),
                               static_cast<std::uint64_t>(rec.rollout_index)});
                from_mask(rec, selection::random_mask(T, p, rng));
                break;
            }
            case SelectionRule::anchor:
            case SelectionRule::explorer: {
                try {
                    const auto masks = selection::entropy_partition(rec.h_norm, p);
                    from_mask(rec, cfg.select_rule == SelectionRule::anchor ? masks.first
                                                                            : masks.second);
                } catch (const partition_error&) {
                    rec.excluded = true;
                    rec.weights.assign(static_cast<std::size_t>(T), 0.0);
                }
                break;
            }
            case SelectionRule::front:
            case SelectionRule::back:
                from_mask(rec, selection::position_mask(
                                   T,
                                   cfg.select_rule == SelectionRule::front
                                       ? selection::Region::front
                                       : selection::Region::back,
                                   p));
                break;
            case SelectionRule::pred_low:
            case SelectionRule::pred_high:
            case SelectionRule::loss_low:
            case SelectionRule::loss_high: {
                const bool use_pred = cfg.select_rule == SelectionRule::pred_low ||
                                      cfg.select_rule == SelectionRule::pred_high;
                const bool low = cfg.select_rule == SelectionRule::pred_low ||
                                 cfg.select_rule == SelectionRule::loss_low;
                const auto scores = use_pred ? rec.h_pred : loss_magnitudes(rec, cfg.loss);
                try {
                    from_mask(rec, selection::score_mask(
                                       scores, low ? selection::End::low : selection::End::high,
                                       p));
                } catch (const partition_error&) {
                    rec.excluded = true;
                    rec.weights.assign(static_cast<std::size_t>(T), 0.0);
                }
                break;
            }
            case SelectionRule::soft:
                break;  // handled above
        }
    }
}

inline std::vector<tinylm::RolloutItem> to_loss_batch(const std::vector<ResponseRecord>& records) {
    std::vector<tinylm::RolloutItem> batch;
    for (const auto& rec : records) {
        if (rec.excluded || rec.response_len() == 0) continue;
        tinylm::RolloutItem item;
        item.tokens = rec.prompt_tokens;
        item.tokens.insert(item.tokens.end(), rec.sample.tokens.begin(), rec.sample.tokens.end());
        item.prompt_len = static_cast<int>(rec.prompt_tokens.size());
        item.old_logp = rec.sample.logp;
        item.advantages.assign(rec.sample.tokens.size(), rec.advantage);
        item.weights = rec.weights;
        batch.push_back(std::move(item));
    }
    return batch;
}

// Same records with the given per-response binary masks, selected-mean
// normalized; used by the gradient-geometry probes.
inline std::vector<tinylm::RolloutItem> masked_loss_batch(
    const std::vector<ResponseRecord>& records,
    const std::vector<std::optional<selection::TokenMask>>& masks) {
    std::vector<tinylm::RolloutItem> batch;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (!masks[i] || rec.response_len() == 0) continue;
        tinylm::RolloutItem item;
        item.tokens = rec.prompt_tokens;
        item.tokens.insert(item.tokens.end(), rec.sample.tokens.begin(), rec.sample.tokens.end());
        item.prompt_len = static_cast<int>(rec.prompt_tokens.size());
        item.old_logp = rec.sample.logp;
        item.advantages.assign(rec.sample.tokens.size(), rec.advantage);
        item.weights.assign(rec.sample.tokens.size(), 0.0);
        for (std::size_t t = 0; t < item.weights.size(); ++t) {
            item.weights[t] = masks[i]->included[t] ? 1.0 : 0.0;
        }
        if (masks[i]->empty_selection()) continue;
        batch.push_back(std::move(item));
    }
    return batch;
}

struct SubsetGradients {
    tinylm::GradientVector full;
    std::optional<tinylm::GradientVector> anchor, explorer, random;
};

// g_full under all-token-mean plus the three subset gradients under
// selected-mean normalization (the estimator form used by the selective
// runs and by the sparse-gradient analysis).
inline SubsetGradients subset_gradients(const tinylm::Parameters& params,
                                        const std::vector<ResponseRecord>& records,
                                        const ExperimentConfig& cfg, int step,
                                        std::uint64_t mask_tag) {
    SubsetGradients out;
    std::vector<tinylm::RolloutItem> full_batch;
    for (const auto& rec : records) {
        if (rec.response_len() == 0) continue;
        tinylm::RolloutItem item;
        item.tokens = rec.prompt_tokens;
        item.tokens.insert(item.tokens.end(), rec.sample.tokens.begin(), rec.sample.tokens.end());
        item.prompt_len = static_cast<int>(rec.prompt_tokens.size());
        item.old_logp = rec.sample.logp;
        item.advantages.assign(rec.sample.tokens.size(), rec.advantage);
        item.weights.assign(rec.sample.tokens.size(), 1.0);
        full_batch.push_back(std::move(item));
    }
    if (full_batch.empty()) {
        throw degenerate_error("subset_gradients: no response tokens in batch");
    }
    objective::LossSpec full_spec = cfg.loss;
    full_spec.normalization = objective::Normalization::all_token_mean;
    out.full = tinylm::loss_grad(params, full_batch, full_spec).grad;

    std::vector<std::optional<selection::TokenMask>> anchor_masks(records.size()),
        explorer_masks(records.size()), random_masks(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (rec.response_len() == 0) continue;
        try {
            auto masks = selection::entropy_partition(rec.h_norm, cfg.select_fraction);
            anchor_masks[i] = std::move(masks.first);
            explorer_masks[i] = std::move(masks.second);
        } catch (const partition_error&) {
        }
        RngStream rng = RngStream::derive(cfg.seed, {mask_tag, static_cast<std::uint64_t>(step),
                                                     static_cast<std::uint64_t>(rec.prompt_index),
                                                     static_cast<std::uint64_t>(rec.rollout_index)});
        random_masks[i] = selection::random_mask(rec.response_len(), cfg.select_fraction, rng);
    }

    objective::LossSpec sel_spec = cfg.loss;
    sel_spec.normalization = objective::Normalization::selected_mean;
    auto subset_grad = [&](const std::vector<std::optional<selection::TokenMask>>& masks)
        -> std::optional<tinylm::GradientVector> {
        auto batch = masked_loss_batch(records, masks);
        if (batch.empty()) return std::nullopt;
        return tinylm::loss_grad(params, batch, sel_spec).grad;
    };
    out.anchor = subset_grad(anchor_masks);
    out.explorer = subset_grad(explorer_masks);
    out.random = subset_grad(random_masks);
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOutput {
    std::vector<MetricsRow> rows;
    std::filesystem::path metrics_path;
    std::filesystem::path checkpoint_path;
};

inline void write_trace_records(std::ofstream& traces, const std::vector<ResponseRecord>& records,
                                const ExperimentConfig& cfg, int step) {
    int written = 0;
    for (const auto& rec : records) {
        if (written >= cfg.trace_responses) break;
        const int T = std::min(rec.response_len(), cfg.trace_max_tokens);
        auto head = [&](const std::vector<double>& xs) {
            return std::vector<double>(xs.begin(), xs.begin() + T);
        };
        std::vector<double> weights = rec.weights;
        weights.resize(static_cast<std::size_t>(rec.response_len()), 0.0);
        weights.resize(static_cast<std::size_t>(T));
        nlohmann::json record{
            {"step", step},
            {"response_index", written},
            {"prompt", rec.problem.prompt},
            {"tokens", std::vector<int>(rec.sample.tokens.begin(), rec.sample.tokens.begin() + T)},
            {"reward", rec.reward},
            {"excluded", rec.excluded},
            {"h_raw", head(rec.h_raw)},
            {"h_norm", head(rec.h_norm)},
            {"h_pred", head(rec.h_pred)},
            {"weight", weights},
            {"advantage", std::vector<double>(static_cast<std::size_t>(T), rec.advantage)}};
        traces << record.dump() << "\n";
        ++written;
    }
}

inline double validation_mean_at_k(const tinylm::Parameters& params, const ExperimentConfig& cfg,
                                   const ProblemSource& /*unused*/, int step) {
    const auto& vocab = tasks::Vocabulary::standard();
    double correct = 0.0;
    int total = 0;
    for (int j = 0; j < cfg.val_prompts; ++j) {
        RngStream data_rng = RngStream::derive(cfg.seed, {stream::val_data,
                                                          static_cast<std::uint64_t>(step),
                                                          static_cast<std::uint64_t>(j)});
        const auto problem = tasks::generate_problem(cfg.task_difficulty, data_rng);
        const auto prompt_tokens = vocab.encode(problem.prompt);
        for (int r = 0; r < cfg.val_responses; ++r) {
            RngStream rng = RngStream::derive(
                cfg.seed, {stream::val_rollout, static_cast<std::uint64_t>(step),
                           static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(r)});
            tinylm::SamplingConfig sampling;
            sampling.temperature = cfg.rollout_temperature;
            sampling.top_p = cfg.val_top_p;
            sampling.max_new = cfg.rollout_max_new;
            sampling.stop_token = vocab.end_token();
            const auto sample = tinylm::sample(params, prompt_tokens, sampling, rng);
            const auto extraction = objective::extract_boxed(vocab.decode(sample.tokens));
            if (extraction.answer && *extraction.answer == problem.answer) correct += 1.0;
            ++total;
        }
    }
    return total > 0 ? correct / total : 0.0;
}

inline TrainOutput run_training(const ExperimentConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const auto out = std::filesystem::path(out_dir);
    {
        std::ofstream resolved(out / "config_resolved.txt");
        resolved << serialize_config(cfg);
    }
    std::ofstream metrics(out / "metrics.csv");
    if (!metrics) {
        throw io_error("run_training: cannot write metrics.csv in " + out_dir);
    }
    metrics << "# tokenlab metrics schema v" << kMetricsSchemaVersion << "\n";
    metrics << metrics_header() << "\n";
    std::ofstream traces(out / "traces.jsonl");

    ProblemSource source(cfg);
    auto params = tinylm::init_params(cfg.model, cfg.seed);
    AdamW optimizer(params.values.size(), cfg.optim_lr, cfg.optim_beta1, cfg.optim_beta2,
                    cfg.optim_eps, cfg.optim_weight_decay, cfg.optim_warmup_steps);
    objective::LossSpec loss_spec = cfg.loss;
    loss_spec.normalization = cfg.resolved_normalization();

    TrainOutput output;
    std::vector<probes::StepMetric> history;
    for (int step = 0; step < cfg.train_steps; ++step) {
        auto records = collect_rollouts(params, cfg, source, step, stream::data, stream::rollout,
                                        cfg.rollout_prompts_per_step, cfg.rollout_n_responses,
                                        cfg.rollout_top_p);
        apply_selection(records, cfg, step);

        MetricsRow row;
        row.step = step;
        double reward_sum = 0.0, len_sum = 0.0;
        std::vector<std::vector<double>> response_entropies;
        for (const auto& rec : records) {
            reward_sum += rec.reward;
            len_sum += rec.response_len();
            if (rec.excluded) ++row.excluded_responses;
            response_entropies.push_back(rec.h_norm);
        }
        row.mean_reward = reward_sum / static_cast<double>(records.size());
        row.mean_response_len = len_sum / static_cast<double>(records.size());
        const auto groups = probes::group_entropy_values(response_entropies, cfg.select_fraction);
        const auto dynamics = probes::entropy_dynamics(std::span(&groups, 1));
        row.entropy_full = dynamics[0].full;
        row.entropy_anchor = dynamics[0].anchor;
        row.entropy_explorer = dynamics[0].explorer;

        const auto batch = to_loss_batch(records);
        if (!batch.empty()) {
            auto result = tinylm::loss_grad(params, batch, loss_spec);
            row.loss = result.loss;
            row.grad_norm = global_norm(result.grad);
            clip_global_norm(result.grad, cfg.optim_grad_clip);
            if (cfg.probe_every > 0 && step % cfg.probe_every == 0) {
                const auto grads =
                    subset_gradients(params, records, cfg, step, stream::probe_mask);
                // an all-tied reward batch has zero advantages and a zero
                // full gradient; geometry is undefined there
                if (global_norm(grads.full) > 0.0) {
                    auto geo = [&](const std::optional<tinylm::GradientVector>& g)
                        -> std::optional<probes::GeometryReport> {
                        if (!g) return std::nullopt;
                        return probes::gradient_geometry(*g, grads.full);
                    };
                    row.geo_anchor = geo(grads.anchor);
                    row.geo_explorer = geo(grads.explorer);
                    row.geo_random = geo(grads.random);
                }
            }
            optimizer.step(params, result.grad);
        }

        if (cfg.select_rule == SelectionRule::soft) {
            const auto endpoints = reweight::endpoint_weights(step, cfg.rw);
            row.w_low = endpoints.w_low;
            row.w_high = endpoints.w_high;
        }

        history.push_back({row.mean_response_len, row.mean_reward});
        const auto collapse = probes::detect_collapse(history, {});
        row.collapse_short = collapse.short_response_collapse;
        row.collapse_instability = collapse.length_instability;
        row.collapse_degeneration = collapse.reasoning_degeneration;

        if (cfg.val_every > 0 && step % cfg.val_every == 0) {
            row.val_mean_at_k = validation_mean_at_k(params, cfg, source, step);
        }
        if (cfg.trace_every > 0 && step % cfg.trace_every == 0) {
            write_trace_records(traces, records, cfg, step);
        }
        metrics << metrics_row_csv(row) << "\n";
        output.rows.push_back(row);
    }

    output.metrics_path = out / "metrics.csv";
    output.checkpoint_path = out / "checkpoint.txt";
    save_checkpoint(output.checkpoint_path.string(), params);
    return output;
}

// ---------------------------------------------------------------------------
// Probe runs on a frozen checkpoint
// ---------------------------------------------------------------------------

struct ProbeBatchReport {
    int batch = 0;
    std::optional<probes::GeometryReport> anchor, explorer, random;
    std::optional<probes::DecileReport> deciles;
    probes::EntropyDynamicsRow dynamics;
};

struct ProbeOutput {
    std::vector<ProbeBatchReport> batches;
};

inline ProbeOutput run_probe(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                             const std::string& out_dir) {
    cfg.validate();
    const auto params = load_checkpoint(checkpoint_path, cfg.model);
    std::filesystem::create_directories(out_dir);
    const auto out = std::filesystem::path(out_dir);
    {
        std::ofstream resolved(out / "config_resolved.txt");
        resolved << serialize_config(cfg);
    }
    std::ofstream geometry_csv(out / "probe_geometry.csv");
    geometry_csv << "batch,subset,norm_ratio,cosine,proj_ratio,subset_zero\n";
    std::ofstream deciles_csv(out / "probe_deciles.csv");
    deciles_csv << "batch,d0,d1,d2,d3,d4,d5,d6,d7,d8,d9,share_low,share_mid,share_high,"
                   "excluded_responses\n";
    std::ofstream support_csv(out / "probe_support.csv");
    support_csv << "batch,group,support_at_0.5,support_at_0.7,support_at_0.9,mean_distance,"
                   "local_mass,nonlocal_mass,window\n";
    std::ofstream dynamics_csv(out / "probe_dynamics.csv");
    dynamics_csv << "batch,group,mean,std,count\n";
    std::ofstream online_csv(out / "probe_online_stats.csv");
    online_csv << "batch,subset,cosine,running_mean,running_std,running_cv\n";
    std::ofstream maps_jsonl(out / "attention_maps.jsonl");

    ProblemSource source(cfg);
    ProbeOutput output;
    std::map<std::string, std::vector<double>> cosine_series;

    for (int b = 0; b < cfg.probe_batches; ++b) {
        auto records = collect_rollouts(params, cfg, source, b, stream::probe_data,
                                        stream::probe_rollout, cfg.probe_prompts,
                                        cfg.rollout_n_responses, cfg.rollout_top_p);
        ProbeBatchReport report;
        report.batch = b;

        SubsetGradients grads;
        try {
            grads = subset_gradients(params, records, cfg, b, stream::probe_mask);
        } catch (const degenerate_error&) {
            output.batches.push_back(report);
            continue;
        }
        const bool full_zero = global_norm(grads.full) == 0.0;
        auto emit_geometry = [&](const char* subset,
                                 const std::optional<tinylm::GradientVector>& g)
            -> std::optional<probes::GeometryReport> {
            if (!g || full_zero) return std::nullopt;
            const auto geo = probes::gradient_geometry(*g, grads.full);
            geometry_csv << b << "," << subset << "," << detail::fmt(geo.norm_ratio) << ","
                         << detail::fmt(geo.cosine ? *geo.cosine
                                                   : std::numeric_limits<double>::quiet_NaN())
                         << "," << detail::fmt(geo.proj_ratio) << ","
                         << (geo.subset_zero ? 1 : 0) << "\n";
            if (geo.cosine) cosine_series[subset].push_back(*geo.cosine);
            return geo;
        };
        report.anchor = emit_geometry("anchor", grads.anchor);
        report.explorer = emit_geometry("explorer", grads.explorer);
        report.random = emit_geometry("random", grads.random);

        // Decile decomposition under all-token-mean normalization.
        std::vector<std::vector<double>> response_entropies;
        std::vector<const ResponseRecord*> live;
        for (const auto& rec : records) {
            if (rec.response_len() == 0) continue;
            response_entropies.push_back(rec.h_norm);
            live.push_back(&rec);
        }
        objective::LossSpec all_mean = cfg.loss;
        all_mean.normalization = objective::Normalization::all_token_mean;
        auto oracle = [&](const std::vector<std::vector<double>>& weights) {
            std::vector<tinylm::RolloutItem> batch;
            for (std::size_t i = 0; i < live.size(); ++i) {
                const auto& rec = *live[i];
                tinylm::RolloutItem item;
                item.tokens = rec.prompt_tokens;
                item.tokens.insert(item.tokens.end(), rec.sample.tokens.begin(),
                                   rec.sample.tokens.end());
                item.prompt_len = static_cast<int>(rec.prompt_tokens.size());
                item.old_logp = rec.sample.logp;
                item.advantages.assign(rec.sample.tokens.size(), rec.advantage);
                item.weights = weights[i];
                batch.push_back(std::move(item));
            }
            return tinylm::loss_grad(params, batch, all_mean).grad;
        };
        try {
            report.deciles =
                probes::decile_decomposition(response_entropies, oracle, grads.full);
            deciles_csv << b;
            for (double pr : report.deciles->proj_ratio) deciles_csv << "," << detail::fmt(pr);
            for (double sh : report.deciles->band_share) deciles_csv << "," << detail::fmt(sh);
            deciles_csv << "," << report.deciles->excluded_responses << "\n";
        } catch (const partition_error&) {
        } catch (const geometry_error&) {
        }

        // Support-concentration and span statistics per token group.
        struct GroupAcc {
            double s05 = 0, s07 = 0, s09 = 0, dist = 0, local = 0, nonlocal = 0;
            int count = 0;
        };
        std::map<std::string, GroupAcc> group_stats;
        for (const auto& rec : records) {
            const int T = rec.response_len();
            if (T == 0) continue;
            std::optional<std::pair<selection::TokenMask, selection::TokenMask>> masks;
            try {
                masks = selection::entropy_partition(rec.h_norm, cfg.select_fraction);
            } catch (const partition_error&) {
            }
            const int plen = static_cast<int>(rec.prompt_tokens.size());
            for (int t = 0; t < T; ++t) {
                const int pos = plen - 1 + t;
                const auto& attn_row = rec.sample.capture.row_at(cfg.model.probe(), pos);
                const auto span = probes::span_stats(attn_row, pos, cfg.probe_window);
                auto add_to = [&](const std::string& group) {
                    auto& acc = group_stats[group];
                    acc.s05 += probes::support_size(attn_row, 0.5);
                    acc.s07 += probes::support_size(attn_row, 0.7);
                    acc.s09 += probes::support_size(attn_row, 0.9);
                    acc.dist += span.mean_distance;
                    acc.local += span.local_mass;
                    acc.nonlocal += span.nonlocal_mass;
                    ++acc.count;
                };
                add_to("full");
                if (masks) {
                    if (masks->first.included[static_cast<std::size_t>(t)]) add_to("anchor");
                    if (masks->second.included[static_cast<std::size_t>(t)]) add_to("explorer");
                }
            }
        }
        for (const auto& [group, acc] : group_stats) {
            if (acc.count == 0) continue;
            const double n = acc.count;
            support_csv << b << "," << group << "," << detail::fmt(acc.s05 / n) << ","
                        << detail::fmt(acc.s07 / n) << "," << detail::fmt(acc.s09 / n) << ","
                        << detail::fmt(acc.dist / n) << "," << detail::fmt(acc.local / n) << ","
                        << detail::fmt(acc.nonlocal / n) << "," << cfg.probe_window << "\n";
        }

        const auto groups = probes::group_entropy_values(response_entropies, cfg.select_fraction);
        const auto dynamics = probes::entropy_dynamics(std::span(&groups, 1));
        report.dynamics = dynamics[0];
        for (const auto& [name, stats] :
             std::initializer_list<std::pair<const char*, probes::GroupStats>>{
                 {"full", dynamics[0].full},
                 {"anchor", dynamics[0].anchor},
                 {"explorer", dynamics[0].explorer}}) {
            dynamics_csv << b << "," << name << "," << detail::fmt(stats.mean) << ","
                         << detail::fmt(stats.stddev) << "," << stats.count << "\n";
        }

        if (b == 0 && !records.empty() && records.front().response_len() > 0) {
            const auto& rec = records.front();
            const int plen = static_cast<int>(rec.prompt_tokens.size());
            for (int t = 0; t < rec.response_len(); ++t) {
                const int pos = plen - 1 + t;
                nlohmann::json map_record{
                    {"batch", b},
                    {"response_index", 0},
                    {"position", pos},
                    {"row", rec.sample.capture.row_at(cfg.model.probe(), pos)}};
                maps_jsonl << map_record.dump() << "\n";
            }
        }
        output.batches.push_back(std::move(report));
    }

    for (const auto& [subset, series] : cosine_series) {
        const auto stats = probes::online_cv(series);
        for (std::size_t i = 0; i < series.size(); ++i) {
            online_csv << i << "," << subset << "," << detail::fmt(series[i]) << ","
                       << detail::fmt(stats[i].mean) << "," << detail::fmt(stats[i].stddev) << ","
                       << detail::fmt(stats[i].cv) << "\n";
        }
    }

    std::ofstream summary_csv(out / "probe_summary.csv");
    summary_csv << "subset,mean_norm_ratio,mean_cosine,mean_proj_ratio,batches\n";
    for (const char* subset : {"anchor", "explorer", "random"}) {
        double nr = 0, cs = 0, pr = 0;
        int n = 0;
        for (const auto& batch : output.batches) {
            const auto& geo = subset == std::string("anchor")   ? batch.anchor
                              : subset == std::string("explorer") ? batch.explorer
                                                                  : batch.random;
            if (!geo || !geo->cosine) continue;
            nr += geo->norm_ratio;
            cs += *geo->cosine;
            pr += geo->proj_ratio;
            ++n;
        }
        if (n > 0) {
            summary_csv << subset << "," << detail::fmt(nr / n) << "," << detail::fmt(cs / n)
                        << "," << detail::fmt(pr / n) << "," << n << "\n";
        }
    }
    return output;
}

// ---------------------------------------------------------------------------
// Sparse-estimability check on real per-token gradients
// ---------------------------------------------------------------------------

inline probes::SparseCheckReport run_sparse_check(const ExperimentConfig& cfg,
                                                  const std::string& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const auto out = std::filesystem::path(out_dir);
    {
        std::ofstream resolved(out / "config_resolved.txt");
        resolved << serialize_config(cfg);
    }
    auto params = tinylm::init_params(cfg.model, cfg.seed);
    ProblemSource source(cfg);
    objective::LossSpec one_token = cfg.loss;
    one_token.normalization = objective::Normalization::selected_mean;

    // One backward per response token: selected-mean with a one-hot weight
    // reduces the batch loss to that token's l_t exactly.
    std::vector<std::vector<double>> token_grads;
    for (int step = 0; static_cast<int>(token_grads.size()) < cfg.sparse_max_tokens; ++step) {
        if (step > 64) break;
        auto records = collect_rollouts(params, cfg, source, step, stream::probe_data,
                                        stream::probe_rollout, 1, cfg.rollout_n_responses,
                                        cfg.rollout_top_p);
        for (const auto& rec : records) {
            const int T = rec.response_len();
            // tied-reward groups have zero advantages and identically zero
            // per-token gradients; they carry no estimability signal
            if (rec.advantage == 0.0) continue;
            for (int t = 0; t < T; ++t) {
                if (static_cast<int>(token_grads.size()) >= cfg.sparse_max_tokens) break;
                tinylm::RolloutItem item;
                item.tokens = rec.prompt_tokens;
                item.tokens.insert(item.tokens.end(), rec.sample.tokens.begin(),
                                   rec.sample.tokens.end());
                item.prompt_len = static_cast<int>(rec.prompt_tokens.size());
                item.old_logp = rec.sample.logp;
                item.advantages.assign(rec.sample.tokens.size(), rec.advantage);
                item.weights.assign(rec.sample.tokens.size(), 0.0);
                item.weights[static_cast<std::size_t>(t)] = 1.0;
                token_grads.push_back(
                    tinylm::loss_grad(params, std::span(&item, 1), one_token).grad);
            }
        }
    }

    RngStream rng = RngStream::derive(cfg.seed, {stream::sparse});
    const auto report = probes::sparse_check(token_grads, cfg.sparse_p, cfg.sparse_trials, rng);

    nlohmann::json summary{{"dims", report.dims},
                           {"n_tokens", report.n_tokens},
                           {"p", report.p},
                           {"trials", report.trials},
                           {"redraws", report.redraws},
                           {"max_abs_z", report.max_abs_z},
                           {"empirical_mse", report.empirical_mse},
                           {"formula_mse", report.formula_mse},
                           {"centered_formula_mse", report.centered_formula_mse},
                           {"empirical_mean_cosine", report.empirical_mean_cosine},
                           {"zero_full_gradient", report.zero_full_gradient}};
    if (report.formula_cosine) summary["formula_cosine"] = *report.formula_cosine;
    std::ofstream json_out(out / "sparse_check.json");
    json_out << summary.dump(2) << "\n";
    return report;
}

// ---------------------------------------------------------------------------
// Trace analysis and run aggregation
// ---------------------------------------------------------------------------

struct AnalyzeReport {
    int n_records = 0;
    int n_tokens = 0;
    double pearson_attn_pred = std::numeric_limits<double>::quiet_NaN();
    std::map<std::string, int> quadrant_counts;
    double h_norm_mean = 0.0;
    double h_pred_mean = 0.0;
};

inline AnalyzeReport analyze_trace(const std::string& trace_path) {
    std::ifstream in(trace_path);
    if (!in) {
        throw io_error("analyze: cannot open trace " + trace_path);
    }
    AnalyzeReport report;
    std::vector<double> all_attn, all_pred;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto record = nlohmann::json::parse(line);
        ++report.n_records;
        const auto h_norm = record.at("h_norm").get<std::vector<double>>();
        const auto h_pred = record.at("h_pred").get<std::vector<double>>();
        if (h_norm.size() != h_pred.size()) {
            throw input_error("analyze: h_norm/h_pred length mismatch in trace");
        }
        all_attn.insert(all_attn.end(), h_norm.begin(), h_norm.end());
        all_pred.insert(all_pred.end(), h_pred.begin(), h_pred.end());
        if (h_norm.size() >= 2) {
            const auto labels = selection::quadrant_assign(h_pred, h_norm);
            for (auto l : labels) ++report.quadrant_counts[selection::quadrant_name(l)];
        }
    }
    report.n_tokens = static_cast<int>(all_attn.size());
    if (report.n_tokens > 0) {
        for (double h : all_attn) report.h_norm_mean += h;
        for (double h : all_pred) report.h_pred_mean += h;
        report.h_norm_mean /= report.n_tokens;
        report.h_pred_mean /= report.n_tokens;
    }
    if (report.n_tokens >= 2) {
        try {
            report.pearson_attn_pred = selection::pearson(all_attn, all_pred);
        } catch (const input_error&) {
        }
    }
    return report;
}

inline void write_analyze_report(const AnalyzeReport& report, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json summary{{"n_records", report.n_records},
                           {"n_tokens", report.n_tokens},
                           {"h_norm_mean", report.h_norm_mean},
                           {"h_pred_mean", report.h_pred_mean},
                           {"quadrant_counts", report.quadrant_counts}};
    if (std::isfinite(report.pearson_attn_pred)) {
        summary["pearson_attn_pred"] = report.pearson_attn_pred;
    }
    std::ofstream out(std::filesystem::path(out_dir) / "analysis.json");
    out << summary.dump(2) << "\n";
}

struct RunSummary {
    std::string dir;
    int steps = 0;
    double final20_mean_reward = std::numeric_limits<double>::quiet_NaN();
    double final20_mean_response_len = std::numeric_limits<double>::quiet_NaN();
    double step0_mean_reward = std::numeric_limits<double>::quiet_NaN();
};

inline std::vector<std::map<std::string, std::string>> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw io_error("cannot open metrics file: " + path);
    }
    std::string line;
    std::vector<std::string> header;
    std::vector<std::map<std::string, std::string>> rows;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string field;
        std::istringstream ss(s);
        while (std::getline(ss, field, ',')) out.push_back(field);
        return out;
    };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header.empty()) {
            header = split(line);
            continue;
        }
        const auto fields = split(line);
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size() && i < fields.size(); ++i) {
            row[header[i]] = fields[i];
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline RunSummary summarize_run(const std::string& run_dir) {
    const auto rows = read_metrics_csv((std::filesystem::path(run_dir) / "metrics.csv").string());
    RunSummary summary;
    summary.dir = run_dir;
    summary.steps = static_cast<int>(rows.size());
    if (rows.empty()) return summary;
    summary.step0_mean_reward = std::stod(rows.front().at("mean_reward"));
    const std::size_t tail = std::min<std::size_t>(20, rows.size());
    double reward = 0.0, len = 0.0;
    for (std::size_t i = rows.size() - tail; i < rows.size(); ++i) {
        reward += std::stod(rows[i].at("mean_reward"));
        len += std::stod(rows[i].at("mean_response_len"));
    }
    summary.final20_mean_reward = reward / static_cast<double>(tail);
    summary.final20_mean_response_len = len / static_cast<double>(tail);
    return summary;
}

}  // namespace tokenlab::harness
