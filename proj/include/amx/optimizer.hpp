#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"
#include "amx/objective.hpp"
#include "amx/pipeline.hpp"
#include "amx/prompt.hpp"
#include "amx/random.hpp"

namespace amx {

enum class InitStrategy { neutral_token_copy, gaussian_matched };

inline std::string to_string(InitStrategy s) {
  return s == InitStrategy::neutral_token_copy ? "neutral-token-copy" : "gaussian-matched";
}

inline InitStrategy parse_init_strategy(const std::string &s) {
  if (s == "neutral-token-copy") return InitStrategy::neutral_token_copy;
  if (s == "gaussian-matched") return InitStrategy::gaussian_matched;
  throw Rejected("unknown init strategy '" + s + "' (expected neutral-token-copy or gaussian-matched)");
}

struct OptimizerConfig {
  double learning_rate = 0.05;
  int steps = 200;
  int batch_size = 2;
  int restarts = 3;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  // A restart is abandoned once its loss exceeds `divergence_factor` times the
  // initial loss (see divergence_threshold for objectives near zero).
  double divergence_factor = 10.0;
  // Per-code losses are heavy tailed; the held-out set is sized like the
  // default training set (steps × batch) so both means are comparably noisy.
  int heldout_count = 512;
  InitStrategy init = InitStrategy::gaussian_matched;
  // Draw fresh latent codes every step. Disabling it reuses the first step's
  // codes throughout; only useful as an ablation.
  bool resample_noise = true;
  // Restarts run concurrently when > 1.
  int jobs = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw Rejected("learning rate must be positive");
    if (steps < 0) throw Rejected("step count must be >= 0");
    if (batch_size < 1) throw Rejected("batch size must be >= 1");
    if (restarts < 1) throw Rejected("restart count must be >= 1");
    if (!(grad_clip > 0)) throw Rejected("gradient clip norm must be positive");
    if (!(divergence_factor > 1)) throw Rejected("divergence factor must be > 1");
    if (heldout_count < 1) throw Rejected("held-out count must be >= 1");
    if (jobs < 1) throw Rejected("jobs must be >= 1");
  }
};

inline double divergence_threshold(double initial, double factor) {
  return initial + (factor - 1.0) * std::max(std::abs(initial), 1.0);
}

struct TraceEntry {
  int step = 0;
  double loss = 0;  // batch mean
  std::vector<std::uint64_t> seeds;
  std::vector<double> sample_losses;
};

template <typename T>
struct RestartRecord {
  int index = 0;
  std::uint64_t seed = 0;
  std::vector<T> initial_params;
  std::vector<T> final_params;
  std::vector<TraceEntry> trace;
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  // Final parameters re-evaluated on every latent code seen during training.
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double heldout_loss = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::string divergence_reason;
};

template <typename T>
struct RunRecord {
  std::string kind = "soft";
  OptimizerConfig config;
  Objective objective = ClassCE{0};
  PromptTemplate prompt;
  int sampling_steps = 4;
  std::size_t param_rows = 0;
  std::size_t param_cols = 0;
  std::vector<RestartRecord<T>> restarts;
  std::size_t selected = 0;
  std::vector<std::uint64_t> heldout_seeds;

  // Sequence produced by the selected restart's final parameters (N×d).
  std::vector<T> final_embeddings;
  std::vector<T> initial_embeddings;
  std::size_t embedding_rows = 0;
  std::size_t embedding_cols = 0;
  std::vector<bool> learnable_rows;

  double heldout_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();

  // Hard-prompt runs only.
  std::optional<std::string> prompt_text;
  std::vector<TokenId> hard_tokens;

  const RestartRecord<T> &chosen() const { return restarts.at(selected); }

  EmbeddingSequence<T> final_sequence() const {
    return {ad::constant(final_embeddings, embedding_rows, embedding_cols), learnable_rows};
  }
  EmbeddingSequence<T> initial_sequence() const {
    return {ad::constant(initial_embeddings, embedding_rows, embedding_cols), learnable_rows};
  }

  std::vector<std::uint64_t> training_seeds(std::size_t restart) const {
    std::set<std::uint64_t> s;
    for (const auto &e : restarts.at(restart).trace) s.insert(e.seeds.begin(), e.seeds.end());
    return {s.begin(), s.end()};
  }
};

// Index of the non-diverged restart with the lowest held-out loss; ties go to
// the lower index. Returns nullopt when every restart diverged.
inline std::optional<std::size_t> select_restart(const std::vector<double> &heldout, const std::vector<bool> &diverged) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    if (diverged[i] || !std::isfinite(heldout[i])) continue;
    if (!best || heldout[i] < heldout[*best]) best = i;
  }
  return best;
}

template <typename T>
std::vector<T> init_learnable(const Vocabulary<T> &vocab, std::size_t rows, InitStrategy strategy,
                              std::uint64_t seed) {
  const std::size_t d = vocab.width();
  std::vector<T> out;
  out.reserve(rows * d);
  if (strategy == InitStrategy::neutral_token_copy) {
    const auto e = vocab.embedding(vocab.neutral());
    for (std::size_t r = 0; r < rows; ++r) out.insert(out.end(), e.begin(), e.end());
    return out;
  }
  // Per-coordinate statistics of the embedding table.
  const auto &table = vocab.table();
  const std::size_t V = vocab.size();
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t j = 0; j < d; ++j) mu[j] += table[v * d + j];
  for (auto &m : mu) m /= static_cast<double>(V);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (table[v * d + j] - mu[j]) * (table[v * d + j] - mu[j]);
  for (auto &s : sd) s = std::sqrt(s / static_cast<double>(V));
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out.push_back(static_cast<T>(mu[j] + sd[j] * normal(rng)));
  return out;
}

template <typename T>
std::vector<T> init_learnable(const Vocabulary<T> &vocab, const PromptTemplate &tmpl, InitStrategy strategy,
                              std::uint64_t seed) {
  return init_learnable(vocab, tmpl.learnable_count(), strategy, seed);
}

template <typename T>
class Adam {
 public:
  explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void update(std::vector<T> &params, const std::vector<T> &grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1 - b2_) * grad[i] * grad[i];
      params[i] -= static_cast<T>(lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
    }
  }

 private:
  std::vector<double> m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
// norm before clipping.
template <typename T>
double clip_global_norm(std::vector<T> &grad, double max_norm) {
  double sq = 0;
  for (T g : grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (T &g : grad) g = static_cast<T>(g * s);
  }
  return norm;
}

// Per-latent-code objective values of a fixed embedding sequence.
template <typename T>
std::vector<double> evaluate_per_seed(const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                                      const Objective &objective, const EmbeddingSequence<T> &seq,
                                      const std::vector<std::uint64_t> &seeds, int steps) {
  std::vector<double> out;
  out.reserve(seeds.size());
  for (auto s : seeds) {
    const auto img = generate(pipe, seq, pipe.denoiser->sample_prior(s), steps);
    out.push_back(static_cast<double>(image_loss(objective, probe, probe.forward(img)).item()));
  }
  return out;
}

template <typename T>
double evaluate_embedding(const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                          const Objective &objective, const EmbeddingSequence<T> &seq,
                          const std::vector<std::uint64_t> &seeds, int steps) {
  if (seeds.empty()) throw ContractViolation("evaluation needs at least one seed");
  const auto v = evaluate_per_seed(pipe, probe, objective, seq, seeds, steps);
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline std::vector<std::uint64_t> heldout_seed_set(int count) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < count; ++i) s.push_back(heldout_seed(static_cast<std::uint64_t>(i)));
  return s;
}

// Mean objective of the run's final embeddings over held-out latent codes.
template <typename T>
double evaluate_generalization(const RunRecord<T> &record, const GeneratorPipeline<T> &pipe,
                               const ClassifierProbe<T> &probe, const Objective &objective,
                               const std::vector<std::uint64_t> &heldout) {
  for (std::size_t r = 0; r < record.restarts.size(); ++r) {
    const auto train = record.training_seeds(r);
    for (auto s : heldout)
      if (std::binary_search(train.begin(), train.end(), s))
        throw ContractViolation("held-out seed " + std::to_string(s) + " was used for training");
  }
  return evaluate_embedding(pipe, probe, objective, record.final_sequence(), heldout, record.sampling_steps);
}

namespace detail {

// How a flat parameter vector becomes an embedding sequence. The soft-prompt
// driver maps parameters to learnable rows directly; the hard-prompt driver
// routes them through a Gumbel-Softmax selection over the vocabulary.
template <typename T>
struct Parameterization {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::function<std::vector<T>(std::uint64_t restart_seed)> initial;
  std::function<EmbeddingSequence<T>(const ad::Var<T> &params, int step, std::uint64_t restart_seed)> training;
  std::function<EmbeddingSequence<T>(const std::vector<T> &params)> evaluation;
};

template <typename T>
RestartRecord<T> run_restart(const Parameterization<T> &param, const Objective &objective,
                             const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                             const OptimizerConfig &cfg, int index, const std::vector<std::uint64_t> &heldout) {
  RestartRecord<T> rec;
  rec.index = index;
  rec.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(index));
  std::vector<T> params = param.initial(rec.seed);
  rec.initial_params = params;
  Adam<T> adam(params.size(), cfg.learning_rate);

  auto step_seeds = [&](int step) {
    std::vector<std::uint64_t> s;
    const int src = cfg.resample_noise ? step : 0;
    for (int b = 0; b < cfg.batch_size; ++b)
      s.push_back(training_seed(derive_seed(rec.seed, static_cast<std::uint64_t>(src) + 1, static_cast<std::uint64_t>(b))));
    return s;
  };

  for (int step = 0; step < cfg.steps; ++step) {
    TraceEntry entry;
    entry.step = step;
    entry.seeds = step_seeds(step);
    auto p = ad::parameter(params, param.rows, param.cols);
    ad::Var<T> batch;
    try {
      const auto seq = param.training(p, step, rec.seed);
      std::vector<ad::Var<T>> per;
      for (auto s : entry.seeds) {
        const auto img = generate(pipe, seq, pipe.denoiser->sample_prior(s), pipe.sampling_steps);
        per.push_back(image_loss(objective, probe, probe.forward(img)));
        entry.sample_losses.push_back(static_cast<double>(per.back().item()));
      }
      batch = ad::mean(ad::concat_cols(per));
    } catch (const NonFiniteError &e) {
      rec.diverged = true;
      rec.divergence_reason = std::string("step ") + std::to_string(step) + ": " + e.what();
      break;
    }
    entry.loss = static_cast<double>(batch.item());
    rec.trace.push_back(entry);
    if (!std::isfinite(entry.loss)) {
      rec.diverged = true;
      rec.divergence_reason = "non-finite loss at step " + std::to_string(step);
      break;
    }
    if (step == 0) rec.initial_loss = entry.loss;
    if (entry.loss > divergence_threshold(rec.initial_loss, cfg.divergence_factor)) {
      rec.diverged = true;
      rec.divergence_reason = "loss " + std::to_string(entry.loss) + " exceeded divergence threshold at step " +
                              std::to_string(step);
      break;
    }
    ad::backward(batch);
    auto grad = p.grad();
    clip_global_norm(grad, cfg.grad_clip);
    adam.update(params, grad);
  }
  rec.final_params = params;
  if (rec.diverged) return rec;

  const auto seq = param.evaluation(params);
  if (!rec.trace.empty()) {
    rec.final_loss = rec.trace.back().loss;
    std::set<std::uint64_t> seen;
    for (const auto &e : rec.trace) seen.insert(e.seeds.begin(), e.seeds.end());
    rec.final_train_loss = evaluate_embedding(pipe, probe, objective, seq, {seen.begin(), seen.end()},
                                              pipe.sampling_steps);
  }
  rec.heldout_loss = evaluate_embedding(pipe, probe, objective, seq, heldout, pipe.sampling_steps);
  if (!std::isfinite(rec.heldout_loss)) {
    rec.diverged = true;
    rec.divergence_reason = "non-finite held-out loss";
  }
  return rec;
}

template <typename T>
RunRecord<T> run_optimization(const std::string &kind, const PromptTemplate &tmpl, const Objective &objective,
                              const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                              const OptimizerConfig &cfg, const Parameterization<T> &param) {
  cfg.validate();
  tmpl.validate(*pipe.vocabulary);
  validate_objective(objective, probe);
  if (tmpl.learnable_count() == 0) throw Rejected("prompt template has no learnable slot to optimize");

  RunRecord<T> record;
  record.kind = kind;
  record.config = cfg;
  record.objective = objective;
  record.prompt = tmpl;
  record.sampling_steps = pipe.sampling_steps;
  record.param_rows = param.rows;
  record.param_cols = param.cols;
  record.heldout_seeds = heldout_seed_set(cfg.heldout_count);

  std::vector<RestartRecord<T>> restarts(static_cast<std::size_t>(cfg.restarts));
  if (cfg.jobs > 1 && cfg.restarts > 1) {
    std::vector<std::future<RestartRecord<T>>> futures;
    for (int r = 0; r < cfg.restarts; ++r)
      futures.push_back(std::async(std::launch::async, [&, r] {
        return run_restart(param, objective, pipe, probe, cfg, r, record.heldout_seeds);
      }));
    for (int r = 0; r < cfg.restarts; ++r) restarts[static_cast<std::size_t>(r)] = futures[static_cast<std::size_t>(r)].get();
  } else {
    for (int r = 0; r < cfg.restarts; ++r)
      restarts[static_cast<std::size_t>(r)] = run_restart(param, objective, pipe, probe, cfg, r, record.heldout_seeds);
  }
  record.restarts = std::move(restarts);

  std::vector<double> held;
  std::vector<bool> div;
  for (const auto &r : record.restarts) {
    held.push_back(r.heldout_loss);
    div.push_back(r.diverged);
  }
  const auto best = select_restart(held, div);
  if (!best) {
    std::vector<std::uint64_t> seeds;
    std::string msg = "all restarts diverged (seeds:";
    for (const auto &r : record.restarts) {
      seeds.push_back(r.seed);
      msg += " " + std::to_string(r.seed);
    }
    throw DivergenceError(msg + ")", std::move(seeds));
  }
  record.selected = *best;
  const auto &chosen = record.restarts[*best];
  const auto fin = param.evaluation(chosen.final_params);
  const auto ini = param.evaluation(chosen.initial_params);
  record.final_embeddings.assign(fin.rows.value().begin(), fin.rows.value().end());
  record.initial_embeddings.assign(ini.rows.value().begin(), ini.rows.value().end());
  record.embedding_rows = fin.length();
  record.embedding_cols = fin.width();
  record.learnable_rows = fin.learnable;
  record.heldout_loss = chosen.heldout_loss;
  record.final_train_loss = chosen.final_train_loss;
  return record;
}

}  // namespace detail

// Stochastic gradient descent over the learnable rows of `tmpl`, drawing fresh
// latent codes every step and keeping the restart with the best held-out loss.
template <typename T>
RunRecord<T> optimize(const PromptTemplate &tmpl, const Objective &objective, const GeneratorPipeline<T> &pipe,
                      const ClassifierProbe<T> &probe, const OptimizerConfig &cfg) {
  const auto &vocab = *pipe.vocabulary;
  detail::Parameterization<T> param;
  param.rows = tmpl.learnable_count();
  param.cols = vocab.width();
  param.initial = [&](std::uint64_t restart_seed) {
    return init_learnable(vocab, tmpl, cfg.init, derive_seed(restart_seed, 0x1417));
  };
  param.training = [&](const ad::Var<T> &p, int, std::uint64_t) { return encode_prompt(vocab, tmpl, p); };
  param.evaluation = [&](const std::vector<T> &p) {
    return encode_prompt(vocab, tmpl, ad::constant(p, tmpl.learnable_count(), vocab.width()));
  };
  return detail::run_optimization("soft", tmpl, objective, pipe, probe, cfg, param);
}

}  // namespace amx
