#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"
#include "amx/log.hpp"
#include "amx/objective.hpp"
#include "amx/optimizer.hpp"
#include "amx/prompt.hpp"
#include "amx/random.hpp"

namespace amx {

// Temperatures below this are clamped (with a warning) to keep 1/τ finite.
inline constexpr double kMinTemperature = 1e-4;

struct GumbelConfig {
  double initial_temperature = 1.0;
  double final_temperature = 0.1;
  // Forward pass uses the exact one-hot selection; gradients use the soft
  // weights (straight-through).
  bool hard = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(initial_temperature > 0) || !(final_temperature > 0))
      throw Rejected("Gumbel temperatures must be positive");
    if (final_temperature > initial_temperature)
      throw Rejected("final Gumbel temperature must not exceed the initial temperature");
  }

  // Geometric anneal from initial to final over `total` steps.
  double temperature(int step, int total) const {
    if (total <= 1) return initial_temperature;
    const double f = static_cast<double>(step) / static_cast<double>(total - 1);
    return initial_temperature * std::pow(final_temperature / initial_temperature, f);
  }
};

template <typename T>
struct GumbelSelection {
  std::vector<T> weights;       // one-hot when hard, else the soft weights
  std::vector<T> soft_weights;  // softmax((logits + g) / τ) over candidate tokens
  std::vector<double> noise;    // g
  TokenId index = 0;
  double temperature = 1.0;
  ad::Var<T> embedding;  // 1×d
};

// Standard Gumbel draws for one (seed, step).
inline std::vector<double> gumbel_noise(std::uint64_t seed, int step, std::size_t n) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(step)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> g(n);
  for (auto &x : g) {
    double v = u(rng);
    if (v <= 0.0) v = std::numeric_limits<double>::min();
    x = -std::log(-std::log(v));
  }
  return g;
}

// Lowest-index argmax over non-marker tokens.
template <typename T, typename V>
TokenId candidate_argmax(const Vocabulary<T> &vocab, const V &scores) {
  TokenId best = vocab.size();
  for (TokenId v = 0; v < vocab.size(); ++v) {
    if (vocab.is_marker(v)) continue;
    if (best == vocab.size() || scores[v] > scores[best]) best = v;
  }
  if (best == vocab.size()) throw ContractViolation("vocabulary has no selectable tokens");
  return best;
}

// Relaxed selection of one vocabulary token from a 1×V row of logits.
// Sequence markers are never candidates.
template <typename T>
GumbelSelection<T> gumbel_select(const ad::Var<T> &logits, const Vocabulary<T> &vocab, const GumbelConfig &cfg,
                                 int step, int total_steps) {
  cfg.validate();
  const std::size_t V = vocab.size(), d = vocab.width();
  if (logits.rows() != 1 || logits.cols() != V)
    throw ContractViolation("gumbel_select: logits must be 1×" + std::to_string(V));
  if (!ad::all_finite(logits)) throw Rejected("gumbel_select: non-finite logits");

  GumbelSelection<T> sel;
  sel.temperature = cfg.temperature(step, total_steps);
  if (sel.temperature < kMinTemperature) {
    warn("Gumbel temperature " + std::to_string(sel.temperature) + " clamped to " + std::to_string(kMinTemperature));
    sel.temperature = kMinTemperature;
  }
  const double tau = sel.temperature;
  sel.noise = gumbel_noise(cfg.seed, step, V);

  std::vector<double> perturbed(V, -std::numeric_limits<double>::infinity());
  for (TokenId v = 0; v < V; ++v)
    if (!vocab.is_marker(v)) perturbed[v] = (static_cast<double>(logits[v]) + sel.noise[v]) / tau;
  sel.index = candidate_argmax(vocab, perturbed);
  const double mx = perturbed[sel.index];
  std::vector<double> soft(V, 0.0);
  double z = 0;
  for (TokenId v = 0; v < V; ++v)
    if (!vocab.is_marker(v)) z += (soft[v] = std::exp(perturbed[v] - mx));
  for (auto &s : soft) s /= z;
  sel.soft_weights.assign(soft.begin(), soft.end());
  if (cfg.hard) {
    sel.weights.assign(V, T(0));
    sel.weights[sel.index] = T(1);
  } else {
    sel.weights = sel.soft_weights;
  }

  const auto &table = vocab.table();
  std::vector<T> value(d, T(0));
  if (cfg.hard) {
    value = vocab.embedding(sel.index);
  } else {
    for (TokenId v = 0; v < V; ++v)
      for (std::size_t k = 0; k < d; ++k) value[k] += static_cast<T>(soft[v] * table[v * d + k]);
  }
  // d e / d logits_v = (1/τ) s_v (table_v - Σ_u s_u table_u), whichever value
  // the forward pass used.
  sel.embedding = ad::detail::make<T>(std::move(value), 1, d, {logits}, [logits, soft, tau, V, d, table](ad::Node<T> &self) {
    auto &g = logits.node()->ensure_grad();
    std::vector<double> proj(V, 0.0);
    double mean = 0;
    for (TokenId v = 0; v < V; ++v) {
      if (soft[v] == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) proj[v] += static_cast<double>(self.grad[k]) * table[v * d + k];
      mean += soft[v] * proj[v];
    }
    for (TokenId v = 0; v < V; ++v) g[v] += static_cast<T>(soft[v] * (proj[v] - mean) / tau);
  });
  return sel;
}

template <typename T>
struct HardPromptResult {
  RunRecord<T> record;
  std::string text;
};

// Decoded tokens for a H×V logits matrix: per-slot argmax, markers excluded.
template <typename T>
std::vector<TokenId> decode_tokens(const Vocabulary<T> &vocab, const std::vector<T> &logits, std::size_t slots) {
  std::vector<TokenId> ids;
  for (std::size_t h = 0; h < slots; ++h)
    ids.push_back(candidate_argmax(vocab, &logits[h * vocab.size()]));
  return ids;
}

// Gumbel-Softmax search over vocabulary tokens for every learnable slot of
// `tmpl`. Logits start at zero. The returned text re-encodes to exactly the
// sequence whose held-out loss is recorded.
template <typename T>
HardPromptResult<T> optimize_hard(const PromptTemplate &tmpl, const Objective &objective,
                                  const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                                  const OptimizerConfig &cfg, const GumbelConfig &gumbel) {
  gumbel.validate();
  const auto &vocab = *pipe.vocabulary;
  const std::size_t H = tmpl.learnable_count(), V = vocab.size();
  auto rows_for = [&](const std::vector<TokenId> &ids) {
    std::vector<ad::Var<T>> rows;
    for (auto id : ids) rows.push_back(ad::constant(vocab.embedding(id), 1, vocab.width()));
    return rows;
  };

  detail::Parameterization<T> param;
  param.rows = H;
  param.cols = V;
  param.initial = [&](std::uint64_t) { return std::vector<T>(H * V, T(0)); };
  param.training = [&](const ad::Var<T> &p, int step, std::uint64_t restart_seed) {
    std::vector<ad::Var<T>> rows;
    for (std::size_t h = 0; h < H; ++h) {
      GumbelConfig g = gumbel;
      g.seed = derive_seed(restart_seed, gumbel.seed, h);
      rows.push_back(gumbel_select(ad::row(p, h), vocab, g, step, cfg.steps).embedding);
    }
    return encode_prompt_rows(vocab, tmpl, rows);
  };
  param.evaluation = [&](const std::vector<T> &p) {
    return encode_prompt_rows(vocab, tmpl, rows_for(decode_tokens(vocab, p, H)));
  };

  HardPromptResult<T> out;
  out.record = detail::run_optimization("hard", tmpl, objective, pipe, probe, cfg, param);
  out.record.hard_tokens = decode_tokens(vocab, out.record.chosen().final_params, H);
  out.text = tmpl.render(vocab, out.record.hard_tokens);
  out.record.prompt_text = out.text;
  return out;
}

}  // namespace amx
