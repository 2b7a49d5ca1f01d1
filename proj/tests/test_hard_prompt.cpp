#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "amx/hard_prompt.hpp"
#include "support.hpp"

using namespace amx;

namespace {

const Vocabulary<double> &vocab_d() {
  static const auto v = test::world().vocabulary<double>();
  return *v;
}

// Relaxed embedding Σ_v softmax((l + g) / τ)_v table_v over non-marker tokens,
// contracted with `w`. Independent of the library's backward pass.
double soft_projection(const std::vector<double> &logits, const std::vector<double> &noise, double tau,
                       const std::vector<double> &w) {
  const auto &v = vocab_d();
  const std::size_t V = v.size(), d = v.width();
  double mx = -INFINITY;
  for (TokenId i = 0; i < V; ++i)
    if (!v.is_marker(i)) mx = std::max(mx, (logits[i] + noise[i]) / tau);
  std::vector<double> s(V, 0.0);
  double z = 0;
  for (TokenId i = 0; i < V; ++i)
    if (!v.is_marker(i)) z += s[i] = std::exp((logits[i] + noise[i]) / tau - mx);
  double out = 0;
  for (TokenId i = 0; i < V; ++i)
    for (std::size_t k = 0; k < d; ++k) out += s[i] / z * v.table()[i * d + k] * w[k];
  return out;
}

}  // namespace

TEST(GumbelSchedule, GeometricFromInitialToFinal) {
  GumbelConfig g;
  EXPECT_DOUBLE_EQ(g.temperature(0, 200), 1.0);
  EXPECT_NEAR(g.temperature(199, 200), 0.1, 1e-15);
  const double r = g.temperature(1, 200) / g.temperature(0, 200);
  for (int s = 1; s < 199; ++s) EXPECT_NEAR(g.temperature(s + 1, 200) / g.temperature(s, 200), r, 1e-12);
  EXPECT_DOUBLE_EQ(g.temperature(0, 1), 1.0);
  for (int s = 0; s + 1 < 50; ++s) EXPECT_GT(g.temperature(s, 50), g.temperature(s + 1, 50));
}

TEST(GumbelSchedule, ValidateRejectsBadTemperatures) {
  GumbelConfig g;
  g.final_temperature = 0;
  EXPECT_THROW(g.validate(), Rejected);
  g = {};
  g.initial_temperature = -1;
  EXPECT_THROW(g.validate(), Rejected);
  g = {};
  g.final_temperature = 2.0;
  EXPECT_THROW(g.validate(), Rejected);
}

TEST(GumbelSelect, TinyTemperatureIsClampedWithWarning) {
  std::vector<std::string> seen;
  auto prev = set_warning_sink([&](const std::string &m) { seen.push_back(m); });
  GumbelConfig g;
  g.initial_temperature = 1e-6;
  g.final_temperature = 1e-7;
  const auto &v = vocab_d();
  const auto sel = gumbel_select(ad::parameter(std::vector<double>(v.size(), 0.0), 1, v.size()), v, g, 0, 10);
  set_warning_sink(prev);
  EXPECT_EQ(sel.temperature, kMinTemperature);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_NE(seen[0].find("clamped"), std::string::npos);
}

TEST(GumbelNoise, DeterministicPerStepAndResampledAcrossSteps) {
  EXPECT_EQ(gumbel_noise(3, 0, 16), gumbel_noise(3, 0, 16));
  EXPECT_NE(gumbel_noise(3, 0, 16), gumbel_noise(3, 1, 16));
  EXPECT_NE(gumbel_noise(3, 0, 16), gumbel_noise(4, 0, 16));
  // Standard Gumbel has mean equal to the Euler-Mascheroni constant.
  const auto g = gumbel_noise(9, 0, 200000);
  double m = 0;
  for (double x : g) m += x / double(g.size());
  EXPECT_NEAR(m, 0.5772156649, 0.01);
}

TEST(GumbelSelect, HardForwardIsExactTableRowAndNeverAMarker) {
  const auto &v = vocab_d();
  const std::size_t V = v.size();
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto logits = test::random_vector(V, seed, 2.0);
    logits[v.sos()] = logits[v.eos()] = 1e6;
    GumbelConfig g;
    g.seed = seed;
    const auto sel = gumbel_select(ad::parameter(logits, 1, V), v, g, int(seed % 7), 10);
    EXPECT_FALSE(v.is_marker(sel.index));
    const auto row = v.embedding(sel.index);
    const auto val = sel.embedding.value();
    EXPECT_TRUE(std::equal(val.begin(), val.end(), row.begin(), row.end()));
    EXPECT_EQ(sel.weights[sel.index], 1.0);
    // Index is the perturbed argmax over candidates.
    for (TokenId i = 0; i < V; ++i) {
      if (v.is_marker(i)) continue;
      EXPECT_LE(logits[i] + sel.noise[i], logits[sel.index] + sel.noise[sel.index]);
    }
    double total = 0;
    for (double s : sel.soft_weights) total += s;
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(sel.soft_weights[v.sos()], 0.0);
  }
}

TEST(GumbelSelect, StraightThroughGradientMatchesRelaxedOracle) {
  const auto &v = vocab_d();
  const std::size_t V = v.size(), d = v.width();
  for (bool hard : {true, false}) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      GumbelConfig g;
      g.hard = hard;
      g.seed = seed;
      const int step = int(seed), total = 8;
      const auto logits = test::random_vector(V, 100 + seed, 0.5);
      const auto w = test::random_vector(d, 200 + seed);
      auto p = ad::parameter(logits, 1, V);
      const auto sel = gumbel_select(p, v, g, step, total);
      ad::backward(ad::sum(ad::mul(sel.embedding, ad::constant(w, 1, d))));
      const auto noise = gumbel_noise(seed, step, V);
      const auto fd = test::numeric_gradient(
          [&](const std::vector<double> &l) { return soft_projection(l, noise, g.temperature(step, total), w); },
          logits);
      for (std::size_t i = 0; i < V; ++i) EXPECT_NEAR(p.grad()[i], fd[i], 1e-6 * (1 + std::abs(fd[i]))) << i;
      if (!hard) {
        EXPECT_NEAR(ad::sum(ad::mul(sel.embedding, ad::constant(w, 1, d))).item(),
                    soft_projection(logits, noise, g.temperature(step, total), w), 1e-10);
      }
    }
  }
}

TEST(GumbelSelect, RejectsBadLogits) {
  const auto &v = vocab_d();
  GumbelConfig g;
  EXPECT_THROW(gumbel_select(ad::constant(std::vector<double>(3, 0.0), 1, 3), v, g, 0, 1), ContractViolation);
  std::vector<double> l(v.size(), 0.0);
  l[4] = NAN;
  EXPECT_THROW(gumbel_select(ad::constant(l, 1, v.size()), v, g, 0, 1), Rejected);
}

TEST(DecodeTokens, PerSlotArgmaxSkippingMarkers) {
  const auto &v = vocab_d();
  const std::size_t V = v.size();
  std::vector<double> logits(2 * V, 0.0);
  logits[v.sos()] = 9;
  logits[v.lookup("red")] = 5;
  logits[V + v.eos()] = 9;
  logits[V + v.lookup("dots")] = 1;
  const auto ids = decode_tokens(v, logits, 2);
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[0], v.lookup("red"));
  EXPECT_EQ(ids[1], v.lookup("dots"));
  // All-equal scores pick the lowest non-marker index.
  const std::vector<double> flat(V, 0.0);
  TokenId first = 0;
  while (v.is_marker(first)) ++first;
  EXPECT_EQ(candidate_argmax(v, flat), first);
}

TEST(OptimizeHard, TextReencodesToRecordedSequence) {
  const auto pipe = test::world().pipeline<float>(4, toy::VocabularyKind::compact);
  const auto probe = test::world().probe<float>();
  const auto &vocab = *pipe.vocabulary;
  const auto tmpl = PromptTemplate::with_prefix(vocab, "", 2);
  OptimizerConfig cfg;
  cfg.steps = 15;
  cfg.restarts = 2;
  cfg.heldout_count = 8;
  cfg.seed = 4;
  GumbelConfig g;
  g.seed = 1;
  const auto r = optimize_hard(tmpl, ClassCE{2}, pipe, probe, cfg, g);
  EXPECT_EQ(r.record.kind, "hard");
  ASSERT_EQ(r.record.hard_tokens.size(), 2u);
  for (auto id : r.record.hard_tokens) EXPECT_FALSE(vocab.is_marker(id));
  EXPECT_EQ(r.record.prompt_text, r.text);
  const auto seq = encode_text(vocab, r.text);
  const auto rows = seq.rows.value();
  EXPECT_TRUE(std::equal(rows.begin(), rows.end(), r.record.final_embeddings.begin(), r.record.final_embeddings.end()));
  const double replay = evaluate_embedding(pipe, probe, r.record.objective, seq, r.record.heldout_seeds, 4);
  EXPECT_NEAR(replay, r.record.heldout_loss, 1e-6 * std::max(1.0, std::abs(replay)));
  // Zero logits at start: every restart begins from the same parameters.
  for (const auto &rr : r.record.restarts)
    for (float x : rr.initial_params) EXPECT_EQ(x, 0.0f);
  const auto again = optimize_hard(tmpl, ClassCE{2}, pipe, probe, cfg, g);
  EXPECT_EQ(again.text, r.text);
}
