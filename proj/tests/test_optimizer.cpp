#include <gtest/gtest.h>

#include <cmath>

#include "amx/optimizer.hpp"
#include "support.hpp"

using namespace amx;

namespace {

struct Env {
  GeneratorPipeline<float> pipe = test::world().pipeline<float>();
  ClassifierProbe<float> probe = test::world().probe<float>();
};

const Env &env() {
  static const Env e;
  return e;
}

OptimizerConfig small_config(int steps = 12, int restarts = 2) {
  OptimizerConfig cfg;
  cfg.steps = steps;
  cfg.restarts = restarts;
  cfg.heldout_count = 16;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST(Adam, MatchesHandComputedSteps) {
  // Scalar oracle written out from the bias-corrected moment recurrences.
  std::vector<double> p{1.0, -2.0};
  Adam<double> adam(2, 0.1);
  const std::vector<std::vector<double>> grads{{0.5, -3.0}, {0.25, 1.0}, {-1.0, 0.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    adam.update(p, grads[t - 1]);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][static_cast<std::size_t>(i)];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, double(t)));
      const double vh = v[i] / (1 - std::pow(0.999, double(t)));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(p[0], ref[0], 1e-12);
    EXPECT_NEAR(p[1], ref[1], 1e-12);
  }
}

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
  std::vector<double> p{0.0, 0.0, 0.0};
  Adam<double> adam(3, 0.05);
  adam.update(p, {3.0, -1e-3, 0.0});
  EXPECT_NEAR(p[0], -0.05, 1e-9);
  EXPECT_NEAR(p[1], 0.05, 1e-6);
  EXPECT_EQ(p[2], 0.0);
}

TEST(ClipGlobalNorm, ScalesOnlyAboveThreshold) {
  std::vector<double> g{3.0, 4.0};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  std::vector<double> small{0.3, 0.4};
  EXPECT_DOUBLE_EQ(clip_global_norm(small, 1.0), 0.5);
  EXPECT_EQ(small, (std::vector<double>{0.3, 0.4}));
}

TEST(ClipGlobalNorm, PropertyNormNeverExceedsBound) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    auto g = test::random_vector(1 + s % 17, s, 0.1 + double(s % 9));
    const double bound = 0.1 + double(s % 5);
    const auto before = g;
    const double n0 = clip_global_norm(g, bound);
    double sq = 0;
    for (double x : g) sq += x * x;
    EXPECT_LE(std::sqrt(sq), bound * (1 + 1e-12));
    // Direction is preserved.
    const double k = std::min(1.0, bound / n0);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], before[i] * k, 1e-12 * (1 + std::abs(before[i])));
  }
}

TEST(DivergenceThreshold, ScalesWithMagnitudeAndFloorsAtOne) {
  EXPECT_DOUBLE_EQ(divergence_threshold(2.0, 10.0), 20.0);
  EXPECT_DOUBLE_EQ(divergence_threshold(0.01, 10.0), 9.01);
  EXPECT_DOUBLE_EQ(divergence_threshold(-3.0, 10.0), 24.0);
  EXPECT_DOUBLE_EQ(divergence_threshold(0.0, 2.0), 1.0);
}

TEST(SelectRestart, LowestHeldoutTiesToLowerIndex) {
  EXPECT_EQ(select_restart({0.5, 0.2, 0.2}, {false, false, false}), 1u);
  EXPECT_EQ(select_restart({0.1, 0.2, 0.3}, {true, false, false}), 1u);
  EXPECT_EQ(select_restart({NAN, 0.9}, {false, false}), 1u);
  EXPECT_EQ(select_restart({0.1, 0.2}, {true, true}), std::nullopt);
  EXPECT_EQ(select_restart({}, {}), std::nullopt);
}

TEST(SelectRestart, PropertyMatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    std::vector<double> h(n);
    std::vector<bool> d(n);
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = double(rng() % 4);  // small range forces ties
      d[i] = rng() % 4 == 0;
    }
    std::optional<std::size_t> want;
    double best = INFINITY;
    for (std::size_t i = 0; i < n; ++i)
      if (!d[i] && h[i] < best) best = h[i], want = i;
    EXPECT_EQ(select_restart(h, d), want);
  }
}

TEST(InitLearnable, NeutralCopyIsBitEqualToToken) {
  const auto &vocab = *env().pipe.vocabulary;
  const auto p = init_learnable(vocab, 3, InitStrategy::neutral_token_copy, 5);
  const auto e = vocab.embedding(vocab.neutral());
  ASSERT_EQ(p.size(), 3 * vocab.width());
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < vocab.width(); ++j) EXPECT_EQ(p[r * vocab.width() + j], e[j]);
}

TEST(InitLearnable, GaussianMatchesTableStatistics) {
  const auto &vocab = *test::world().vocabulary<double>();
  const std::size_t d = vocab.width(), V = vocab.size(), n = 10000;
  std::vector<double> mu(d, 0), sd(d, 0);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t j = 0; j < d; ++j) mu[j] += vocab.table()[v * d + j] / double(V);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(vocab.table()[v * d + j] - mu[j], 2) / double(V);
  for (auto &s : sd) s = std::sqrt(s);

  const auto p = init_learnable(vocab, n, InitStrategy::gaussian_matched, 99);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0, s = 0;
    for (std::size_t r = 0; r < n; ++r) m += p[r * d + j] / double(n);
    for (std::size_t r = 0; r < n; ++r) s += std::pow(p[r * d + j] - m, 2) / double(n);
    s = std::sqrt(s);
    EXPECT_NEAR(m, mu[j], 0.05 * sd[j]) << "coordinate " << j;
    EXPECT_NEAR(s, sd[j], 0.05 * sd[j]) << "coordinate " << j;
  }
  EXPECT_EQ(init_learnable(vocab, 2, InitStrategy::gaussian_matched, 3),
            init_learnable(vocab, 2, InitStrategy::gaussian_matched, 3));
  EXPECT_NE(init_learnable(vocab, 2, InitStrategy::gaussian_matched, 3),
            init_learnable(vocab, 2, InitStrategy::gaussian_matched, 4));
}

TEST(InitStrategyNames, RoundTrip) {
  for (auto s : {InitStrategy::neutral_token_copy, InitStrategy::gaussian_matched})
    EXPECT_EQ(parse_init_strategy(to_string(s)), s);
  EXPECT_THROW(parse_init_strategy("zeros"), Rejected);
}

TEST(OptimizerConfig, ValidateRejectsBadValues) {
  OptimizerConfig ok;
  EXPECT_NO_THROW(ok.validate());
  const std::vector<std::function<void(OptimizerConfig &)>> bad{
      [](auto &c) { c.learning_rate = 0; },    [](auto &c) { c.learning_rate = NAN; },
      [](auto &c) { c.steps = -1; },           [](auto &c) { c.batch_size = 0; },
      [](auto &c) { c.restarts = 0; },         [](auto &c) { c.grad_clip = 0; },
      [](auto &c) { c.divergence_factor = 1; }, [](auto &c) { c.heldout_count = 0; },
      [](auto &c) { c.jobs = 0; }};
  for (const auto &f : bad) {
    OptimizerConfig c;
    f(c);
    EXPECT_THROW(c.validate(), Rejected);
  }
}

TEST(Optimize, RecordShapeAndFrozenRows) {
  const auto &e = env();
  const auto &vocab = *e.pipe.vocabulary;
  const auto tmpl = PromptTemplate::with_prefix(vocab, "a", 2);
  const auto cfg = small_config();
  const auto rec = optimize(tmpl, ClassCE{1}, e.pipe, e.probe, cfg);

  ASSERT_EQ(rec.restarts.size(), 2u);
  for (const auto &r : rec.restarts) {
    EXPECT_EQ(r.trace.size(), std::size_t(cfg.steps));
    for (std::size_t s = 0; s < r.trace.size(); ++s) {
      EXPECT_EQ(r.trace[s].step, int(s));
      EXPECT_EQ(r.trace[s].seeds.size(), 2u);
      ASSERT_EQ(r.trace[s].sample_losses.size(), 2u);
      EXPECT_NEAR(r.trace[s].loss, (r.trace[s].sample_losses[0] + r.trace[s].sample_losses[1]) / 2, 1e-5);
    }
    EXPECT_EQ(r.initial_loss, r.trace.front().loss);
    EXPECT_EQ(r.final_loss, r.trace.back().loss);
    EXPECT_FALSE(r.diverged);
  }
  // Distinct fresh codes at every step.
  EXPECT_EQ(rec.training_seeds(0).size(), std::size_t(2 * cfg.steps));

  ASSERT_EQ(rec.embedding_rows, tmpl.length());
  const std::size_t d = rec.embedding_cols;
  for (std::size_t i = 0; i < tmpl.length(); ++i) {
    const auto *f = std::get_if<FixedSlot>(&tmpl.slots()[i]);
    EXPECT_EQ(rec.learnable_rows[i], f == nullptr);
    if (!f) continue;
    const auto row = vocab.embedding(f->token);
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(rec.final_embeddings[i * d + j], row[j]);
  }

  // The stored selection is the argmin of the stored held-out losses.
  std::vector<double> h;
  std::vector<bool> dv;
  for (const auto &r : rec.restarts) h.push_back(r.heldout_loss), dv.push_back(r.diverged);
  EXPECT_EQ(select_restart(h, dv), rec.selected);
  EXPECT_EQ(rec.heldout_loss, rec.chosen().heldout_loss);
}

TEST(Optimize, DeterministicAndIndependentOfJobs) {
  const auto &e = env();
  const auto tmpl = PromptTemplate::with_prefix(*e.pipe.vocabulary, "", 1);
  auto cfg = small_config(6, 3);
  const auto a = optimize(tmpl, FeatureMax{3}, e.pipe, e.probe, cfg);
  cfg.jobs = 3;
  const auto b = optimize(tmpl, FeatureMax{3}, e.pipe, e.probe, cfg);
  EXPECT_EQ(a.final_embeddings, b.final_embeddings);
  EXPECT_EQ(a.selected, b.selected);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(a.restarts[r].heldout_loss, b.restarts[r].heldout_loss);
  cfg.seed = 8;
  const auto c = optimize(tmpl, FeatureMax{3}, e.pipe, e.probe, cfg);
  EXPECT_NE(a.final_embeddings, c.final_embeddings);
}

TEST(Optimize, TraceLossesReproduceThroughEvaluation) {
  const auto &e = env();
  const auto tmpl = PromptTemplate::with_prefix(*e.pipe.vocabulary, "a", 1);
  const auto rec = optimize(tmpl, Combined{2, 9, 0.5}, e.pipe, e.probe, small_config(3, 1));
  const auto &entry = rec.chosen().trace.front();
  for (std::size_t b = 0; b < entry.seeds.size(); ++b) {
    const double v = evaluate_embedding(e.pipe, e.probe, rec.objective, rec.initial_sequence(), {entry.seeds[b]},
                                        rec.sampling_steps);
    EXPECT_NEAR(v, entry.sample_losses[b], 1e-5 * std::max(1.0, std::abs(v)));
  }
}

TEST(Optimize, FeatureMaxRaisesActivationOnHeldoutCodes) {
  const auto &e = env();
  const auto tmpl = PromptTemplate::with_prefix(*e.pipe.vocabulary, "", 1);
  auto cfg = small_config(80, 1);
  const std::size_t j = 5;
  const auto rec = optimize(tmpl, FeatureMax{j}, e.pipe, e.probe, cfg);
  const auto held = heldout_seed_set(48);
  const std::vector<std::uint64_t> fresh(held.begin() + 16, held.end());  // not used for selection
  const double before = -evaluate_embedding(e.pipe, e.probe, rec.objective, rec.initial_sequence(), fresh, 4);
  const double after = -evaluate_embedding(e.pipe, e.probe, rec.objective, rec.final_sequence(), fresh, 4);
  EXPECT_GT(after, before);
}

TEST(Optimize, ClassCEReducesTrainingLoss) {
  const auto &e = env();
  const auto tmpl = PromptTemplate::with_prefix(*e.pipe.vocabulary, "", 1);
  const auto rec = optimize(tmpl, ClassCE{0}, e.pipe, e.probe, small_config(80, 1));
  EXPECT_LT(rec.final_train_loss, 0.5 * rec.chosen().initial_loss);
}

TEST(EvaluateGeneralization, RejectsTrainingSeedsAndIsRepeatable) {
  const auto &e = env();
  const auto tmpl = PromptTemplate::with_prefix(*e.pipe.vocabulary, "", 1);
  const auto rec = optimize(tmpl, ClassCE{3}, e.pipe, e.probe, small_config(4, 1));
  const auto train = rec.training_seeds(0);
  EXPECT_THROW(evaluate_generalization(rec, e.pipe, e.probe, rec.objective, {train.front()}), ContractViolation);
  const auto h = heldout_seed_set(8);
  EXPECT_EQ(evaluate_generalization(rec, e.pipe, e.probe, rec.objective, h),
            evaluate_generalization(rec, e.pipe, e.probe, rec.objective, h));
  EXPECT_THROW(evaluate_embedding(e.pipe, e.probe, rec.objective, rec.final_sequence(), {}, 4), ContractViolation);
  for (auto s : h) EXPECT_FALSE(std::binary_search(train.begin(), train.end(), s));
}

TEST(Optimize, RejectsBadInputBeforeComputing) {
  const auto &e = env();
  const auto &vocab = *e.pipe.vocabulary;
  const auto none = PromptTemplate::with_prefix(vocab, "a", 0);
  EXPECT_THROW(optimize(none, ClassCE{0}, e.pipe, e.probe, small_config()), Rejected);
  const auto tmpl = PromptTemplate::with_prefix(vocab, "", 1);
  EXPECT_THROW(optimize(tmpl, ClassCE{99}, e.pipe, e.probe, small_config()), Rejected);
  EXPECT_THROW(optimize(tmpl, FeatureMax{999}, e.pipe, e.probe, small_config()), Rejected);
  EXPECT_THROW(optimize(tmpl, Combined{0, 1, -1.0}, e.pipe, e.probe, small_config()), Rejected);
  auto cfg = small_config();
  cfg.batch_size = 0;
  EXPECT_THROW(optimize(tmpl, ClassCE{0}, e.pipe, e.probe, cfg), Rejected);
}

TEST(Optimize, AllRestartsDivergedNamesSeeds) {
  const auto &e = env();
  const auto tmpl = PromptTemplate::with_prefix(*e.pipe.vocabulary, "", 1);
  auto cfg = small_config(40, 3);
  // A threshold this tight is crossed by sampling noise alone.
  cfg.divergence_factor = 1.0 + 1e-9;
  cfg.learning_rate = 1e-6;
  try {
    optimize(tmpl, ClassCE{0}, e.pipe, e.probe, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError &err) {
    ASSERT_EQ(err.seeds().size(), 3u);
    for (std::size_t r = 0; r < 3; ++r) {
      EXPECT_EQ(err.seeds()[r], derive_seed(cfg.seed, r));
      EXPECT_NE(std::string(err.what()).find(std::to_string(err.seeds()[r])), std::string::npos);
    }
  }
}
