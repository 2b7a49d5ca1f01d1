#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "amx/discovery.hpp"
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

AuditConfig quick_audit() {
  AuditConfig cfg;
  cfg.top_k = 2;
  cfg.samples = 4;
  cfg.optimizer.steps = 20;
  cfg.optimizer.restarts = 1;
  cfg.optimizer.heldout_count = 8;
  cfg.optimizer.seed = 3;
  return cfg;
}

std::vector<Annotation> parse(const std::string &text) {
  std::istringstream in(text);
  return parse_annotations(in);
}

Annotation ann(std::size_t c, std::size_t j, Verdict label, std::string animacy = "unknown") {
  return {c, "class" + std::to_string(c), j, label, std::move(animacy)};
}

}  // namespace

TEST(TopK, TiesKeepLowerIndex) {
  EXPECT_EQ(top_k_indices({1, 3, 3, 2, 3}, 3), (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(top_k_indices({0, 0}, 5), (std::vector<std::size_t>{0, 1}));
}

TEST(TopK, PropertyMatchesSortOracle) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> s(1 + rng() % 30);
    for (auto &x : s) x = double(rng() % 6);
    const std::size_t k = 1 + rng() % s.size();
    std::vector<std::pair<double, std::size_t>> o;
    for (std::size_t j = 0; j < s.size(); ++j) o.emplace_back(-s[j], j);
    std::sort(o.begin(), o.end());
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < k; ++i) want.push_back(o[i].second);
    EXPECT_EQ(top_k_indices(s, k), want);
  }
}

TEST(RankFeatures, WeightTimesMeanActivationOracle) {
  const auto &e = env();
  const auto imgs = test::world().class_images<float>(1, 6);
  const auto r = rank_features(e.probe, 1, 5, &imgs);
  EXPECT_EQ(r.method, kRankWeightActivation);
  const auto &W = e.probe.model().classification_weights();
  const std::size_t F = e.probe.model().feature_count();
  std::vector<double> score(F);
  for (std::size_t j = 0; j < F; ++j) {
    const auto acts = probe(e.probe, imgs, ProbeTarget::feature(j));
    double m = 0;
    for (float a : acts) m += a;
    score[j] = double(W[1 * F + j]) * m / double(acts.size());
  }
  ASSERT_EQ(r.features.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(r.scores[i], score[r.features[i]], 1e-5);
    if (i > 0) {
      EXPECT_GE(r.scores[i - 1], r.scores[i]);
    }
  }
  const double fifth = r.scores.back();
  std::size_t above = 0;
  for (double s : score) above += s > fifth + 1e-5;
  EXPECT_LE(above, 4u);
}

TEST(RankFeatures, FallsBackToAbsoluteWeight) {
  const auto &e = env();
  const auto r = rank_features(e.probe, 2, 3);
  EXPECT_EQ(r.method, kRankAbsWeight);
  const auto &W = e.probe.model().classification_weights();
  const std::size_t F = e.probe.model().feature_count();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.scores[i], std::abs(double(W[2 * F + r.features[i]])));
  EXPECT_THROW(rank_features(e.probe, 2, 0), Rejected);
  EXPECT_THROW(rank_features(e.probe, 2, F + 1), Rejected);
  EXPECT_THROW(rank_features(e.probe, 99, 3), Rejected);
  const ImageBatch<float> none;
  EXPECT_THROW(rank_features(e.probe, 2, 3, &none), Rejected);
}

TEST(Verdicts, BoundaryIsInclusive) {
  EXPECT_EQ(classify_feature({0.0625}, 0.0625), Verdict::core);
  EXPECT_EQ(classify_feature({0.0625 - 1e-12}, 0.0625), Verdict::spurious);
  EXPECT_EQ(classify_feature({0.1, 0.0}, 0.05), Verdict::core);
  EXPECT_EQ(classify_feature({0.09, 0.0}, 0.05), Verdict::spurious);
  EXPECT_THROW(classify_feature({}, 0.05), Rejected);
  EXPECT_THROW(classify_feature({0.1}, 0.0), Rejected);
  EXPECT_THROW(classify_feature({0.1}, 1.0), Rejected);
  EXPECT_THROW(classify_feature({1.1}, 0.05), Rejected);
  EXPECT_THROW(classify_feature({NAN}, 0.05), Rejected);
  for (auto v : {Verdict::core, Verdict::spurious, Verdict::inconclusive}) EXPECT_EQ(parse_verdict(to_string(v)), v);
  EXPECT_THROW(parse_verdict("maybe"), SchemaError);
}

TEST(Verdicts, PropertyPermutationInvariant) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> r(1 + rng() % 12);
    for (auto &x : r) x = u(rng) * 0.2;
    const double m = mean_fraction(r);
    const auto v = classify_feature(r, 0.05);
    for (int p = 0; p < 5; ++p) {
      std::shuffle(r.begin(), r.end(), rng);
      EXPECT_EQ(mean_fraction(r), m);
      EXPECT_EQ(classify_feature(r, 0.05), v);
    }
    EXPECT_EQ(v == Verdict::core, m >= 0.05);
  }
}

TEST(ObjectFraction, CountsForeground) {
  SegmentationMask m{4, 4, std::vector<std::uint8_t>(16, 0), "x", {}};
  EXPECT_EQ(object_fraction(m), 0.0);
  m.pixels[3] = m.pixels[7] = 1;
  EXPECT_EQ(object_fraction(m), 0.125);
  m.pixels.pop_back();
  EXPECT_THROW(object_fraction(m), Rejected);
}

TEST(Audit, FeatureAuditIsSelfConsistent) {
  const auto &e = env();
  StubSegmenter seg;
  const auto cfg = quick_audit();
  const auto a = audit_feature(0, 0, e.pipe, e.probe, seg, cfg);
  ASSERT_TRUE(a.error.empty()) << a.error;
  ASSERT_TRUE(a.record.has_value());
  EXPECT_EQ(a.record->config.seed, audit_seed(cfg.optimizer.seed, 0, 0));
  ASSERT_EQ(a.r_samples.size(), cfg.samples);
  ASSERT_EQ(a.masks.size(), cfg.samples);
  for (std::size_t i = 0; i < a.masks.size(); ++i) {
    EXPECT_EQ(a.masks[i].prompt, e.probe.model().class_names()[0]);
    EXPECT_EQ(a.r_samples[i], object_fraction(a.masks[i]));
  }
  EXPECT_EQ(a.samples->seeds.front(), cfg.sample_seed_base);
  EXPECT_EQ(a.mean_r, mean_fraction(a.r_samples));
  EXPECT_EQ(a.verdict, classify_feature(a.r_samples, cfg.delta));
}

TEST(Audit, DivergedOptimizationIsInconclusive) {
  const auto &e = env();
  StubSegmenter seg;
  auto cfg = quick_audit();
  cfg.optimizer.divergence_factor = 1.0 + 1e-9;
  cfg.optimizer.learning_rate = 1e-6;
  const auto a = audit_feature(1, 5, e.pipe, e.probe, seg, cfg);
  EXPECT_EQ(a.verdict, Verdict::inconclusive);
  EXPECT_NE(a.error.find("diverged"), std::string::npos);
  EXPECT_FALSE(a.record.has_value());
  EXPECT_TRUE(a.r_samples.empty());
}

TEST(Audit, ClassAuditIndependentOfJobs) {
  const auto &e = env();
  StubSegmenter seg;
  auto cfg = quick_audit();
  const auto a = audit_class(3, e.pipe, e.probe, seg, cfg);
  cfg.jobs = 2;
  const auto b = audit_class(3, e.pipe, e.probe, seg, cfg);
  ASSERT_EQ(a.features.size(), 2u);
  ASSERT_EQ(b.features.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.features[i].feature, a.ranking.features[i]);
    EXPECT_EQ(a.features[i].rank, i);
    EXPECT_EQ(a.features[i].feature, b.features[i].feature);
    EXPECT_EQ(a.features[i].r_samples, b.features[i].r_samples);
    EXPECT_EQ(a.features[i].verdict, b.features[i].verdict);
  }
  EXPECT_EQ(a.class_name, e.probe.model().class_names()[3]);
  cfg.samples = 0;
  EXPECT_THROW(audit_class(3, e.pipe, e.probe, seg, cfg), Rejected);
}

TEST(Annotations, ParseAndFormatRoundTrip) {
  const auto rows = parse(std::string(kAnnotationHeader) +
                          "\r\n0,\"tabby, cat\",3,core,animate\r\n\n2,truck,7,spurious,inanimate\n1,x,0,core,unknown\n");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].class_name, "tabby, cat");
  EXPECT_EQ(rows[1].label, Verdict::spurious);
  EXPECT_EQ(rows[2].animacy, "unknown");
  const auto again = parse(format_annotations(rows));
  ASSERT_EQ(again.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(again[i].class_id, rows[i].class_id);
    EXPECT_EQ(again[i].class_name, rows[i].class_name);
    EXPECT_EQ(again[i].feature, rows[i].feature);
    EXPECT_EQ(again[i].label, rows[i].label);
    EXPECT_EQ(again[i].animacy, rows[i].animacy);
  }
}

TEST(Annotations, ErrorsNameTheLine) {
  const std::string h = std::string(kAnnotationHeader) + "\n";
  auto expect_error = [](const std::string &text, const std::string &needle) {
    try {
      parse(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const SchemaError &e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("", "empty");
  expect_error("class,label\n", "header");
  expect_error(h + "0,a,1,core\n", "line 2");
  expect_error(h + "0,a,1,maybe,animate\n", "label");
  expect_error(h + "0,a,1,core,plant\n", "animacy");
  expect_error(h + "-1,a,1,core,animate\n", "class_id");
  expect_error(h + "0,a,x1,core,animate\n", "feature_index");
  expect_error(h + "0,a,1,core,animate\n0,a,1,spurious,animate\n", "line 3: duplicate");
}

TEST(Agreement, Fixtures) {
  std::vector<Annotation> anns;
  std::vector<VerdictEntry> all, none, half;
  for (std::size_t j = 0; j < 4; ++j) {
    const auto label = j % 2 ? Verdict::spurious : Verdict::core;
    anns.push_back(ann(0, j, label, "animate"));
    all.push_back({0, j, label});
    none.push_back({0, j, label == Verdict::core ? Verdict::spurious : Verdict::core});
    half.push_back({0, j, j < 2 ? label : Verdict::inconclusive});
  }
  EXPECT_EQ(agreement(all, anns).overall.fraction(), 1.0);
  EXPECT_EQ(agreement(none, anns).overall.fraction(), 0.0);
  const auto h = agreement(half, anns);
  EXPECT_EQ(h.overall.matched, 2u);
  EXPECT_EQ(h.overall.total, 4u);
  EXPECT_EQ(h.by_animacy.at("animate").fraction(), 0.5);
  EXPECT_EQ(h.class_bias.at(0), "medium");
  EXPECT_TRUE(std::isnan(agreement({}, anns).overall.fraction()));
}

TEST(Agreement, BiasGroupsAnimacyAndUnmatched) {
  std::vector<Annotation> anns;
  std::vector<VerdictEntry> v;
  // Class 0: no spurious features. Class 1: four. Class 2: five.
  for (std::size_t j = 0; j < 5; ++j) anns.push_back(ann(0, j, Verdict::core, "inanimate"));
  for (std::size_t j = 0; j < 5; ++j) anns.push_back(ann(1, j, j < 4 ? Verdict::spurious : Verdict::core));
  for (std::size_t j = 0; j < 5; ++j) anns.push_back(ann(2, j, Verdict::spurious, "animate"));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 5; ++j) v.push_back({c, j, Verdict::spurious});
  v.push_back({7, 1, Verdict::core});
  const auto r = agreement(v, anns);
  EXPECT_EQ(r.class_bias.at(0), "unbiased");
  EXPECT_EQ(r.class_bias.at(1), "medium");
  EXPECT_EQ(r.class_bias.at(2), "biased");
  EXPECT_EQ(r.by_bias.at("unbiased").fraction(), 0.0);
  EXPECT_EQ(r.by_bias.at("medium").fraction(), 0.8);
  EXPECT_EQ(r.by_bias.at("biased").fraction(), 1.0);
  EXPECT_EQ(r.overall.total, 15u);
  EXPECT_EQ(r.overall.matched, 9u);
  // Animacy "unknown" is not a group.
  EXPECT_EQ(r.by_animacy.count("unknown"), 0u);
  EXPECT_EQ(r.by_animacy.at("inanimate").total, 5u);
  EXPECT_EQ(r.by_animacy.at("animate").total, 5u);
  ASSERT_EQ(r.unmatched.size(), 1u);
  EXPECT_EQ(r.unmatched[0], (std::pair<std::size_t, std::size_t>{7, 1}));
  v.push_back({0, 0, Verdict::core});
  EXPECT_THROW(agreement(v, anns), Rejected);
  EXPECT_EQ(bias_level(4), "medium");
  EXPECT_EQ(bias_level(5), "biased");
}
