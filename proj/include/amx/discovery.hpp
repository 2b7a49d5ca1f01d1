#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "amx/csv.hpp"
#include "amx/errors.hpp"
#include "amx/objective.hpp"
#include "amx/optimizer.hpp"
#include "amx/parallel.hpp"
#include "amx/pipeline.hpp"
#include "amx/sampler.hpp"
#include "amx/segmentation.hpp"

namespace amx {

// ---------------------------------------------------------------------------
// Ranking

inline constexpr const char *kRankWeightActivation = "weight_x_mean_activation";
inline constexpr const char *kRankAbsWeight = "abs_weight";

struct FeatureRanking {
  std::size_t cls = 0;
  std::vector<std::size_t> features;
  std::vector<double> scores;
  std::string method;
};

// Orders feature indices by descending score; equal scores keep the lower
// index first.
inline std::vector<std::size_t> top_k_indices(const std::vector<double> &scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

// Importance of feature j for class c: w_cj × mean activation of j over the
// probe images, or |w_cj| when no probe images are given.
template <typename T>
FeatureRanking rank_features(const ClassifierProbe<T> &probe, std::size_t c, std::size_t k = 5,
                             const ImageBatch<T> *probe_images = nullptr) {
  const auto &model = probe.model();
  probe.check_target(ProbeTarget::class_logit(c));
  const std::size_t F = model.feature_count();
  if (k == 0 || k > F)
    throw Rejected("cannot rank top " + std::to_string(k) + " of " + std::to_string(F) + " features");
  const auto &W = model.classification_weights();
  std::vector<double> score(F);
  FeatureRanking r;
  r.cls = c;
  if (probe_images) {
    if (probe_images->empty()) throw Rejected("probe image set is empty");
    std::vector<double> mean(F, 0.0);
    for (const auto &img : *probe_images) {
      validate_image(img);
      const auto f = probe.feature_vector(probe.forward(to_constant(img)));
      for (std::size_t j = 0; j < F; ++j) mean[j] += f[j];
    }
    for (std::size_t j = 0; j < F; ++j)
      score[j] = static_cast<double>(W[c * F + j]) * (mean[j] / static_cast<double>(probe_images->size()));
    r.method = kRankWeightActivation;
  } else {
    for (std::size_t j = 0; j < F; ++j) score[j] = std::abs(static_cast<double>(W[c * F + j]));
    r.method = kRankAbsWeight;
  }
  r.features = top_k_indices(score, k);
  for (auto j : r.features) r.scores.push_back(score[j]);
  return r;
}

// ---------------------------------------------------------------------------
// Verdicts

enum class Verdict { core, spurious, inconclusive };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::core: return "core";
    case Verdict::spurious: return "spurious";
    case Verdict::inconclusive: break;
  }
  return "inconclusive";
}

inline Verdict parse_verdict(const std::string &s) {
  if (s == "core") return Verdict::core;
  if (s == "spurious") return Verdict::spurious;
  if (s == "inconclusive") return Verdict::inconclusive;
  throw SchemaError("unknown verdict '" + s + "'");
}

inline double object_fraction(const SegmentationMask &mask) {
  const std::size_t n = mask.height * mask.width;
  if (n == 0 || mask.pixels.size() != n) throw Rejected("invalid segmentation mask");
  return static_cast<double>(mask.count()) / static_cast<double>(n);
}

// Mean of the samples, summed in sorted order so any permutation of the same
// samples gives the bit-identical result.
inline double mean_fraction(std::vector<double> r) {
  if (r.empty()) throw Rejected("no object-fraction samples");
  std::sort(r.begin(), r.end());
  double s = 0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

// core iff mean(r) >= delta.
inline Verdict classify_feature(const std::vector<double> &r, double delta) {
  if (r.empty()) throw Rejected("cannot classify a feature without samples");
  if (!(delta > 0.0 && delta < 1.0)) throw Rejected("delta must be in (0, 1), got " + std::to_string(delta));
  for (double v : r)
    if (!(v >= 0.0 && v <= 1.0)) throw Rejected("object fraction " + std::to_string(v) + " outside [0, 1]");
  return mean_fraction(r) >= delta ? Verdict::core : Verdict::spurious;
}

// ---------------------------------------------------------------------------
// Audits

template <typename T>
RunRecord<T> optimize_feature_for_class(const PromptTemplate &tmpl, std::size_t c, std::size_t j, double lambda,
                                        const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                                        const OptimizerConfig &cfg) {
  return optimize(tmpl, Objective{Combined{c, j, lambda}}, pipe, probe, cfg);
}

struct AuditConfig {
  std::size_t top_k = 5;
  std::size_t samples = 10;
  double delta = 0.05;
  double lambda = 1.0;
  OptimizerConfig optimizer;
  SegmentationConfig segmentation;
  std::string prefix;
  std::size_t learnable = 1;
  // Explanation samples use seeds sample_seed_base .. + samples - 1, well
  // away from the training and held-out ranges.
  std::uint64_t sample_seed_base = heldout_seed(1ULL << 40);
  // Feature audits of one class run on at most this many threads.
  int jobs = 1;

  void validate() const {
    optimizer.validate();
    segmentation.validate();
    if (samples == 0) throw Rejected("audit needs at least one sample per feature");
    if (!(delta > 0.0 && delta < 1.0)) throw Rejected("delta must be in (0, 1), got " + std::to_string(delta));
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Rejected("lambda must be finite and >= 0");
    if (learnable == 0) throw Rejected("audit prompt needs at least one learnable slot");
    if (jobs < 1) throw Rejected("jobs must be >= 1");
  }
};

// Optimizer seed for one (class, feature) audit, independent of scheduling.
inline std::uint64_t audit_seed(std::uint64_t base, std::size_t c, std::size_t j) { return derive_seed(base, c, j); }

template <typename T>
struct FeatureAudit {
  std::size_t cls = 0;
  std::size_t feature = 0;
  std::size_t rank = 0;
  double score = 0;
  std::vector<double> r_samples;
  double mean_r = std::numeric_limits<double>::quiet_NaN();
  double delta = 0.05;
  Verdict verdict = Verdict::inconclusive;
  std::string error;
  std::optional<RunRecord<T>> record;
  std::optional<SampleSet<T>> samples;
  std::vector<SegmentationMask> masks;
};

template <typename T>
struct ClassAudit {
  std::size_t cls = 0;
  std::string class_name;
  FeatureRanking ranking;
  std::vector<FeatureAudit<T>> features;
};

template <typename T>
FeatureAudit<T> audit_feature(std::size_t c, std::size_t j, const GeneratorPipeline<T> &pipe,
                              const ClassifierProbe<T> &probe, const Segmenter &segmenter, const AuditConfig &cfg) {
  FeatureAudit<T> a;
  a.cls = c;
  a.feature = j;
  a.delta = cfg.delta;
  const auto tmpl = PromptTemplate::with_prefix(*pipe.vocabulary, cfg.prefix, cfg.learnable);
  OptimizerConfig oc = cfg.optimizer;
  oc.seed = audit_seed(cfg.optimizer.seed, c, j);
  try {
    a.record = optimize_feature_for_class(tmpl, c, j, cfg.lambda, pipe, probe, oc);
  } catch (const DivergenceError &e) {
    a.error = e.what();
    return a;
  } catch (const NonFiniteError &e) {
    a.error = e.what();
    return a;
  }
  a.samples = sample(*a.record, pipe, probe, cfg.samples, cfg.sample_seed_base);
  const auto &name = probe.model().class_names().at(c);
  for (const auto &img : a.samples->images) {
    a.masks.push_back(segment(segmenter, img, name, cfg.segmentation));
    a.r_samples.push_back(object_fraction(a.masks.back()));
  }
  a.mean_r = mean_fraction(a.r_samples);
  a.verdict = classify_feature(a.r_samples, cfg.delta);
  return a;
}

// Ranks class c's features, then for each of the top-k: optimizes the
// combined objective, samples explanations, segments them with the class
// name and issues a verdict. A feature whose optimization fails is recorded
// as inconclusive with the error message.
template <typename T>
ClassAudit<T> audit_class(std::size_t c, const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                          const Segmenter &segmenter, const AuditConfig &cfg,
                          const ImageBatch<T> *probe_images = nullptr) {
  cfg.validate();
  ClassAudit<T> out;
  out.cls = c;
  out.ranking = rank_features(probe, c, cfg.top_k, probe_images);
  out.class_name = probe.model().class_names().at(c);
  out.features = parallel_map(out.ranking.features.size(), cfg.jobs, [&](std::size_t i) {
    auto a = audit_feature(c, out.ranking.features[i], pipe, probe, segmenter, cfg);
    a.rank = i;
    a.score = out.ranking.scores[i];
    return a;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Agreement with human annotations

struct VerdictEntry {
  std::size_t class_id = 0;
  std::size_t feature = 0;
  Verdict verdict = Verdict::inconclusive;
};

struct Annotation {
  std::size_t class_id = 0;
  std::string class_name;
  std::size_t feature = 0;
  Verdict label = Verdict::core;
  std::string animacy = "unknown";
};

inline constexpr const char *kAnnotationHeader = "class_id,class_name,feature_index,label,animacy";

namespace detail {
inline std::size_t parse_index(const std::string &s, const std::string &what, std::size_t line) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (s.empty() || used != s.size() || s[0] == '-')
    throw SchemaError("line " + std::to_string(line) + ": " + what + " '" + s + "' is not a non-negative integer");
  return static_cast<std::size_t>(v);
}
}  // namespace detail

inline std::vector<Annotation> parse_annotations(std::istream &in) {
  std::string line;
  std::size_t n = 0;
  if (!std::getline(in, line)) throw SchemaError("annotation file is empty");
  ++n;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kAnnotationHeader)
    throw SchemaError("annotation header must be '" + std::string(kAnnotationHeader) + "', got '" + line + "'");
  std::vector<Annotation> out;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto f = csv::split(line);
    if (f.size() != 5) throw SchemaError("line " + std::to_string(n) + ": expected 5 fields, got " + std::to_string(f.size()));
    Annotation a;
    a.class_id = detail::parse_index(f[0], "class_id", n);
    a.class_name = f[1];
    a.feature = detail::parse_index(f[2], "feature_index", n);
    if (f[3] == "core") a.label = Verdict::core;
    else if (f[3] == "spurious") a.label = Verdict::spurious;
    else throw SchemaError("line " + std::to_string(n) + ": label must be core or spurious, got '" + f[3] + "'");
    if (f[4] != "animate" && f[4] != "inanimate" && f[4] != "unknown")
      throw SchemaError("line " + std::to_string(n) + ": animacy must be animate, inanimate or unknown, got '" + f[4] + "'");
    a.animacy = f[4];
    if (!seen.insert({a.class_id, a.feature}).second)
      throw SchemaError("line " + std::to_string(n) + ": duplicate annotation for class " + std::to_string(a.class_id) +
                        " feature " + std::to_string(a.feature));
    out.push_back(std::move(a));
  }
  return out;
}

inline std::string format_annotations(const std::vector<Annotation> &rows) {
  std::ostringstream s;
  s << kAnnotationHeader << '\n';
  for (const auto &a : rows)
    s << a.class_id << ',' << csv::field(a.class_name) << ',' << a.feature << ',' << to_string(a.label) << ','
      << a.animacy << '\n';
  return s.str();
}

struct GroupAgreement {
  std::size_t matched = 0;
  std::size_t total = 0;
  double fraction() const {
    return total ? static_cast<double>(matched) / static_cast<double>(total) : std::numeric_limits<double>::quiet_NaN();
  }
};

struct AgreementReport {
  GroupAgreement overall;
  std::map<std::string, GroupAgreement> by_bias;
  std::map<std::string, GroupAgreement> by_animacy;
  std::map<std::size_t, std::string> class_bias;
  std::vector<std::pair<std::size_t, std::size_t>> unmatched;  // (class, feature) without annotation
};

// A class is unbiased when none of its annotated features is spurious,
// biased when this many are, medium otherwise.
inline constexpr std::size_t kBiasedSpuriousCount = 5;

inline std::string bias_level(std::size_t spurious) {
  if (spurious == 0) return "unbiased";
  if (spurious >= kBiasedSpuriousCount) return "biased";
  return "medium";
}

// Fraction of verdicts equal to the annotated label. Inconclusive verdicts
// count as disagreements.
inline AgreementReport agreement(const std::vector<VerdictEntry> &verdicts, const std::vector<Annotation> &annotations) {
  std::map<std::pair<std::size_t, std::size_t>, const Annotation *> index;
  std::map<std::size_t, std::size_t> spurious;
  for (const auto &a : annotations) {
    if (!index.emplace(std::pair{a.class_id, a.feature}, &a).second)
      throw SchemaError("duplicate annotation for class " + std::to_string(a.class_id) + " feature " +
                        std::to_string(a.feature));
    spurious[a.class_id] += a.label == Verdict::spurious;
  }
  AgreementReport r;
  for (const auto &[c, n] : spurious) r.class_bias[c] = bias_level(n);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto &v : verdicts) {
    const std::pair key{v.class_id, v.feature};
    if (!seen.insert(key).second)
      throw Rejected("duplicate verdict for class " + std::to_string(v.class_id) + " feature " + std::to_string(v.feature));
    const auto it = index.find(key);
    if (it == index.end()) {
      r.unmatched.push_back(key);
      continue;
    }
    const bool match = v.verdict == it->second->label;
    for (auto *g : {&r.overall, &r.by_bias[r.class_bias[v.class_id]]}) {
      g->total += 1;
      g->matched += match;
    }
    if (it->second->animacy != "unknown") {
      auto &g = r.by_animacy[it->second->animacy];
      g.total += 1;
      g.matched += match;
    }
  }
  return r;
}

}  // namespace amx
