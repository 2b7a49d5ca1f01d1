#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "amx/errors.hpp"
#include "amx/optimizer.hpp"
#include "amx/pipeline.hpp"

namespace amx {

// Short stable identifier of a run: hash of its kind, objective, seed and
// final embeddings.
template <typename T>
std::string run_id(const RunRecord<T> &r) {
  Checksum c;
  c.add_bytes(r.kind.data(), r.kind.size());
  const auto obj = describe(r.objective);
  c.add_bytes(obj.data(), obj.size());
  c.add(r.config.seed).add(r.final_embeddings);
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << c.value();
  return s.str();
}

// Classifier responses of one generated image.
struct SampleResponses {
  std::vector<double> logits;
  std::vector<double> probabilities;
  std::vector<double> features;
};

template <typename T>
struct SampleSet {
  std::string record_id;
  std::vector<std::uint64_t> seeds;
  ImageBatch<T> images;
  std::vector<SampleResponses> responses;

  std::size_t size() const { return images.size(); }
};

template <typename T>
SampleResponses responses_of(const ClassifierProbe<T> &probe, const ImageVar<T> &img) {
  const auto out = probe.forward(img);
  SampleResponses r;
  r.logits.assign(out.logits.value().begin(), out.logits.value().end());
  const auto p = ad::softmax(out.logits);
  r.probabilities.assign(p.value().begin(), p.value().end());
  const auto f = probe.feature_vector(out);
  r.features.assign(f.value().begin(), f.value().end());
  return r;
}

// Draws n explanation images from the record's final embeddings with seeds
// seed_base .. seed_base + n - 1.
template <typename T>
SampleSet<T> sample(const RunRecord<T> &record, const GeneratorPipeline<T> &pipe, const ClassifierProbe<T> &probe,
                    std::size_t n, std::uint64_t seed_base) {
  const auto width = pipe.text_encoder->embedding_width();
  const auto max_len = pipe.text_encoder->max_length();
  if (record.embedding_cols != width || record.embedding_rows == 0 || record.embedding_rows > max_len ||
      record.final_embeddings.size() != record.embedding_rows * record.embedding_cols)
    throw Rejected("record embeddings are " + std::to_string(record.embedding_rows) + "x" +
                   std::to_string(record.embedding_cols) + " but the pipeline expects up to " + std::to_string(max_len) +
                   "x" + std::to_string(width));
  if (n > 0 && seed_base > std::numeric_limits<std::uint64_t>::max() - (n - 1))
    throw Rejected("seed range overflows 64 bits");
  SampleSet<T> set;
  set.record_id = run_id(record);
  const auto seq = record.final_sequence();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = seed_base + i;
    const auto img = generate(pipe, seq, pipe.denoiser->sample_prior(seed), record.sampling_steps);
    set.seeds.push_back(seed);
    set.responses.push_back(responses_of(probe, img));
    set.images.push_back(to_image(img));
  }
  return set;
}

struct TargetStats {
  ProbeTarget target;
  std::size_t count = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double stddev = std::numeric_limits<double>::quiet_NaN();  // population
  double min = std::numeric_limits<double>::quiet_NaN();
  double max = std::numeric_limits<double>::quiet_NaN();
};

inline double response_value(const SampleResponses &r, const ProbeTarget &t) {
  switch (t.kind) {
    case ProbeTarget::Kind::class_logit: return r.logits.at(t.index);
    case ProbeTarget::Kind::class_probability: return r.probabilities.at(t.index);
    case ProbeTarget::Kind::feature: break;
  }
  return r.features.at(t.index);
}

inline TargetStats summarize(const std::vector<double> &values, const ProbeTarget &target) {
  TargetStats s;
  s.target = target;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  return s;
}

// Per-target summary statistics over the stored responses.
template <typename T>
std::vector<TargetStats> score(const SampleSet<T> &samples, const ClassifierProbe<T> &probe,
                               const std::vector<ProbeTarget> &targets) {
  for (const auto &t : targets) probe.check_target(t);
  std::vector<TargetStats> out;
  for (const auto &t : targets) {
    std::vector<double> v;
    for (const auto &r : samples.responses) v.push_back(response_value(r, t));
    out.push_back(summarize(v, t));
  }
  return out;
}

}  // namespace amx
