#pragma once

#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"
#include "amx/image.hpp"
#include "amx/prompt.hpp"

namespace amx {

// FNV-1a over raw bytes; used to prove frozen weights stay frozen.
class Checksum {
 public:
  template <typename T>
  Checksum &add(const std::vector<T> &v) {
    return add_bytes(v.data(), v.size() * sizeof(T));
  }
  Checksum &add(std::uint64_t v) { return add_bytes(&v, sizeof v); }
  Checksum &add_bytes(const void *data, std::size_t n) {
    const auto *p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

// A draw from the generator's latent prior together with the seed that made it.
template <typename T>
struct LatentCode {
  std::vector<T> values;
  std::uint64_t seed = 0;
};

template <typename T>
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t embedding_width() const = 0;
  virtual std::size_t max_length() const = 0;
  // N×d token embeddings -> 1×k conditioning.
  virtual ad::Var<T> encode(const ad::Var<T> &sequence) const = 0;
  virtual std::uint64_t checksum() const = 0;
};

template <typename T>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::size_t latent_size() const = 0;
  virtual LatentCode<T> sample_prior(std::uint64_t seed) const = 0;
  // One consistency-sampling step k of `total`. The last step returns the
  // clean latent estimate.
  virtual ad::Var<T> step(const ad::Var<T> &latent, const ad::Var<T> &conditioning, const LatentCode<T> &z, int k,
                          int total) const = 0;
  virtual std::uint64_t checksum() const = 0;
};

template <typename T>
class Decoder {
 public:
  virtual ~Decoder() = default;
  virtual ImageShape output_shape() const = 0;
  virtual ImageVar<T> decode(const ad::Var<T> &latent) const = 0;
  virtual std::uint64_t checksum() const = 0;
};

inline constexpr int kMinSamplingSteps = 1;
inline constexpr int kMaxSamplingSteps = 8;

template <typename T>
struct GeneratorPipeline {
  std::shared_ptr<const Vocabulary<T>> vocabulary;
  std::shared_ptr<const TextEncoder<T>> text_encoder;
  std::shared_ptr<const Denoiser<T>> denoiser;
  std::shared_ptr<const Decoder<T>> decoder;
  int sampling_steps = 4;

  std::uint64_t checksum() const {
    Checksum c;
    c.add(vocabulary->table());
    c.add(text_encoder->checksum()).add(denoiser->checksum()).add(decoder->checksum());
    return c.value();
  }
};

// x = D(eps(z, tau(emb))) with `steps` consistency-sampling iterations.
template <typename T>
ImageVar<T> generate(const GeneratorPipeline<T> &pipe, const EmbeddingSequence<T> &emb, const LatentCode<T> &z,
                     int steps) {
  if (steps < kMinSamplingSteps || steps > kMaxSamplingSteps)
    throw Rejected("sampling steps must be in [" + std::to_string(kMinSamplingSteps) + ", " +
                   std::to_string(kMaxSamplingSteps) + "], got " + std::to_string(steps));
  if (z.values.size() != pipe.denoiser->latent_size())
    throw ContractViolation("latent code has " + std::to_string(z.values.size()) + " values, denoiser expects " +
                            std::to_string(pipe.denoiser->latent_size()));
  if (emb.width() != pipe.text_encoder->embedding_width())
    throw ContractViolation("embedding width " + std::to_string(emb.width()) + " does not match text encoder width " +
                            std::to_string(pipe.text_encoder->embedding_width()));
  const auto cond = pipe.text_encoder->encode(emb.rows);
  auto latent = ad::constant(z.values, 1, z.values.size());
  for (int k = 0; k < steps; ++k) {
    latent = pipe.denoiser->step(latent, cond, z, k, steps);
    if (!ad::all_finite(latent))
      throw NonFiniteError("non-finite latent at sampling step " + std::to_string(k), k);
  }
  return pipe.decoder->decode(latent);
}

template <typename T>
ImageVar<T> generate(const GeneratorPipeline<T> &pipe, const EmbeddingSequence<T> &emb, const LatentCode<T> &z) {
  return generate(pipe, emb, z, pipe.sampling_steps);
}

// ---------------------------------------------------------------------------
// Classifier side

enum class FeatureActivation { post, pre };

template <typename T>
struct ClassifierOutputs {
  ad::Var<T> logits;         // 1×C
  ad::Var<T> features;       // 1×F, after the nonlinearity
  ad::Var<T> pre_features;   // 1×F, before it
};

template <typename T>
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual ImageShape input_shape() const = 0;
  virtual const std::vector<std::string> &class_names() const = 0;
  virtual std::size_t feature_count() const = 0;
  virtual std::string feature_layer() const = 0;
  // Final layer weights, C×F row-major.
  virtual const std::vector<T> &classification_weights() const = 0;
  virtual ClassifierOutputs<T> forward(const ad::Var<T> &input) const = 0;
  virtual std::uint64_t checksum() const = 0;

  std::size_t class_count() const { return class_names().size(); }
};

struct Preprocessing {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct ProbeTarget {
  enum class Kind { class_logit, class_probability, feature };
  Kind kind = Kind::class_logit;
  std::size_t index = 0;

  static ProbeTarget class_logit(std::size_t c) { return {Kind::class_logit, c}; }
  static ProbeTarget class_probability(std::size_t c) { return {Kind::class_probability, c}; }
  static ProbeTarget feature(std::size_t j) { return {Kind::feature, j}; }
  bool operator==(const ProbeTarget &) const = default;
};

inline std::string to_string(const ProbeTarget &t) {
  switch (t.kind) {
    case ProbeTarget::Kind::class_logit: return "class:" + std::to_string(t.index);
    case ProbeTarget::Kind::class_probability: return "prob:" + std::to_string(t.index);
    case ProbeTarget::Kind::feature: break;
  }
  return "feature:" + std::to_string(t.index);
}

inline ProbeTarget parse_probe_target(const std::string &s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw Rejected("probe target '" + s + "' must look like class:N, prob:N or feature:N");
  const auto kind = s.substr(0, colon);
  std::size_t index = 0;
  try {
    std::size_t used = 0;
    index = std::stoul(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument(s);
  } catch (const std::exception &) {
    throw Rejected("probe target '" + s + "' has a malformed index");
  }
  if (kind == "class") return ProbeTarget::class_logit(index);
  if (kind == "prob") return ProbeTarget::class_probability(index);
  if (kind == "feature") return ProbeTarget::feature(index);
  throw Rejected("probe target '" + s + "' has unknown kind '" + kind + "'");
}

// Frozen classifier plus the differentiable bridge from generator output to
// classifier input (bilinear resize, per-channel normalization).
template <typename T>
class ClassifierProbe {
 public:
  ClassifierProbe(std::shared_ptr<const Classifier<T>> model, Preprocessing prep,
                  FeatureActivation activation = FeatureActivation::post)
      : model_(std::move(model)), prep_(std::move(prep)), activation_(activation) {}

  const Classifier<T> &model() const { return *model_; }
  const Preprocessing &preprocessing() const { return prep_; }
  FeatureActivation activation() const { return activation_; }

  ClassifierOutputs<T> forward(const ImageVar<T> &image) const {
    auto x = resize_bilinear(image.pixels, image.shape, prep_.height, prep_.width);
    const ImageShape resized{image.shape.channels, prep_.height, prep_.width};
    x = normalize_channels(x, resized, prep_.mean, prep_.stddev);
    return model_->forward(x);
  }

  ad::Var<T> feature_vector(const ClassifierOutputs<T> &out) const {
    return activation_ == FeatureActivation::post ? out.features : out.pre_features;
  }

  void check_target(const ProbeTarget &t) const {
    const bool ok = t.kind == ProbeTarget::Kind::feature ? t.index < model_->feature_count()
                                                         : t.index < model_->class_count();
    if (!ok) {
      throw Rejected("unknown probe target " + to_string(t) + "; available: class:0.." +
                     std::to_string(model_->class_count() - 1) + ", prob:0.." +
                     std::to_string(model_->class_count() - 1) + ", feature:0.." +
                     std::to_string(model_->feature_count() - 1) + " (layer '" + model_->feature_layer() + "')");
    }
  }

  // Scalar response: the class logit (pre-softmax), its softmax probability,
  // or the hidden feature value.
  ad::Var<T> response(const ClassifierOutputs<T> &out, const ProbeTarget &t) const {
    check_target(t);
    switch (t.kind) {
      case ProbeTarget::Kind::class_logit: return ad::element(out.logits, t.index);
      case ProbeTarget::Kind::class_probability: return ad::element(ad::softmax(out.logits), t.index);
      case ProbeTarget::Kind::feature: break;
    }
    return ad::element(feature_vector(out), t.index);
  }

  std::uint64_t checksum() const { return model_->checksum(); }

 private:
  std::shared_ptr<const Classifier<T>> model_;
  Preprocessing prep_;
  FeatureActivation activation_;
};

template <typename T>
std::vector<T> probe(const ClassifierProbe<T> &p, const ImageBatch<T> &images, const ProbeTarget &target) {
  p.check_target(target);
  std::vector<T> out;
  out.reserve(images.size());
  for (const auto &img : images) {
    validate_image(img);
    out.push_back(p.response(p.forward(to_constant(img)), target).item());
  }
  return out;
}

}  // namespace amx
