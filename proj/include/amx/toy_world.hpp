#pragma once

// A CPU-scale stand-in for a text-conditioned few-step generator and an image
// classifier with planted context biases.
//
// Generator: the prompt's token embeddings are averaged (with positional
// offsets) and projected to a conditioning vector. Each of M concepts (4
// coloured blocks, 4 textured corner patches) has a fixed direction in
// conditioning space; the denoiser turns the latent noise plus the alignment
// of the conditioning with those directions into concept intensities, and the
// decoder paints the concepts onto a grey canvas.
//
// Classifier: 24 template-matching features (5 per block colour with
// different supports, 1 per corner texture) followed by a linear layer trained
// once on rendered images in which some classes co-occur with textures.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"
#include "amx/image.hpp"
#include "amx/pipeline.hpp"
#include "amx/prompt.hpp"
#include "amx/random.hpp"

namespace amx::toy {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kClassifierSize = 32;
inline constexpr std::size_t kClasses = 4;
inline constexpr std::size_t kPatches = 4;
inline constexpr std::size_t kConcepts = kClasses + kPatches;
inline constexpr std::size_t kEmbedding = 16;
inline constexpr std::size_t kConditioning = 16;
inline constexpr std::size_t kFeaturesPerClass = 5;
inline constexpr std::size_t kFeatures = kClasses * kFeaturesPerClass + kPatches;
inline constexpr std::size_t kMaxPrompt = 16;
inline constexpr std::size_t kObjectSize = 16;
inline constexpr std::size_t kPatchSize = 12;
inline constexpr double kBackground = 0.5;
inline constexpr double kFeatureSharpness = 4.0;

inline const std::array<std::array<double, 3>, kClasses> &class_colours() {
  static const std::array<std::array<double, 3>, kClasses> c{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}}};
  return c;
}

inline const std::vector<std::string> &class_names() {
  static const std::vector<std::string> n{"red block", "green block", "blue block", "white block"};
  return n;
}

inline const std::vector<std::string> &texture_names() {
  static const std::vector<std::string> n{"stripes", "checker", "dots", "bars"};
  return n;
}

// Patch p sits in corner p: top-left, top-right, bottom-left, bottom-right.
inline Box patch_box(std::size_t p) {
  const std::size_t far = kImageSize - kPatchSize;
  return Box{p >= 2 ? far : 0, p % 2 ? far : 0, kPatchSize, kPatchSize};
}

inline double texture(std::size_t p, std::size_t y, std::size_t x) {
  switch (p) {
    case 0: return ((y / 2) % 2) - 0.5;
    case 1: return ((y / 3 + x / 3) % 2) - 0.5;
    case 2: return ((y % 4) < 2 && (x % 4) < 2) ? 0.5 : -0.5;
    default: return ((x / 2) % 2) - 0.5;
  }
}

// Object top-left corner from a uniform draw in [0, 1).
inline std::size_t object_offset(double u) {
  const auto o = static_cast<std::size_t>(std::floor(std::clamp(u, 0.0, 1.0) * 16.0));
  return 16 + std::min<std::size_t>(o, 15);
}

// Per-concept additive images (M × 3·64·64) for an object at (top, left).
inline std::vector<double> concept_basis(std::size_t top, std::size_t left) {
  const std::size_t plane = kImageSize * kImageSize;
  std::vector<double> basis(kConcepts * 3 * plane, 0.0);
  for (std::size_t c = 0; c < kClasses; ++c)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = class_colours()[c][ch] - kBackground;
      for (std::size_t y = top; y < top + kObjectSize; ++y)
        for (std::size_t x = left; x < left + kObjectSize; ++x) basis[(c * 3 + ch) * plane + y * kImageSize + x] = v;
    }
  for (std::size_t p = 0; p < kPatches; ++p) {
    const Box b = patch_box(p);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < kPatchSize; ++y)
        for (std::size_t x = 0; x < kPatchSize; ++x)
          basis[((kClasses + p) * 3 + ch) * plane + (b.top + y) * kImageSize + b.left + x] = texture(p, y, x);
  }
  return basis;
}

inline std::vector<Region> concept_regions(const std::vector<double> &intensity, std::size_t top, std::size_t left) {
  std::vector<Region> r;
  for (std::size_t c = 0; c < kClasses; ++c) r.push_back({class_names()[c], Box{top, left, kObjectSize, kObjectSize}, intensity[c]});
  for (std::size_t p = 0; p < kPatches; ++p) r.push_back({texture_names()[p], patch_box(p), intensity[kClasses + p]});
  return r;
}

// Non-differentiable renderer used to build the classifier's training data.
inline Image<double> render(const std::vector<double> &intensity, std::size_t top, std::size_t left) {
  const std::size_t n = 3 * kImageSize * kImageSize;
  const auto basis = concept_basis(top, left);
  Image<double> img{ImageShape{3, kImageSize, kImageSize}, std::vector<double>(n, kBackground), {}};
  for (std::size_t m = 0; m < kConcepts; ++m)
    if (intensity[m] != 0)
      for (std::size_t i = 0; i < n; ++i) img.pixels[i] += intensity[m] * basis[m * n + i];
  img.regions = concept_regions(intensity, top, left);
  return img;
}

template <typename T>
std::vector<T> cast(const std::vector<double> &v) {
  return std::vector<T>(v.begin(), v.end());
}

// ---------------------------------------------------------------------------
// Adapters

template <typename T>
class ToyTextEncoder final : public TextEncoder<T> {
 public:
  ToyTextEncoder(const std::vector<double> &projection, const std::vector<double> &positions)
      : proj_(cast<T>(projection)), pos_(cast<T>(positions)) {}

  std::size_t embedding_width() const override { return kEmbedding; }
  std::size_t max_length() const override { return kMaxPrompt; }

  ad::Var<T> encode(const ad::Var<T> &seq) const override {
    const std::size_t n = seq.rows();
    if (n == 0 || n > kMaxPrompt)
      throw Rejected("prompt length " + std::to_string(n) + " outside [1, " + std::to_string(kMaxPrompt) + "]");
    auto pos = ad::constant(std::vector<T>(pos_.begin(), pos_.begin() + static_cast<std::ptrdiff_t>(n * kEmbedding)), n,
                            kEmbedding);
    return ad::matmul(ad::mean_rows(ad::add(seq, pos)), ad::constant(proj_, kEmbedding, kConditioning));
  }

  std::uint64_t checksum() const override { return Checksum().add(proj_).add(pos_).value(); }

 private:
  std::vector<T> proj_;
  std::vector<T> pos_;
};

// Latent layout: [concept state (M) | mixing noise (M×dc) | object position (2)].
template <typename T>
class ToyDenoiser final : public Denoiser<T> {
 public:
  ToyDenoiser(const std::vector<double> &directions, double mix_gain, double state_gain)
      : dirs_(cast<T>(directions)), gamma_(static_cast<T>(mix_gain)), beta_(static_cast<T>(state_gain)) {}

  static constexpr std::size_t kLatent = kConcepts + kConcepts * kConditioning + 2;

  std::size_t latent_size() const override { return kLatent; }

  LatentCode<T> sample_prior(std::uint64_t seed) const override {
    Rng rng(mix64(seed));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    LatentCode<T> z{std::vector<T>(kLatent), seed};
    for (std::size_t i = 0; i < kConcepts + kConcepts * kConditioning; ++i) z.values[i] = static_cast<T>(normal(rng));
    z.values[kLatent - 2] = static_cast<T>(uniform(rng));
    z.values[kLatent - 1] = static_cast<T>(uniform(rng));
    return z;
  }

  ad::Var<T> step(const ad::Var<T> &latent, const ad::Var<T> &cond, const LatentCode<T> &z, int k,
                  int total) const override {
    const std::size_t mixn = kConcepts * kConditioning;
    std::vector<T> a(mixn);
    for (std::size_t i = 0; i < mixn; ++i) a[i] = dirs_[i] + gamma_ * z.values[kConcepts + i];
    auto state = ad::slice_cols(latent, 0, kConcepts);
    auto x0 = ad::add(ad::matmul_transposed(cond, ad::constant(std::move(a), kConcepts, kConditioning)),
                      ad::scale(ad::tanh(state), beta_));
    if (k < total - 1) {
      // Re-noise towards the prior draw for the next step.
      const T s = static_cast<T>(total - 1 - k) / static_cast<T>(total);
      std::vector<T> zs(z.values.begin(), z.values.begin() + kConcepts);
      for (auto &v : zs) v *= s;
      x0 = ad::add(ad::scale(x0, T(1) - s), ad::constant(std::move(zs), 1, kConcepts));
    }
    std::vector<T> rest(z.values.begin() + kConcepts, z.values.end());
    return ad::concat_cols(std::vector<ad::Var<T>>{x0, ad::constant(std::move(rest), 1, kLatent - kConcepts)});
  }

  std::uint64_t checksum() const override {
    return Checksum().add(dirs_).add(std::vector<T>{gamma_, beta_}).value();
  }

 private:
  std::vector<T> dirs_;
  T gamma_, beta_;
};

template <typename T>
class ToyDecoder final : public Decoder<T> {
 public:
  ImageShape output_shape() const override { return {3, kImageSize, kImageSize}; }

  ImageVar<T> decode(const ad::Var<T> &latent) const override {
    if (latent.size() != ToyDenoiser<T>::kLatent) throw ContractViolation("toy decoder: latent size mismatch");
    // Concept intensities: softmax over the concept states plus a null slot.
    auto logits = ad::concat_cols(std::vector<ad::Var<T>>{ad::slice_cols(latent, 0, kConcepts), ad::scalar(T(0))});
    auto a = ad::slice_cols(ad::softmax(logits), 0, kConcepts);
    const std::size_t top = object_offset(static_cast<double>(latent[latent.size() - 2]));
    const std::size_t left = object_offset(static_cast<double>(latent[latent.size() - 1]));
    const std::size_t n = 3 * kImageSize * kImageSize;
    auto img = ad::add(ad::constant(std::vector<T>(n, static_cast<T>(kBackground)), 1, n),
                       ad::matmul(a, ad::constant(cast<T>(concept_basis(top, left)), kConcepts, n)));
    std::vector<double> intensity(a.value().begin(), a.value().end());
    return ImageVar<T>{output_shape(), img, concept_regions(intensity, top, left)};
  }

  std::uint64_t checksum() const override {
    return Checksum().add(concept_basis(16, 16)).value();
  }
};

template <typename T>
class ToyClassifier final : public Classifier<T> {
 public:
  ToyClassifier(const std::vector<double> &templates, const std::vector<double> &bias, const std::vector<double> &weights,
                const std::vector<double> &offsets)
      : templates_(cast<T>(templates)), bias_(cast<T>(bias)), weights_(cast<T>(weights)), offsets_(cast<T>(offsets)) {}

  ImageShape input_shape() const override { return {3, kClassifierSize, kClassifierSize}; }
  const std::vector<std::string> &class_names() const override { return toy::class_names(); }
  std::size_t feature_count() const override { return kFeatures; }
  std::string feature_layer() const override { return "penultimate"; }
  const std::vector<T> &classification_weights() const override { return weights_; }

  ClassifierOutputs<T> forward(const ad::Var<T> &input) const override {
    const std::size_t n = input_shape().size();
    if (input.size() != n) throw ContractViolation("toy classifier: input size mismatch");
    auto x = input.rows() == 1 ? input : ad::constant(std::vector<T>(input.value().begin(), input.value().end()), 1, n);
    auto pre = ad::sub(ad::matmul_transposed(x, ad::constant(templates_, kFeatures, n)),
                       ad::constant(bias_, 1, kFeatures));
    auto feats = ad::softplus(pre, static_cast<T>(kFeatureSharpness));
    auto logits = ad::add(ad::matmul_transposed(feats, ad::constant(weights_, kClasses, kFeatures)),
                          ad::constant(offsets_, 1, kClasses));
    return {logits, feats, pre};
  }

  std::uint64_t checksum() const override {
    return Checksum().add(templates_).add(bias_).add(weights_).add(offsets_).value();
  }

 private:
  std::vector<T> templates_, bias_, weights_, offsets_;
};

inline Preprocessing classifier_preprocessing() {
  return Preprocessing{kClassifierSize, kClassifierSize, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
}

// ---------------------------------------------------------------------------
// World

enum class VocabularyKind { full, compact };

struct WorldOptions {
  std::uint64_t seed = 0;
  std::size_t train_images = 800;
  std::size_t validation_images = 400;
  double min_accuracy = 0.95;
  double mix_gain = 0.15;
  double state_gain = 1.0;
  double concept_word_gain = 3.0;
  double l2 = 0.01;
};

// Which context patches each class's training images carry.
inline const std::vector<std::vector<std::size_t>> &planted_patches() {
  static const std::vector<std::vector<std::size_t>> p{{0, 1}, {2}, {}, {}};
  return p;
}
// Appears at random in every class's training images.
inline constexpr std::size_t kDistractorPatch = 3;

inline bool is_object_feature(std::size_t j) { return j < kClasses * kFeaturesPerClass; }
inline std::size_t feature_class(std::size_t j) { return j / kFeaturesPerClass; }

struct ToyWorld {
  WorldOptions options;
  std::vector<std::string> words;
  std::vector<double> table;       // V×d
  std::vector<double> projection;  // d×dc, orthonormal
  std::vector<double> positions;   // kMaxPrompt×d
  std::vector<double> directions;  // M×dc
  std::vector<double> templates;   // F×(3·32·32)
  std::vector<double> feature_bias;
  std::vector<double> weights;  // C×F
  std::vector<double> offsets;  // C
  std::vector<double> class_mean_features;  // C×F over the training images
  double validation_accuracy = 0;
  double training_loss = 0;

  template <typename T>
  std::shared_ptr<const Vocabulary<T>> vocabulary(VocabularyKind kind = VocabularyKind::full) const {
    if (kind == VocabularyKind::full)
      return std::make_shared<Vocabulary<T>>(words, cast<T>(table), kEmbedding, 0, 1, 2);
    const std::vector<std::string> subset{"<sos>", "<eos>", "a", "the", "red", "green", "blue", "white", "stripes", "dots"};
    std::vector<T> rows;
    for (const auto &w : subset) {
      const auto it = std::find(words.begin(), words.end(), w);
      const auto id = static_cast<std::size_t>(it - words.begin());
      rows.insert(rows.end(), table.begin() + static_cast<std::ptrdiff_t>(id * kEmbedding),
                  table.begin() + static_cast<std::ptrdiff_t>((id + 1) * kEmbedding));
    }
    return std::make_shared<Vocabulary<T>>(subset, std::move(rows), kEmbedding, 0, 1, 2);
  }

  template <typename T>
  GeneratorPipeline<T> pipeline(int sampling_steps = 4, VocabularyKind kind = VocabularyKind::full) const {
    GeneratorPipeline<T> p;
    p.vocabulary = vocabulary<T>(kind);
    p.text_encoder = std::make_shared<ToyTextEncoder<T>>(projection, positions);
    p.denoiser = std::make_shared<ToyDenoiser<T>>(directions, options.mix_gain, options.state_gain);
    p.decoder = std::make_shared<ToyDecoder<T>>();
    p.sampling_steps = sampling_steps;
    return p;
  }

  template <typename T>
  std::shared_ptr<const Classifier<T>> classifier() const {
    return std::make_shared<ToyClassifier<T>>(templates, feature_bias, weights, offsets);
  }

  template <typename T>
  ClassifierProbe<T> probe(FeatureActivation activation = FeatureActivation::post) const {
    return ClassifierProbe<T>(classifier<T>(), classifier_preprocessing(), activation);
  }

  // First `n` training images of class `c`, re-rendered.
  template <typename T>
  ImageBatch<T> class_images(std::size_t c, std::size_t n) const;

  // Ground-truth verdict for feature j as a top feature of class c: a
  // feature is core only if it detects class c's own block.
  bool is_core(std::size_t c, std::size_t j) const { return is_object_feature(j) && feature_class(j) == c; }

  // Top-k features of class c by weight × mean training activation.
  std::vector<std::size_t> top_features(std::size_t c, std::size_t k = 5) const {
    std::vector<std::size_t> idx(kFeatures);
    for (std::size_t j = 0; j < kFeatures; ++j) idx[j] = j;
    auto score = [&](std::size_t j) { return weights[c * kFeatures + j] * class_mean_features[c * kFeatures + j]; };
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return score(a) > score(b); });
    idx.resize(k);
    return idx;
  }

  std::uint64_t checksum() const {
    Checksum c;
    c.add(table).add(projection).add(positions).add(directions).add(templates).add(feature_bias).add(weights).add(offsets);
    return c.value();
  }
};

namespace detail {

struct Sample {
  std::vector<double> intensity;
  std::size_t top, left;
  std::size_t label;
};

// Training/validation draw i: class i mod C, the class block at random
// strength, planted patches for that class, and a random distractor patch.
inline Sample draw_sample(std::uint64_t stream, std::size_t i) {
  Rng rng(derive_seed(stream, i));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> offset(0, 15);
  Sample s{std::vector<double>(kConcepts, 0.0), 0, 0, i % kClasses};
  s.intensity[s.label] = 0.3 + 0.7 * u(rng);
  for (std::size_t p : planted_patches()[s.label]) s.intensity[kClasses + p] = 0.25 + 0.35 * u(rng);
  if (u(rng) < 0.5) s.intensity[kClasses + kDistractorPatch] = 0.3 + 0.7 * u(rng);
  s.top = 16 + offset(rng);
  s.left = 16 + offset(rng);
  return s;
}

inline std::uint64_t train_stream(std::uint64_t seed) { return derive_seed(seed, 0x7472616e); }
inline std::uint64_t validation_stream(std::uint64_t seed) { return derive_seed(seed, 0x76616c64); }

inline std::vector<double> normal_vector(Rng &rng, std::size_t n, double sd) {
  std::normal_distribution<double> normal(0.0, sd);
  std::vector<double> v(n);
  for (auto &x : v) x = normal(rng);
  return v;
}

// Orthonormal square matrix via Gram-Schmidt on a Gaussian draw (columns).
inline std::vector<double> random_orthonormal(Rng &rng, std::size_t n) {
  auto a = normal_vector(rng, n * n, 1.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += a[i * n + j] * a[i * n + k];
      for (std::size_t i = 0; i < n; ++i) a[i * n + j] -= dot * a[i * n + k];
    }
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += a[i * n + j] * a[i * n + j];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) a[i * n + j] /= norm;
  }
  return a;
}

inline std::vector<double> preprocess(const Image<double> &img) {
  const auto prep = classifier_preprocessing();
  auto x = resize_bilinear(to_constant(img).pixels, img.shape, prep.height, prep.width);
  x = normalize_channels(x, ImageShape{3, prep.height, prep.width}, prep.mean, prep.stddev);
  return {x.value().begin(), x.value().end()};
}

inline std::vector<double> feature_templates(std::vector<double> &bias) {
  const std::size_t S = kClassifierSize, plane = S * S, n = 3 * plane;
  std::vector<double> t(kFeatures * n, 0.0);
  bias.assign(kFeatures, 0.0);
  // (y0, y1, x0, x1) supports on the 32×32 grid; overlapping so every block
  // position is covered by several features of decreasing strength.
  const std::array<std::array<std::size_t, 4>, kFeaturesPerClass> support{
      {{8, 24, 8, 24}, {8, 20, 8, 24}, {12, 24, 8, 24}, {8, 24, 8, 20}, {8, 24, 12, 24}}};
  const std::array<double, kFeaturesPerClass> strength{1.0, 0.75, 0.6, 0.45, 0.35};
  for (std::size_t c = 0; c < kClasses; ++c)
    for (std::size_t k = 0; k < kFeaturesPerClass; ++k) {
      const std::size_t j = c * kFeaturesPerClass + k;
      const auto [y0, y1, x0, x1] = support[k];
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = (class_colours()[c][ch] - 0.5) / 0.25 * strength[k] * 3.0 / (64.0 * 12.0);
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) t[j * n + ch * plane + y * S + x] = v;
      }
      bias[j] = 0.3 * strength[k];
    }
  for (std::size_t p = 0; p < kPatches; ++p) {
    std::vector<double> intensity(kConcepts, 0.0);
    intensity[kClasses + p] = 1.0;
    auto img = render(intensity, 16, 16);
    const auto x = preprocess(img);
    double sq = 0;
    for (double v : x) sq += v * v;
    const std::size_t j = kClasses * kFeaturesPerClass + p;
    for (std::size_t i = 0; i < n; ++i) t[j * n + i] = x[i] / sq * 3.0;
    bias[j] = 0.3;
  }
  return t;
}

// Multinomial logistic regression on fixed features, full-batch Adam.
inline void fit_linear(const std::vector<double> &feats, const std::vector<std::size_t> &labels, double l2,
                       std::vector<double> &w, std::vector<double> &b, double &final_loss) {
  const std::size_t N = labels.size(), C = kClasses, F = kFeatures;
  w.assign(C * F, 0.0);
  b.assign(C, 0.0);
  std::vector<double> params(C * F + C, 0.0), grad(C * F + C);
  std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= 400; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0;
    for (std::size_t i = 0; i < N; ++i) {
      std::array<double, kClasses> z{};
      for (std::size_t c = 0; c < C; ++c) {
        z[c] = params[C * F + c];
        for (std::size_t j = 0; j < F; ++j) z[c] += params[c * F + j] * feats[i * F + j];
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0;
      for (auto &x : z) s += (x = std::exp(x - mx));
      loss -= std::log(z[labels[i]] / s);
      for (std::size_t c = 0; c < C; ++c) {
        const double g = (z[c] / s - (c == labels[i] ? 1.0 : 0.0)) / static_cast<double>(N);
        grad[C * F + c] += g;
        for (std::size_t j = 0; j < F; ++j) grad[c * F + j] += g * feats[i * F + j];
      }
    }
    loss /= static_cast<double>(N);
    for (std::size_t k = 0; k < C * F; ++k) {
      loss += l2 * params[k] * params[k];
      grad[k] += 2 * l2 * params[k];
    }
    final_loss = loss;
    for (std::size_t k = 0; k < params.size(); ++k) {
      m[k] = b1 * m[k] + (1 - b1) * grad[k];
      v[k] = b2 * v[k] + (1 - b2) * grad[k] * grad[k];
      params[k] -= lr * (m[k] / (1 - std::pow(b1, it))) / (std::sqrt(v[k] / (1 - std::pow(b2, it))) + eps);
    }
  }
  std::copy(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(C * F), w.begin());
  std::copy(params.begin() + static_cast<std::ptrdiff_t>(C * F), params.end(), b.begin());
}

}  // namespace detail

template <typename T>
ImageBatch<T> ToyWorld::class_images(std::size_t c, std::size_t n) const {
  if (c >= kClasses) throw Rejected("toy world has no class " + std::to_string(c));
  ImageBatch<T> out;
  const auto stream = detail::train_stream(options.seed);
  for (std::size_t i = c; out.size() < n && i < options.train_images; i += kClasses) {
    const auto s = detail::draw_sample(stream, i);
    const auto img = render(s.intensity, s.top, s.left);
    out.push_back(Image<T>{img.shape, cast<T>(img.pixels), img.regions});
  }
  return out;
}

// Builds the world and checks it: validation accuracy, and the planted bias
// must show up in the top-5 rankings (one class with no context feature, one
// with at least two, every top feature either the class's own block or a
// context patch).
inline ToyWorld build_world(const WorldOptions &opt = {}) {
  ToyWorld w;
  w.options = opt;
  w.words = {"<sos>", "<eos>", "a", "the", "shape", "of", "texture", "picture",
             "red", "green", "blue", "white", "stripes", "checker", "dots", "bars"};
  for (int i = 0; w.words.size() < 32; ++i) w.words.push_back("w" + std::to_string(i));

  Rng rng(derive_seed(opt.seed, 0x776f726c64));
  w.projection = detail::random_orthonormal(rng, kEmbedding);
  w.directions = detail::normal_vector(rng, kConcepts * kConditioning, 1.0 / std::sqrt(double(kConditioning)));
  w.positions = detail::normal_vector(rng, kMaxPrompt * kEmbedding, 0.1);
  w.table = detail::normal_vector(rng, w.words.size() * kEmbedding, 1.0);
  // Concept words point (mostly) along the conditioning direction that
  // switches their concept on.
  const std::size_t first_concept_word = 8;
  for (std::size_t m = 0; m < kConcepts; ++m) {
    std::vector<double> v(kEmbedding, 0.0);
    for (std::size_t i = 0; i < kEmbedding; ++i)
      for (std::size_t k = 0; k < kConditioning; ++k) v[i] += w.projection[i * kConditioning + k] * w.directions[m * kConditioning + k];
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    double *row = &w.table[(first_concept_word + m) * kEmbedding];
    for (std::size_t i = 0; i < kEmbedding; ++i) row[i] = 0.5 * row[i] + opt.concept_word_gain * v[i] / norm;
  }

  w.templates = detail::feature_templates(w.feature_bias);
  const ToyClassifier<double> extractor(w.templates, w.feature_bias, std::vector<double>(kClasses * kFeatures, 0.0),
                                        std::vector<double>(kClasses, 0.0));
  auto features = [&](const Image<double> &img) {
    const auto x = detail::preprocess(img);
    const auto out = extractor.forward(ad::constant(x, 1, x.size()));
    return std::vector<double>(out.features.value().begin(), out.features.value().end());
  };

  std::vector<double> feats;
  std::vector<std::size_t> labels;
  w.class_mean_features.assign(kClasses * kFeatures, 0.0);
  std::vector<std::size_t> per_class(kClasses, 0);
  for (std::size_t i = 0; i < opt.train_images; ++i) {
    const auto s = detail::draw_sample(detail::train_stream(opt.seed), i);
    const auto f = features(render(s.intensity, s.top, s.left));
    feats.insert(feats.end(), f.begin(), f.end());
    labels.push_back(s.label);
    for (std::size_t j = 0; j < kFeatures; ++j) w.class_mean_features[s.label * kFeatures + j] += f[j];
    ++per_class[s.label];
  }
  for (std::size_t c = 0; c < kClasses; ++c)
    for (std::size_t j = 0; j < kFeatures; ++j) w.class_mean_features[c * kFeatures + j] /= double(std::max<std::size_t>(per_class[c], 1));
  detail::fit_linear(feats, labels, opt.l2, w.weights, w.offsets, w.training_loss);

  std::size_t correct = 0;
  const auto clf = w.classifier<double>();
  for (std::size_t i = 0; i < opt.validation_images; ++i) {
    const auto s = detail::draw_sample(detail::validation_stream(opt.seed), i);
    const auto x = detail::preprocess(render(s.intensity, s.top, s.left));
    const auto logits = clf->forward(ad::constant(x, 1, x.size())).logits;
    const auto best = static_cast<std::size_t>(std::max_element(logits.value().begin(), logits.value().end()) -
                                                logits.value().begin());
    correct += best == s.label;
  }
  w.validation_accuracy = opt.validation_images ? double(correct) / double(opt.validation_images) : 0.0;

  std::ostringstream diag;
  diag << "toy world seed " << opt.seed << ": validation accuracy " << w.validation_accuracy;
  if (w.validation_accuracy < opt.min_accuracy) {
    diag << " < " << opt.min_accuracy;
    throw Rejected("sanity gate failed, " + diag.str());
  }
  std::size_t min_ctx = kFeatures, max_ctx = 0;
  for (std::size_t c = 0; c < kClasses; ++c) {
    const auto top = w.top_features(c);
    std::size_t ctx = 0;
    diag << "; class " << c << " top-5:";
    for (auto j : top) {
      diag << ' ' << j;
      if (!is_object_feature(j)) ++ctx;
      else if (feature_class(j) != c) {
        throw Rejected("sanity gate failed, " + diag.str() + " (feature " + std::to_string(j) +
                       " detects another class's block)");
      }
    }
    min_ctx = std::min(min_ctx, ctx);
    max_ctx = std::max(max_ctx, ctx);
  }
  if (min_ctx != 0 || max_ctx < 2)
    throw Rejected("sanity gate failed, planted bias not visible in the rankings: " + diag.str());
  return w;
}

}  // namespace amx::toy
