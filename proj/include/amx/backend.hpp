#pragma once

// String-keyed registry of model backends. A backend bundles the frozen
// generator pipeline, the classifier probe and a source of probe images for
// feature ranking.

#include <functional>
#include <map>
#include <memory>
#include <string>

#include <json.hpp>

#include "amx/config.hpp"
#include "amx/errors.hpp"
#include "amx/pipeline.hpp"
#include "amx/toy_world.hpp"

namespace amx {

struct Backend {
  std::string id;
  GeneratorPipeline<float> pipeline;
  std::shared_ptr<const ClassifierProbe<float>> probe;
  std::function<ImageBatch<float>(std::size_t cls, std::size_t n)> probe_images;
  // Checksum over every frozen weight the backend exposes.
  std::uint64_t checksum() const { return Checksum().add(pipeline.checksum()).add(probe->checksum()).value(); }
};

inline FeatureActivation parse_activation(const std::string &s) {
  if (s == "post") return FeatureActivation::post;
  if (s == "pre") return FeatureActivation::pre;
  throw SchemaError("feature_activation must be 'post' or 'pre', got '" + s + "'");
}

using BackendFactory = std::function<Backend(const BackendConfig &)>;

inline Backend make_toy_backend(const BackendConfig &cfg) {
  toy::VocabularyKind kind;
  if (cfg.vocabulary == "full") kind = toy::VocabularyKind::full;
  else if (cfg.vocabulary == "compact") kind = toy::VocabularyKind::compact;
  else throw SchemaError("toy backend vocabulary must be 'full' or 'compact', got '" + cfg.vocabulary + "'");
  if (cfg.sampling_steps < kMinSamplingSteps || cfg.sampling_steps > kMaxSamplingSteps)
    throw Rejected("sampling_steps must be in [1, 8], got " + std::to_string(cfg.sampling_steps));
  toy::WorldOptions opt;
  opt.seed = cfg.world_seed;
  auto world = std::make_shared<const toy::ToyWorld>(toy::build_world(opt));
  Backend b;
  b.id = "toy";
  b.pipeline = world->pipeline<float>(cfg.sampling_steps, kind);
  b.probe = std::make_shared<ClassifierProbe<float>>(world->probe<float>(parse_activation(cfg.feature_activation)));
  b.probe_images = [world](std::size_t c, std::size_t n) { return world->class_images<float>(c, n); };
  return b;
}

inline std::map<std::string, BackendFactory> &backend_registry() {
  static std::map<std::string, BackendFactory> r{{"toy", make_toy_backend}};
  return r;
}

inline Backend make_backend(const BackendConfig &cfg) {
  const auto &r = backend_registry();
  const auto it = r.find(cfg.id);
  if (it == r.end()) {
    std::string known;
    for (const auto &[k, _] : r) known += (known.empty() ? "" : ", ") + k;
    throw BackendUnavailable("no backend '" + cfg.id + "' (available: " + known + ")");
  }
  return it->second(cfg);
}

}  // namespace amx
