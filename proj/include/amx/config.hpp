#pragma once

// JSON run configuration. Every block is optional; unknown keys are errors so
// typos never silently fall back to defaults.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "amx/discovery.hpp"
#include "amx/errors.hpp"
#include "amx/hard_prompt.hpp"
#include "amx/objective.hpp"
#include "amx/optimizer.hpp"
#include "amx/segmentation.hpp"

namespace amx {

using json = nlohmann::json;

struct BackendConfig {
  std::string id = "toy";
  std::uint64_t world_seed = 0;
  int sampling_steps = 4;
  std::string vocabulary = "full";
  std::string feature_activation = "post";
};

struct TemplateConfig {
  std::string prefix;
  std::size_t learnable = 1;
};

struct ObjectiveConfig {
  std::string kind = "class_ce";  // class_ce | feature_max | combined
  std::optional<std::size_t> cls;
  std::optional<std::size_t> feature;
  double lambda = 1.0;
};

struct SegmenterConfig {
  std::string id = "stub";
  double box_threshold = 0.35;
  std::string url;
  int timeout_ms = 30000;
};

struct DiscoveryConfig {
  std::size_t top_k = 5;
  std::size_t samples = 10;
  double delta = 0.05;
  double lambda = 1.0;
  // Images per class for the activation term of the ranking; 0 ranks by |w|.
  std::size_t probe_images = 200;
};

struct SamplingConfig {
  // Explanation images written next to every optimization run.
  std::size_t preview = 4;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  BackendConfig backend;
  TemplateConfig prompt;
  ObjectiveConfig objective;
  OptimizerConfig optimizer;
  GumbelConfig gumbel;
  DiscoveryConfig discovery;
  SegmenterConfig segmenter;
  SamplingConfig sampling;
};

namespace detail {

inline void check_keys(const json &j, const std::string &block, std::initializer_list<const char *> allowed) {
  if (!j.is_object()) throw SchemaError("config block '" + block + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto &[k, _] : j.items())
    if (!ok.count(k)) throw SchemaError("unknown key '" + k + "' in config block '" + block + "'");
}

template <typename V>
void read(const json &j, const char *key, V &out, const std::string &block) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception &) {
    throw SchemaError("config key '" + block + "." + key + "' has the wrong type");
  }
}

template <typename V>
void read(const json &j, const char *key, std::optional<V> &out, const std::string &block) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  V v{};
  read(j, key, v, block);
  out = v;
}

}  // namespace detail

inline RunConfig parse_config(const json &j) {
  using detail::check_keys;
  using detail::read;
  RunConfig c;
  check_keys(j, "<root>",
             {"seed", "backend", "template", "objective", "optimizer", "gumbel", "discovery", "segmenter", "sampling"});
  read(j, "seed", c.seed, "<root>");
  if (j.contains("backend")) {
    const auto &b = j["backend"];
    check_keys(b, "backend", {"id", "world_seed", "sampling_steps", "vocabulary", "feature_activation"});
    read(b, "id", c.backend.id, "backend");
    read(b, "world_seed", c.backend.world_seed, "backend");
    read(b, "sampling_steps", c.backend.sampling_steps, "backend");
    read(b, "vocabulary", c.backend.vocabulary, "backend");
    read(b, "feature_activation", c.backend.feature_activation, "backend");
  }
  if (j.contains("template")) {
    const auto &b = j["template"];
    check_keys(b, "template", {"prefix", "learnable"});
    read(b, "prefix", c.prompt.prefix, "template");
    read(b, "learnable", c.prompt.learnable, "template");
  }
  if (j.contains("objective")) {
    const auto &b = j["objective"];
    check_keys(b, "objective", {"kind", "class", "feature", "lambda"});
    read(b, "kind", c.objective.kind, "objective");
    read(b, "class", c.objective.cls, "objective");
    read(b, "feature", c.objective.feature, "objective");
    read(b, "lambda", c.objective.lambda, "objective");
  }
  if (j.contains("optimizer")) {
    const auto &b = j["optimizer"];
    check_keys(b, "optimizer",
               {"learning_rate", "steps", "batch_size", "restarts", "grad_clip", "divergence_factor", "heldout_count",
                "init", "resample_noise", "jobs"});
    auto &o = c.optimizer;
    read(b, "learning_rate", o.learning_rate, "optimizer");
    read(b, "steps", o.steps, "optimizer");
    read(b, "batch_size", o.batch_size, "optimizer");
    read(b, "restarts", o.restarts, "optimizer");
    read(b, "grad_clip", o.grad_clip, "optimizer");
    read(b, "divergence_factor", o.divergence_factor, "optimizer");
    read(b, "heldout_count", o.heldout_count, "optimizer");
    std::string init = to_string(o.init);
    read(b, "init", init, "optimizer");
    try {
      o.init = parse_init_strategy(init);
    } catch (const Rejected &e) {
      throw SchemaError(e.what());
    }
    read(b, "resample_noise", o.resample_noise, "optimizer");
    read(b, "jobs", o.jobs, "optimizer");
  }
  if (j.contains("gumbel")) {
    const auto &b = j["gumbel"];
    check_keys(b, "gumbel", {"initial_temperature", "final_temperature", "hard", "seed"});
    read(b, "initial_temperature", c.gumbel.initial_temperature, "gumbel");
    read(b, "final_temperature", c.gumbel.final_temperature, "gumbel");
    read(b, "hard", c.gumbel.hard, "gumbel");
    read(b, "seed", c.gumbel.seed, "gumbel");
  }
  if (j.contains("discovery")) {
    const auto &b = j["discovery"];
    check_keys(b, "discovery", {"top_k", "samples", "delta", "lambda", "probe_images"});
    read(b, "top_k", c.discovery.top_k, "discovery");
    read(b, "samples", c.discovery.samples, "discovery");
    read(b, "delta", c.discovery.delta, "discovery");
    read(b, "lambda", c.discovery.lambda, "discovery");
    read(b, "probe_images", c.discovery.probe_images, "discovery");
  }
  if (j.contains("segmenter")) {
    const auto &b = j["segmenter"];
    check_keys(b, "segmenter", {"id", "box_threshold", "url", "timeout_ms"});
    read(b, "id", c.segmenter.id, "segmenter");
    read(b, "box_threshold", c.segmenter.box_threshold, "segmenter");
    read(b, "url", c.segmenter.url, "segmenter");
    read(b, "timeout_ms", c.segmenter.timeout_ms, "segmenter");
  }
  if (j.contains("sampling")) {
    const auto &b = j["sampling"];
    check_keys(b, "sampling", {"preview"});
    read(b, "preview", c.sampling.preview, "sampling");
  }
  return c;
}

inline RunConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception &e) {
    throw SchemaError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

inline json objective_json(const Objective &o) {
  return std::visit(
      [](const auto &v) -> json {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ClassCE>) return {{"kind", "class_ce"}, {"class", v.cls}};
        if constexpr (std::is_same_v<V, FeatureMax>) return {{"kind", "feature_max"}, {"feature", v.feature}};
        if constexpr (std::is_same_v<V, Combined>)
          return {{"kind", "combined"}, {"class", v.cls}, {"feature", v.feature}, {"lambda", v.lambda}};
      },
      o);
}

inline Objective make_objective(const ObjectiveConfig &c) {
  auto need = [&](const std::optional<std::size_t> &v, const char *what) {
    if (!v) throw Rejected(c.kind + " objective needs a " + what);
    return *v;
  };
  if (c.kind == "class_ce") return ClassCE{need(c.cls, "class")};
  if (c.kind == "feature_max") return FeatureMax{need(c.feature, "feature")};
  if (c.kind == "combined") return Combined{need(c.cls, "class"), need(c.feature, "feature"), c.lambda};
  throw SchemaError("unknown objective kind '" + c.kind + "' (expected class_ce, feature_max or combined)");
}

// Fully resolved configuration, as recorded in a run directory.
inline json to_json(const RunConfig &c) {
  json j;
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  j["backend"] = {{"id", c.backend.id},
                  {"world_seed", c.backend.world_seed},
                  {"sampling_steps", c.backend.sampling_steps},
                  {"vocabulary", c.backend.vocabulary},
                  {"feature_activation", c.backend.feature_activation}};
  j["template"] = {{"prefix", c.prompt.prefix}, {"learnable", c.prompt.learnable}};
  j["objective"] = {{"kind", c.objective.kind},
                    {"class", c.objective.cls ? json(*c.objective.cls) : json(nullptr)},
                    {"feature", c.objective.feature ? json(*c.objective.feature) : json(nullptr)},
                    {"lambda", c.objective.lambda}};
  const auto &o = c.optimizer;
  j["optimizer"] = {{"learning_rate", o.learning_rate},   {"steps", o.steps},
                    {"batch_size", o.batch_size},         {"restarts", o.restarts},
                    {"grad_clip", o.grad_clip},           {"divergence_factor", o.divergence_factor},
                    {"heldout_count", o.heldout_count},   {"init", to_string(o.init)},
                    {"resample_noise", o.resample_noise}, {"jobs", o.jobs}};
  j["gumbel"] = {{"initial_temperature", c.gumbel.initial_temperature},
                 {"final_temperature", c.gumbel.final_temperature},
                 {"hard", c.gumbel.hard},
                 {"seed", c.gumbel.seed}};
  j["discovery"] = {{"top_k", c.discovery.top_k},
                    {"samples", c.discovery.samples},
                    {"delta", c.discovery.delta},
                    {"lambda", c.discovery.lambda},
                    {"probe_images", c.discovery.probe_images}};
  j["segmenter"] = {{"id", c.segmenter.id},
                    {"box_threshold", c.segmenter.box_threshold},
                    {"url", c.segmenter.url},
                    {"timeout_ms", c.segmenter.timeout_ms}};
  j["sampling"] = {{"preview", c.sampling.preview}};
  return j;
}

}  // namespace amx
