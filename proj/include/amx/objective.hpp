#pragma once

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"
#include "amx/pipeline.hpp"

namespace amx {

// Cross-entropy of the classifier's softmax against class `cls`.
struct ClassCE {
  std::size_t cls;
};
// Maximize hidden feature `feature`; minimized as its negation.
struct FeatureMax {
  std::size_t feature;
};
// CE(cls) - lambda * feature.
struct Combined {
  std::size_t cls;
  std::size_t feature;
  double lambda = 1.0;
};

using Objective = std::variant<ClassCE, FeatureMax, Combined>;

inline std::string describe(const Objective &o) {
  return std::visit(
      [](const auto &v) -> std::string {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ClassCE>) return "class_ce(" + std::to_string(v.cls) + ")";
        if constexpr (std::is_same_v<V, FeatureMax>) return "feature_max(" + std::to_string(v.feature) + ")";
        if constexpr (std::is_same_v<V, Combined>)
          return "combined(" + std::to_string(v.cls) + "," + std::to_string(v.feature) + ",lambda=" +
                 std::to_string(v.lambda) + ")";
      },
      o);
}

template <typename T>
void validate_objective(const Objective &o, const ClassifierProbe<T> &probe) {
  std::visit(
      [&](const auto &v) {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ClassCE>) probe.check_target(ProbeTarget::class_logit(v.cls));
        if constexpr (std::is_same_v<V, FeatureMax>) probe.check_target(ProbeTarget::feature(v.feature));
        if constexpr (std::is_same_v<V, Combined>) {
          probe.check_target(ProbeTarget::class_logit(v.cls));
          probe.check_target(ProbeTarget::feature(v.feature));
          if (!(v.lambda >= 0.0) || !std::isfinite(v.lambda))
            throw Rejected("combined objective weight must be finite and >= 0, got " + std::to_string(v.lambda));
        }
      },
      o);
}

// Objective for one image's classifier outputs.
template <typename T>
ad::Var<T> image_loss(const Objective &o, const ClassifierProbe<T> &probe, const ClassifierOutputs<T> &out) {
  return std::visit(
      [&](const auto &v) -> ad::Var<T> {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ClassCE>) {
          return ad::cross_entropy(out.logits, v.cls);
        } else if constexpr (std::is_same_v<V, FeatureMax>) {
          return ad::scale(ad::element(probe.feature_vector(out), v.feature), T(-1));
        } else {
          auto ce = ad::cross_entropy(out.logits, v.cls);
          auto phi = ad::element(probe.feature_vector(out), v.feature);
          return ad::sub(ce, ad::scale(phi, static_cast<T>(v.lambda)));
        }
      },
      o);
}

// Mean objective over a batch of generated images.
template <typename T>
ad::Var<T> loss(const Objective &o, const std::vector<ImageVar<T>> &images, const ClassifierProbe<T> &probe) {
  if (images.empty()) throw ContractViolation("loss over an empty batch");
  std::vector<ad::Var<T>> per;
  per.reserve(images.size());
  for (const auto &img : images) per.push_back(image_loss(o, probe, probe.forward(img)));
  return ad::mean(ad::concat_cols(per));
}

}  // namespace amx
