#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "amx/errors.hpp"
#include "amx/image.hpp"

namespace amx {

struct SegmentationMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 0/1
  std::string prompt;
  std::vector<double> confidences;  // one per accepted box

  bool at(std::size_t y, std::size_t x) const { return pixels[y * width + x] != 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), 1)); }
};

struct SegmentationConfig {
  double box_threshold = 0.35;

  void validate() const {
    if (!(box_threshold >= 0.0 && box_threshold <= 1.0))
      throw Rejected("box confidence threshold must be in [0, 1], got " + std::to_string(box_threshold));
  }
};

// Text-prompted binary segmentation. Implementations return the union of the
// masks of every detection at or above the box threshold, and an empty mask
// when nothing is detected. They must throw BackendUnavailable rather than
// return an empty mask when the backend cannot answer.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual std::string id() const = 0;
  virtual SegmentationMask segment(const Image<double> &image, const std::string &prompt,
                                   const SegmentationConfig &cfg) const = 0;
};

namespace detail {

inline std::string normalize_prompt(const std::string &s) {
  std::string out;
  bool space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  return out;
}

inline void check_request(const Image<double> &image, const std::string &prompt, const SegmentationConfig &cfg) {
  if (normalize_prompt(prompt).empty()) throw Rejected("segmentation prompt is empty");
  validate_image(image);
  cfg.validate();
}

}  // namespace detail

inline SegmentationMask empty_mask(const ImageShape &shape, const std::string &prompt) {
  return {shape.height, shape.width, std::vector<std::uint8_t>(shape.pixels(), 0), prompt, {}};
}

// Oracle backend: answers from the region metadata the toy generator attaches
// to its images. A region matches when its label equals the prompt (case and
// surrounding whitespace ignored).
class StubSegmenter final : public Segmenter {
 public:
  std::string id() const override { return "stub"; }

  SegmentationMask segment(const Image<double> &image, const std::string &prompt,
                           const SegmentationConfig &cfg) const override {
    detail::check_request(image, prompt, cfg);
    auto mask = empty_mask(image.shape, prompt);
    const auto want = detail::normalize_prompt(prompt);
    for (const auto &r : image.regions) {
      if (detail::normalize_prompt(r.label) != want || r.confidence < cfg.box_threshold) continue;
      mask.confidences.push_back(r.confidence);
      const std::size_t y1 = std::min(r.box.top + r.box.height, mask.height);
      const std::size_t x1 = std::min(r.box.left + r.box.width, mask.width);
      for (std::size_t y = r.box.top; y < y1; ++y)
        for (std::size_t x = r.box.left; x < x1; ++x) mask.pixels[y * mask.width + x] = 1;
    }
    return mask;
  }
};

template <typename T>
SegmentationMask segment(const Segmenter &seg, const Image<T> &image, const std::string &prompt,
                         const SegmentationConfig &cfg = {}) {
  if constexpr (std::is_same_v<T, double>) {
    return seg.segment(image, prompt, cfg);
  } else {
    Image<double> d{image.shape, std::vector<double>(image.pixels.begin(), image.pixels.end()), image.regions};
    return seg.segment(d, prompt, cfg);
  }
}

// Backend factories keyed by id; the remote backend registers itself from
// segmentation_remote.hpp.
using SegmenterFactory = std::function<std::shared_ptr<const Segmenter>(const std::map<std::string, std::string> &)>;

inline std::map<std::string, SegmenterFactory> &segmenter_registry() {
  static std::map<std::string, SegmenterFactory> r{
      {"stub", [](const std::map<std::string, std::string> &) { return std::make_shared<StubSegmenter>(); }}};
  return r;
}

inline std::shared_ptr<const Segmenter> make_segmenter(const std::string &id,
                                                       const std::map<std::string, std::string> &options = {}) {
  const auto &r = segmenter_registry();
  const auto it = r.find(id);
  if (it == r.end()) {
    std::string known;
    for (const auto &[k, _] : r) known += (known.empty() ? "" : ", ") + k;
    throw BackendUnavailable("no segmentation backend '" + id + "' (available: " + known + ")");
  }
  return it->second(options);
}

}  // namespace amx
