#pragma once

// HTTP client for an external text-prompted segmentation service. The wire
// format is described in docs/segmentation-api.md.

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "amx/codec.hpp"
#include "amx/errors.hpp"
#include "amx/segmentation.hpp"

namespace amx {

inline constexpr const char *kSegmentRequestSchema = "amx.segment.request/1";
inline constexpr const char *kSegmentResponseSchema = "amx.segment.response/1";

// 8-bit interleaved RGB (HWC) from a planar image in [0, 1].
inline std::vector<std::uint8_t> to_rgb8(const Image<double> &img) {
  if (img.shape.channels != 3) throw Rejected("remote segmentation needs a 3-channel image, got " + to_string(img.shape));
  const std::size_t H = img.shape.height, W = img.shape.width;
  std::vector<std::uint8_t> out(H * W * 3);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[(y * W + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0));
  return out;
}

inline nlohmann::json segment_request(const Image<double> &img, const std::string &prompt, const SegmentationConfig &cfg) {
  return {{"schema", kSegmentRequestSchema},
          {"height", img.shape.height},
          {"width", img.shape.width},
          {"channels", 3},
          {"encoding", "rgb8-hwc-base64"},
          {"image", codec::base64_encode(to_rgb8(img))},
          {"prompt", prompt},
          {"box_threshold", cfg.box_threshold}};
}

inline SegmentationMask parse_segment_response(const nlohmann::json &j, const ImageShape &shape, const std::string &prompt) {
  try {
    if (j.at("schema").get<std::string>() != kSegmentResponseSchema)
      throw SchemaError("unexpected response schema '" + j.at("schema").get<std::string>() + "'");
    const auto h = j.at("height").get<std::size_t>();
    const auto w = j.at("width").get<std::size_t>();
    if (h != shape.height || w != shape.width)
      throw SchemaError("mask is " + std::to_string(h) + "x" + std::to_string(w) + ", image is " +
                        std::to_string(shape.height) + "x" + std::to_string(shape.width));
    SegmentationMask m;
    m.height = h;
    m.width = w;
    m.prompt = prompt;
    m.pixels = codec::rle_decode(j.at("rle").get<std::vector<std::uint32_t>>(), h * w);
    m.confidences = j.at("confidences").get<std::vector<double>>();
    return m;
  } catch (const nlohmann::json::exception &e) {
    throw SchemaError(std::string("malformed segmentation response: ") + e.what());
  }
}

class RemoteSegmenter final : public Segmenter {
 public:
  // `url` is scheme://host[:port]; requests go to <url>/segment.
  explicit RemoteSegmenter(std::string url, std::chrono::milliseconds timeout = std::chrono::seconds(30))
      : url_(std::move(url)), timeout_(timeout) {}

  std::string id() const override { return "remote"; }

  SegmentationMask segment(const Image<double> &image, const std::string &prompt,
                           const SegmentationConfig &cfg) const override {
    detail::check_request(image, prompt, cfg);
    httplib::Client cli(url_);
    if (!cli.is_valid()) throw BackendUnavailable("invalid segmentation service url '" + url_ + "'");
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    const auto body = segment_request(image, prompt, cfg).dump();
    auto res = cli.Post("/segment", body, "application/json");
    if (!res) throw BackendUnavailable("segmentation service " + url_ + " unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200)
      throw BackendUnavailable("segmentation service " + url_ + " answered HTTP " + std::to_string(res->status));
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception &e) {
      throw SchemaError(std::string("segmentation response is not JSON: ") + e.what());
    }
    return parse_segment_response(j, image.shape, prompt);
  }

 private:
  std::string url_;
  std::chrono::milliseconds timeout_;
};

inline void register_remote_segmenter() {
  segmenter_registry()["remote"] = [](const std::map<std::string, std::string> &opt) -> std::shared_ptr<const Segmenter> {
    const auto it = opt.find("url");
    if (it == opt.end() || it->second.empty()) throw BackendUnavailable("remote segmenter needs a 'url' option");
    auto timeout = std::chrono::milliseconds(30000);
    if (auto t = opt.find("timeout_ms"); t != opt.end()) timeout = std::chrono::milliseconds(std::stol(t->second));
    return std::make_shared<RemoteSegmenter>(it->second, timeout);
  };
}

}  // namespace amx
