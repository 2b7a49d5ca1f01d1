#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "amx/segmentation.hpp"
#include "amx/segmentation_remote.hpp"
#include "amx/toy_world.hpp"

using namespace amx;

namespace {

Image<double> image_with_regions(std::vector<Region> regions) {
  ImageShape shape{3, 8, 8};
  return {shape, std::vector<double>(shape.size(), 0.5), std::move(regions)};
}

std::vector<std::uint8_t> bytes(std::string_view s) { return {s.begin(), s.end()}; }

// In-process segmentation service: pixels whose red channel is above 200 are
// foreground, regardless of the prompt.
class ColourServer {
 public:
  explicit ColourServer(int status = 200, std::string override_body = "") {
    svr_.Post("/segment", [=, this](const httplib::Request &req, httplib::Response &res) {
      if (status != 200 || !override_body.empty()) {
        res.status = status;
        res.set_content(override_body, "application/json");
        return;
      }
      const auto j = nlohmann::json::parse(req.body);
      last_request = j;
      const auto h = j.at("height").get<std::size_t>(), w = j.at("width").get<std::size_t>();
      const auto rgb = codec::base64_decode(j.at("image").get<std::string>());
      std::vector<std::uint8_t> mask(h * w);
      for (std::size_t i = 0; i < h * w; ++i) mask[i] = rgb[i * 3] > 200;
      const bool any = std::count(mask.begin(), mask.end(), 1) > 0;
      const double conf = 0.8;
      nlohmann::json out{{"schema", kSegmentResponseSchema},
                         {"height", h},
                         {"width", w},
                         {"rle", codec::rle_encode(any && conf >= j.at("box_threshold").get<double>()
                                                       ? mask
                                                       : std::vector<std::uint8_t>(h * w, 0))},
                         {"confidences", any ? std::vector<double>{conf} : std::vector<double>{}}};
      res.set_content(out.dump(), "application/json");
    });
    port_ = svr_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~ColourServer() {
    svr_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  nlohmann::json last_request;

 private:
  httplib::Server svr_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Base64, KnownVectors) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
      {"foobar", "Zm9vYmFy"}};
  for (const auto &[plain, enc] : cases) {
    EXPECT_EQ(codec::base64_encode(bytes(plain)), enc);
    EXPECT_EQ(codec::base64_decode(enc), bytes(plain));
  }
}

TEST(Base64, RoundTripAndErrors) {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 64; ++n) {
    std::vector<std::uint8_t> b(static_cast<std::size_t>(n));
    for (auto &x : b) x = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(codec::base64_decode(codec::base64_encode(b)), b);
  }
  EXPECT_THROW(codec::base64_decode("abc"), SchemaError);
  EXPECT_THROW(codec::base64_decode("ab!d"), SchemaError);
  EXPECT_THROW(codec::base64_decode("a=bc"), SchemaError);
  EXPECT_THROW(codec::base64_decode("Zg==Zg=="), SchemaError);
}

TEST(Rle, StartsWithFalseRun) {
  EXPECT_EQ(codec::rle_encode({0, 0, 1, 1, 1, 0}), (std::vector<std::uint32_t>{2, 3, 1}));
  EXPECT_EQ(codec::rle_encode({1, 1}), (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(codec::rle_encode({}), (std::vector<std::uint32_t>{0}));
  EXPECT_EQ(codec::rle_decode({0, 2}, 2), (std::vector<std::uint8_t>{1, 1}));
  EXPECT_THROW(codec::rle_decode({3}, 2), SchemaError);
  EXPECT_THROW(codec::rle_decode({1}, 2), SchemaError);
}

TEST(Rle, PropertyRoundTrip) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 300; ++t) {
    std::vector<std::uint8_t> bits(rng() % 200);
    const auto density = rng() % 5;
    for (auto &b : bits) b = rng() % 5 < density;
    const auto runs = codec::rle_encode(bits);
    EXPECT_EQ(codec::rle_decode(runs, bits.size()), bits);
    for (std::size_t i = 1; i < runs.size(); ++i) EXPECT_GT(runs[i], 0u);
  }
}

TEST(StubSegmenter, MatchesNormalizedLabelsAboveThreshold) {
  const auto img = image_with_regions({{"Red  Block", {0, 0, 2, 2}, 0.9},
                                       {"red block", {4, 4, 2, 3}, 0.2},
                                       {"stripes", {6, 0, 2, 8}, 1.0}});
  StubSegmenter seg;
  SegmentationConfig cfg;
  auto m = seg.segment(img, "  RED block ", cfg);
  EXPECT_EQ(m.count(), 4u);
  EXPECT_TRUE(m.at(1, 1));
  EXPECT_FALSE(m.at(4, 4));
  EXPECT_EQ(m.confidences, (std::vector<double>{0.9}));
  // Lower threshold takes the union of both detections.
  cfg.box_threshold = 0.2;
  m = seg.segment(img, "red block", cfg);
  EXPECT_EQ(m.count(), 10u);
  // Exactly at threshold counts as detected; nothing detected is an empty mask.
  cfg.box_threshold = 0.9;
  EXPECT_EQ(seg.segment(img, "red block", cfg).count(), 4u);
  const auto none = seg.segment(img, "dots", cfg);
  EXPECT_EQ(none.count(), 0u);
  EXPECT_EQ(none.pixels.size(), 64u);
}

TEST(StubSegmenter, RejectsBadRequests) {
  StubSegmenter seg;
  const auto img = image_with_regions({});
  EXPECT_THROW(seg.segment(img, "   ", {}), Rejected);
  SegmentationConfig cfg;
  cfg.box_threshold = 1.5;
  EXPECT_THROW(seg.segment(img, "x", cfg), Rejected);
  auto bad = img;
  bad.pixels.pop_back();
  EXPECT_THROW(seg.segment(bad, "x", {}), Rejected);
}

TEST(Registry, KnownAndUnknownBackends) {
  EXPECT_EQ(make_segmenter("stub")->id(), "stub");
  try {
    make_segmenter("nope");
    FAIL();
  } catch (const BackendUnavailable &e) {
    EXPECT_NE(std::string(e.what()).find("stub"), std::string::npos);
  }
  register_remote_segmenter();
  EXPECT_THROW(make_segmenter("remote"), BackendUnavailable);
  EXPECT_EQ(make_segmenter("remote", {{"url", "http://127.0.0.1:1"}})->id(), "remote");
}

TEST(RemoteSegmenter, RoundTripsThroughColourService) {
  ColourServer server;
  RemoteSegmenter seg(server.url(), std::chrono::seconds(5));
  std::vector<double> intensity(toy::kConcepts, 0.0);
  intensity[0] = 1.0;  // red block at (10, 30)
  const auto img = toy::render(intensity, 10, 30);
  const auto m = seg.segment(img, "red block", {});
  EXPECT_EQ(server.last_request.at("schema"), kSegmentRequestSchema);
  EXPECT_EQ(server.last_request.at("prompt"), "red block");
  EXPECT_EQ(server.last_request.at("encoding"), "rgb8-hwc-base64");
  ASSERT_EQ(m.height, img.shape.height);
  ASSERT_EQ(m.width, img.shape.width);
  // Oracle: the same threshold applied to the image locally.
  const auto rgb = to_rgb8(img);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) EXPECT_EQ(m.at(y, x), rgb[(y * m.width + x) * 3] > 200);
  EXPECT_GT(m.count(), 0u);
  EXPECT_EQ(m.confidences, (std::vector<double>{0.8}));
  SegmentationConfig high;
  high.box_threshold = 0.95;
  EXPECT_EQ(seg.segment(img, "red block", high).count(), 0u);
}

TEST(RemoteSegmenter, FailuresAreReportedNotHidden) {
  const auto img = toy::render(std::vector<double>(toy::kConcepts, 0.0), 0, 0);
  {
    ColourServer server(503);
    EXPECT_THROW(RemoteSegmenter(server.url(), std::chrono::seconds(5)).segment(img, "x", {}), BackendUnavailable);
  }
  {
    ColourServer server(200, "not json");
    EXPECT_THROW(RemoteSegmenter(server.url(), std::chrono::seconds(5)).segment(img, "x", {}), SchemaError);
  }
  {
    ColourServer server(200, R"({"schema":"amx.segment.response/1","height":2,"width":2,"rle":[4],"confidences":[]})");
    EXPECT_THROW(RemoteSegmenter(server.url(), std::chrono::seconds(5)).segment(img, "x", {}), SchemaError);
  }
  {
    ColourServer server(200, R"({"schema":"other/1"})");
    EXPECT_THROW(RemoteSegmenter(server.url(), std::chrono::seconds(5)).segment(img, "x", {}), SchemaError);
  }
  // Nothing listens on port 1.
  EXPECT_THROW(RemoteSegmenter("http://127.0.0.1:1", std::chrono::milliseconds(500)).segment(img, "x", {}),
               BackendUnavailable);
}

TEST(RemoteSegmenter, RejectsNonRgbImages) {
  Image<double> grey{{1, 4, 4}, std::vector<double>(16, 0.0), {}};
  EXPECT_THROW(to_rgb8(grey), Rejected);
}
