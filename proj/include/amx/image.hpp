#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"

namespace amx {

struct ImageShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return height * width; }
  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageShape &) const = default;
};

inline std::string to_string(const ImageShape &s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

// Axis-aligned box in pixel coordinates, half-open.
struct Box {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t area() const { return height * width; }
  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
  bool operator==(const Box &) const = default;
};

// Ground-truth metadata a synthetic generator may attach to what it drew.
struct Region {
  std::string label;
  Box box;
  double confidence = 0.0;
};

// Planar CHW image with values in [0, 1] by convention of the toy decoder.
template <typename T>
struct Image {
  ImageShape shape;
  std::vector<T> pixels;
  std::vector<Region> regions;

  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * shape.height + y) * shape.width + x];
  }
};

template <typename T>
using ImageBatch = std::vector<Image<T>>;

// Differentiable image: a 1×(C·H·W) Var plus the regions the decoder drew.
template <typename T>
struct ImageVar {
  ImageShape shape;
  ad::Var<T> pixels;
  std::vector<Region> regions;
};

template <typename T>
Image<T> to_image(const ImageVar<T> &v) {
  return Image<T>{v.shape, std::vector<T>(v.pixels.value().begin(), v.pixels.value().end()), v.regions};
}

template <typename T>
ImageVar<T> to_constant(const Image<T> &img) {
  return ImageVar<T>{img.shape, ad::constant(img.pixels, 1, img.shape.size()), img.regions};
}

template <typename T>
void validate_image(const Image<T> &img) {
  if (img.shape.size() == 0 || img.pixels.size() != img.shape.size())
    throw Rejected("invalid image: shape " + to_string(img.shape) + " does not match " +
                   std::to_string(img.pixels.size()) + " pixel values");
  for (T v : img.pixels)
    if (!std::isfinite(v)) throw Rejected("invalid image: non-finite pixel value");
}

namespace detail {

struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel-centred bilinear sampling taps along one axis.
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double f = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}

}  // namespace detail

// Differentiable bilinear resize of a planar image.
template <typename T>
ad::Var<T> resize_bilinear(const ad::Var<T> &img, const ImageShape &in, std::size_t out_h, std::size_t out_w) {
  if (img.size() != in.size()) throw ContractViolation("resize_bilinear: image size does not match shape");
  if (in.height == out_h && in.width == out_w) return img;
  const auto ty = detail::bilinear_taps(in.height, out_h);
  const auto tx = detail::bilinear_taps(in.width, out_w);
  const std::size_t C = in.channels, H = in.height, W = in.width;
  std::vector<T> out(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto &a = ty[y];
        const auto &b = tx[x];
        const T *p = &img.value()[c * H * W];
        out[(c * out_h + y) * out_w + x] =
            static_cast<T>(a.w0 * (b.w0 * p[a.i0 * W + b.i0] + b.w1 * p[a.i0 * W + b.i1]) +
                           a.w1 * (b.w0 * p[a.i1 * W + b.i0] + b.w1 * p[a.i1 * W + b.i1]));
      }
  return ad::detail::make<T>(std::move(out), 1, C * out_h * out_w, {img},
                             [img, ty, tx, C, H, W, out_h, out_w](ad::Node<T> &self) {
                               auto &g = img.node()->ensure_grad();
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t y = 0; y < out_h; ++y)
                                   for (std::size_t x = 0; x < out_w; ++x) {
                                     const T go = self.grad[(c * out_h + y) * out_w + x];
                                     const auto &a = ty[y];
                                     const auto &b = tx[x];
                                     T *p = &g[c * H * W];
                                     p[a.i0 * W + b.i0] += static_cast<T>(go * a.w0 * b.w0);
                                     p[a.i0 * W + b.i1] += static_cast<T>(go * a.w0 * b.w1);
                                     p[a.i1 * W + b.i0] += static_cast<T>(go * a.w1 * b.w0);
                                     p[a.i1 * W + b.i1] += static_cast<T>(go * a.w1 * b.w1);
                                   }
                             });
}

// (x - mean[c]) / std[c] per channel.
template <typename T>
ad::Var<T> normalize_channels(const ad::Var<T> &img, const ImageShape &shape, const std::vector<double> &mean,
                              const std::vector<double> &stddev) {
  if (mean.size() != shape.channels || stddev.size() != shape.channels)
    throw ContractViolation("normalize_channels: statistics do not match channel count");
  const std::size_t plane = shape.pixels();
  std::vector<T> out(img.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i / plane;
    out[i] = static_cast<T>((img[i] - mean[c]) / stddev[c]);
  }
  return ad::detail::make<T>(std::move(out), 1, img.size(), {img}, [img, plane, stddev](ad::Node<T> &self) {
    auto &g = img.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(self.grad[i] / stddev[i / plane]);
  });
}

}  // namespace amx
