#pragma once

// Run-directory persistence: lossless BMP images, the embeddings blob and the
// CSV artifacts. Writers never overwrite: an existing name gets a timestamped
// sibling instead.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "amx/csv.hpp"
#include "amx/errors.hpp"
#include "amx/image.hpp"
#include "amx/optimizer.hpp"
#include "amx/sampler.hpp"
#include "amx/segmentation.hpp"

namespace amx::io {

namespace fs = std::filesystem;

// Shortest round-trip representation.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string utc_stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

// `dir/name` if free, otherwise `dir/<stem>.<utc stamp>[-k]<ext>`.
inline fs::path unique_path(const fs::path &dir, const std::string &name) {
  fs::path p = dir / name;
  if (!fs::exists(p)) return p;
  const fs::path n(name);
  const std::string stem = n.stem().string(), ext = n.extension().string(), stamp = utc_stamp();
  for (int k = 0;; ++k) {
    p = dir / (stem + "." + stamp + (k ? "-" + std::to_string(k) : "") + ext);
    if (!fs::exists(p)) return p;
  }
}

inline void ensure_dir(const fs::path &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline void write_file(const fs::path &path, std::string_view bytes) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline std::string read_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// BMP (24-bit, uncompressed)

namespace detail {
inline void put_u16(std::string &s, std::uint16_t v) {
  s += static_cast<char>(v & 0xff);
  s += static_cast<char>(v >> 8);
}
inline void put_u32(std::string &s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline std::uint32_t get_u32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}
inline std::uint16_t get_u16(std::string_view s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) | (static_cast<unsigned char>(s[at + 1]) << 8));
}
inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// rgb(y, x, channel) -> byte
template <typename F>
std::string bmp(std::size_t h, std::size_t w, F rgb) {
  const std::size_t stride = (w * 3 + 3) / 4 * 4;
  const auto data = static_cast<std::uint32_t>(stride * h);
  std::string s;
  s.reserve(54 + data);
  s += "BM";
  put_u32(s, 54 + data);
  put_u32(s, 0);
  put_u32(s, 54);
  put_u32(s, 40);
  put_u32(s, static_cast<std::uint32_t>(w));
  put_u32(s, static_cast<std::uint32_t>(h));
  put_u16(s, 1);
  put_u16(s, 24);
  put_u32(s, 0);
  put_u32(s, data);
  put_u32(s, 2835);
  put_u32(s, 2835);
  put_u32(s, 0);
  put_u32(s, 0);
  for (std::size_t r = 0; r < h; ++r) {
    const std::size_t y = h - 1 - r;  // bottom-up
    for (std::size_t x = 0; x < w; ++x)
      for (int c = 2; c >= 0; --c) s += static_cast<char>(rgb(y, x, c));  // BGR
    s.append(stride - w * 3, '\0');
  }
  return s;
}
}  // namespace detail

// Grey images (1 channel) are replicated to RGB.
template <typename T>
std::string encode_bmp(const Image<T> &img) {
  validate_image(img);
  const std::size_t C = img.shape.channels;
  if (C != 1 && C != 3) throw Rejected("BMP export supports 1 or 3 channels, got " + std::to_string(C));
  return detail::bmp(img.shape.height, img.shape.width, [&](std::size_t y, std::size_t x, int c) {
    return detail::to_byte(static_cast<double>(img.at(C == 3 ? static_cast<std::size_t>(c) : 0, y, x)));
  });
}

inline std::string encode_mask_bmp(const SegmentationMask &m) {
  return detail::bmp(m.height, m.width, [&](std::size_t y, std::size_t x, int) { return m.at(y, x) ? 255 : 0; });
}

// 8-bit values scaled to [0, 1].
inline Image<double> decode_bmp(std::string_view s) {
  if (s.size() < 54 || s[0] != 'B' || s[1] != 'M') throw SchemaError("not a BMP file");
  const auto offset = detail::get_u32(s, 10);
  const auto w = detail::get_u32(s, 18);
  const auto h = detail::get_u32(s, 22);
  if (detail::get_u16(s, 28) != 24 || detail::get_u32(s, 30) != 0) throw SchemaError("only 24-bit uncompressed BMP is supported");
  const std::size_t stride = (w * 3 + 3) / 4 * 4;
  if (s.size() < offset + stride * h) throw SchemaError("truncated BMP");
  Image<double> img{ImageShape{3, h, w}, std::vector<double>(3ull * h * w), {}};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto b = static_cast<unsigned char>(s[offset + r * stride + x * 3 + (2 - c)]);
        img.pixels[(c * h + (h - 1 - r)) * w + x] = b / 255.0;
      }
  return img;
}

// ---------------------------------------------------------------------------
// embeddings.bin: little-endian uint32 N, uint32 d, then N·d float32 row-major.

struct EmbeddingFile {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;
};

template <typename T>
std::string encode_embeddings(std::size_t rows, std::size_t cols, const std::vector<T> &values) {
  if (values.size() != rows * cols) throw ContractViolation("embedding matrix size mismatch");
  std::string s;
  detail::put_u32(s, static_cast<std::uint32_t>(rows));
  detail::put_u32(s, static_cast<std::uint32_t>(cols));
  for (T v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(s, bits);
  }
  return s;
}

inline EmbeddingFile decode_embeddings(std::string_view s) {
  if (s.size() < 8) throw SchemaError("embeddings file shorter than its header");
  EmbeddingFile e;
  e.rows = detail::get_u32(s, 0);
  e.cols = detail::get_u32(s, 4);
  const std::size_t n = std::size_t(e.rows) * e.cols;
  if (s.size() != 8 + 4 * n)
    throw SchemaError("embeddings file holds " + std::to_string((s.size() - 8) / 4) + " values, header says " +
                      std::to_string(e.rows) + "x" + std::to_string(e.cols));
  e.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::get_u32(s, 8 + 4 * i);
    std::memcpy(&e.values[i], &bits, 4);
  }
  return e;
}

// ---------------------------------------------------------------------------
// CSV artifacts

// One row per (restart, step, latent sample).
template <typename T>
std::string trace_csv(const RunRecord<T> &r) {
  std::ostringstream s;
  s << "restart,step,sample,seed,loss,batch_loss\n";
  for (const auto &rs : r.restarts)
    for (const auto &e : rs.trace)
      for (std::size_t b = 0; b < e.seeds.size(); ++b)
        s << rs.index << ',' << e.step << ',' << b << ',' << e.seeds[b] << ',' << format_double(e.sample_losses[b]) << ','
          << format_double(e.loss) << '\n';
  return s.str();
}

template <typename T>
std::string heldout_csv(const RunRecord<T> &r) {
  std::ostringstream s;
  s << "restart,seed,initial_loss,final_train_loss,heldout_loss,heldout_count,diverged,selected\n";
  for (const auto &rs : r.restarts)
    s << rs.index << ',' << rs.seed << ',' << format_double(rs.initial_loss) << ',' << format_double(rs.final_train_loss)
      << ',' << format_double(rs.heldout_loss) << ',' << r.heldout_seeds.size() << ',' << (rs.diverged ? 1 : 0) << ','
      << (static_cast<std::size_t>(rs.index) == r.selected ? 1 : 0) << '\n';
  return s.str();
}

inline std::string rel_path(const fs::path &p, const fs::path &base) { return p.lexically_relative(base).generic_string(); }

struct SampleArtifacts {
  std::string manifest;
  std::vector<std::string> images;
};

// Writes <dir>/<name>/NNN.bmp and the manifest <dir>/<name>.csv with one score
// column per target. Paths are returned relative to `base`.
template <typename T>
SampleArtifacts write_samples(const fs::path &base, const fs::path &dir, const SampleSet<T> &set,
                              const std::vector<ProbeTarget> &targets, const std::string &name = "samples") {
  const auto img_dir = unique_path(dir, name);
  const auto manifest = unique_path(dir, img_dir.filename().string() + ".csv");
  ensure_dir(img_dir);
  SampleArtifacts a;
  std::ostringstream s;
  s << "index,seed,file";
  for (const auto &t : targets) s << ',' << to_string(t);
  s << '\n';
  for (std::size_t i = 0; i < set.size(); ++i) {
    char file[16];
    std::snprintf(file, sizeof file, "%03zu.bmp", i);
    const auto p = img_dir / file;
    write_file(p, encode_bmp(set.images[i]));
    a.images.push_back(rel_path(p, base));
    s << i << ',' << set.seeds[i] << ',' << csv::field(rel_path(p, dir));
    for (const auto &t : targets) s << ',' << format_double(response_value(set.responses[i], t));
    s << '\n';
  }
  write_file(manifest, s.str());
  a.manifest = rel_path(manifest, base);
  return a;
}

inline std::vector<std::string> write_masks(const fs::path &base, const fs::path &dir,
                                            const std::vector<SegmentationMask> &masks) {
  const auto mask_dir = unique_path(dir, "masks");
  ensure_dir(mask_dir);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    char file[16];
    std::snprintf(file, sizeof file, "%03zu.bmp", i);
    const auto p = mask_dir / file;
    write_file(p, encode_mask_bmp(masks[i]));
    out.push_back(rel_path(p, base));
  }
  return out;
}

struct RunArtifacts {
  std::string trace;
  std::string embeddings;
  std::string heldout;
  std::string prompt;  // hard runs only
};

// trace.csv, embeddings.bin, heldout.csv and (for hard runs) prompt.txt.
template <typename T>
RunArtifacts write_run(const fs::path &base, const fs::path &dir, const RunRecord<T> &r) {
  ensure_dir(dir);
  RunArtifacts a;
  auto put = [&](const std::string &name, std::string_view bytes) {
    const auto p = unique_path(dir, name);
    write_file(p, bytes);
    return rel_path(p, base);
  };
  a.trace = put("trace.csv", trace_csv(r));
  a.embeddings = put("embeddings.bin", encode_embeddings(r.embedding_rows, r.embedding_cols, r.final_embeddings));
  a.heldout = put("heldout.csv", heldout_csv(r));
  if (r.prompt_text) a.prompt = put("prompt.txt", *r.prompt_text + "\n");
  return a;
}

}  // namespace amx::io
