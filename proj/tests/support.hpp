#pragma once

// Helpers shared by the unit tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/toy_world.hpp"

namespace amx::test {

// Central differences of a scalar function of a flat vector.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double> &)> &f,
                                            std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto &x : v) x = d(rng);
  return v;
}

// Builds the graph fn(parameter(x)) and returns the analytic gradient.
inline std::vector<double> analytic_gradient(const std::function<ad::Var<double>(const ad::Var<double> &)> &fn,
                                             const std::vector<double> &x, std::size_t rows, std::size_t cols) {
  auto p = ad::parameter(x, rows, cols);
  ad::backward(fn(p));
  return p.grad();
}

inline double value_at(const std::function<ad::Var<double>(const ad::Var<double> &)> &fn, const std::vector<double> &x,
                       std::size_t rows, std::size_t cols) {
  return fn(ad::constant(x, rows, cols)).item();
}

// The default world is deterministic and costs ~0.3 s; build it once per binary.
inline const toy::ToyWorld &world() {
  static const toy::ToyWorld w = toy::build_world();
  return w;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string &tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("amx_test_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;
  const std::filesystem::path &path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace amx::test

#define AMX_EXPECT_GRAD_NEAR(fn, x, rows, cols, tol)                                               \
  do {                                                                                             \
    const auto amx_a_ = ::amx::test::analytic_gradient(fn, x, rows, cols);                         \
    const auto amx_n_ = ::amx::test::numeric_gradient(                                             \
        [&](const std::vector<double> &v) { return ::amx::test::value_at(fn, v, rows, cols); }, x); \
    ASSERT_EQ(amx_a_.size(), amx_n_.size());                                                       \
    for (std::size_t amx_i_ = 0; amx_i_ < amx_a_.size(); ++amx_i_)                                \
      EXPECT_NEAR(amx_a_[amx_i_], amx_n_[amx_i_], tol) << "coordinate " << amx_i_;                 \
  } while (0)
