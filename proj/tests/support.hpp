#pragma once

// Generators and small fixtures shared by the unit tests.

#include "mla/paramspace.hpp"
#include "mla/rng.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace testing {

using namespace mla;

inline std::vector<std::int64_t> random_shape(Rng& rng) {
  std::vector<std::int64_t> s;
  const std::size_t rank = 1 + rng.index(3);
  for (std::size_t i = 0; i < rank; ++i) s.push_back(static_cast<std::int64_t>(1 + rng.index(5)));
  return s;
}

inline Tensor random_tensor(Rng& rng, const std::vector<std::int64_t>& shape, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Keys named like real layers so bias/norm handling is exercised.
inline ShapeMap random_shapes(Rng& rng, std::size_t keys) {
  static const char* kNames[] = {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias",  "head.weight",
                                 "head.bias",  "norm.gamma", "norm.beta", "conv.weight", "conv.bias"};
  ShapeMap m;
  for (std::size_t i = 0; i < keys && i < std::size(kNames); ++i) m[kNames[i]] = random_shape(rng);
  return m;
}

inline ParameterVector random_params(Rng& rng, const ShapeMap& shapes, double scale = 1.0) {
  ParameterVector pv;
  for (const auto& [k, s] : shapes) pv.set(k, random_tensor(rng, s, scale));
  return pv;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("mla_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing
