#pragma once

// Flat named parameter vectors and the task-arithmetic edits applied to them.

#include "mla/autograd.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mla {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape_, std::vector<double> data_);
  static Tensor zeros(std::vector<std::int64_t> shape);

  std::size_t size() const { return data.size(); }
  // shape[0] x product(rest); a 1-D tensor becomes a single row.
  Matrix matrix() const;
  static Tensor from_matrix(const Matrix& m, std::vector<std::int64_t> shape);
};

std::size_t shape_size(const std::vector<std::int64_t>& shape);

using ShapeMap = std::map<std::string, std::vector<std::int64_t>>;

class ParameterVector {
 public:
  using Entries = std::map<std::string, Tensor>;

  ParameterVector() = default;
  explicit ParameterVector(Entries entries) : entries_(std::move(entries)) {}

  void set(const std::string& name, Tensor t) { entries_[name] = std::move(t); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_dim() const;

  const Entries& entries() const { return entries_; }
  Entries& entries() { return entries_; }
  ShapeMap shapes() const;

  bool all_finite() const;
  // Rounds every value to the nearest float32 so checkpoints round-trip exactly.
  void round_to_float();

  bool operator==(const ParameterVector& other) const;

 private:
  Entries entries_;
};

struct AlignmentSpec {
  std::vector<std::string> shared_keys;
  std::vector<std::string> excluded_keys;
};

AlignmentSpec align(const ShapeMap& a, const ShapeMap& b);
AlignmentSpec align(const ParameterVector& a, const ParameterVector& b);

// Three-way alignment: a key is shared only if all three carry it with one shape.
AlignmentSpec align(const ShapeMap& a, const ShapeMap& b, const ShapeMap& c);

// theta0 + thetaP - thetaC on shared keys; theta0 everywhere else. The output
// carries theta0's key set and shapes.
ParameterVector evolution_model(const ParameterVector& theta0, const ParameterVector& thetaP,
                                const ParameterVector& thetaC, const AlignmentSpec& spec);

// Bias and normalization parameters are never pruned or counted.
bool is_prunable(const std::string& name);

// Global unstructured magnitude pruning: zeroes the floor(p * N) prunable
// scalars of smallest magnitude, ties broken by (name, flat index).
ParameterVector prune(const ParameterVector& theta, double rate);

// Adds Uniform(-s, s) noise per key with s = rho * mean(|theta[key]|).
ParameterVector perturb(const ParameterVector& theta, double rho, std::uint64_t seed);

double param_distance(const ParameterVector& a, const ParameterVector& b);

// Binary checkpoint: name -> (shape, float32, row-major little-endian).
std::string serialize_checkpoint(const ParameterVector& pv);
ParameterVector deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const ParameterVector& pv);
ParameterVector load_checkpoint(const std::filesystem::path& path);

// JSON sidecar listing names and shapes.
void save_sidecar(const std::filesystem::path& path, const ParameterVector& pv);
ShapeMap load_sidecar(const std::filesystem::path& path);

}  // namespace mla
