#pragma once

// Probe sets that expose a model's knowledge: class centroids and decision
// boundary points for classifiers, sampled inputs for denoisers and prompt
// batteries for sequence models.

#include "mla/datasets.hpp"
#include "mla/models.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mla {

enum class SampleKind { centroid, boundary, generic_input, prompt };
enum class ProbeKind { classifier, generic, prompts };

std::string to_string(SampleKind k);
std::string to_string(ProbeKind k);

struct ProbeSample {
  SampleKind kind = SampleKind::generic_input;
  int class_from = -1;
  int class_to = -1;
  std::vector<double> input;  // empty for prompts
  std::vector<int> tokens;    // prompts only
  std::string id;
  bool converged = true;      // boundary search met tolerance
  int iterations = 0;
};

struct ProbeSet {
  ProbeKind kind = ProbeKind::classifier;
  std::string source_model_id;
  int k = 0;  // classifier class count
  int r = 0;  // responses per prompt
  std::vector<ProbeSample> samples;

  std::size_t size() const { return samples.size(); }
  // Input payloads stacked as rows.
  Matrix inputs() const;
  std::size_t failed_boundaries() const;
  // Index of sample x_i^j (centroid when i == j) in the canonical layout.
  static std::size_t classifier_index(int k, int i, int j);
  std::string content_hash() const;
};

struct BoundaryConfig {
  double eps_b = 0.02;
  double step = 0.05;
  int max_iters = 500;
  double clip_min = -1e300;
  double clip_max = 1e300;
};

struct BoundaryResult {
  ProbeSample sample;
  bool found = false;
  double gap = 0.0;     // |g_i - g_j|
  double margin = 0.0;  // min(g_i, g_j) - max over other classes
};

// Mean of class-i inputs; falls back to the most confident class-i training
// sample when the mean is not classified as i. Throws EmptyClass.
ProbeSample centroid_sample(const ArchSpec& arch, const ParameterVector& params, const Dataset& data, int cls);

// Descends (g_i - g_j)^2 + relu(max_{l != i,j} g_l - min(g_i, g_j))^2 from
// `start` with normalized gradient steps of length cfg.step, halving the step
// whenever the objective fails to decrease. Returns the best iterate with
// found=false when the tolerance is not met within max_iters.
BoundaryResult boundary_sample(const ArchSpec& arch, const ParameterVector& params, const ProbeSample& start, int i,
                               int j, const BoundaryConfig& cfg);

// Like boundary_sample but throws BoundaryNotFound on failure.
ProbeSample require_boundary(const ArchSpec& arch, const ParameterVector& params, const ProbeSample& start, int i,
                             int j, const BoundaryConfig& cfg);

// True when x satisfies both boundary conditions under the model.
bool satisfies_boundary(const ArchSpec& arch, const ParameterVector& params, const std::vector<double>& x, int i, int j,
                        double eps_b);

// k centroids (ascending i) followed by k(k-1) boundaries in lexicographic (i, j).
ProbeSet build_probe_classifier(const std::string& source_model_id, const ArchSpec& arch,
                                const ParameterVector& params, const Dataset& data, BoundaryConfig cfg = {});

// n inputs drawn uniformly without replacement, kept in generator order.
ProbeSet build_probe_generic(const std::string& source_model_id, const Dataset& data, std::size_t n,
                             std::uint64_t seed);

ProbeSet build_probe_prompts(const std::string& source_model_id, const std::vector<text::Domain>& domains,
                             int per_domain, int r);

void save_probe(const std::filesystem::path& base, const ProbeSet& probe);
ProbeSet load_probe(const std::filesystem::path& base);

}  // namespace mla
