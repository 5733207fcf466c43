#pragma once

#include "mla/datasets.hpp"
#include "mla/models.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mla {

struct TrainConfig {
  std::string optimizer = "adam";
  double lr = 1e-4;
  int epochs = 50;
  int batch_size = 32;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainResult {
  std::vector<double> epoch_loss;

  double first() const { return epoch_loss.empty() ? 0.0 : epoch_loss.front(); }
  double last() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
};

// All loops run mini-batch Adam with a seeded shuffle, round the weights to
// float32 at the end and throw DivergedTraining on a non-finite loss.
TrainResult train_classifier(const ArchSpec& arch, ParameterVector& params, const Matrix& inputs,
                             const std::vector<int>& labels, const TrainConfig& cfg);

// KL on temperature-softened outputs; teacher_probs are already softened.
TrainResult distill_classifier(const ArchSpec& arch, ParameterVector& params, const Matrix& inputs,
                               const Matrix& teacher_probs, double temperature, const TrainConfig& cfg);

TrainResult train_denoiser(const ArchSpec& arch, ParameterVector& params, const Matrix& images,
                           const TrainConfig& cfg);

TrainResult train_seqmodel(const ArchSpec& arch, ParameterVector& params, const std::vector<text::Example>& examples,
                           const TrainConfig& cfg);

// Mean denoising loss at a fixed set of timesteps and noise draws.
double denoiser_loss(const ArchSpec& arch, const ParameterVector& params, const Matrix& images, std::uint64_t seed);
// Mean next-token cross-entropy on response positions.
double seqmodel_loss(const ArchSpec& arch, const ParameterVector& params, const std::vector<text::Example>& examples);

// Soft targets softmax(logits / T) of a classifier.
Matrix soft_targets(const ArchSpec& arch, const ParameterVector& params, const Matrix& inputs, double temperature);

}  // namespace mla
