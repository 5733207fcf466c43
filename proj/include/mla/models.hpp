#pragma once

// Desk-scale networks: MLP / compact conv classifiers, a toy U-Net denoiser and
// a toy recurrent sequence model. Networks are plain functions of a
// ParameterVector so that any weight vector (including the evolution model)
// runs through the same forward pass.

#include "mla/autograd.hpp"
#include "mla/datasets.hpp"
#include "mla/paramspace.hpp"

#include "json.hpp"

#include <map>
#include <string>
#include <vector>

namespace mla {

enum class ModelKind { classifier, denoiser, seqmodel };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

enum class Backbone { mlp, convnet, unet, rnn };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct ArchSpec {
  ModelKind kind = ModelKind::classifier;
  Backbone backbone = Backbone::mlp;
  int input_dim = 16;        // classifier features; denoiser image side; seqmodel vocab
  std::vector<int> hidden;   // mlp widths / conv channels / unet channels / rnn {embed, hidden}
  int classes = 0;           // classifier only
  int image_side = 4;        // convnet: inputs are viewed as 1 x side x side maps

  bool operator==(const ArchSpec&) const = default;

  // Width of the feature extractor output used for knowledge extraction.
  int feature_dim() const;
};

void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
ParameterVector init_params(const ArchSpec& arch, std::uint64_t seed);

// Replaces the classifier head with a freshly initialized one for `classes`.
void reset_head(ParameterVector& params, const ArchSpec& arch, int classes, std::uint64_t seed);

using Bindings = std::map<std::string, ad::Var>;

Bindings bind(const ParameterVector& params, bool trainable);
// Collects gradients of trainable bindings; zero tensors where nothing flowed.
ParameterVector gradients(const Bindings& bound, const ParameterVector& like);

struct ClassifierOutput {
  ad::Var features;
  ad::Var logits;
};
ClassifierOutput classifier_forward(const ArchSpec& arch, const Bindings& p, const ad::Var& x);

// Inference helpers (no gradient tracking).
Matrix classifier_features(const ArchSpec& arch, const ParameterVector& params, const Matrix& x);
Matrix classifier_probs(const ArchSpec& arch, const ParameterVector& params, const Matrix& x);
double classifier_accuracy(const ArchSpec& arch, const ParameterVector& params, const Dataset& data);

// Denoiser ----------------------------------------------------------------

inline constexpr int kDiffusionSteps = 100;

struct DenoiserOutput {
  ad::Var upblock;  // final up-block activation, (batch, c_up * side * side)
  ad::Var noise;    // predicted noise, (batch, side * side)
};
DenoiserOutput denoiser_forward(const ArchSpec& arch, const Bindings& p, const ad::Var& x_t,
                                const std::vector<int>& timesteps);
ad::MapShape upblock_shape(const ArchSpec& arch);
double alpha_bar(int t);

// Sequence model ----------------------------------------------------------

struct SeqOutput {
  std::vector<ad::Var> hidden;  // per position, (batch, hidden)
  std::vector<ad::Var> logits;  // per position, (batch, vocab)
};
// tokens: batch of equal-length sequences.
SeqOutput seq_forward(const ArchSpec& arch, const Bindings& p, const std::vector<std::vector<int>>& tokens);

// Optimizer ---------------------------------------------------------------

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterVector& params, const ParameterVector& grads);
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace mla
