#pragma once

// Knowledge fusion, the margin-trained metric space and lineage scoring.

#include "mla/encoders.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mla {

ParameterVector init_fusion(int width, std::uint64_t seed);

// relu(W [h_child | h_delta] + b); W is (width, 2 * width).
ad::Var fuse(const Bindings& phi, const ad::Var& h_child, const ad::Var& h_delta);
std::vector<double> fuse(const ParameterVector& phi, const std::vector<double>& h_child,
                         const std::vector<double>& h_delta);

// Cosine similarity; throws ZeroVector when either side has zero norm.
double similarity(const std::vector<double>& a, const std::vector<double>& b);

// Knowledge of the three models of one (claimed parent, child) pair, all on
// the parent's probe set.
struct KnowledgeTriplet {
  const KnowledgeSet* parent = nullptr;
  const KnowledgeSet* child = nullptr;
  const KnowledgeSet* delta = nullptr;
};

enum class NegativeKind { cross_family, within_family };

struct Negative {
  KnowledgeTriplet triplet;  // parent is the positive's parent
  NegativeKind kind = NegativeKind::cross_family;
};

struct TrainingExample {
  KnowledgeTriplet positive;
  std::vector<Negative> negatives;
};

struct AttestorTrainConfig {
  double margin = 0.2;
  double lr = 1e-4;
  int epochs = 100;
  int batch_size = 8;
  double within_family_share = 0.5;  // chance of drawing a within-family negative
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const AttestorTrainConfig& c);
void from_json(const nlohmann::json& j, AttestorTrainConfig& c);

struct Attestor {
  EncoderConfig encoder;
  ParameterVector psi;
  ParameterVector phi;
  double margin = 0.2;
  std::vector<std::string> training_families;
  nlohmann::json calibration;  // policy written by the evaluator; null when uncalibrated
};

Attestor init_attestor(const EncoderConfig& cfg, std::uint64_t seed);

struct TrainLog {
  std::vector<double> epoch_loss;
};

// Hinge loss max(0, m - sim(h_P, fuse(h_C, h_D)) + sim(h_P, fuse(h'_C, h'_D)))
// averaged over a batch of positives, one sampled negative per positive.
ad::Var triplet_loss(const EncoderConfig& cfg, const Bindings& psi, const Bindings& phi, double margin,
                     const std::vector<std::pair<KnowledgeTriplet, KnowledgeTriplet>>& batch, Rng* dropout_rng);

// Trains psi and phi jointly in place. Throws InsufficientPairs below 4 positives.
TrainLog train_attestor(Attestor& attestor, const std::vector<TrainingExample>& examples,
                        const AttestorTrainConfig& cfg);

enum class Ablation { none, no_delta, mean_pool, sum_fusion };

std::string to_string(Ablation a);

struct ScoreFlags {
  std::size_t boundary_failures = 0;
  std::size_t excluded_keys = 0;
  std::size_t truncated_responses = 0;
};

struct LineageScore {
  std::string parent_id;
  std::string child_id;
  double s = 0.0;
  ScoreFlags flags;
};

// S = sim(h_P, fuse(h_C, h_D)) with optional component ablations.
double score_knowledge(const Attestor& attestor, const KnowledgeTriplet& t, Ablation ablation = Ablation::none);

// A model as the scorer sees it.
struct ModelView {
  std::string id;
  ArchSpec arch;
  const ParameterVector* params = nullptr;
};

struct ProbeSettings {
  std::uint64_t noise_seed = 0;   // denoiser
  int responses = 5;              // seqmodel r
  SamplingConfig sampling;        // seqmodel
};

// Knowledge of `model` on the parent's probe. Sequence-model responses are
// embedded by the parent's embedder; `truncated` receives the overflow count.
KnowledgeSet extract_knowledge(const ModelView& model, const ProbeSet& probe, const ProbeSettings& settings,
                               ResponseEmbedder* parent_embedder, std::size_t* truncated = nullptr);

// Materializes the evolution model of (parent, child) with init theta0.
ParameterVector evolution_weights(const ParameterVector& theta0, const ParameterVector& parent,
                                  const ParameterVector& child, std::size_t* excluded = nullptr);

// Full pipeline: evolution model, extraction of all three models on the probe,
// encoding, fusion and cosine.
LineageScore lineage_score(const ModelView& parent, const ModelView& child, const ParameterVector& theta0,
                           const ProbeSet& probe, const Attestor& attestor, const ProbeSettings& settings,
                           Ablation ablation = Ablation::none);

void save_attestor(const std::filesystem::path& dir, const Attestor& attestor);
Attestor load_attestor(const std::filesystem::path& dir);
std::string attestor_hash(const Attestor& attestor);

}  // namespace mla
