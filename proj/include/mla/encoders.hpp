#pragma once

// Knowledge extraction (raw embeddings of a model on a parent's probe set) and
// the learnable encoders that compress a knowledge set into one vector.

#include "mla/autograd.hpp"
#include "mla/models.hpp"
#include "mla/probes.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mla {

class Rng;

enum class EncoderVariant { classifier, denoiser, seqmodel };

std::string to_string(EncoderVariant v);
EncoderVariant encoder_variant_from_string(const std::string& s);
EncoderVariant variant_for(ModelKind kind);

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::classifier;
  int input_dim = 32;       // knowledge embedding width (denoiser: up-block channels)
  int latent = 128;         // projection width; output width for classifier/seqmodel
  int heads = 4;
  int ffn = 256;
  int layers = 2;
  int conv_channels = 32;   // denoiser conv width
  int map_side = 8;         // denoiser feature-map side
  int out_dim = 160;        // denoiser output width
  double dropout = 0.1;     // seqmodel, training only

  bool operator==(const EncoderConfig&) const = default;

  int output_dim() const { return variant == EncoderVariant::denoiser ? out_dim : latent; }
  // Stable identifier; only vectors with equal versions are comparable.
  std::string version() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

ParameterVector init_encoder(const EncoderConfig& cfg, std::uint64_t seed);

struct KnowledgeSet {
  std::string model_id;
  std::string probe_hash;
  EncoderVariant variant = EncoderVariant::classifier;
  int k = 0;                 // classifier class count
  Matrix embeddings;         // one row per probe sample (per response for seqmodels)

  std::size_t size() const { return static_cast<std::size_t>(embeddings.rows()); }
  int dim() const { return static_cast<int>(embeddings.cols()); }
};

struct KnowledgeVector {
  std::vector<double> values;
  std::string model_id;
  std::string encoder_version;
};

// Penultimate features of every probe sample, probe order preserved.
KnowledgeSet extract_classifier(const std::string& model_id, const ArchSpec& arch, const ParameterVector& params,
                                const ProbeSet& probe);

inline constexpr int kProbeTimestep = kDiffusionSteps / 2;

// Final up-block activations at a fixed timestep; the noise draw depends only
// on noise_seed so every model sees identical noised inputs.
KnowledgeSet extract_denoiser(const std::string& model_id, const ArchSpec& arch, const ParameterVector& params,
                              const ProbeSet& probe, std::uint64_t noise_seed);

struct Response {
  std::size_t prompt_index = 0;
  int sample_index = 0;
  std::vector<int> tokens;  // generated continuation, ends with text::kEnd unless truncated
  bool truncated = false;   // hit the length cap (GenerationOverflow flag)
};

struct SamplingConfig {
  double temperature = 1.0;  // 0 selects greedy decoding
  int max_length = 16;
  std::uint64_t seed = 0;
};

// r generations per prompt; generation (p, s) draws from its own seeded stream.
std::vector<Response> collect_responses(const ArchSpec& arch, const ParameterVector& params, const ProbeSet& probe,
                                        int r, const SamplingConfig& cfg);

// Embeds responses with the parent's recurrent state: the mean hidden state
// over response tokens, conditioned on the prompt. Every call is logged so
// callers can audit which weights produced the embeddings.
class ResponseEmbedder {
 public:
  ResponseEmbedder(std::string parent_id, ArchSpec arch, const ParameterVector& params)
      : parent_id_(std::move(parent_id)), arch_(std::move(arch)), params_(&params) {}

  struct AuditEntry {
    std::string embedder_id;
    std::string responder_id;
  };

  KnowledgeSet embed(const std::string& responder_id, const ProbeSet& probe, const std::vector<Response>& responses);

  const std::string& parent_id() const { return parent_id_; }
  const std::vector<AuditEntry>& audit() const { return audit_; }

 private:
  std::string parent_id_;
  ArchSpec arch_;
  const ParameterVector* params_;
  std::vector<AuditEntry> audit_;
};

struct EncodeOptions {
  bool train = false;
  Rng* rng = nullptr;        // dropout stream, required when train is set
  int pad_classes = 0;       // classifier: pad the class axis to this many blocks
  bool skip_transformer = false;  // classifier: mean of projected samples instead of G(T(M))
};

// Differentiable encoders; `psi` binds the weights from init_encoder.
ad::Var encode(const EncoderConfig& cfg, const Bindings& psi, const KnowledgeSet& ks, const EncodeOptions& opt = {});

KnowledgeVector encode_vector(const EncoderConfig& cfg, const ParameterVector& psi, const KnowledgeSet& ks,
                              const EncodeOptions& opt = {});

// Classifier knowledge restricted to its first `classes` classes, laid out as
// a probe of that size.
KnowledgeSet restrict_classes(const KnowledgeSet& ks, int classes);

// Sinusoidal position table, rows = positions.
Matrix positional_encoding(int positions, int width);

void save_knowledge(const std::filesystem::path& base, const KnowledgeSet& ks);
KnowledgeSet load_knowledge(const std::filesystem::path& base);

}  // namespace mla
