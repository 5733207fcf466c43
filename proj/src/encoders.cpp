#include "mla/encoders.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cmath>
#include <fstream>

namespace mla {

std::string to_string(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::classifier: return "classifier";
    case EncoderVariant::denoiser: return "denoiser";
    case EncoderVariant::seqmodel: return "seqmodel";
  }
  return "unknown";
}

EncoderVariant encoder_variant_from_string(const std::string& s) {
  if (s == "classifier") return EncoderVariant::classifier;
  if (s == "denoiser") return EncoderVariant::denoiser;
  if (s == "seqmodel") return EncoderVariant::seqmodel;
  fail(ErrorCode::Config, "unknown encoder variant '" + s + "'");
}

EncoderVariant variant_for(ModelKind kind) {
  switch (kind) {
    case ModelKind::classifier: return EncoderVariant::classifier;
    case ModelKind::denoiser: return EncoderVariant::denoiser;
    case ModelKind::seqmodel: return EncoderVariant::seqmodel;
  }
  return EncoderVariant::classifier;
}

std::string EncoderConfig::version() const {
  nlohmann::json j = *this;
  return to_string(variant) + "-" + hex64(fnv1a(j.dump())).substr(0, 8);
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)}, {"input_dim", c.input_dim},   {"latent", c.latent},
                     {"heads", c.heads},                {"ffn", c.ffn},               {"layers", c.layers},
                     {"conv_channels", c.conv_channels}, {"map_side", c.map_side},    {"out_dim", c.out_dim},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.variant = encoder_variant_from_string(j.value("variant", std::string("classifier")));
  c.input_dim = j.value("input_dim", d.input_dim);
  c.latent = j.value("latent", d.latent);
  c.heads = j.value("heads", d.heads);
  c.ffn = j.value("ffn", d.ffn);
  c.layers = j.value("layers", d.layers);
  c.conv_channels = j.value("conv_channels", d.conv_channels);
  c.map_side = j.value("map_side", d.map_side);
  c.out_dim = j.value("out_dim", d.out_dim);
  c.dropout = j.value("dropout", d.dropout);
}

namespace {

void add_linear(ParameterVector& pv, const std::string& name, int out, int in, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Rng rng(derive_seed(seed, name));
  Tensor w = Tensor::zeros({out, in});
  for (double& v : w.data) v = rng.uniform(-bound, bound);
  Tensor b = Tensor::zeros({out});
  for (double& v : b.data) v = rng.uniform(-bound, bound);
  pv.set(name + ".weight", std::move(w));
  pv.set(name + ".bias", std::move(b));
}

void add_norm(ParameterVector& pv, const std::string& name, int width) {
  Tensor g = Tensor::zeros({width});
  std::fill(g.data.begin(), g.data.end(), 1.0);
  pv.set(name + ".weight", std::move(g));
  pv.set(name + ".bias", Tensor::zeros({width}));
}

const ad::Var& get(const Bindings& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) fail(ErrorCode::ShapeMismatch, "encoder weights lack '" + name + "'");
  return it->second;
}

ad::Var dense(const Bindings& p, const std::string& name, const ad::Var& x) {
  return ad::linear(x, get(p, name + ".weight"), get(p, name + ".bias"));
}

ad::Var norm(const Bindings& p, const std::string& name, const ad::Var& x) {
  return ad::layer_norm_rows(x, get(p, name + ".weight"), get(p, name + ".bias"));
}

// Multi-head self-attention; `mask` holds 0 for allowed and a large negative
// value for blocked (query, key) pairs.
ad::Var attention(const EncoderConfig& cfg, const Bindings& p, const std::string& prefix, const ad::Var& x,
                  const Matrix& mask) {
  const ad::Var q = dense(p, prefix + ".attn_q", x);
  const ad::Var k = dense(p, prefix + ".attn_k", x);
  const ad::Var v = dense(p, prefix + ".attn_v", x);
  const int width = cfg.latent / cfg.heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(width));
  ad::Var merged;
  for (int h = 0; h < cfg.heads; ++h) {
    const ad::Var qh = ad::slice_cols(q, h * width, width);
    const ad::Var kh = ad::slice_cols(k, h * width, width);
    const ad::Var vh = ad::slice_cols(v, h * width, width);
    const ad::Var w = ad::softmax_rows(ad::add_constant(ad::scale(ad::matmul_nt(qh, kh), inv), mask));
    const ad::Var out = ad::matmul(w, vh);
    merged = h == 0 ? out : ad::concat_cols(merged, out);
  }
  return dense(p, prefix + ".attn_out", merged);
}

constexpr double kBlocked = -1e9;

ad::Var encode_classifier(const EncoderConfig& cfg, const Bindings& psi, const KnowledgeSet& ks,
                          const EncodeOptions& opt) {
  const int k = ks.k;
  require(k >= 1 && ks.embeddings.rows() == static_cast<Eigen::Index>(k) * k, ErrorCode::ShapeMismatch,
          "classifier knowledge set must hold k + k(k-1) rows");
  require(ks.dim() == cfg.input_dim, ErrorCode::ShapeMismatch, "knowledge width differs from encoder input width");
  const int blocks = std::max(k, opt.pad_classes);
  const int len = blocks;
  const int n = blocks * len;

  // Class i's sequence: its centroid, then its boundary samples in ascending j.
  Matrix tokens = Matrix::Zero(n, ks.dim());
  std::vector<bool> real(static_cast<std::size_t>(n), false);
  for (int i = 0; i < k; ++i) {
    int pos = 0;
    for (int j = -1; j < k; ++j) {
      if (j == i) continue;
      const int src = static_cast<int>(ProbeSet::classifier_index(k, i, j < 0 ? i : j));
      tokens.row(i * len + pos) = ks.embeddings.row(src);
      real[static_cast<std::size_t>(i * len + pos)] = true;
      ++pos;
    }
  }

  ad::Var h = norm(psi, "proj_norm", dense(psi, "proj", ad::constant(std::move(tokens))));
  if (opt.skip_transformer) {
    std::vector<int> rows;
    for (int r = 0; r < n; ++r) {
      if (real[static_cast<std::size_t>(r)]) rows.push_back(r);
    }
    return ad::mean_rows(ad::gather_rows(h, rows));
  }

  const Matrix pe = positional_encoding(len, cfg.latent);
  Matrix pos_table(n, cfg.latent);
  for (int b = 0; b < blocks; ++b) pos_table.middleRows(b * len, len) = pe;
  h = ad::add_constant(h, pos_table);

  // Block-diagonal attention over real keys; padded queries see only themselves.
  Matrix mask = Matrix::Constant(n, n, kBlocked);
  for (int r = 0; r < n; ++r) {
    if (!real[static_cast<std::size_t>(r)]) {
      mask(r, r) = 0.0;
      continue;
    }
    const int b = r / len;
    for (int c = b * len; c < (b + 1) * len; ++c) {
      if (real[static_cast<std::size_t>(c)]) mask(r, c) = 0.0;
    }
  }

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l);
    h = norm(psi, pre + ".norm1", ad::add(h, attention(cfg, psi, pre, h, mask)));
    const ad::Var ff = dense(psi, pre + ".ffn2", ad::relu(dense(psi, pre + ".ffn1", h)));
    h = norm(psi, pre + ".norm2", ad::add(h, ff));
  }

  std::vector<int> last;
  for (int i = 0; i < k; ++i) last.push_back(i * len + (k - 1));
  return ad::mean_rows(ad::gather_rows(h, last));
}

ad::Var encode_denoiser(const EncoderConfig& cfg, const Bindings& psi, const KnowledgeSet& ks) {
  const ad::MapShape shape{cfg.input_dim, cfg.map_side, cfg.map_side};
  require(ks.dim() == cfg.input_dim * cfg.map_side * cfg.map_side && ks.size() > 0, ErrorCode::ShapeMismatch,
          "denoiser knowledge set does not match the encoder's feature-map shape");
  const ad::Var x = ad::constant(ks.embeddings);
  const ad::Var c = ad::relu(ad::conv3x3(x, get(psi, "conv.weight"), get(psi, "conv.bias"), shape));
  const ad::Var pooled = ad::mean_rows(ad::spatial_mean(c, {cfg.conv_channels, cfg.map_side, cfg.map_side}));
  return dense(psi, "mlp2", ad::relu(dense(psi, "mlp1", pooled)));
}

ad::Var encode_seqmodel(const EncoderConfig& cfg, const Bindings& psi, const KnowledgeSet& ks,
                        const EncodeOptions& opt) {
  require(ks.dim() == cfg.input_dim && ks.size() > 0, ErrorCode::ShapeMismatch,
          "response embeddings do not match the encoder input width");
  ad::Var h = ad::relu(dense(psi, "proj", ad::constant(ks.embeddings)));
  if (opt.train && cfg.dropout > 0.0) {
    require(opt.rng != nullptr, ErrorCode::InvalidArgument, "training-mode encode needs a dropout rng");
    h = ad::dropout(h, cfg.dropout, *opt.rng);
  }
  return ad::mean_rows(h);
}

}  // namespace

ParameterVector init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  ParameterVector pv;
  switch (cfg.variant) {
    case EncoderVariant::classifier:
      require(cfg.heads >= 1 && cfg.latent % cfg.heads == 0, ErrorCode::Config, "latent width must divide into heads");
      add_linear(pv, "proj", cfg.latent, cfg.input_dim, seed);
      add_norm(pv, "proj_norm", cfg.latent);
      for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l);
        for (const char* part : {".attn_q", ".attn_k", ".attn_v", ".attn_out"}) {
          add_linear(pv, pre + part, cfg.latent, cfg.latent, seed);
        }
        add_norm(pv, pre + ".norm1", cfg.latent);
        add_linear(pv, pre + ".ffn1", cfg.ffn, cfg.latent, seed);
        add_linear(pv, pre + ".ffn2", cfg.latent, cfg.ffn, seed);
        add_norm(pv, pre + ".norm2", cfg.latent);
      }
      break;
    case EncoderVariant::denoiser: {
      add_linear(pv, "conv", cfg.conv_channels, cfg.input_dim * 9, seed);
      Tensor w = pv.at("conv.weight");
      w.shape = {cfg.conv_channels, cfg.input_dim, 3, 3};
      pv.set("conv.weight", std::move(w));
      add_linear(pv, "mlp1", cfg.out_dim, cfg.conv_channels, seed);
      add_linear(pv, "mlp2", cfg.out_dim, cfg.out_dim, seed);
      break;
    }
    case EncoderVariant::seqmodel:
      add_linear(pv, "proj", cfg.latent, cfg.input_dim, seed);
      add_norm(pv, "proj_norm", cfg.latent);
      break;
  }
  pv.round_to_float();
  return pv;
}

Matrix positional_encoding(int positions, int width) {
  Matrix pe(positions, width);
  for (int p = 0; p < positions; ++p) {
    for (int c = 0; c < width; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / width);
      pe(p, c) = c % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
    }
  }
  return pe;
}

ad::Var encode(const EncoderConfig& cfg, const Bindings& psi, const KnowledgeSet& ks, const EncodeOptions& opt) {
  require(ks.variant == cfg.variant, ErrorCode::DimMismatch, "knowledge set and encoder variants differ");
  switch (cfg.variant) {
    case EncoderVariant::classifier: return encode_classifier(cfg, psi, ks, opt);
    case EncoderVariant::denoiser: return encode_denoiser(cfg, psi, ks);
    case EncoderVariant::seqmodel: return encode_seqmodel(cfg, psi, ks, opt);
  }
  fail(ErrorCode::InvalidArgument, "unknown encoder variant");
}

KnowledgeVector encode_vector(const EncoderConfig& cfg, const ParameterVector& psi, const KnowledgeSet& ks,
                              const EncodeOptions& opt) {
  const ad::Var h = encode(cfg, bind(psi, false), ks, opt);
  KnowledgeVector kv;
  kv.values.assign(h.value().data(), h.value().data() + h.value().size());
  kv.model_id = ks.model_id;
  kv.encoder_version = cfg.version();
  for (double v : kv.values) require(std::isfinite(v), ErrorCode::NonFinite, "knowledge vector is not finite");
  return kv;
}

KnowledgeSet restrict_classes(const KnowledgeSet& ks, int classes) {
  require(ks.variant == EncoderVariant::classifier, ErrorCode::InvalidArgument,
          "restrict_classes applies to classifier knowledge");
  require(classes >= 1 && classes <= ks.k, ErrorCode::InvalidArgument,
          "restrict_classes: class count must be in [1, " + std::to_string(ks.k) + "]");
  KnowledgeSet out = ks;
  out.k = classes;
  out.embeddings.resize(static_cast<Eigen::Index>(classes) * classes, ks.embeddings.cols());
  for (int i = 0; i < classes; ++i) {
    for (int j = 0; j < classes; ++j) {
      out.embeddings.row(static_cast<Eigen::Index>(ProbeSet::classifier_index(classes, i, j))) =
          ks.embeddings.row(static_cast<Eigen::Index>(ProbeSet::classifier_index(ks.k, i, j)));
    }
  }
  return out;
}

KnowledgeSet extract_classifier(const std::string& model_id, const ArchSpec& arch, const ParameterVector& params,
                                const ProbeSet& probe) {
  require(probe.kind == ProbeKind::classifier, ErrorCode::InvalidArgument, "extract_classifier: not a classifier probe");
  const Matrix x = probe.inputs();
  require(x.cols() == arch.input_dim, ErrorCode::ShapeMismatch, "model cannot consume the probe payloads");
  KnowledgeSet ks;
  ks.model_id = model_id;
  ks.probe_hash = probe.content_hash();
  ks.variant = EncoderVariant::classifier;
  ks.k = probe.k;
  ks.embeddings = classifier_features(arch, params, x);
  require(ks.embeddings.allFinite(), ErrorCode::NonFinite, "non-finite features for " + model_id);
  return ks;
}

KnowledgeSet extract_denoiser(const std::string& model_id, const ArchSpec& arch, const ParameterVector& params,
                              const ProbeSet& probe, std::uint64_t noise_seed) {
  require(probe.kind == ProbeKind::generic, ErrorCode::InvalidArgument, "extract_denoiser: not a generic probe");
  const Matrix x0 = probe.inputs();
  require(x0.cols() == arch.input_dim * arch.input_dim, ErrorCode::ShapeMismatch,
          "model cannot consume the probe payloads");
  Rng rng(noise_seed);
  const double ab = alpha_bar(kProbeTimestep);
  Matrix xt(x0.rows(), x0.cols());
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    for (Eigen::Index c = 0; c < x0.cols(); ++c) xt(r, c) = std::sqrt(ab) * x0(r, c) + std::sqrt(1.0 - ab) * rng.normal();
  }
  const std::vector<int> steps(static_cast<std::size_t>(x0.rows()), kProbeTimestep);
  KnowledgeSet ks;
  ks.model_id = model_id;
  ks.probe_hash = probe.content_hash();
  ks.variant = EncoderVariant::denoiser;
  ks.embeddings = denoiser_forward(arch, bind(params, false), ad::constant(xt), steps).upblock.value();
  require(ks.embeddings.allFinite(), ErrorCode::NonFinite, "non-finite features for " + model_id);
  return ks;
}

std::vector<Response> collect_responses(const ArchSpec& arch, const ParameterVector& params, const ProbeSet& probe,
                                        int r, const SamplingConfig& cfg) {
  require(probe.kind == ProbeKind::prompts, ErrorCode::InvalidArgument, "collect_responses: not a prompt probe");
  require(r >= 1 && cfg.max_length >= 1 && cfg.temperature >= 0.0, ErrorCode::InvalidArgument,
          "collect_responses: r, max_length must be positive and temperature non-negative");
  const Bindings bound = bind(params, false);
  std::vector<Response> out;
  for (std::size_t p = 0; p < probe.samples.size(); ++p) {
    const auto& prompt = probe.samples[p].tokens;
    for (int s = 0; s < r; ++s) {
      Rng rng(derive_seed(derive_seed(cfg.seed, probe.samples[p].id), static_cast<std::uint64_t>(s)));
      Response resp;
      resp.prompt_index = p;
      resp.sample_index = s;
      std::vector<int> seq = prompt;
      while (true) {
        if (static_cast<int>(resp.tokens.size()) >= cfg.max_length) {
          resp.truncated = true;
          break;
        }
        const auto fwd = seq_forward(arch, bound, {seq});
        const Eigen::RowVectorXd logits = fwd.logits.back().value().row(0);
        Eigen::Index next = 0;
        if (cfg.temperature == 0.0) {
          logits.maxCoeff(&next);
        } else {
          const Eigen::RowVectorXd z = (logits.array() - logits.maxCoeff()) / cfg.temperature;
          Eigen::RowVectorXd w = z.array().exp();
          w /= w.sum();
          double u = rng.uniform();
          next = w.size() - 1;
          for (Eigen::Index v = 0; v < w.size(); ++v) {
            u -= w(v);
            if (u < 0.0) {
              next = v;
              break;
            }
          }
        }
        resp.tokens.push_back(static_cast<int>(next));
        seq.push_back(static_cast<int>(next));
        if (next == text::kEnd) break;
      }
      out.push_back(std::move(resp));
    }
  }
  return out;
}

KnowledgeSet ResponseEmbedder::embed(const std::string& responder_id, const ProbeSet& probe,
                                     const std::vector<Response>& responses) {
  audit_.push_back({parent_id_, responder_id});
  const Bindings bound = bind(*params_, false);
  KnowledgeSet ks;
  ks.model_id = responder_id;
  ks.probe_hash = probe.content_hash();
  ks.variant = EncoderVariant::seqmodel;
  ks.embeddings = Matrix(static_cast<Eigen::Index>(responses.size()), arch_.hidden.at(1));
  for (std::size_t n = 0; n < responses.size(); ++n) {
    const auto& resp = responses[n];
    require(resp.prompt_index < probe.samples.size() && !resp.tokens.empty(), ErrorCode::InvalidArgument,
            "response does not belong to this probe");
    std::vector<int> seq = probe.samples[resp.prompt_index].tokens;
    const std::size_t start = seq.size();
    seq.insert(seq.end(), resp.tokens.begin(), resp.tokens.end());
    const auto fwd = seq_forward(arch_, bound, {seq});
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(arch_.hidden.at(1));
    for (std::size_t t = start; t < seq.size(); ++t) mean += fwd.hidden[t].value().row(0);
    ks.embeddings.row(static_cast<Eigen::Index>(n)) = mean / static_cast<double>(seq.size() - start);
  }
  return ks;
}

void save_knowledge(const std::filesystem::path& base, const KnowledgeSet& ks) {
  nlohmann::json meta{{"schema_version", 1},        {"model_id", ks.model_id}, {"probe_hash", ks.probe_hash},
                      {"variant", to_string(ks.variant)}, {"k", ks.k},           {"rows", ks.embeddings.rows()},
                      {"cols", ks.embeddings.cols()}};
  if (!base.parent_path().empty()) std::filesystem::create_directories(base.parent_path());
  std::ofstream f(base.string() + ".json");
  if (!f) fail(ErrorCode::Io, "cannot write " + base.string() + ".json");
  f << meta.dump(2) << "\n";
  ParameterVector payload;
  payload.set("embeddings", Tensor::from_matrix(ks.embeddings, {ks.embeddings.rows(), ks.embeddings.cols()}));
  save_checkpoint(base.string() + ".bin", payload);
}

KnowledgeSet load_knowledge(const std::filesystem::path& base) {
  std::ifstream f(base.string() + ".json");
  if (!f) fail(ErrorCode::Io, "cannot read " + base.string() + ".json");
  const auto meta = nlohmann::json::parse(f);
  KnowledgeSet ks;
  ks.model_id = meta.at("model_id").get<std::string>();
  ks.probe_hash = meta.at("probe_hash").get<std::string>();
  ks.variant = encoder_variant_from_string(meta.at("variant").get<std::string>());
  ks.k = meta.at("k").get<int>();
  ks.embeddings = load_checkpoint(base.string() + ".bin").at("embeddings").matrix();
  return ks;
}

}  // namespace mla
