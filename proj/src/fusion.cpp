#include "mla/fusion.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <optional>

namespace mla {

ParameterVector init_fusion(int width, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(2.0 * width);
  Rng rng(derive_seed(seed, "fusion"));
  Tensor w = Tensor::zeros({width, 2 * width});
  for (double& v : w.data) v = rng.uniform(-bound, bound);
  // Child half starts near identity.
  for (int i = 0; i < width; ++i) w.data[static_cast<std::size_t>(i) * 2 * width + i] += 1.0;
  Tensor b = Tensor::zeros({width});
  for (double& v : b.data) v = rng.uniform(-bound, bound);
  ParameterVector pv;
  pv.set("fusion.weight", std::move(w));
  pv.set("fusion.bias", std::move(b));
  pv.round_to_float();
  return pv;
}

ad::Var fuse(const Bindings& phi, const ad::Var& h_child, const ad::Var& h_delta) {
  const ad::Var& w = phi.at("fusion.weight");
  require(h_child.cols() == h_delta.cols() && w.cols() == 2 * h_child.cols(), ErrorCode::DimMismatch,
          "fuse: knowledge vectors do not match the fusion width");
  return ad::relu(ad::linear(ad::concat_cols(h_child, h_delta), w, phi.at("fusion.bias")));
}

namespace {

Matrix as_row(const std::vector<double>& v) {
  return Eigen::Map<const Matrix>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
}

std::vector<double> as_vector(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

}  // namespace

std::vector<double> fuse(const ParameterVector& phi, const std::vector<double>& h_child,
                         const std::vector<double>& h_delta) {
  return as_vector(fuse(bind(phi, false), ad::constant(as_row(h_child)), ad::constant(as_row(h_delta))).value());
}

double similarity(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), ErrorCode::DimMismatch, "similarity: lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) fail(ErrorCode::ZeroVector, "similarity: zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

void to_json(nlohmann::json& j, const AttestorTrainConfig& c) {
  j = nlohmann::json{{"margin", c.margin},         {"lr", c.lr},
                     {"epochs", c.epochs},         {"batch_size", c.batch_size},
                     {"within_family_share", c.within_family_share}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AttestorTrainConfig& c) {
  AttestorTrainConfig d;
  c.margin = j.value("margin", d.margin);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.within_family_share = j.value("within_family_share", d.within_family_share);
  c.seed = j.value("seed", d.seed);
}

Attestor init_attestor(const EncoderConfig& cfg, std::uint64_t seed) {
  Attestor a;
  a.encoder = cfg;
  a.psi = init_encoder(cfg, derive_seed(seed, "psi"));
  a.phi = init_fusion(cfg.output_dim(), derive_seed(seed, "phi"));
  return a;
}

namespace {

constexpr double kTrainEps = 1e-12;

// Encodes each distinct knowledge set of a batch once.
class EncodeCache {
 public:
  EncodeCache(const EncoderConfig& cfg, const Bindings& psi, Rng* rng) : cfg_(cfg), psi_(psi), rng_(rng) {}

  ad::Var operator()(const KnowledgeSet* ks) {
    auto it = cache_.find(ks);
    if (it != cache_.end()) return it->second;
    EncodeOptions opt;
    opt.train = rng_ != nullptr;
    opt.rng = rng_;
    return cache_[ks] = encode(cfg_, psi_, *ks, opt);
  }

 private:
  const EncoderConfig& cfg_;
  const Bindings& psi_;
  Rng* rng_;
  std::map<const KnowledgeSet*, ad::Var> cache_;
};

}  // namespace

ad::Var triplet_loss(const EncoderConfig& cfg, const Bindings& psi, const Bindings& phi, double margin,
                     const std::vector<std::pair<KnowledgeTriplet, KnowledgeTriplet>>& batch, Rng* dropout_rng) {
  require(!batch.empty(), ErrorCode::InvalidArgument, "triplet_loss: empty batch");
  EncodeCache enc(cfg, psi, dropout_rng);
  Matrix m(1, 1);
  m(0, 0) = margin;
  ad::Var total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& [pos, neg] = batch[b];
    const ad::Var hp = enc(pos.parent);
    const ad::Var sp = ad::cosine(hp, fuse(phi, enc(pos.child), enc(pos.delta)), kTrainEps);
    const ad::Var sn = ad::cosine(enc(neg.parent), fuse(phi, enc(neg.child), enc(neg.delta)), kTrainEps);
    const ad::Var hinge = ad::relu(ad::add_constant(ad::sub(sn, sp), m));
    total = b == 0 ? hinge : ad::add(total, hinge);
  }
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

TrainLog train_attestor(Attestor& attestor, const std::vector<TrainingExample>& examples,
                        const AttestorTrainConfig& cfg) {
  require(examples.size() >= 4, ErrorCode::InsufficientPairs,
          "train_attestor: need at least 4 positive pairs, got " + std::to_string(examples.size()));
  require(cfg.margin > 0.0 && cfg.lr > 0.0 && cfg.batch_size >= 1 && cfg.epochs >= 0, ErrorCode::Config,
          "attestor training needs margin > 0, lr > 0, batch_size >= 1");
  for (const auto& ex : examples) {
    require(!ex.negatives.empty(), ErrorCode::InsufficientPairs, "every positive needs at least one negative");
  }
  attestor.margin = cfg.margin;
  Adam opt_psi(cfg.lr), opt_phi(cfg.lr);
  Rng rng(cfg.seed);
  TrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(examples.size());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::pair<KnowledgeTriplet, KnowledgeTriplet>> batch;
      for (std::size_t n = start; n < end; ++n) {
        const auto& ex = examples[order[n]];
        std::vector<const Negative*> within, cross;
        for (const auto& neg : ex.negatives) (neg.kind == NegativeKind::within_family ? within : cross).push_back(&neg);
        const bool pick_within = !within.empty() && (cross.empty() || rng.uniform() < cfg.within_family_share);
        const auto& pool = pick_within ? within : cross;
        batch.emplace_back(ex.positive, pool[rng.index(pool.size())]->triplet);
      }
      Bindings psi = bind(attestor.psi, true);
      Bindings phi = bind(attestor.phi, true);
      const ad::Var loss = triplet_loss(attestor.encoder, psi, phi, cfg.margin, batch, &rng);
      ad::backward(loss);
      opt_psi.step(attestor.psi, gradients(psi, attestor.psi));
      opt_phi.step(attestor.phi, gradients(phi, attestor.phi));
      total += loss.item();
      ++batches;
    }
    log.epoch_loss.push_back(total / static_cast<double>(batches));
    if (!std::isfinite(log.epoch_loss.back())) fail(ErrorCode::DivergedTraining, "attestor loss is not finite");
  }
  require(attestor.psi.all_finite() && attestor.phi.all_finite(), ErrorCode::DivergedTraining,
          "attestor weights became non-finite");
  attestor.psi.round_to_float();
  attestor.phi.round_to_float();
  return log;
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "full";
    case Ablation::no_delta: return "no_delta";
    case Ablation::mean_pool: return "mean_pool";
    case Ablation::sum_fusion: return "sum_fusion";
  }
  return "unknown";
}

double score_knowledge(const Attestor& attestor, const KnowledgeTriplet& t, Ablation ablation) {
  EncodeOptions opt;
  if (ablation == Ablation::mean_pool) {
    require(attestor.encoder.variant == EncoderVariant::classifier, ErrorCode::InvalidArgument,
            "mean-pool ablation applies to the classifier encoder only");
    opt.skip_transformer = true;
  }
  const auto hp = encode_vector(attestor.encoder, attestor.psi, *t.parent, opt).values;
  const auto hc = encode_vector(attestor.encoder, attestor.psi, *t.child, opt).values;
  auto hd = encode_vector(attestor.encoder, attestor.psi, *t.delta, opt).values;
  std::vector<double> fused;
  if (ablation == Ablation::sum_fusion) {
    fused = hc;
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += hd[i];
  } else {
    if (ablation == Ablation::no_delta) std::fill(hd.begin(), hd.end(), 0.0);
    fused = fuse(attestor.phi, hc, hd);
  }
  return similarity(hp, fused);
}

KnowledgeSet extract_knowledge(const ModelView& model, const ProbeSet& probe, const ProbeSettings& settings,
                               ResponseEmbedder* parent_embedder, std::size_t* truncated) {
  require(model.params != nullptr, ErrorCode::InvalidArgument, "extract_knowledge: model has no weights");
  switch (model.arch.kind) {
    case ModelKind::classifier: return extract_classifier(model.id, model.arch, *model.params, probe);
    case ModelKind::denoiser: return extract_denoiser(model.id, model.arch, *model.params, probe, settings.noise_seed);
    case ModelKind::seqmodel: {
      require(parent_embedder != nullptr, ErrorCode::InvalidArgument, "sequence models need the parent's embedder");
      const auto responses = collect_responses(model.arch, *model.params, probe, settings.responses, settings.sampling);
      if (truncated != nullptr) {
        for (const auto& r : responses) *truncated += r.truncated ? 1 : 0;
      }
      return parent_embedder->embed(model.id, probe, responses);
    }
  }
  fail(ErrorCode::InvalidArgument, "extract_knowledge: unknown model kind");
}

ParameterVector evolution_weights(const ParameterVector& theta0, const ParameterVector& parent,
                                  const ParameterVector& child, std::size_t* excluded) {
  const AlignmentSpec spec = align(theta0.shapes(), parent.shapes(), child.shapes());
  if (excluded != nullptr) *excluded = spec.excluded_keys.size();
  return evolution_model(theta0, parent, child, spec);
}

LineageScore lineage_score(const ModelView& parent, const ModelView& child, const ParameterVector& theta0,
                           const ProbeSet& probe, const Attestor& attestor, const ProbeSettings& settings,
                           Ablation ablation) {
  LineageScore out;
  out.parent_id = parent.id;
  out.child_id = child.id;
  out.flags.boundary_failures = probe.failed_boundaries();
  const ParameterVector delta = evolution_weights(theta0, *parent.params, *child.params, &out.flags.excluded_keys);
  const ModelView delta_view{"delta(" + parent.id + "," + child.id + ")", parent.arch, &delta};

  std::optional<ResponseEmbedder> embedder;
  if (parent.arch.kind == ModelKind::seqmodel) embedder.emplace(parent.id, parent.arch, *parent.params);
  ResponseEmbedder* emb = embedder ? &*embedder : nullptr;
  const KnowledgeSet kp = extract_knowledge(parent, probe, settings, emb, &out.flags.truncated_responses);
  const KnowledgeSet kc = extract_knowledge(child, probe, settings, emb, &out.flags.truncated_responses);
  const KnowledgeSet kd = extract_knowledge(delta_view, probe, settings, emb, &out.flags.truncated_responses);
  out.s = score_knowledge(attestor, {&kp, &kc, &kd}, ablation);
  return out;
}

std::string attestor_hash(const Attestor& attestor) {
  std::uint64_t h = fnv1a(nlohmann::json(attestor.encoder).dump());
  h = fnv1a(serialize_checkpoint(attestor.psi), h);
  h = fnv1a(serialize_checkpoint(attestor.phi), h);
  return hex64(h);
}

void save_attestor(const std::filesystem::path& dir, const Attestor& attestor) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "psi.bin", attestor.psi);
  save_checkpoint(dir / "phi.bin", attestor.phi);
  nlohmann::json card{{"schema_version", 1},
                      {"encoder", attestor.encoder},
                      {"encoder_version", attestor.encoder.version()},
                      {"fusion", {{"input", 2 * attestor.encoder.output_dim()}, {"output", attestor.encoder.output_dim()}}},
                      {"margin", attestor.margin},
                      {"training_families", attestor.training_families},
                      {"calibration", attestor.calibration},
                      {"weights_hash", attestor_hash(attestor)}};
  std::ofstream f(dir / "card.json");
  if (!f) fail(ErrorCode::Io, "cannot write attestor card in " + dir.string());
  f << card.dump(2) << "\n";
}

Attestor load_attestor(const std::filesystem::path& dir) {
  std::ifstream f(dir / "card.json");
  if (!f) fail(ErrorCode::Io, "no attestor bundle at " + dir.string());
  const auto card = nlohmann::json::parse(f);
  Attestor a;
  a.encoder = card.at("encoder").get<EncoderConfig>();
  a.margin = card.at("margin").get<double>();
  a.training_families = card.at("training_families").get<std::vector<std::string>>();
  a.calibration = card.at("calibration");
  a.psi = load_checkpoint(dir / "psi.bin");
  a.phi = load_checkpoint(dir / "phi.bin");
  return a;
}

}  // namespace mla
