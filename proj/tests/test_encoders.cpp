#include "doctest.h"
#include "support.hpp"

#include "mla/encoders.hpp"
#include "mla/error.hpp"
#include "mla/training.hpp"

using namespace mla;

namespace {

EncoderConfig small_classifier_encoder(int input_dim) {
  EncoderConfig c;
  c.variant = EncoderVariant::classifier;
  c.input_dim = input_dim;
  c.latent = 8;
  c.heads = 2;
  c.ffn = 16;
  c.layers = 2;
  return c;
}

KnowledgeSet random_classifier_knowledge(Rng& rng, int k, int dim) {
  KnowledgeSet ks;
  ks.variant = EncoderVariant::classifier;
  ks.k = k;
  ks.model_id = "m";
  ks.embeddings.resize(k * k, dim);
  for (Eigen::Index i = 0; i < ks.embeddings.size(); ++i) ks.embeddings.data()[i] = rng.normal();
  return ks;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("positional encoding follows the sinusoid table") {
  const Matrix pe = positional_encoding(5, 6);
  for (int p = 0; p < 5; ++p) {
    for (int c = 0; c < 6; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / 6.0);
      CHECK(pe(p, c) == doctest::Approx(c % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq)));
    }
  }
  CHECK(pe(0, 0) == 0.0);
  CHECK(pe(0, 1) == 1.0);
}

TEST_CASE("classifier encoder output width and determinism") {
  Rng rng(31);
  const EncoderConfig cfg = small_classifier_encoder(6);
  const auto psi = init_encoder(cfg, 3);
  CHECK(init_encoder(cfg, 3) == psi);
  const auto ks = random_classifier_knowledge(rng, 3, 6);
  const auto a = encode_vector(cfg, psi, ks), b = encode_vector(cfg, psi, ks);
  CHECK(a.values.size() == static_cast<std::size_t>(cfg.output_dim()));
  CHECK(a.values == b.values);
  CHECK(a.encoder_version == cfg.version());
}

TEST_CASE("padding the class axis leaves the knowledge vector unchanged (property)") {
  Rng rng(32);
  const EncoderConfig cfg = small_classifier_encoder(5);
  const auto psi = init_encoder(cfg, 4);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(4));
    const auto ks = random_classifier_knowledge(rng, k, 5);
    const auto plain = encode_vector(cfg, psi, ks);
    EncodeOptions opt;
    opt.pad_classes = k + 1 + static_cast<int>(rng.index(4));
    const auto padded = encode_vector(cfg, psi, ks, opt);
    CHECK(max_abs_diff(plain.values, padded.values) <= 1e-9);
  }
}

TEST_CASE("classifier encoder rejects malformed knowledge") {
  Rng rng(33);
  const EncoderConfig cfg = small_classifier_encoder(5);
  const auto psi = init_encoder(cfg, 4);
  auto ks = random_classifier_knowledge(rng, 3, 5);
  ks.embeddings.conservativeResize(8, 5);
  CHECK_THROWS_AS(encode_vector(cfg, psi, ks), Error);
  auto wide = random_classifier_knowledge(rng, 3, 7);
  CHECK_THROWS_AS(encode_vector(cfg, psi, wide), Error);
  auto other = random_classifier_knowledge(rng, 3, 5);
  other.variant = EncoderVariant::seqmodel;
  CHECK_THROWS_AS(encode_vector(cfg, psi, other), Error);
  EncoderConfig bad = cfg;
  bad.heads = 3;
  CHECK_THROWS_AS(init_encoder(bad, 1), Error);
}

TEST_CASE("restricting classes keeps the matching centroids and boundaries") {
  Rng rng(34);
  const auto ks = random_classifier_knowledge(rng, 4, 3);
  const auto r = restrict_classes(ks, 2);
  CHECK(r.k == 2);
  CHECK(r.size() == 4);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      CHECK(r.embeddings.row(static_cast<Eigen::Index>(ProbeSet::classifier_index(2, i, j))) ==
            ks.embeddings.row(static_cast<Eigen::Index>(ProbeSet::classifier_index(4, i, j))));
    }
  }
  CHECK(restrict_classes(ks, 4).embeddings == ks.embeddings);
  CHECK_THROWS_AS(restrict_classes(ks, 5), Error);
}

TEST_CASE("sequence encoder mean-pools responses, so order does not matter") {
  Rng rng(35);
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::seqmodel;
  cfg.input_dim = 6;
  cfg.latent = 8;
  const auto psi = init_encoder(cfg, 5);
  KnowledgeSet ks;
  ks.variant = EncoderVariant::seqmodel;
  ks.embeddings.resize(7, 6);
  for (Eigen::Index i = 0; i < ks.embeddings.size(); ++i) ks.embeddings.data()[i] = rng.normal();
  KnowledgeSet rev = ks;
  rev.embeddings = ks.embeddings.colwise().reverse();
  CHECK(max_abs_diff(encode_vector(cfg, psi, ks).values, encode_vector(cfg, psi, rev).values) <= 1e-12);
  // Training mode needs a dropout stream.
  EncodeOptions train;
  train.train = true;
  CHECK_THROWS_AS(encode(cfg, bind(psi, false), ks, train), Error);
}

TEST_CASE("denoiser encoder accepts up-block feature maps") {
  Rng rng(36);
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::denoiser;
  cfg.input_dim = 3;
  cfg.map_side = 4;
  cfg.conv_channels = 5;
  cfg.out_dim = 7;
  const auto psi = init_encoder(cfg, 6);
  KnowledgeSet ks;
  ks.variant = EncoderVariant::denoiser;
  ks.embeddings.resize(4, 3 * 4 * 4);
  for (Eigen::Index i = 0; i < ks.embeddings.size(); ++i) ks.embeddings.data()[i] = rng.normal();
  CHECK(encode_vector(cfg, psi, ks).values.size() == 7);
  ks.embeddings.conservativeResize(4, 10);
  CHECK_THROWS_AS(encode_vector(cfg, psi, ks), Error);
}

TEST_CASE("response embeddings are always produced by the parent's weights") {
  ArchSpec arch{ModelKind::seqmodel, Backbone::rnn, text::kVocab, {6, 8}, 0, 4};
  const auto parent = init_params(arch, 7);
  const auto child = init_params(arch, 8);
  const ProbeSet probe = build_probe_prompts("parent", {text::Domain::arithmetic}, 3, 2);
  SamplingConfig sc;
  sc.seed = 4;
  sc.max_length = 6;
  ResponseEmbedder embedder("parent", arch, parent);
  const auto from_parent = collect_responses(arch, parent, probe, 2, sc);
  const auto from_child = collect_responses(arch, child, probe, 2, sc);
  CHECK(from_parent.size() == 6);
  const auto kp = embedder.embed("parent", probe, from_parent);
  const auto kc = embedder.embed("child", probe, from_child);
  CHECK(kp.size() == 6);
  CHECK(kc.dim() == 8);
  REQUIRE(embedder.audit().size() == 2);
  for (const auto& e : embedder.audit()) CHECK(e.embedder_id == "parent");
  CHECK(embedder.audit()[1].responder_id == "child");
  // Identical responses embed identically regardless of who produced them.
  CHECK(embedder.embed("again", probe, from_parent).embeddings == kp.embeddings);
}

TEST_CASE("response collection is seeded per (prompt, sample)") {
  ArchSpec arch{ModelKind::seqmodel, Backbone::rnn, text::kVocab, {6, 8}, 0, 4};
  const auto params = init_params(arch, 9);
  const ProbeSet probe = build_probe_prompts("p", {text::Domain::qa, text::Domain::sequence}, 2, 3);
  SamplingConfig sc;
  sc.seed = 11;
  sc.max_length = 5;
  const auto a = collect_responses(arch, params, probe, 3, sc);
  const auto b = collect_responses(arch, params, probe, 3, sc);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(static_cast<int>(a[i].tokens.size()) <= sc.max_length);
    if (a[i].truncated) CHECK(static_cast<int>(a[i].tokens.size()) == sc.max_length);
  }
  sc.temperature = -1.0;
  CHECK_THROWS_AS(collect_responses(arch, params, probe, 3, sc), Error);
}

TEST_CASE("classifier extraction returns one feature row per probe sample") {
  DatasetRef ref{"b", DatasetKind::synthetic_blobs, 3, 3, 5, 20, 3.0, 1.0};
  const Dataset d = generate(ref);
  ArchSpec arch{ModelKind::classifier, Backbone::mlp, 5, {7}, 3, 4};
  auto params = init_params(arch, 2);
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.epochs = 20;
  train_classifier(arch, params, d.inputs, d.labels, tc);
  const ProbeSet probe = build_probe_classifier("m", arch, params, d);
  const KnowledgeSet ks = extract_classifier("m", arch, params, probe);
  CHECK(ks.size() == probe.size());
  CHECK(ks.dim() == arch.feature_dim());
  CHECK(ks.k == 3);
  CHECK(ks.probe_hash == probe.content_hash());
  testing::TempDir dir("ks");
  save_knowledge(dir.path / "k", ks);
  const KnowledgeSet back = load_knowledge(dir.path / "k");
  CHECK(back.k == ks.k);
  CHECK((back.embeddings - ks.embeddings).cwiseAbs().maxCoeff() <= 1e-6);
}
