#include "doctest.h"
#include "gradcheck.hpp"
#include "support.hpp"

#include "mla/error.hpp"
#include "mla/fusion.hpp"


using namespace mla;

namespace {

EncoderConfig tiny_classifier() {
  EncoderConfig c;
  c.variant = EncoderVariant::classifier;
  c.input_dim = 4;
  c.latent = 4;
  c.heads = 2;
  c.ffn = 4;
  c.layers = 1;
  return c;
}

EncoderConfig tiny_seq() {
  EncoderConfig c;
  c.variant = EncoderVariant::seqmodel;
  c.input_dim = 4;
  c.latent = 4;
  return c;
}

using testing::KnowledgePool;

double loss_value(const EncoderConfig& cfg, const ParameterVector& psi, const ParameterVector& phi, double margin,
                  const std::vector<std::pair<KnowledgeTriplet, KnowledgeTriplet>>& batch) {
  return testing::triplet_loss_value(cfg, psi, phi, margin, batch);
}

void check_gradients(const EncoderConfig& cfg, std::uint64_t seed) {
  const testing::GradCheck g = testing::check_triplet_gradients(cfg, seed);
  CHECK(g.checked > 20);
  CHECK(g.worst <= 1e-3);
}

}  // namespace

TEST_CASE("triplet loss gradients match central differences (classifier encoder)") {
  check_gradients(tiny_classifier(), 41);
  check_gradients(tiny_classifier(), 42);
}

TEST_CASE("triplet loss gradients match central differences (sequence encoder)") { check_gradients(tiny_seq(), 43); }

TEST_CASE("hinge is zero once the positive clears the negative by the margin") {
  Rng rng(44);
  KnowledgePool pool;
  const EncoderConfig cfg = tiny_classifier();
  const Attestor a = init_attestor(cfg, 1);
  const KnowledgeTriplet t = pool.triplet(rng, cfg);
  // Same triplet on both sides: loss equals the margin exactly.
  CHECK(loss_value(cfg, a.psi, a.phi, 0.2, {{t, t}}) == doctest::Approx(0.2));
  CHECK_THROWS_AS(loss_value(cfg, a.psi, a.phi, 0.2, {}), Error);
}

TEST_CASE("cosine similarity properties") {
  Rng rng(45);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(10);
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double s = similarity(a, b);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
    CHECK(s == doctest::Approx(similarity(b, a)));
    std::vector<double> scaled = a;
    const double c = rng.uniform(0.1, 10.0);
    for (auto& v : scaled) v *= c;
    CHECK(similarity(scaled, b) == doctest::Approx(s));
    CHECK(similarity(a, a) == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(similarity({0.0, 0.0}, {1.0, 2.0}), Error);
  CHECK_THROWS_AS(similarity({1.0}, {1.0, 2.0}), Error);
}

TEST_CASE("fusion output is non-negative and width-checked") {
  Rng rng(46);
  const ParameterVector phi = init_fusion(5, 3);
  std::vector<double> hc(5), hd(5);
  for (auto& v : hc) v = rng.normal();
  for (auto& v : hd) v = rng.normal();
  const auto f = fuse(phi, hc, hd);
  CHECK(f.size() == 5);
  for (double v : f) CHECK(v >= 0.0);
  CHECK_THROWS_AS(fuse(phi, std::vector<double>(4, 1.0), std::vector<double>(4, 1.0)), Error);
  CHECK(phi.at("fusion.weight").shape == std::vector<std::int64_t>{5, 10});
}

TEST_CASE("attestor training reduces the loss, is seeded and needs four positives") {
  Rng rng(47);
  KnowledgePool pool;
  const EncoderConfig cfg = tiny_classifier();
  std::vector<TrainingExample> examples;
  for (int i = 0; i < 6; ++i) {
    TrainingExample ex;
    ex.positive = pool.triplet(rng, cfg);
    Negative n;
    n.triplet = pool.triplet(rng, cfg);
    n.triplet.parent = ex.positive.parent;
    ex.negatives.push_back(n);
    examples.push_back(ex);
  }
  AttestorTrainConfig tc;
  tc.epochs = 30;
  tc.lr = 1e-2;
  tc.batch_size = 3;
  tc.seed = 5;
  Attestor a = init_attestor(cfg, 2), b = init_attestor(cfg, 2);
  const TrainLog la = train_attestor(a, examples, tc);
  const TrainLog lb = train_attestor(b, examples, tc);
  CHECK(la.epoch_loss == lb.epoch_loss);
  CHECK(a.psi == b.psi);
  CHECK(attestor_hash(a) == attestor_hash(b));
  CHECK(la.epoch_loss.back() < la.epoch_loss.front());

  std::vector<TrainingExample> few(examples.begin(), examples.begin() + 3);
  CHECK_THROWS_AS(train_attestor(a, few, tc), Error);
  examples[0].negatives.clear();
  CHECK_THROWS_AS(train_attestor(a, examples, tc), Error);
}

TEST_CASE("ablations change the score path but stay in range") {
  Rng rng(48);
  KnowledgePool pool;
  const EncoderConfig cfg = tiny_classifier();
  const Attestor a = init_attestor(cfg, 3);
  const KnowledgeTriplet t = pool.triplet(rng, cfg);
  for (Ablation ab : {Ablation::none, Ablation::no_delta, Ablation::mean_pool, Ablation::sum_fusion}) {
    const double s = score_knowledge(a, t, ab);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
  const Attestor seq = init_attestor(tiny_seq(), 3);
  CHECK_THROWS_AS(score_knowledge(seq, pool.triplet(rng, tiny_seq()), Ablation::mean_pool), Error);
}

TEST_CASE("attestor bundles round-trip") {
  const Attestor a = init_attestor(tiny_classifier(), 9);
  testing::TempDir dir("att");
  save_attestor(dir.path, a);
  const Attestor b = load_attestor(dir.path);
  CHECK(b.encoder == a.encoder);
  CHECK(b.psi == a.psi);
  CHECK(b.phi == a.phi);
  CHECK(attestor_hash(b) == attestor_hash(a));
  CHECK_THROWS_AS(load_attestor(dir.path / "missing"), Error);
}

TEST_CASE("the evolution model of a self pair is the init") {
  ArchSpec arch{ModelKind::classifier, Backbone::mlp, 4, {5}, 3, 4};
  const auto theta0 = init_params(arch, 1), parent = init_params(arch, 2);
  std::size_t excluded = 99;
  const auto w = evolution_weights(theta0, parent, parent, &excluded);
  CHECK(excluded == 0);
  for (const auto& [k, t] : w.entries()) {
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data[i] == doctest::Approx(theta0.at(k).data[i]));
  }
}
