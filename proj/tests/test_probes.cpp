#include "doctest.h"
#include "support.hpp"

#include "mla/error.hpp"
#include "mla/probes.hpp"
#include "mla/training.hpp"

using namespace mla;

namespace {

ArchSpec linear_arch(int dim, int classes) {
  ArchSpec a;
  a.kind = ModelKind::classifier;
  a.backbone = Backbone::mlp;
  a.input_dim = dim;
  a.classes = classes;
  return a;
}

// Linear softmax model with the given head rows.
ParameterVector linear_params(const ArchSpec& arch, const Matrix& w, const std::vector<double>& b) {
  ParameterVector pv = init_params(arch, 1);
  Tensor tw = Tensor::zeros(pv.at("head.weight").shape);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) tw.data[static_cast<std::size_t>(r * w.cols() + c)] = w(r, c);
  }
  pv.set("head.weight", tw);
  pv.set("head.bias", Tensor({static_cast<std::int64_t>(b.size())}, b));
  return pv;
}

struct Trained {
  ArchSpec arch;
  ParameterVector params;
  Dataset data;
};

Trained trained_classifier(int k, std::uint64_t seed) {
  DatasetRef ref{"blobs", DatasetKind::synthetic_blobs, seed, k, 8, 40, 3.0, 1.0};
  Trained t;
  t.data = generate(ref);
  t.arch = {ModelKind::classifier, Backbone::mlp, 8, {16}, k, 4};
  t.params = init_params(t.arch, seed + 1);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 30;
  cfg.seed = seed;
  train_classifier(t.arch, t.params, t.data.inputs, t.data.labels, cfg);
  return t;
}

}  // namespace

TEST_CASE("classifier layout index") {
  // k centroids, then boundaries in lexicographic (i, j) with i != j.
  CHECK(ProbeSet::classifier_index(3, 0, 0) == 0);
  CHECK(ProbeSet::classifier_index(3, 2, 2) == 2);
  CHECK(ProbeSet::classifier_index(3, 0, 1) == 3);
  CHECK(ProbeSet::classifier_index(3, 0, 2) == 4);
  CHECK(ProbeSet::classifier_index(3, 1, 0) == 5);
  CHECK(ProbeSet::classifier_index(3, 2, 1) == 8);
  for (int k = 1; k <= 10; ++k) {
    std::vector<bool> seen(static_cast<std::size_t>(k * k), false);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const auto idx = ProbeSet::classifier_index(k, i, j);
        REQUIRE(idx < seen.size());
        CHECK_FALSE(seen[idx]);
        seen[idx] = true;
      }
    }
  }
}

TEST_CASE("boundary search on a linear model lands on the analytic projection") {
  Rng rng(21);
  BoundaryConfig cfg;
  for (int trial = 0; trial < 25; ++trial) {
    const int dim = 2 + static_cast<int>(rng.index(6));
    const int k = 2 + static_cast<int>(rng.index(2));
    const ArchSpec arch = linear_arch(dim, k);
    Matrix w(k, dim);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    std::vector<double> b(static_cast<std::size_t>(k));
    for (auto& v : b) v = rng.normal(0.0, 0.5);
    if (k == 3) {
      // Third class far below the other two everywhere near the start.
      w.row(2).setZero();
      b[2] = -30.0;
    }
    const ParameterVector params = linear_params(arch, w, b);
    ProbeSample start;
    start.input.resize(static_cast<std::size_t>(dim));
    for (auto& v : start.input) v = rng.normal();

    const auto res = boundary_sample(arch, params, start, 0, 1, cfg);
    REQUIRE(res.found);
    // Oracle: orthogonal projection onto (w0 - w1) x + (b0 - b1) = 0.
    Eigen::RowVectorXd x0 = Eigen::Map<const Eigen::RowVectorXd>(start.input.data(), dim);
    const Eigen::RowVectorXd n = w.row(0) - w.row(1);
    const double off = n.dot(x0) + b[0] - b[1];
    const Eigen::RowVectorXd proj = x0 - (off / n.squaredNorm()) * n;
    const Eigen::RowVectorXd got = Eigen::Map<const Eigen::RowVectorXd>(res.sample.input.data(), dim);
    CHECK((got - proj).norm() <= 10.0 * cfg.eps_b);
    CHECK(satisfies_boundary(arch, params, res.sample.input, 0, 1, cfg.eps_b));
  }
}

TEST_CASE("boundary search rejects bad class pairs") {
  const ArchSpec arch = linear_arch(3, 3);
  const auto params = init_params(arch, 2);
  ProbeSample s;
  s.input = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(boundary_sample(arch, params, s, 1, 1, {}), Error);
  CHECK_THROWS_AS(boundary_sample(arch, params, s, 0, 5, {}), Error);
}

TEST_CASE("require_boundary throws when the budget is exhausted") {
  const ArchSpec arch = linear_arch(2, 2);
  Matrix w(2, 2);
  w << 1.0, 0.0, -1.0, 0.0;
  const auto params = linear_params(arch, w, {0.0, 0.0});
  ProbeSample s;
  s.input = {50.0, 0.0};
  BoundaryConfig cfg;
  cfg.max_iters = 1;
  CHECK_THROWS_AS(require_boundary(arch, params, s, 0, 1, cfg), Error);
}

TEST_CASE("classifier probe layout and boundary contract on trained models") {
  for (int k : {3, 5}) {
    const Trained t = trained_classifier(k, 30 + static_cast<std::uint64_t>(k));
    const ProbeSet p = build_probe_classifier("m", t.arch, t.params, t.data);
    REQUIRE(p.size() == static_cast<std::size_t>(k * k));
    CHECK(p.k == k);
    for (int i = 0; i < k; ++i) {
      const auto& c = p.samples[ProbeSet::classifier_index(k, i, i)];
      CHECK(c.kind == SampleKind::centroid);
      CHECK(c.class_from == i);
      // Centroids are classified as their own class.
      Eigen::Index arg = 0;
      classifier_probs(t.arch, t.params, Eigen::Map<const Matrix>(c.input.data(), 1, 8)).row(0).maxCoeff(&arg);
      CHECK(arg == i);
    }
    std::size_t ok = 0, total = 0;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        if (i == j) continue;
        const auto& s = p.samples[ProbeSet::classifier_index(k, i, j)];
        CHECK(s.kind == SampleKind::boundary);
        CHECK(s.class_from == i);
        CHECK(s.class_to == j);
        ++total;
        if (s.converged) {
          ++ok;
          CHECK(satisfies_boundary(t.arch, t.params, s.input, i, j, 0.02));
        }
      }
    }
    CHECK(p.failed_boundaries() == total - ok);
    CHECK(static_cast<double>(ok) >= 0.9 * static_cast<double>(total));
  }
}

TEST_CASE("probe construction is deterministic and round-trips through disk") {
  const Trained t = trained_classifier(3, 40);
  const ProbeSet a = build_probe_classifier("m", t.arch, t.params, t.data);
  const ProbeSet b = build_probe_classifier("m", t.arch, t.params, t.data);
  CHECK(a.content_hash() == b.content_hash());
  testing::TempDir dir("probe");
  save_probe(dir.path / "p", a);
  CHECK(load_probe(dir.path / "p").content_hash() == a.content_hash());
}

TEST_CASE("generic probe draws distinct samples in generator order") {
  DatasetRef ref{"img", DatasetKind::synthetic_images, 5, 3, 6, 10, 1.0, 0.3};
  const Dataset d = generate(ref);
  const ProbeSet p = build_probe_generic("m", d, 12, 9);
  CHECK(p.size() == 12);
  CHECK(p.kind == ProbeKind::generic);
  std::vector<std::vector<double>> seen;
  for (const auto& s : p.samples) {
    CHECK(s.kind == SampleKind::generic_input);
    CHECK(std::find(seen.begin(), seen.end(), s.input) == seen.end());
    seen.push_back(s.input);
  }
  CHECK(build_probe_generic("m", d, 12, 9).content_hash() == p.content_hash());
  CHECK(build_probe_generic("m", d, 12, 10).content_hash() != p.content_hash());
  CHECK_THROWS_AS(build_probe_generic("m", d, d.size() + 1, 9), Error);
}

TEST_CASE("prompt probe covers every domain") {
  const std::vector<text::Domain> domains{text::Domain::qa, text::Domain::arithmetic};
  const ProbeSet p = build_probe_prompts("m", domains, 4, 3);
  CHECK(p.size() == 8);
  CHECK(p.r == 3);
  for (const auto& s : p.samples) {
    CHECK(s.kind == SampleKind::prompt);
    CHECK_FALSE(s.tokens.empty());
  }
  CHECK_THROWS_AS(build_probe_prompts("m", domains, 0, 3), Error);
}

TEST_CASE("centroid of an empty class is an error") {
  const Trained t = trained_classifier(3, 41);
  Dataset d = t.data;
  for (auto& l : d.labels) {
    if (l == 2) l = 1;
  }
  CHECK_THROWS_AS(centroid_sample(t.arch, t.params, d, 2), Error);
}
