#include "doctest.h"
#include "support.hpp"

#include "mla/error.hpp"

#include <set>

using namespace mla;
using testing::random_params;
using testing::random_shapes;

TEST_CASE("evolution model matches an elementwise oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const ShapeMap shapes = random_shapes(rng, 2 + rng.index(8));
    const auto t0 = random_params(rng, shapes), tp = random_params(rng, shapes), tc = random_params(rng, shapes);
    const auto spec = align(shapes, shapes, shapes);
    const auto out = evolution_model(t0, tp, tc, spec);
    for (const auto& [k, t] : out.entries()) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        CHECK(t.data[i] == doctest::Approx(t0.at(k).data[i] + tp.at(k).data[i] - tc.at(k).data[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("evolution model reconstructs the child (property)") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const ShapeMap shapes = random_shapes(rng, 1 + rng.index(10));
    const auto t0 = random_params(rng, shapes), tp = random_params(rng, shapes), tc = random_params(rng, shapes);
    const auto delta = evolution_model(t0, tp, tc, align(shapes, shapes, shapes));
    for (const auto& [k, t] : tc.entries()) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double rebuilt = t0.at(k).data[i] + tp.at(k).data[i] - delta.at(k).data[i];
        CHECK(testing::rel_err(rebuilt, t.data[i], 1e-6) <= 1e-6);
      }
    }
  }
}

TEST_CASE("self-evolution returns the init") {
  Rng rng(13);
  const ShapeMap shapes = random_shapes(rng, 6);
  const auto t0 = random_params(rng, shapes), tp = random_params(rng, shapes);
  const auto out = evolution_model(t0, tp, tp, align(shapes, shapes, shapes));
  for (const auto& [k, t] : out.entries()) {
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data[i] == doctest::Approx(t0.at(k).data[i]).epsilon(1e-12));
  }
}

TEST_CASE("alignment keeps only keys shared with one shape") {
  ShapeMap a{{"fc1.weight", {3, 4}}, {"fc1.bias", {3}}, {"head.weight", {5, 3}}};
  ShapeMap b{{"fc1.weight", {3, 4}}, {"fc1.bias", {3}}, {"head.weight", {2, 3}}};
  ShapeMap c{{"fc1.weight", {3, 4}}, {"fc1.bias", {3}}, {"head.weight", {5, 3}}, {"extra", {1}}};
  const auto two = align(a, b);
  CHECK(two.shared_keys == std::vector<std::string>{"fc1.bias", "fc1.weight"});
  CHECK(two.excluded_keys == std::vector<std::string>{"head.weight"});
  const auto three = align(a, b, c);
  CHECK(three.shared_keys == std::vector<std::string>{"fc1.bias", "fc1.weight"});
  CHECK(three.excluded_keys == std::vector<std::string>{"extra", "head.weight"});
}

TEST_CASE("excluded keys keep the init's values") {
  Rng rng(14);
  ShapeMap s0{{"fc1.weight", {2, 2}}, {"head.weight", {3, 2}}};
  ShapeMap sc{{"fc1.weight", {2, 2}}, {"head.weight", {4, 2}}};
  const auto t0 = random_params(rng, s0), tp = random_params(rng, s0), tc = random_params(rng, sc);
  const auto out = evolution_model(t0, tp, tc, align(s0, s0, sc));
  CHECK(out.at("head.weight").data == t0.at("head.weight").data);
  CHECK(out.shapes() == s0);
}

TEST_CASE("alignment with nothing in common is an error") {
  ShapeMap a{{"x", {2}}}, b{{"y", {2}}};
  CHECK_THROWS_AS(align(a, b), Error);
  ShapeMap empty;
  CHECK_THROWS_AS(align(a, empty), Error);
}

TEST_CASE("evolution model rejects non-finite results") {
  ParameterVector a({{"w", Tensor({1}, {1e308})}});
  ParameterVector b({{"w", Tensor({1}, {1e308})}});
  ParameterVector c({{"w", Tensor({1}, {-1e308})}});
  CHECK_THROWS_AS(evolution_model(a, b, c, align(a, b)), Error);
}

TEST_CASE("pruning zeroes exactly the floor(p N) smallest prunable magnitudes") {
  Rng rng(15);
  for (int trial = 0; trial < 40; ++trial) {
    const ShapeMap shapes = random_shapes(rng, 10);
    const auto theta = random_params(rng, shapes);
    const double rate = rng.uniform(0.0, 0.95);
    const auto pruned = prune(theta, rate);

    // Oracle: sort every prunable magnitude and take the threshold by rank.
    std::vector<double> mags;
    for (const auto& [k, t] : theta.entries()) {
      if (!is_prunable(k)) continue;
      for (double v : t.data) mags.push_back(std::abs(v));
    }
    std::sort(mags.begin(), mags.end());
    const auto n_zero = static_cast<std::size_t>(std::floor(rate * static_cast<double>(mags.size())));
    std::size_t zeroed = 0;
    for (const auto& [k, t] : pruned.entries()) {
      const auto& orig = theta.at(k).data;
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (!is_prunable(k)) {
          CHECK(t.data[i] == orig[i]);
        } else if (t.data[i] == 0.0 && orig[i] != 0.0) {
          ++zeroed;
          CHECK(std::abs(orig[i]) <= mags[n_zero - 1]);
        } else {
          CHECK(t.data[i] == orig[i]);
          if (n_zero > 0) CHECK(std::abs(orig[i]) >= mags[n_zero - 1]);
        }
      }
    }
    CHECK(zeroed == n_zero);
  }
}

TEST_CASE("pruning breaks magnitude ties by name then index") {
  ParameterVector pv({{"a.weight", Tensor({3}, {1.0, 1.0, 2.0})}, {"b.weight", Tensor({2}, {1.0, 0.5})}});
  const auto out = prune(pv, 0.4);  // floor(0.4 * 5) = 2
  CHECK(out.at("b.weight").data == std::vector<double>{1.0, 0.0});
  CHECK(out.at("a.weight").data == std::vector<double>{0.0, 1.0, 2.0});
  CHECK_THROWS_AS(prune(pv, 1.0), Error);
  CHECK(prune(pv, 0.0) == pv);
}

TEST_CASE("bias and normalization parameters are never prunable") {
  CHECK_FALSE(is_prunable("fc1.bias"));
  CHECK_FALSE(is_prunable("proj_norm.gamma"));
  CHECK(is_prunable("fc1.weight"));
}

TEST_CASE("perturbation stays inside the per-key bound and is seeded") {
  Rng rng(16);
  for (int trial = 0; trial < 30; ++trial) {
    const ShapeMap shapes = random_shapes(rng, 6);
    const auto theta = random_params(rng, shapes);
    const double rho = rng.uniform(0.0, 0.3);
    const auto a = perturb(theta, rho, 99), b = perturb(theta, rho, 99);
    CHECK(a == b);
    for (const auto& [k, t] : theta.entries()) {
      double mean_abs = 0.0;
      for (double v : t.data) mean_abs += std::abs(v);
      mean_abs /= static_cast<double>(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(a.at(k).data[i] - t.data[i]) <= rho * mean_abs + 1e-15);
    }
  }
  ParameterVector pv({{"w", Tensor({2}, {1.0, -1.0})}});
  CHECK(perturb(pv, 0.0, 1) == pv);
  CHECK_THROWS_AS(perturb(pv, -0.1, 1), Error);
}

TEST_CASE("checkpoints round-trip exactly after float rounding") {
  Rng rng(17);
  testing::TempDir dir("ckpt");
  for (int trial = 0; trial < 10; ++trial) {
    auto theta = random_params(rng, random_shapes(rng, 8));
    theta.round_to_float();
    CHECK(deserialize_checkpoint(serialize_checkpoint(theta)) == theta);
    save_checkpoint(dir.path / "m.bin", theta);
    CHECK(load_checkpoint(dir.path / "m.bin") == theta);
    save_sidecar(dir.path / "m.json", theta);
    CHECK(load_sidecar(dir.path / "m.json") == theta.shapes());
  }
  CHECK_THROWS_AS(deserialize_checkpoint("garbage"), Error);
  const std::string bytes = serialize_checkpoint(ParameterVector({{"w", Tensor({4}, {1, 2, 3, 4})}}));
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
}

TEST_CASE("parameter distance is a metric on aligned keys") {
  Rng rng(18);
  const ShapeMap shapes = random_shapes(rng, 5);
  const auto a = random_params(rng, shapes), b = random_params(rng, shapes);
  CHECK(param_distance(a, a) == 0.0);
  CHECK(param_distance(a, b) == doctest::Approx(param_distance(b, a)));
  CHECK(param_distance(a, b) > 0.0);
}
