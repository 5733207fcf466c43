#include "doctest.h"
#include "support.hpp"

#include "mla/error.hpp"
#include "mla/evaluate.hpp"
#include "mla/pipeline.hpp"

#include <fstream>
#include <sstream>

using namespace mla;

namespace {

// Mann-Whitney estimate of AUC with ties counted as one half.
double auc_oracle(const std::vector<double>& s, const std::vector<bool>& l) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (l[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

std::vector<double> draw(Rng& rng, std::size_t n, double mean, double sd) {
  std::vector<double> v(n);
  for (auto& x : v) x = std::clamp(rng.normal(mean, sd), -1.0, 1.0);
  return v;
}

double verdict_accuracy(const std::map<Relation, std::vector<double>>& scores, const AttestationPolicy& p) {
  std::size_t ok = 0, n = 0;
  for (const auto& [rel, vals] : scores) {
    const Verdict want = rel == Relation::parent ? Verdict::direct_lineage
                         : rel == Relation::non_lineage ? Verdict::non_lineage
                                                        : Verdict::distant_lineage;
    for (double s : vals) {
      ok += verdict(s, p) == want;
      ++n;
    }
  }
  return static_cast<double>(ok) / static_cast<double>(n);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("quantiles interpolate linearly between order statistics") {
  CHECK(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.5) == 3.0);
  CHECK(quantile({5.0, 1.0, 4.0, 2.0, 3.0}, 0.1) == doctest::Approx(1.4));
  CHECK(quantile({2.0}, 0.9) == 2.0);
  CHECK(quantile({0.0, 10.0}, 0.25) == doctest::Approx(2.5));
  CHECK_THROWS_AS(quantile({1.0}, 1.5), Error);
}

TEST_CASE("universal thresholds apply without calibration") {
  const AttestationPolicy p;
  CHECK(p.t_lo == 0.3);
  CHECK(p.t_hi == 0.7);
  CHECK_FALSE(p.calibrated);
}

TEST_CASE("verdict bands") {
  const AttestationPolicy p;
  CHECK(verdict(0.85, p) == Verdict::direct_lineage);
  CHECK(verdict(0.45, p) == Verdict::distant_lineage);
  CHECK(verdict(0.10, p) == Verdict::non_lineage);
  CHECK(verdict(0.7, p) == Verdict::direct_lineage);
  CHECK(verdict(0.3, p) == Verdict::distant_lineage);
  CHECK(to_string(Verdict::distant_lineage) == "distant_lineage");
}

TEST_CASE("perfectly separated scores calibrate to the midpoint") {
  std::map<Relation, std::vector<double>> s;
  s[Relation::parent] = std::vector<double>(6, 1.0);
  s[Relation::grandparent] = std::vector<double>(6, 0.0);
  s[Relation::great_grandparent] = std::vector<double>(6, 1.0);
  s[Relation::non_lineage] = std::vector<double>(6, 0.0);
  const AttestationPolicy p = calibrate(s);
  CHECK(p.t_hi == doctest::Approx(0.5));
  CHECK(p.t_lo == doctest::Approx(0.5));
  CHECK(p.calibrated);
  CHECK_FALSE(p.overlap_warning);
}

TEST_CASE("calibration needs five scores per class and flags overlap") {
  std::map<Relation, std::vector<double>> s;
  s[Relation::parent] = {0.9, 0.9, 0.9, 0.9};
  s[Relation::grandparent] = std::vector<double>(5, 0.5);
  s[Relation::great_grandparent] = std::vector<double>(5, 0.4);
  s[Relation::non_lineage] = std::vector<double>(5, 0.1);
  CHECK_THROWS_AS(calibrate(s), Error);
  s[Relation::parent] = {0.3, 0.3, 0.3, 0.3, 0.3};
  const AttestationPolicy p = calibrate(s);
  CHECK(p.overlap_warning);
  CHECK(p.t_lo <= p.t_hi);
}

TEST_CASE("calibrated verdicts are within two points of the best threshold pair") {
  Rng rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    std::map<Relation, std::vector<double>> s;
    s[Relation::parent] = draw(rng, 40, 0.85, 0.03);
    s[Relation::grandparent] = draw(rng, 40, 0.62, 0.04);
    s[Relation::great_grandparent] = draw(rng, 40, 0.45, 0.03);
    s[Relation::non_lineage] = draw(rng, 80, 0.10, 0.06);
    const double calibrated = verdict_accuracy(s, calibrate(s));
    // Exhaustive sweep over every pair of observed scores as thresholds.
    std::vector<double> cuts;
    for (const auto& [_, v] : s) cuts.insert(cuts.end(), v.begin(), v.end());
    std::sort(cuts.begin(), cuts.end());
    double best = 0.0;
    for (std::size_t a = 0; a < cuts.size(); a += 2) {
      for (std::size_t b = a; b < cuts.size(); b += 2) {
        AttestationPolicy p;
        p.t_lo = cuts[a];
        p.t_hi = cuts[b];
        best = std::max(best, verdict_accuracy(s, p));
      }
    }
    CHECK(calibrated >= best - 0.02);
  }
}

TEST_CASE("ROC AUC matches the rank-sum oracle") {
  Rng rng(52);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 4 + rng.index(60);
    std::vector<double> s(n);
    std::vector<bool> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      l[i] = rng.uniform() < 0.5;
      // Coarse rounding forces ties.
      s[i] = std::round((rng.normal() + (l[i] ? 0.7 : 0.0)) * 4.0) / 4.0;
    }
    l[0] = true;
    l[1] = false;
    CHECK(roc(s, l).auc == doctest::Approx(auc_oracle(s, l)).epsilon(1e-12));
  }
}

TEST_CASE("ROC basics") {
  CHECK(roc({0.9, 0.8, 0.1, 0.2}, {true, true, false, false}).auc == doctest::Approx(1.0));
  CHECK(roc({0.1, 0.2, 0.9, 0.8}, {true, true, false, false}).auc == doctest::Approx(0.0));
  CHECK(roc({0.5, 0.5}, {true, false}).auc == doctest::Approx(0.5));
  CHECK_THROWS_AS(roc({0.1, 0.2}, {true, true}), Error);
  const auto c = roc({0.3, 0.7}, {false, true});
  CHECK(c.points.front().fpr == 0.0);
  CHECK(c.points.front().tpr == 0.0);
  CHECK(c.points.back().fpr == 1.0);
  CHECK(c.points.back().tpr == 1.0);

  Rng rng(53);
  std::vector<double> s(4000);
  std::vector<bool> l(4000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    l[i] = rng.uniform() < 0.5;
  }
  CHECK(std::abs(roc(s, l).auc - 0.5) < 0.03);
}

TEST_CASE("ROC AUC is invariant under a strictly monotone transform (property)") {
  Rng rng(54);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 6 + rng.index(40);
    std::vector<double> s(n), cubed(n);
    std::vector<bool> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      l[i] = i % 2 == 0 || rng.uniform() < 0.3;
      s[i] = rng.uniform(-1.0, 1.0);
      cubed[i] = s[i] * s[i] * s[i];
    }
    l[1] = false;
    CHECK(roc(cubed, l).auc == doctest::Approx(roc(s, l).auc).epsilon(1e-12));
  }
}

TEST_CASE("TPR and FPR at a threshold agree with the ROC point (property)") {
  Rng rng(55);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 10 + rng.index(50);
    std::vector<double> s(n);
    std::vector<bool> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      l[i] = rng.uniform() < 0.4;
      s[i] = std::round(rng.normal() * 5.0) / 5.0;
    }
    l[0] = true;
    l[1] = false;
    const auto c = roc(s, l);
    for (const auto& pt : c.points) {
      if (!std::isfinite(pt.threshold)) continue;
      std::size_t tp = 0, fp = 0, pos = 0, neg = 0;
      for (std::size_t i = 0; i < n; ++i) {
        (l[i] ? pos : neg) += 1;
        if (s[i] >= pt.threshold) (l[i] ? tp : fp) += 1;
      }
      CHECK(pt.tpr == doctest::Approx(static_cast<double>(tp) / static_cast<double>(pos)));
      CHECK(pt.fpr == doctest::Approx(static_cast<double>(fp) / static_cast<double>(neg)));
    }
  }
}

TEST_CASE("Silverman bandwidth and KDE") {
  const std::vector<double> v{0.1, 0.2, 0.3, 0.4, 0.5};
  const double sd = std::sqrt(0.025);
  const double iqr = 0.2 / 1.34;
  CHECK(silverman_bandwidth(v) == doctest::Approx(0.9 * std::min(sd, iqr) * std::pow(5.0, -0.2)));
  CHECK(silverman_bandwidth({0.4, 0.4, 0.4}) == kBandwidthFloor);
  // A single Gaussian kernel integrates to one and peaks at its centre.
  const double h = 0.1;
  CHECK(kde({0.0}, h, 0.0) == doctest::Approx(1.0 / (h * std::sqrt(2.0 * M_PI))));
  double area = 0.0;
  for (int i = -400; i <= 400; ++i) area += kde({0.0, 0.3}, h, i * 0.005) * 0.005;
  CHECK(area == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("KDE report summarises each class") {
  std::map<Relation, std::vector<double>> s;
  s[Relation::parent] = {0.8, 0.8, 0.8, 0.8};
  s[Relation::non_lineage] = {0.0, 0.1, 0.2, 0.1, 0.05};
  const auto r = kde_report(s);
  CHECK(r.at(Relation::parent).mode == doctest::Approx(0.8).epsilon(0.01));
  CHECK(r.at(Relation::parent).bandwidth == kBandwidthFloor);
  CHECK(r.at(Relation::non_lineage).median == doctest::Approx(0.1));
  CHECK(r.at(Relation::non_lineage).n == 5);
  s[Relation::grandparent] = {0.5, 0.6};
  CHECK_THROWS_AS(kde_report(s), Error);
}

TEST_CASE("relation classes and scenario names") {
  CHECK(relation_from_distance(1) == Relation::parent);
  CHECK(relation_from_distance(2) == Relation::grandparent);
  CHECK(relation_from_distance(3) == Relation::great_grandparent);
  CHECK(relation_from_distance(4) == Relation::other);
  for (Scenario s : {Scenario::AGA, Scenario::WPA, Scenario::perturb, Scenario::overwrite, Scenario::distill,
                     Scenario::infuse, Scenario::false_claim, Scenario::probe_ablation,
                     Scenario::component_ablation}) {
    CHECK(scenario_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(scenario_from_string("nope"), Error);
}

TEST_CASE("policies round-trip and reject inverted thresholds") {
  AttestationPolicy p;
  p.t_lo = 0.25;
  p.t_hi = 0.6;
  p.calibrated = true;
  const auto back = nlohmann::json(p).get<AttestationPolicy>();
  CHECK(back.t_lo == 0.25);
  CHECK(back.t_hi == 0.6);
  CHECK(back.calibrated);
  nlohmann::json bad = p;
  bad["t_lo"] = 0.9;
  CHECK_THROWS_AS(bad.get<AttestationPolicy>(), Error);
}

TEST_CASE("scenarios on a small zoo") {
  testing::TempDir dir("eval_zoo");
  RunConfig cfg = RunConfig::desk_default(ModelKind::classifier, 3);
  cfg.workspace = dir.path;
  cfg.plan.families = 12;
  cfg.plan.test_fraction = 0.25;
  cfg.plan.calibration_fraction = 0.25;
  cfg.plan.arch = {ModelKind::classifier, Backbone::mlp, 6, {8}, 3, 4};
  cfg.plan.student_arch = {ModelKind::classifier, Backbone::mlp, 6, {6}, 3, 4};
  cfg.plan.dataset = {"", DatasetKind::synthetic_blobs, 0, 3, 6, 20, 3.0, 1.0};
  cfg.plan.parent_train.epochs = 6;
  cfg.plan.child_train.epochs = 3;
  cfg.plan.attacks.distill_epochs = {1, 3};
  cfg.encoder = encoder_for(cfg.plan.arch);
  cfg.encoder.latent = 8;
  cfg.encoder.ffn = 16;
  cfg.train.epochs = 1;
  cfg.validate();

  const FamilyManifest m = run_zoo_build(cfg);
  ModelStore store(cfg.zoo_dir());
  KnowledgeBank bank(m, store, cfg.probe);
  const Attestor att = run_train_attestor(cfg, bank);
  Evaluator ev{bank, att, policy_of(cfg, att)};

  SUBCASE("false-claim negatives are family members but never the direct parent") {
    const auto r = ev.run(Scenario::false_claim, {});
    std::size_t negatives = 0;
    for (const auto& p : r.pairs) {
      const auto d = lineage_distance(m, p.parent_id, p.child_id);
      REQUIRE(d.has_value());
      CHECK(m.record(p.parent_id).family_id == m.record(p.child_id).family_id);
      if (!p.positive) {
        ++negatives;
        CHECK(*d >= 2);
      } else {
        CHECK(*d == 1);
      }
    }
    CHECK(negatives > 0);
    REQUIRE(r.curve.has_value());
    CHECK(r.extra.at("auc").get<double>() == doctest::Approx(r.curve->auc));
  }

  SUBCASE("metric rates agree with the report's pair scores") {
    const auto r = ev.run(Scenario::AGA, {});
    const auto& m0 = r.metrics.front();
    std::size_t tp = 0, fp = 0, pos = 0, neg = 0;
    for (const auto& p : r.pairs) {
      (p.positive ? pos : neg) += 1;
      if (p.s >= m0.threshold) (p.positive ? tp : fp) += 1;
      CHECK(p.verdict == verdict(p.s, ev.policy));
    }
    CHECK(m0.positives == pos);
    CHECK(m0.tpr == doctest::Approx(static_cast<double>(tp) / static_cast<double>(pos)));
    CHECK(m0.fpr == doctest::Approx(static_cast<double>(fp) / static_cast<double>(neg)));
  }

  SUBCASE("reports are pure functions of their inputs") {
    const auto a = ev.run(Scenario::perturb, {});
    KnowledgeBank fresh(m, store, cfg.probe);
    Evaluator ev2{fresh, att, policy_of(cfg, att)};
    const auto b = ev2.run(Scenario::perturb, {});
    CHECK(report_json(a).dump() == report_json(b).dump());
    CHECK(report_csv(a) == report_csv(b));
    testing::TempDir out("eval_out");
    write_report(out.path, ev.run(Scenario::AGA, {}), true);
    CHECK(std::filesystem::exists(out.path / "AGA.json"));
    CHECK(std::filesystem::exists(out.path / "AGA.csv"));
    CHECK(std::filesystem::exists(out.path / "AGA_roc.svg"));
    CHECK(std::filesystem::exists(out.path / "AGA_density.svg"));
    CHECK(slurp(out.path / "AGA.csv").find("parent_id") != std::string::npos);
  }

  SUBCASE("every scenario runs") {
    for (Scenario s : default_scenarios(ModelKind::classifier)) {
      const auto r = ev.run(s, {});
      CHECK_FALSE(r.metrics.empty());
      CHECK(r.scenario == to_string(s));
    }
  }
}
