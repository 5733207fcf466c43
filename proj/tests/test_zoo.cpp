#include "doctest.h"
#include "support.hpp"

#include "mla/error.hpp"
#include "mla/evaluate.hpp"
#include "mla/zoo.hpp"

using namespace mla;

namespace {

FamilyPlan minimal_plan() {
  FamilyPlan p = FamilyPlan::classifier_default();
  p.families = 2;
  p.generations = 2;
  p.arch = {ModelKind::classifier, Backbone::mlp, 6, {8}, 3, 4};
  p.dataset = {"", DatasetKind::synthetic_blobs, 0, 3, 6, 20, 3.0, 1.0};
  p.parent_train.epochs = 4;
  p.child_train.epochs = 2;
  p.attacks.enabled = false;
  p.seed = 5;
  return p;
}

}  // namespace

TEST_CASE("minimal plan gives two families of three models") {
  testing::TempDir dir("zoo_min");
  ModelStore store(dir.path);
  const FamilyManifest m = build_family(minimal_plan(), store);
  CHECK(m.records.size() == 6);
  CHECK(m.groups.size() == 2);
  CHECK(m.edges.size() == 4);
  m.validate();
  for (const auto& g : m.groups) {
    const auto chain = m.chain(g.family_id);
    REQUIRE(chain.size() == 3);
    for (std::size_t i = 0; i < chain.size(); ++i) {
      CHECK(chain[i]->generation == static_cast<int>(i));
      CHECK(store.has(chain[i]->model_id));
    }
    CHECK(chain[0]->model_id == g.root);
    CHECK(lineage_distance(m, chain[0]->model_id, chain[2]->model_id) == 2);
    CHECK_FALSE(lineage_distance(m, chain[2]->model_id, chain[0]->model_id).has_value());
  }
  CHECK(std::filesystem::exists(dir.path / "family.json"));
  CHECK(load_manifest(dir.path / "family.json").content_hash() == m.content_hash());
}

TEST_CASE("zoo builds are reproducible and independent of the job count") {
  testing::TempDir a("zoo_a"), b("zoo_b");
  ModelStore sa(a.path), sb(b.path);
  const FamilyManifest ma = build_family(minimal_plan(), sa, 1);
  const FamilyManifest mb = build_family(minimal_plan(), sb, 2);
  CHECK(ma.content_hash() == mb.content_hash());
  for (const auto& r : ma.records) CHECK(sa.load(r.model_id) == sb.load(r.model_id));
  FamilyPlan other = minimal_plan();
  other.seed = 6;
  testing::TempDir c("zoo_c");
  ModelStore sc(c.path);
  CHECK(build_family(other, sc).content_hash() != ma.content_hash());
}

TEST_CASE("splits cover train, calibration and test") {
  FamilyPlan p = minimal_plan();
  p.families = 10;
  p.generations = 1;
  p.parent_train.epochs = 1;
  p.child_train.epochs = 1;
  testing::TempDir dir("zoo_split");
  ModelStore store(dir.path);
  const FamilyManifest m = build_family(p, store);
  std::map<std::string, int> count;
  for (const auto& g : m.groups) ++count[g.split];
  CHECK(count["test"] == 2);
  CHECK(count["calibration"] == 2);
  CHECK(count["train"] == 6);
}

TEST_CASE("plan validation names the offending field") {
  auto message = [](const FamilyPlan& p) {
    try {
      p.validate();
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Config);
      return std::string(e.what());
    }
    return std::string();
  };
  FamilyPlan p = minimal_plan();
  p.generations = 0;
  CHECK(message(p).find("plan.generations") != std::string::npos);
  p = minimal_plan();
  p.families = 0;
  CHECK(message(p).find("plan.families") != std::string::npos);
  p = minimal_plan();
  p.test_fraction = 0.6;
  p.calibration_fraction = 0.5;
  CHECK(message(p).find("plan.calibration_fraction") != std::string::npos);
  p = minimal_plan();
  p.dataset.dim = 7;
  CHECK(message(p).find("plan.dataset.dim") != std::string::npos);
  p = minimal_plan();
  p.attacks.prune_rates = {1.5};
  CHECK(message(p).find("plan.attacks.prune_rates") != std::string::npos);
}

TEST_CASE("plans and manifests round-trip through JSON") {
  const FamilyPlan p = minimal_plan();
  const FamilyPlan back = nlohmann::json(p).get<FamilyPlan>();
  CHECK(nlohmann::json(back) == nlohmann::json(p));
  testing::TempDir dir("zoo_json");
  ModelStore store(dir.path);
  const FamilyManifest m = build_family(p, store);
  const FamilyManifest m2 = nlohmann::json(m).get<FamilyManifest>();
  CHECK(m2.content_hash() == m.content_hash());
}

TEST_CASE("manifest validation rejects a broken forest") {
  testing::TempDir dir("zoo_bad");
  ModelStore store(dir.path);
  FamilyManifest m = build_family(minimal_plan(), store);
  FamilyManifest cyc = m;
  cyc.edges.push_back({cyc.records.back().model_id, cyc.records.front().model_id});
  CHECK_THROWS_AS(cyc.validate(), Error);
  FamilyManifest dangling = m;
  dangling.edges.push_back({"nobody", m.records.front().model_id});
  CHECK_THROWS_AS(dangling.validate(), Error);
}

TEST_CASE("fine-tuning keeps the architecture and changes the weights") {
  testing::TempDir dir("zoo_ft");
  ModelStore store(dir.path);
  const FamilyPlan p = minimal_plan();
  DatasetRef d = p.dataset;
  d.name = "d0";
  d.seed = 1;
  TrainConfig tc;
  tc.epochs = 2;
  const ModelRecord root = train_parent(store, "r", "f", "r-init", p.arch, d, tc, 3);
  d.seed = 2;
  const ModelRecord child = fine_tune(store, root, "c", d, tc);
  CHECK(child.parent_id == std::optional<std::string>("r"));
  CHECK(child.generation == 1);
  CHECK(child.init_ref == root.init_ref);
  CHECK(store.load("c").shapes() == store.load("r").shapes());
  CHECK_FALSE(store.load("c") == store.load("r"));
}

TEST_CASE("knowledge overwrite relabels by a fixed derangement") {
  for (int k = 2; k <= 10; ++k) {
    for (int c = 0; c < k; ++c) {
      CHECK(derange_label(c, k) != c);
      CHECK(derange_label(c, k) == (c + 1) % k);
    }
  }
}
