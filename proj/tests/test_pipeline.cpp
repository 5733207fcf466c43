#include "doctest.h"
#include "support.hpp"

#include "mla/error.hpp"
#include "mla/pipeline.hpp"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>

using namespace mla;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI binary named by MLA_CLI with stderr folded into stdout.
Run cli(const std::string& args, const std::string& env = {}) {
  const char* bin = std::getenv("MLA_CLI");
  REQUIRE_MESSAGE(bin != nullptr, "MLA_CLI must point at the mla binary");
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(bin) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

nlohmann::json minimal_config(const std::filesystem::path& ws) {
  nlohmann::json j;
  j["workspace"] = ws.string();
  j["seeds"] = {{"global", 7}};
  j["plan"] = {{"kind", "classifier"},
               {"families", 2},
               {"generations", 2},
               {"arch", {{"kind", "classifier"}, {"backbone", "mlp"}, {"input_dim", 6}, {"hidden", {8}},
                         {"classes", 3}, {"image_side", 4}}},
               {"dataset", {{"name", ""}, {"kind", "synthetic_blobs"}, {"seed", 0}, {"class_count", 3}, {"dim", 6},
                            {"samples_per_class", 20}, {"separation", 3.0}, {"noise", 1.0}}},
               {"parent_train", {{"epochs", 4}, {"lr", 1e-3}, {"batch_size", 16}, {"optimizer", "adam"}, {"seed", 0}}},
               {"child_train", {{"epochs", 2}, {"lr", 1e-3}, {"batch_size", 16}, {"optimizer", "adam"}, {"seed", 0}}},
               {"attacks", {{"enabled", false}}}};
  j["encoder"] = {{"latent", 8}, {"ffn", 16}};
  j["train"] = {{"epochs", 1}};
  return j;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const nlohmann::json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string config_error(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Config);
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("desk default config validates and round-trips") {
  RunConfig c = RunConfig::desk_default(ModelKind::classifier, 1);
  c.validate();
  const RunConfig back = parse_run_config(nlohmann::json(c).dump());
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  CHECK(c.plan.families >= 20);
  CHECK(c.plan.generations == 3);
  for (ModelKind k : {ModelKind::denoiser, ModelKind::seqmodel}) {
    RunConfig d = RunConfig::desk_default(k, 2);
    d.validate();
    CHECK(d.encoder.variant == variant_for(k));
  }
}

TEST_CASE("stage seeds derive from the global seed unless given") {
  const RunConfig a = parse_run_config(R"({"seeds": {"global": 3}})");
  const RunConfig b = parse_run_config(R"({"seeds": {"global": 3}})");
  const RunConfig c = parse_run_config(R"({"seeds": {"global": 4}})");
  CHECK(a.seeds.zoo == b.seeds.zoo);
  CHECK(a.seeds.zoo != c.seeds.zoo);
  CHECK(a.plan.seed == a.seeds.zoo);
  const RunConfig d = parse_run_config(R"({"seeds": {"global": 3, "zoo": 99}})");
  CHECK(d.plan.seed == 99);
}

TEST_CASE("config errors name the field or the position") {
  CHECK(config_error(R"({"workspace": "x"})").find("seeds.global") != std::string::npos);
  CHECK(config_error("{\n  \"seeds\": {\"global\": 1},\n  oops\n}").find("line 3") != std::string::npos);
  CHECK(config_error(R"({"seeds": {"global": 1}, "plan": {"kind": "classifier", "generations": 0}})")
            .find("plan.generations") != std::string::npos);
  CHECK(config_error(R"({"seeds": {"global": 1}, "train": {"epochs": "many"}})").find("train") != std::string::npos);
  CHECK(config_error(R"({"seeds": {"global": 1}, "scenarios": ["AGA", "bogus"]})").find("bogus") != std::string::npos);
  CHECK(config_error(R"({"seeds": {"global": 1}, "policy": {"t_lo": 0.8, "t_hi": 0.2}})").find("policy") !=
        std::string::npos);
  CHECK(config_error(R"({"seeds": {"global": 1}, "encoder": {"input_dim": 3}})").find("encoder.input_dim") !=
        std::string::npos);
  CHECK(config_error(R"({"seeds": {"global": 1}, "workspace": "/no/such/dir/ws"})").find("workspace") !=
        std::string::npos);
}

TEST_CASE("verdict line format and exit codes") {
  AttestResult r;
  r.pair.s = 0.85;
  r.pair.verdict = Verdict::direct_lineage;
  CHECK(verdict_line(r) == "S=0.8500 direct_lineage (T_hi=0.70)");
  r.pair.s = 0.1;
  r.pair.verdict = Verdict::non_lineage;
  CHECK(verdict_line(r) == "S=0.1000 non_lineage (T_lo=0.30)");
  CHECK(exit_code(Verdict::direct_lineage) == 0);
  CHECK(exit_code(Verdict::distant_lineage) == 1);
  CHECK(exit_code(Verdict::non_lineage) == 2);
}

TEST_CASE("command-line tool") {
  testing::TempDir dir("cli");
  const auto cfg = write_config(dir.path, minimal_config(dir.path / "ws"));

  SUBCASE("version and dry run") {
    const Run v = cli("--version");
    CHECK(v.code == 0);
    CHECK(v.out.find("config schema") != std::string::npos);
    const Run d = cli("pipeline --dry-run -c " + cfg.string());
    CHECK(d.code == 0);
    CHECK(d.out.find("zoo-build") != std::string::npos);
    CHECK(d.out.find("evaluate") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(dir.path / "ws"));
    const Run p = cli("pipeline --dry-run --scenario WPA --p 0.10 -c " + cfg.string());
    CHECK(p.code == 0);
    CHECK(p.out.find("evaluate: WPA ->") != std::string::npos);
  }

  SUBCASE("invalid config is reported with the field and a config exit code") {
    auto bad = minimal_config(dir.path / "ws");
    bad["plan"]["generations"] = 0;
    const Run r = cli("zoo-build -c " + write_config(dir.path, bad).string());
    CHECK(r.code >= 10);
    CHECK(r.out.find("plan.generations") != std::string::npos);
  }

  SUBCASE("minimal zoo, reruns and attestation") {
    const Run z1 = cli("zoo-build -c " + cfg.string());
    REQUIRE(z1.code == 0);
    CHECK(z1.out.find("(6 records)") != std::string::npos);
    std::smatch h1, h2;
    REQUIRE(std::regex_search(z1.out, h1, std::regex("manifest ([0-9a-f]{16})")));
    const std::string first = h1[1];

    // A second build from scratch in another workspace hashes identically.
    const Run z2 = cli("zoo-build -c " + cfg.string(), "MLA_WORKSPACE=" + (dir.path / "ws2").string() + " MLA_JOBS=2");
    REQUIRE(z2.code == 0);
    REQUIRE(std::regex_search(z2.out, h2, std::regex("manifest ([0-9a-f]{16})")));
    CHECK(std::string(h2[1]) == first);

    // Two families leave too few training positives.
    const Run starved = cli("train-attestor -c " + cfg.string());
    CHECK(starved.code >= 10);
    CHECK(starved.out.find("at least 4") != std::string::npos);

    auto wider = minimal_config(dir.path / "ws3");
    wider["plan"]["families"] = 6;
    const auto cfg3 = write_config(dir.path, wider);
    const Run z3 = cli("zoo-build -c " + cfg3.string());
    REQUIRE(z3.code == 0);
    CHECK(z3.out.find("(18 records)") != std::string::npos);

    const FamilyManifest m = load_manifest(dir.path / "ws3" / "zoo" / "family.json");
    const auto chain = m.chain(m.groups[0].family_id);
    const std::string args = " -c " + cfg3.string() + " --parent " + chain[0]->model_id + " --suspect ";
    const Run missing = cli("attest" + args + chain[1]->model_id);
    CHECK(missing.code >= 10);
    CHECK(missing.out.find("train-attestor") != std::string::npos);

    REQUIRE(cli("train-attestor -c " + cfg3.string()).code == 0);
    const Run a = cli("attest" + args + chain[1]->model_id);
    CHECK(a.code >= 0);
    CHECK(a.code <= 2);
    CHECK(std::regex_search(a.out, std::regex(R"(S=-?\d\.\d{4} (direct|distant|non)_lineage \(T_)")));
    const Run js = cli("attest --json" + args + chain[1]->model_id);
    CHECK(js.code == a.code);
    CHECK(js.out.find("\"verdict\"") != std::string::npos);
    const Run unknown = cli("attest" + args + "nobody");
    CHECK(unknown.code >= 10);
  }
}
