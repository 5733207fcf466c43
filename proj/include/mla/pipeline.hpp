#pragma once

// Run configuration and the stage functions the command-line tool drives.

#include "mla/evaluate.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace mla {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr int kConfigSchema = 1;

struct SeedConfig {
  std::uint64_t global = 0;
  std::uint64_t zoo = 0;
  std::uint64_t probe = 0;
  std::uint64_t attestor = 0;
  std::uint64_t train = 0;
};

struct PolicyConfig {
  bool calibrate = true;  // false: use the fixed thresholds below
  double t_lo = 0.3;
  double t_hi = 0.7;
};

struct OutputConfig {
  bool plots = false;
  std::string reports = "reports";  // relative to the workspace
};

struct RunConfig {
  std::filesystem::path workspace = "workspace";
  SeedConfig seeds;
  FamilyPlan plan = FamilyPlan::classifier_default();
  ProbeConfig probe;
  EncoderConfig encoder;
  AttestorTrainConfig train;
  PolicyConfig policy;
  std::vector<Scenario> scenarios;
  ScenarioParams scenario_params;
  OutputConfig output;
  int jobs = 1;

  // Desk defaults for one model kind, all seeds derived from `seed`.
  static RunConfig desk_default(ModelKind kind, std::uint64_t seed = 1);
  // Throws Config naming the offending field.
  void validate() const;

  std::filesystem::path zoo_dir() const { return workspace / "zoo"; }
  std::filesystem::path probe_dir() const { return workspace / "probes"; }
  std::filesystem::path attestor_dir() const { return workspace / "attestor"; }
  std::filesystem::path report_dir() const { return workspace / output.reports; }
};

// Encoder widths matching a model architecture's extracted features.
EncoderConfig encoder_for(const ArchSpec& arch);
std::vector<Scenario> default_scenarios(ModelKind kind);

// `seeds.global` is mandatory; per-stage seeds default to values derived from it.
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
// Parses and validates; parse errors carry line/column, field errors the field path.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

using Logger = std::function<void(const std::string&)>;

// Stage names in execution order, as printed by a dry run.
std::vector<std::string> stage_plan(const RunConfig& cfg, const std::string& command);

// Builds the zoo, or reuses it when the stored plan matches.
FamilyManifest run_zoo_build(const RunConfig& cfg, const Logger& log = {});
FamilyManifest load_zoo(const RunConfig& cfg);

// Builds and saves every chain member's probe; returns the probe count.
std::size_t run_probe(const RunConfig& cfg, KnowledgeBank& bank, const Logger& log = {});

// Trains on the train split, calibrates on the calibration split, saves.
Attestor run_train_attestor(const RunConfig& cfg, KnowledgeBank& bank, const Logger& log = {});

// Policy used for scoring: the attestor's calibration, else the fixed config thresholds.
AttestationPolicy policy_of(const RunConfig& cfg, const Attestor& attestor);

std::vector<AttestationReport> run_evaluate(const RunConfig& cfg, KnowledgeBank& bank, const Attestor& attestor,
                                            const Logger& log = {});

struct AttestResult {
  ScoredPair pair;
  AttestationPolicy policy;
};

AttestResult run_attest(const RunConfig& cfg, KnowledgeBank& bank, const Attestor& attestor,
                        const std::string& parent_id, const std::string& suspect_id);

// "S=0.8500 direct_lineage (T_hi=0.70)"
std::string verdict_line(const AttestResult& r);
nlohmann::json attest_json(const AttestResult& r);
// 0 direct, 1 distant, 2 non-lineage.
int exit_code(Verdict v);

}  // namespace mla
