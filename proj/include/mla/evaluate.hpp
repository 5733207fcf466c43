#pragma once

// Thresholds, verdicts, metrics and the attack / ablation scenarios.

#include "mla/fusion.hpp"
#include "mla/zoo.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace mla {

// Probe construction and extraction settings shared by every stage.
struct ProbeConfig {
  BoundaryConfig boundary;
  std::size_t generic_samples = 32;  // denoiser probe size
  std::vector<text::Domain> domains{text::Domain::qa, text::Domain::arithmetic, text::Domain::sequence};
  int prompts_per_domain = 10;
  ProbeSettings settings;            // noise seed, responses per prompt, sampling
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

// Lazily built probes (one per claimed parent) and knowledge sets (one per
// claimed parent and model, evolution models included). Thread-safe.
class KnowledgeBank {
 public:
  KnowledgeBank(const FamilyManifest& manifest, const ModelStore& store, ProbeConfig cfg);

  const ProbeSet& probe(const std::string& parent_id);
  // Knowledge of a stored model on the parent's probe.
  const KnowledgeSet& knowledge(const std::string& parent_id, const std::string& model_id);
  // Evolution model of (parent, child) with the claimed parent's init.
  const KnowledgeSet& delta_knowledge(const std::string& parent_id, const std::string& child_id);
  KnowledgeTriplet triplet(const std::string& parent_id, const std::string& child_id);
  ScoreFlags flags(const std::string& parent_id, const std::string& child_id);

  const FamilyManifest& manifest() const { return manifest_; }
  const ModelStore& store() const { return store_; }
  const ProbeConfig& config() const { return cfg_; }

 private:
  struct ParentState {
    ProbeSet probe;
    ParameterVector params;
    std::unique_ptr<ResponseEmbedder> embedder;
    std::map<std::string, std::unique_ptr<KnowledgeSet>> sets;
    std::map<std::string, std::size_t> truncated;
    std::map<std::string, std::size_t> excluded;
  };
  ParentState& parent_state(const std::string& parent_id);
  KnowledgeSet extract_locked(ParentState& st, const ModelRecord& parent, const ModelView& model,
                              std::size_t* truncated);

  const FamilyManifest& manifest_;
  const ModelStore& store_;
  ProbeConfig cfg_;
  std::recursive_mutex mu_;
  std::map<std::string, std::unique_ptr<ParentState>> parents_;
};

// Relation of a (claimed parent, child) pair in the plain fine-tuning forest.
enum class Relation { parent, grandparent, great_grandparent, non_lineage, other };

std::string to_string(Relation r);
Relation relation_from_distance(int generations_apart);
// Generations from `ancestor` down to `descendant`; nullopt when not an ancestor.
std::optional<int> lineage_distance(const FamilyManifest& m, const std::string& ancestor,
                                    const std::string& descendant);

struct AttestationPolicy {
  double t_lo = 0.3;
  double t_hi = 0.7;
  bool calibrated = false;
  bool overlap_warning = false;
  std::vector<std::string> source_families;
};

void to_json(nlohmann::json& j, const AttestationPolicy& p);
void from_json(const nlohmann::json& j, AttestationPolicy& p);

// Linear-interpolated quantile (q in [0, 1]) of a non-empty sample.
double quantile(std::vector<double> values, double q);

// Decile-midpoint rule; needs >= 5 scores in each of the four relation classes.
AttestationPolicy calibrate(const std::map<Relation, std::vector<double>>& scores);

enum class Verdict { direct_lineage, distant_lineage, non_lineage };

std::string to_string(Verdict v);
Verdict verdict(double s, const AttestationPolicy& policy);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // positives predicted for s >= threshold
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

// Threshold sweep over distinct scores (ties grouped), trapezoid AUC.
RocCurve roc(const std::vector<double>& scores, const std::vector<bool>& labels);

struct DensitySummary {
  std::size_t n = 0;
  double bandwidth = 0.0;
  double mode = 0.0;
  double median = 0.0;
  double p10 = 0.0;
  double p90 = 0.0;
  std::vector<double> grid;
  std::vector<double> density;
};

inline constexpr double kBandwidthFloor = 0.01;

double silverman_bandwidth(const std::vector<double>& values);
double kde(const std::vector<double>& values, double bandwidth, double at);
// Needs >= 3 scores per class.
std::map<Relation, DensitySummary> kde_report(const std::map<Relation, std::vector<double>>& scores);

struct ScoredPair {
  std::string parent_id;
  std::string child_id;
  std::string group;     // relation class or scenario bucket
  bool positive = false; // ground truth of the tested claim
  double s = 0.0;
  Verdict verdict = Verdict::non_lineage;
  ScoreFlags flags;
};

struct ScenarioMetrics {
  std::string name;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  double tpr = 0.0;      // positives predicted at the scenario's decision level
  double fpr = 0.0;
  double threshold = 0.0;
};

enum class Scenario { AGA, WPA, perturb, overwrite, distill, infuse, false_claim, probe_ablation, component_ablation };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct ScenarioParams {
  std::vector<double> prune_rates;     // WPA; empty selects all built variants
  std::vector<double> perturb_rhos;    // perturb
  std::vector<double> probe_fractions{0.25, 0.5, 1.0};  // probe_ablation: share of classes kept
  int distill_buckets = 3;             // student-accuracy buckets
};

void to_json(nlohmann::json& j, const ScenarioParams& p);
void from_json(const nlohmann::json& j, ScenarioParams& p);

struct AttestationReport {
  std::string scenario;
  std::string manifest_hash;
  std::string attestor_hash;
  std::string config_hash;
  AttestationPolicy policy;
  std::vector<ScoredPair> pairs;
  std::vector<ScenarioMetrics> metrics;
  std::optional<RocCurve> curve;
  std::map<Relation, DensitySummary> densities;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json report_json(const AttestationReport& r);
std::string report_csv(const AttestationReport& r);
std::string roc_svg(const RocCurve& c, const std::string& title);
std::string density_svg(const std::map<Relation, DensitySummary>& d, const std::string& title);
// Writes <dir>/<scenario>.json and .csv, plus SVG figures when `plots` is set.
void write_report(const std::filesystem::path& dir, const AttestationReport& r, bool plots);

struct Evaluator {
  KnowledgeBank& bank;
  const Attestor& attestor;
  AttestationPolicy policy;
  std::string calibration_split = "calibration";

  // `probe_classes` > 0 scores on the first that many classes of the probe.
  ScoredPair score(const std::string& parent_id, const std::string& child_id, const std::string& group, bool positive,
                   Ablation ablation = Ablation::none, int probe_classes = 0);

  // Relation-class scores over the given split's families.
  std::map<Relation, std::vector<double>> relation_scores(const std::string& split, std::vector<ScoredPair>* pairs,
                                                          Ablation ablation = Ablation::none);
  // Calibrates on `split`; falls back to the default policy (calibrated = false)
  // when the split has too few scores.
  AttestationPolicy calibrate_on(const std::string& split, Ablation ablation = Ablation::none);
  AttestationReport run(Scenario scenario, const ScenarioParams& params);
};

// Training examples from the train split: direct edges as positives; the
// parent's own descendants two or more generations down and other families'
// models as negatives.
struct ExampleStore {
  std::vector<TrainingExample> examples;
  std::vector<std::string> families;
};
ExampleStore training_examples(KnowledgeBank& bank, std::uint64_t seed, std::size_t cross_per_positive = 8);

}  // namespace mla
