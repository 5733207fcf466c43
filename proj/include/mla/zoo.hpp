#pragma once

// Desk-scale model families: training, fine-tuning chains, attack variants and
// the manifest that records every model's provenance.

#include "mla/datasets.hpp"
#include "mla/models.hpp"
#include "mla/probes.hpp"
#include "mla/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace mla {

inline constexpr int kManifestSchema = 1;

struct ModelRecord {
  std::string model_id;
  std::string family_id;
  ModelKind kind = ModelKind::classifier;
  ArchSpec arch;
  std::string weights_ref;
  std::string init_ref;
  std::optional<std::string> parent_id;
  int generation = 0;
  TrainConfig train;
  std::string dataset_ref;
  std::vector<std::string> tags;  // "key:value" attack annotations

  bool has_tag(const std::string& key) const;
  // Value of "key:value", empty when absent.
  std::string tag(const std::string& key) const;
  bool operator==(const ModelRecord&) const = default;
};

void to_json(nlohmann::json& j, const ModelRecord& r);
void from_json(const nlohmann::json& j, ModelRecord& r);

struct Edge {
  std::string parent;
  std::string child;
  bool operator==(const Edge&) const = default;
};

struct FamilyGroup {
  std::string family_id;
  std::string root;
  std::string split;  // "train", "calibration" or "test"
  bool operator==(const FamilyGroup&) const = default;
};

struct FamilyManifest {
  std::string zoo_id;
  ModelKind kind = ModelKind::classifier;
  std::vector<ModelRecord> records;
  std::vector<Edge> edges;
  std::map<std::string, DatasetRef> datasets;
  std::vector<FamilyGroup> groups;

  const ModelRecord& record(const std::string& id) const;
  const ModelRecord* find(const std::string& id) const;
  const FamilyGroup& group(const std::string& family_id) const;
  std::vector<const ModelRecord*> children(const std::string& id) const;
  // Plain fine-tuning chain of a family (no attack tags), ordered by generation.
  std::vector<const ModelRecord*> chain(const std::string& family_id) const;
  // Checks the forest invariants; throws InvalidArgument with the offending id.
  void validate() const;
  std::string content_hash() const;
};

void to_json(nlohmann::json& j, const FamilyManifest& m);
void from_json(const nlohmann::json& j, FamilyManifest& m);
void save_manifest(const std::filesystem::path& path, const FamilyManifest& m);
FamilyManifest load_manifest(const std::filesystem::path& path);

// Weights on disk under <root>/weights/<id>.bin, cached in memory. Safe for
// concurrent use.
class ModelStore {
 public:
  explicit ModelStore(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::string weights_ref(const std::string& id) const { return "weights/" + id + ".bin"; }
  void save(const std::string& id, const ParameterVector& params);
  ParameterVector load(const std::string& id) const;
  bool has(const std::string& id) const;

 private:
  std::filesystem::path root_;
  mutable std::mutex mu_;
  mutable std::map<std::string, ParameterVector> cache_;
};

// Generation 0: trains from a fresh init, saved as `init_id`.
ModelRecord train_parent(ModelStore& store, const std::string& model_id, const std::string& family_id,
                         const std::string& init_id, const ArchSpec& arch, const DatasetRef& data,
                         const TrainConfig& cfg, std::uint64_t init_seed);

// Continues training the parent's weights on new data; the head is
// re-initialized when the class count changes.
ModelRecord fine_tune(ModelStore& store, const ModelRecord& parent, const std::string& model_id,
                      const DatasetRef& data, const TrainConfig& cfg);

inline constexpr double kDistillTemperature = 4.0;

// Student of any architecture matched to the teacher's softened outputs.
ModelRecord distill(ModelStore& store, const ModelRecord& teacher, const std::string& model_id,
                    const ArchSpec& student_arch, const DatasetRef& data, const TrainConfig& cfg,
                    std::uint64_t init_seed, double temperature = kDistillTemperature);

// Proxy in the victim's architecture, started at the victim family's init and
// distilled from the suspect.
ModelRecord reverse_distill(ModelStore& store, const ModelRecord& suspect, const std::string& model_id,
                            const std::string& victim_init_id, const ArchSpec& victim_arch, const DatasetRef& data,
                            const TrainConfig& cfg, double temperature = kDistillTemperature);

// Labels a cyclic derangement of the model's own predictions on `fraction` of
// the probe, then fine-tunes on the probe.
ModelRecord overwrite_knowledge(ModelStore& store, const ModelRecord& model, const std::string& model_id,
                                const ProbeSet& probe, double fraction, const TrainConfig& cfg);
// The label map used by overwrite_knowledge: class c -> (c + 1) mod k.
int derange_label(int label, int k);

// Fine-tunes the forged parent on the child's predicted labels for a seeded
// `fraction` of the probe samples.
ModelRecord infuse_knowledge(ModelStore& store, const ModelRecord& forged_parent, const ModelRecord& child,
                             const std::string& model_id, const ProbeSet& probe, double fraction,
                             const TrainConfig& cfg);

struct AttackPlan {
  std::vector<double> prune_rates{0.10};
  std::vector<double> perturb_rhos{0.05, 0.10, 0.15};
  std::vector<int> distill_epochs{1, 3, 10, 40};
  std::vector<double> overwrite_fractions{0.3};
  std::vector<double> infuse_fractions{0.06, 0.30, 0.60};
  bool enabled = true;
};

void to_json(nlohmann::json& j, const AttackPlan& p);
void from_json(const nlohmann::json& j, AttackPlan& p);

struct FamilyPlan {
  ModelKind kind = ModelKind::classifier;
  int families = 40;
  int generations = 3;          // fine-tuned generations below each root
  ArchSpec arch;
  ArchSpec student_arch;        // distillation target (classifiers)
  DatasetRef dataset;           // template; seeds are derived per family and generation
  TrainConfig parent_train;
  TrainConfig child_train;
  double test_fraction = 0.2;
  double calibration_fraction = 0.2;  // families held out for threshold calibration
  std::uint64_t seed = 0;
  AttackPlan attacks;
  BoundaryConfig boundary;      // probes used by overwrite/infuse attacks

  static FamilyPlan classifier_default();
  static FamilyPlan denoiser_default();
  static FamilyPlan seqmodel_default();
  void validate() const;  // throws Config naming the field
};

void to_json(nlohmann::json& j, const FamilyPlan& p);
void from_json(const nlohmann::json& j, FamilyPlan& p);

std::string family_id(ModelKind kind, int index);

// Trains every family (in parallel up to `jobs`) and writes the manifest to
// <store root>/family.json. Output is independent of `jobs`.
FamilyManifest build_family(const FamilyPlan& plan, ModelStore& store, int jobs = 1);

// Dataset a record was trained on, regenerated from the manifest.
Dataset dataset_of(const FamilyManifest& m, const ModelRecord& r);

}  // namespace mla
