#include "mla/zoo.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <thread>

namespace mla {

bool ModelRecord::has_tag(const std::string& key) const {
  for (const auto& t : tags) {
    if (t == key || t.rfind(key + ":", 0) == 0) return true;
  }
  return false;
}

std::string ModelRecord::tag(const std::string& key) const {
  for (const auto& t : tags) {
    if (t.rfind(key + ":", 0) == 0) return t.substr(key.size() + 1);
  }
  return {};
}

void to_json(nlohmann::json& j, const ModelRecord& r) {
  j = nlohmann::json{{"model_id", r.model_id},
                     {"family_id", r.family_id},
                     {"kind", to_string(r.kind)},
                     {"arch", r.arch},
                     {"weights_ref", r.weights_ref},
                     {"init_ref", r.init_ref},
                     {"parent_id", r.parent_id ? nlohmann::json(*r.parent_id) : nlohmann::json(nullptr)},
                     {"generation", r.generation},
                     {"train", r.train},
                     {"dataset_ref", r.dataset_ref},
                     {"tags", r.tags}};
}

void from_json(const nlohmann::json& j, ModelRecord& r) {
  r.model_id = j.at("model_id").get<std::string>();
  r.family_id = j.at("family_id").get<std::string>();
  r.kind = model_kind_from_string(j.at("kind").get<std::string>());
  r.arch = j.at("arch").get<ArchSpec>();
  r.weights_ref = j.at("weights_ref").get<std::string>();
  r.init_ref = j.at("init_ref").get<std::string>();
  r.parent_id = j.at("parent_id").is_null() ? std::nullopt : std::optional(j.at("parent_id").get<std::string>());
  r.generation = j.at("generation").get<int>();
  r.train = j.at("train").get<TrainConfig>();
  r.dataset_ref = j.at("dataset_ref").get<std::string>();
  r.tags = j.at("tags").get<std::vector<std::string>>();
}

const ModelRecord* FamilyManifest::find(const std::string& id) const {
  for (const auto& r : records) {
    if (r.model_id == id) return &r;
  }
  return nullptr;
}

const ModelRecord& FamilyManifest::record(const std::string& id) const {
  const auto* r = find(id);
  if (r == nullptr) fail(ErrorCode::MissingScenarioData, "manifest has no model '" + id + "'");
  return *r;
}

const FamilyGroup& FamilyManifest::group(const std::string& fid) const {
  for (const auto& g : groups) {
    if (g.family_id == fid) return g;
  }
  fail(ErrorCode::MissingScenarioData, "manifest has no family '" + fid + "'");
}

std::vector<const ModelRecord*> FamilyManifest::children(const std::string& id) const {
  std::vector<const ModelRecord*> out;
  for (const auto& r : records) {
    if (r.parent_id && *r.parent_id == id) out.push_back(&r);
  }
  return out;
}

std::vector<const ModelRecord*> FamilyManifest::chain(const std::string& fid) const {
  std::vector<const ModelRecord*> out{&record(group(fid).root)};
  while (true) {
    const ModelRecord* next = nullptr;
    for (const auto* c : children(out.back()->model_id)) {
      if (c->tags.empty()) next = c;
    }
    if (next == nullptr) break;
    out.push_back(next);
  }
  return out;
}

void FamilyManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    require(ids.insert(r.model_id).second, ErrorCode::InvalidArgument, "duplicate model id " + r.model_id);
  }
  for (const auto& r : records) {
    require(!r.init_ref.empty(), ErrorCode::InvalidArgument, r.model_id + " has no init_ref");
    if (!r.parent_id) {
      require(r.generation == 0, ErrorCode::InvalidArgument, r.model_id + ": root with nonzero generation");
      continue;
    }
    const auto* p = find(*r.parent_id);
    require(p != nullptr, ErrorCode::InvalidArgument, r.model_id + ": parent " + *r.parent_id + " missing");
    require(r.generation == p->generation + 1, ErrorCode::InvalidArgument, r.model_id + ": generation mismatch");
  }
  std::set<std::string> with_parent;
  for (const auto& e : edges) {
    require(ids.count(e.parent) && ids.count(e.child), ErrorCode::InvalidArgument,
            "edge " + e.parent + "->" + e.child + " has a missing endpoint");
    require(with_parent.insert(e.child).second, ErrorCode::InvalidArgument, e.child + " has two parents");
    const auto& c = record(e.child);
    require(c.parent_id && *c.parent_id == e.parent, ErrorCode::InvalidArgument, "edge disagrees with " + e.child);
  }
  for (const auto& g : groups) {
    require(ids.count(g.root) != 0, ErrorCode::InvalidArgument, "family " + g.family_id + " root missing");
  }
}

void to_json(nlohmann::json& j, const FamilyManifest& m) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : m.edges) edges.push_back({{"parent", e.parent}, {"child", e.child}});
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : m.groups) groups.push_back({{"family_id", g.family_id}, {"root", g.root}, {"split", g.split}});
  j = nlohmann::json{{"schema_version", kManifestSchema},
                     {"zoo_id", m.zoo_id},
                     {"kind", to_string(m.kind)},
                     {"records", m.records},
                     {"edges", edges},
                     {"datasets", m.datasets},
                     {"groups", groups}};
}

void from_json(const nlohmann::json& j, FamilyManifest& m) {
  const int version = j.at("schema_version").get<int>();
  require(version == kManifestSchema, ErrorCode::Io, "unsupported manifest schema " + std::to_string(version));
  m.zoo_id = j.at("zoo_id").get<std::string>();
  m.kind = model_kind_from_string(j.at("kind").get<std::string>());
  m.records = j.at("records").get<std::vector<ModelRecord>>();
  m.edges.clear();
  for (const auto& e : j.at("edges")) m.edges.push_back({e.at("parent"), e.at("child")});
  m.datasets = j.at("datasets").get<std::map<std::string, DatasetRef>>();
  m.groups.clear();
  for (const auto& g : j.at("groups")) m.groups.push_back({g.at("family_id"), g.at("root"), g.at("split")});
}

std::string FamilyManifest::content_hash() const { return hex64(fnv1a(nlohmann::json(*this).dump())); }

void save_manifest(const std::filesystem::path& path, const FamilyManifest& m) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot write manifest " + path.string());
  f << nlohmann::json(m).dump(2) << "\n";
}

FamilyManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot read manifest " + path.string());
  return nlohmann::json::parse(f).get<FamilyManifest>();
}

void ModelStore::save(const std::string& id, const ParameterVector& params) {
  const auto path = root_ / weights_ref(id);
  std::filesystem::create_directories(path.parent_path());
  save_checkpoint(path, params);
  save_sidecar(root_ / ("weights/" + id + ".json"), params);
  std::lock_guard lock(mu_);
  cache_[id] = params;
}

ParameterVector ModelStore::load(const std::string& id) const {
  {
    std::lock_guard lock(mu_);
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
  }
  const auto path = root_ / weights_ref(id);
  if (!std::filesystem::exists(path)) fail(ErrorCode::Io, "no weights for model '" + id + "' at " + path.string());
  ParameterVector pv = load_checkpoint(path);
  std::lock_guard lock(mu_);
  cache_[id] = pv;
  return pv;
}

bool ModelStore::has(const std::string& id) const {
  {
    std::lock_guard lock(mu_);
    if (cache_.count(id)) return true;
  }
  return std::filesystem::exists(root_ / weights_ref(id));
}

namespace {

void train_on(const ArchSpec& arch, ParameterVector& params, const DatasetRef& ref, const TrainConfig& cfg) {
  switch (arch.kind) {
    case ModelKind::classifier: {
      const Dataset d = generate(ref);
      train_classifier(arch, params, d.inputs, d.labels, cfg);
      break;
    }
    case ModelKind::denoiser: train_denoiser(arch, params, generate(ref).inputs, cfg); break;
    case ModelKind::seqmodel: train_seqmodel(arch, params, text::generate_examples(ref), cfg); break;
  }
}

ModelRecord make_record(const ModelStore& store, const std::string& id, const std::string& family,
                        const ArchSpec& arch, const std::string& init_ref, const TrainConfig& cfg,
                        const std::string& dataset) {
  ModelRecord r;
  r.model_id = id;
  r.family_id = family;
  r.kind = arch.kind;
  r.arch = arch;
  r.weights_ref = store.weights_ref(id);
  r.init_ref = init_ref;
  r.train = cfg;
  r.dataset_ref = dataset;
  return r;
}

ModelRecord child_of(const ModelRecord& parent, ModelRecord r) {
  r.parent_id = parent.model_id;
  r.generation = parent.generation + 1;
  return r;
}

int head_classes(const ParameterVector& p) { return static_cast<int>(p.at("head.weight").shape[0]); }

std::vector<int> predictions(const ArchSpec& arch, const ParameterVector& params, const Matrix& x) {
  const Matrix probs = classifier_probs(arch, params, x);
  std::vector<int> out;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index a = 0;
    probs.row(r).maxCoeff(&a);
    out.push_back(static_cast<int>(a));
  }
  return out;
}

std::vector<std::size_t> seeded_subset(std::size_t n, double fraction, std::uint64_t seed) {
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  Rng rng(seed);
  auto perm = rng.permutation(n);
  perm.resize(std::min(count, n));
  std::sort(perm.begin(), perm.end());
  return perm;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

ModelRecord train_parent(ModelStore& store, const std::string& model_id, const std::string& family,
                         const std::string& init_id, const ArchSpec& arch, const DatasetRef& data,
                         const TrainConfig& cfg, std::uint64_t init_seed) {
  ParameterVector params = init_params(arch, init_seed);
  store.save(init_id, params);
  train_on(arch, params, data, cfg);
  store.save(model_id, params);
  return make_record(store, model_id, family, arch, init_id, cfg, data.name);
}

ModelRecord fine_tune(ModelStore& store, const ModelRecord& parent, const std::string& model_id,
                      const DatasetRef& data, const TrainConfig& cfg) {
  ParameterVector params = store.load(parent.model_id);
  ArchSpec arch = parent.arch;
  if (arch.kind == ModelKind::classifier && data.class_count != head_classes(params)) {
    reset_head(params, arch, data.class_count, derive_seed(cfg.seed, "head"));
    arch.classes = data.class_count;
  }
  train_on(arch, params, data, cfg);
  store.save(model_id, params);
  return child_of(parent, make_record(store, model_id, parent.family_id, arch, parent.init_ref, cfg, data.name));
}

ModelRecord distill(ModelStore& store, const ModelRecord& teacher, const std::string& model_id,
                    const ArchSpec& student_arch, const DatasetRef& data, const TrainConfig& cfg,
                    std::uint64_t init_seed, double temperature) {
  require(teacher.kind == ModelKind::classifier && student_arch.kind == ModelKind::classifier,
          ErrorCode::InvalidArgument, "distill: teacher and student must be classifiers");
  const ParameterVector tp = store.load(teacher.model_id);
  ArchSpec arch = student_arch;
  arch.classes = head_classes(tp);
  const Dataset d = generate(data);
  const Matrix targets = soft_targets(teacher.arch, tp, d.inputs, temperature);
  ParameterVector params = init_params(arch, init_seed);
  const std::string init_id = model_id + "-init";
  store.save(init_id, params);
  distill_classifier(arch, params, d.inputs, targets, temperature, cfg);
  store.save(model_id, params);
  auto r = child_of(teacher, make_record(store, model_id, teacher.family_id, arch, init_id, cfg, data.name));
  r.tags = {"distilled:" + std::to_string(cfg.epochs)};
  return r;
}

ModelRecord reverse_distill(ModelStore& store, const ModelRecord& suspect, const std::string& model_id,
                            const std::string& victim_init_id, const ArchSpec& victim_arch, const DatasetRef& data,
                            const TrainConfig& cfg, double temperature) {
  require(suspect.kind == ModelKind::classifier && victim_arch.kind == ModelKind::classifier,
          ErrorCode::InvalidArgument, "reverse_distill: classifiers only");
  const ParameterVector sp = store.load(suspect.model_id);
  ParameterVector params = store.load(victim_init_id);
  ArchSpec arch = victim_arch;
  if (head_classes(params) != head_classes(sp)) {
    reset_head(params, arch, head_classes(sp), derive_seed(cfg.seed, "head"));
  }
  arch.classes = head_classes(sp);
  const Dataset d = generate(data);
  distill_classifier(arch, params, d.inputs, soft_targets(suspect.arch, sp, d.inputs, temperature), temperature, cfg);
  store.save(model_id, params);
  auto r = child_of(suspect, make_record(store, model_id, suspect.family_id, arch, victim_init_id, cfg, data.name));
  r.tags = {"reverse_distilled"};
  return r;
}

int derange_label(int label, int k) { return k <= 1 ? label : (label + 1) % k; }

ModelRecord overwrite_knowledge(ModelStore& store, const ModelRecord& model, const std::string& model_id,
                                const ProbeSet& probe, double fraction, const TrainConfig& cfg) {
  require(model.kind == ModelKind::classifier && probe.kind == ProbeKind::classifier, ErrorCode::InvalidArgument,
          "overwrite_knowledge: classifiers only");
  require(fraction >= 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument, "overwrite fraction must be in [0, 1]");
  ParameterVector params = store.load(model.model_id);
  if (fraction > 0.0) {
    const Matrix x = probe.inputs();
    std::vector<int> labels = predictions(model.arch, params, x);
    const int k = head_classes(params);
    for (auto idx : seeded_subset(labels.size(), fraction, derive_seed(cfg.seed, "overwrite"))) {
      labels[idx] = derange_label(labels[idx], k);
    }
    train_classifier(model.arch, params, x, labels, cfg);
  }
  store.save(model_id, params);
  auto r = child_of(model, make_record(store, model_id, model.family_id, model.arch, model.init_ref, cfg,
                                       model.dataset_ref));
  r.tags = {"overwritten:" + fixed2(fraction)};
  return r;
}

ModelRecord infuse_knowledge(ModelStore& store, const ModelRecord& forged_parent, const ModelRecord& child,
                             const std::string& model_id, const ProbeSet& probe, double fraction,
                             const TrainConfig& cfg) {
  require(forged_parent.kind == child.kind && child.kind == ModelKind::classifier, ErrorCode::InvalidArgument,
          "infuse_knowledge: both models must be classifiers");
  require(fraction >= 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument, "infusion fraction must be in [0, 1]");
  ParameterVector params = store.load(forged_parent.model_id);
  const auto subset = seeded_subset(probe.size(), fraction, derive_seed(cfg.seed, "infuse"));
  if (!subset.empty()) {
    const Matrix all = probe.inputs();
    Matrix x(static_cast<Eigen::Index>(subset.size()), all.cols());
    for (std::size_t n = 0; n < subset.size(); ++n) x.row(static_cast<Eigen::Index>(n)) = all.row(static_cast<Eigen::Index>(subset[n]));
    std::vector<int> labels = predictions(child.arch, store.load(child.model_id), x);
    const int k = head_classes(params);
    for (int& l : labels) l %= k;
    train_classifier(forged_parent.arch, params, x, labels, cfg);
  }
  store.save(model_id, params);
  auto r = child_of(forged_parent, make_record(store, model_id, forged_parent.family_id, forged_parent.arch,
                                               forged_parent.init_ref, cfg, forged_parent.dataset_ref));
  r.tags = {"infused:" + fixed2(fraction), "infuse_target:" + child.model_id};
  return r;
}

void to_json(nlohmann::json& j, const AttackPlan& p) {
  j = nlohmann::json{{"prune_rates", p.prune_rates},           {"perturb_rhos", p.perturb_rhos},
                     {"distill_epochs", p.distill_epochs},     {"overwrite_fractions", p.overwrite_fractions},
                     {"infuse_fractions", p.infuse_fractions}, {"enabled", p.enabled}};
}

void from_json(const nlohmann::json& j, AttackPlan& p) {
  AttackPlan d;
  p.prune_rates = j.value("prune_rates", d.prune_rates);
  p.perturb_rhos = j.value("perturb_rhos", d.perturb_rhos);
  p.distill_epochs = j.value("distill_epochs", d.distill_epochs);
  p.overwrite_fractions = j.value("overwrite_fractions", d.overwrite_fractions);
  p.infuse_fractions = j.value("infuse_fractions", d.infuse_fractions);
  p.enabled = j.value("enabled", d.enabled);
}

FamilyPlan FamilyPlan::classifier_default() {
  FamilyPlan p;
  p.kind = ModelKind::classifier;
  p.arch = {ModelKind::classifier, Backbone::mlp, 16, {64, 32}, 5, 4};
  p.student_arch = {ModelKind::classifier, Backbone::convnet, 16, {8, 16, 32}, 5, 4};
  p.dataset = {"", DatasetKind::synthetic_blobs, 0, 5, 16, 100, 3.0, 1.0};
  p.parent_train.epochs = 50;
  p.child_train.epochs = 40;
  return p;
}

FamilyPlan FamilyPlan::denoiser_default() {
  FamilyPlan p;
  p.kind = ModelKind::denoiser;
  p.families = 8;
  p.arch = {ModelKind::denoiser, Backbone::unet, 8, {8, 16, 16}, 0, 4};
  p.dataset = {"", DatasetKind::synthetic_images, 0, 4, 8, 40, 1.0, 0.3};
  p.parent_train.epochs = 30;
  p.child_train.epochs = 12;
  p.attacks.distill_epochs.clear();
  p.attacks.overwrite_fractions.clear();
  p.attacks.infuse_fractions.clear();
  return p;
}

FamilyPlan FamilyPlan::seqmodel_default() {
  FamilyPlan p;
  p.kind = ModelKind::seqmodel;
  p.families = 8;
  p.arch = {ModelKind::seqmodel, Backbone::rnn, text::kVocab, {16, 32}, 0, 4};
  p.dataset = {"", DatasetKind::synthetic_text, 0, 0, 0, 240, 0.0, 0.0};
  p.parent_train.epochs = 30;
  p.child_train.epochs = 12;
  p.attacks.distill_epochs.clear();
  p.attacks.overwrite_fractions.clear();
  p.attacks.infuse_fractions.clear();
  return p;
}

void FamilyPlan::validate() const {
  require(families >= 1, ErrorCode::Config, "plan.families must be at least 1");
  require(generations >= 1, ErrorCode::Config, "plan.generations must be at least 1 (lineage needs a fine-tuned child)");
  require(test_fraction >= 0.0 && test_fraction < 1.0, ErrorCode::Config, "plan.test_fraction must be in [0, 1)");
  require(calibration_fraction >= 0.0 && test_fraction + calibration_fraction < 1.0, ErrorCode::Config,
          "plan.calibration_fraction must be non-negative and leave room for training families");
  require(arch.kind == kind, ErrorCode::Config, "plan.arch.kind must match plan.kind");
  if (kind == ModelKind::classifier) {
    require(dataset.kind == DatasetKind::synthetic_blobs, ErrorCode::Config,
            "plan.dataset.kind must be synthetic_blobs for classifiers");
    require(dataset.class_count >= 2, ErrorCode::Config, "plan.dataset.class_count must be at least 2");
    require(dataset.dim == arch.input_dim, ErrorCode::Config, "plan.dataset.dim must equal plan.arch.input_dim");
  } else if (kind == ModelKind::denoiser) {
    require(dataset.kind == DatasetKind::synthetic_images && dataset.dim == arch.input_dim, ErrorCode::Config,
            "plan.dataset must be synthetic_images with dim equal to plan.arch.input_dim");
  } else {
    require(dataset.kind == DatasetKind::synthetic_text, ErrorCode::Config, "plan.dataset.kind must be synthetic_text");
  }
  for (double p : attacks.prune_rates) {
    require(p >= 0.0 && p < 1.0, ErrorCode::Config, "plan.attacks.prune_rates entries must be in [0, 1)");
  }
}

void to_json(nlohmann::json& j, const FamilyPlan& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)},
                     {"families", p.families},
                     {"generations", p.generations},
                     {"arch", p.arch},
                     {"student_arch", p.student_arch},
                     {"dataset", p.dataset},
                     {"parent_train", p.parent_train},
                     {"child_train", p.child_train},
                     {"test_fraction", p.test_fraction},
                     {"calibration_fraction", p.calibration_fraction},
                     {"seed", p.seed},
                     {"attacks", p.attacks},
                     {"boundary", {{"eps_b", p.boundary.eps_b}, {"step", p.boundary.step}, {"max_iters", p.boundary.max_iters}}}};
}

void from_json(const nlohmann::json& j, FamilyPlan& p) {
  const ModelKind kind = model_kind_from_string(j.at("kind").get<std::string>());
  p = kind == ModelKind::classifier ? FamilyPlan::classifier_default()
      : kind == ModelKind::denoiser ? FamilyPlan::denoiser_default()
                                    : FamilyPlan::seqmodel_default();
  p.families = j.value("families", p.families);
  p.generations = j.value("generations", p.generations);
  if (j.contains("arch")) p.arch = j.at("arch").get<ArchSpec>();
  if (j.contains("student_arch")) p.student_arch = j.at("student_arch").get<ArchSpec>();
  if (j.contains("dataset")) p.dataset = j.at("dataset").get<DatasetRef>();
  if (j.contains("parent_train")) p.parent_train = j.at("parent_train").get<TrainConfig>();
  if (j.contains("child_train")) p.child_train = j.at("child_train").get<TrainConfig>();
  p.test_fraction = j.value("test_fraction", p.test_fraction);
  p.calibration_fraction = j.value("calibration_fraction", p.calibration_fraction);
  p.seed = j.value("seed", p.seed);
  if (j.contains("attacks")) p.attacks = j.at("attacks").get<AttackPlan>();
  if (j.contains("boundary")) {
    const auto& b = j.at("boundary");
    p.boundary.eps_b = b.value("eps_b", p.boundary.eps_b);
    p.boundary.step = b.value("step", p.boundary.step);
    p.boundary.max_iters = b.value("max_iters", p.boundary.max_iters);
  }
}

std::string family_id(ModelKind kind, int index) {
  const char* prefix = kind == ModelKind::classifier ? "cls" : kind == ModelKind::denoiser ? "dn" : "seq";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-f%02d", prefix, index);
  return buf;
}

Dataset dataset_of(const FamilyManifest& m, const ModelRecord& r) {
  auto it = m.datasets.find(r.dataset_ref);
  if (it == m.datasets.end()) fail(ErrorCode::MissingScenarioData, "unknown dataset " + r.dataset_ref);
  return generate(it->second);
}

namespace {

struct FamilyBuild {
  std::vector<ModelRecord> records;
  std::map<std::string, DatasetRef> datasets;
};

FamilyBuild build_one(const FamilyPlan& plan, ModelStore& store, int index, bool test) {
  FamilyBuild out;
  const std::string fid = family_id(plan.kind, index);
  const std::uint64_t fseed = derive_seed(plan.seed, fid);
  std::vector<DatasetRef> data;
  for (int g = 0; g <= plan.generations; ++g) {
    DatasetRef ref = plan.dataset;
    ref.name = fid + "-d" + std::to_string(g);
    ref.seed = derive_seed(fseed, "data" + std::to_string(g));
    out.datasets[ref.name] = ref;
    data.push_back(ref);
  }
  auto train_cfg = [&](const TrainConfig& base, const std::string& what) {
    TrainConfig c = base;
    c.seed = derive_seed(fseed, what);
    return c;
  };

  const std::string init_id = fid + "-init";
  std::vector<ModelRecord> chain;
  chain.push_back(train_parent(store, fid + "-g0", fid, init_id, plan.arch, data[0], train_cfg(plan.parent_train, "g0"),
                               derive_seed(fseed, "init")));
  for (int g = 1; g <= plan.generations; ++g) {
    const std::string tag = "g" + std::to_string(g);
    chain.push_back(fine_tune(store, chain.back(), fid + "-" + tag, data[static_cast<std::size_t>(g)],
                              train_cfg(plan.child_train, tag)));
  }
  out.records = chain;
  if (!test || !plan.attacks.enabled) return out;

  const ModelRecord& root = chain.front();
  for (double p : plan.attacks.prune_rates) {
    const std::string base = fid + "-wpa" + fixed2(p);
    ModelRecord pruned = child_of(root, make_record(store, base + "-g0", fid, root.arch, root.init_ref, root.train,
                                                    root.dataset_ref));
    pruned.tags = {"pruned:" + fixed2(p), "wpa:" + fixed2(p)};
    store.save(pruned.model_id, prune(store.load(root.model_id), p));
    out.records.push_back(pruned);
    ModelRecord prev = pruned;
    for (int g = 1; g <= plan.generations; ++g) {
      const std::string tag = "g" + std::to_string(g);
      ModelRecord r = fine_tune(store, prev, base + "-" + tag, data[static_cast<std::size_t>(g)],
                                train_cfg(plan.child_train, tag));
      r.tags = {"wpa:" + fixed2(p)};
      out.records.push_back(r);
      prev = r;
    }
  }
  for (double rho : plan.attacks.perturb_rhos) {
    for (int g = 1; g <= plan.generations; ++g) {
      const ModelRecord& src = chain[static_cast<std::size_t>(g)];
      const std::string id = src.model_id + "-pert" + fixed2(rho);
      ModelRecord r = child_of(src, make_record(store, id, fid, src.arch, src.init_ref, src.train, src.dataset_ref));
      r.tags = {"perturbed:" + fixed2(rho)};
      store.save(id, perturb(store.load(src.model_id), rho, derive_seed(fseed, id)));
      out.records.push_back(r);
    }
  }
  if (plan.kind != ModelKind::classifier) return out;

  for (int e : plan.attacks.distill_epochs) {
    TrainConfig cfg = train_cfg(plan.child_train, "distill" + std::to_string(e));
    cfg.epochs = e;
    const ModelRecord student = distill(store, root, fid + "-dist-e" + std::to_string(e), plan.student_arch, data[0],
                                        cfg, derive_seed(fseed, "student" + std::to_string(e)));
    out.records.push_back(student);
    out.records.push_back(reverse_distill(store, student, fid + "-rdist-e" + std::to_string(e), init_id, plan.arch,
                                          data[0], train_cfg(plan.parent_train, "rdist" + std::to_string(e))));
  }
  if (!plan.attacks.distill_epochs.empty()) {
    ModelRecord self = reverse_distill(store, root, fid + "-rdist-self", init_id, plan.arch, data[0],
                                       train_cfg(plan.parent_train, "rdist-self"));
    self.tags.push_back("closed_loop");
    out.records.push_back(self);
  }

  const bool need_probe = (!plan.attacks.overwrite_fractions.empty() && plan.generations >= 1) ||
                          (!plan.attacks.infuse_fractions.empty() && plan.generations >= 2);
  if (!need_probe) return out;
  const ProbeSet probe =
      build_probe_classifier(root.model_id, root.arch, store.load(root.model_id), generate(data[0]), plan.boundary);
  for (double f : plan.attacks.overwrite_fractions) {
    out.records.push_back(overwrite_knowledge(store, chain[1], chain[1].model_id + "-ow" + fixed2(f), probe, f,
                                              train_cfg(plan.child_train, "ow" + fixed2(f))));
  }
  if (plan.generations >= 2) {
    for (double f : plan.attacks.infuse_fractions) {
      out.records.push_back(infuse_knowledge(store, root, chain[2], fid + "-inf" + fixed2(f), probe, f,
                                             train_cfg(plan.child_train, "inf" + fixed2(f))));
    }
  }
  return out;
}

}  // namespace

FamilyManifest build_family(const FamilyPlan& plan, ModelStore& store, int jobs) {
  plan.validate();
  const auto n = static_cast<std::size_t>(plan.families);
  std::vector<std::string> split(n, "train");
  {
    Rng rng(derive_seed(plan.seed, "split"));
    const auto perm = rng.permutation(n);
    auto count = [&](double fraction) {
      auto c = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
      if (c == 0 && fraction > 0.0 && n >= 2) c = 1;
      return c;
    };
    const std::size_t n_test = std::min(count(plan.test_fraction), n);
    // Calibration never takes the last training family.
    const std::size_t n_cal = std::min(count(plan.calibration_fraction), n - n_test > 1 ? n - n_test - 1 : 0);
    for (std::size_t i = 0; i < n_test; ++i) split[perm[i]] = "test";
    for (std::size_t i = n_test; i < n_test + n_cal; ++i) split[perm[i]] = "calibration";
  }

  std::vector<FamilyBuild> built(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        built[i] = build_one(plan, store, static_cast<int>(i), split[i] == "test");
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::clamp(jobs, 1, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  FamilyManifest m;
  m.zoo_id = to_string(plan.kind) + "-zoo";
  m.kind = plan.kind;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string fid = family_id(plan.kind, static_cast<int>(i));
    m.groups.push_back({fid, fid + "-g0", split[i]});
    for (auto& r : built[i].records) {
      if (r.parent_id) m.edges.push_back({*r.parent_id, r.model_id});
      m.records.push_back(std::move(r));
    }
    m.datasets.insert(built[i].datasets.begin(), built[i].datasets.end());
  }
  m.validate();
  save_manifest(store.root() / "family.json", m);
  return m;
}

}  // namespace mla
