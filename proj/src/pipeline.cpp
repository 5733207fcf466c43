#include "mla/pipeline.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mla {

namespace fs = std::filesystem;

EncoderConfig encoder_for(const ArchSpec& arch) {
  EncoderConfig e;
  e.variant = variant_for(arch.kind);
  switch (arch.kind) {
    case ModelKind::classifier:
      e.input_dim = arch.feature_dim();
      break;
    case ModelKind::denoiser:
      e.input_dim = arch.hidden.at(2);
      e.map_side = arch.input_dim;
      break;
    case ModelKind::seqmodel:
      e.input_dim = arch.feature_dim();
      break;
  }
  return e;
}

std::vector<Scenario> default_scenarios(ModelKind kind) {
  if (kind == ModelKind::classifier) {
    return {Scenario::AGA,      Scenario::WPA,    Scenario::perturb,     Scenario::overwrite,
            Scenario::distill,  Scenario::infuse, Scenario::false_claim, Scenario::probe_ablation,
            Scenario::component_ablation};
  }
  return {Scenario::AGA, Scenario::WPA, Scenario::perturb, Scenario::false_claim, Scenario::component_ablation};
}

namespace {

void derive_stage_seeds(SeedConfig& s) {
  s.zoo = derive_seed(s.global, "zoo");
  s.probe = derive_seed(s.global, "probe");
  s.attestor = derive_seed(s.global, "attestor");
  s.train = derive_seed(s.global, "train");
}

void apply_seeds(RunConfig& c) {
  c.plan.seed = c.seeds.zoo;
  c.probe.seed = c.seeds.probe;
  c.train.seed = c.seeds.train;
}

}  // namespace

RunConfig RunConfig::desk_default(ModelKind kind, std::uint64_t seed) {
  RunConfig c;
  c.plan = kind == ModelKind::classifier ? FamilyPlan::classifier_default()
           : kind == ModelKind::denoiser ? FamilyPlan::denoiser_default()
                                         : FamilyPlan::seqmodel_default();
  c.encoder = encoder_for(c.plan.arch);
  c.train.epochs = 8;
  c.train.lr = 1e-4;
  c.scenarios = default_scenarios(kind);
  c.seeds.global = seed;
  derive_stage_seeds(c.seeds);
  apply_seeds(c);
  return c;
}

void RunConfig::validate() const {
  require(!workspace.empty(), ErrorCode::Config, "workspace must be set");
  const fs::path parent = fs::absolute(workspace).parent_path();
  require(fs::is_directory(parent), ErrorCode::Config,
          "workspace: parent directory '" + parent.string() + "' does not exist");
  plan.validate();
  require(plan.seed == seeds.zoo && probe.seed == seeds.probe && train.seed == seeds.train, ErrorCode::Config,
          "seeds: stage seeds disagree with the seeds block");
  require(probe.boundary.eps_b > 0.0, ErrorCode::Config, "probe.eps_b must be positive");
  require(probe.boundary.step > 0.0, ErrorCode::Config, "probe.step must be positive");
  require(probe.boundary.max_iters >= 1, ErrorCode::Config, "probe.max_iters must be at least 1");
  require(probe.generic_samples >= 1, ErrorCode::Config, "probe.generic_samples must be at least 1");
  require(probe.prompts_per_domain >= 1, ErrorCode::Config, "probe.prompts_per_domain must be at least 1");
  require(!probe.domains.empty(), ErrorCode::Config, "probe.domains must not be empty");
  require(probe.settings.responses >= 1, ErrorCode::Config, "probe.responses must be at least 1");
  require(encoder.variant == variant_for(plan.kind), ErrorCode::Config, "encoder.variant must match plan.kind");
  const EncoderConfig want = encoder_for(plan.arch);
  require(encoder.input_dim == want.input_dim, ErrorCode::Config,
          "encoder.input_dim must be " + std::to_string(want.input_dim) + " for this architecture");
  if (encoder.variant == EncoderVariant::denoiser) {
    require(encoder.map_side == want.map_side, ErrorCode::Config,
            "encoder.map_side must be " + std::to_string(want.map_side) + " for this architecture");
  }
  require(encoder.latent >= 1 && encoder.heads >= 1 && encoder.latent % encoder.heads == 0, ErrorCode::Config,
          "encoder.latent must be a positive multiple of encoder.heads");
  require(train.margin > 0.0, ErrorCode::Config, "train.margin must be positive");
  require(train.lr > 0.0, ErrorCode::Config, "train.lr must be positive");
  require(train.epochs >= 1, ErrorCode::Config, "train.epochs must be at least 1");
  require(train.batch_size >= 1, ErrorCode::Config, "train.batch_size must be at least 1");
  require(policy.t_lo >= 0.0 && policy.t_lo <= policy.t_hi && policy.t_hi <= 1.0, ErrorCode::Config,
          "policy: need 0 <= t_lo <= t_hi <= 1");
  require(jobs >= 1, ErrorCode::Config, "jobs must be at least 1");
  require(!output.reports.empty(), ErrorCode::Config, "output.reports must be set");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  std::vector<std::string> scenarios;
  for (auto s : c.scenarios) scenarios.push_back(to_string(s));
  j = nlohmann::json{
      {"schema", kConfigSchema},
      {"workspace", c.workspace.string()},
      {"seeds",
       {{"global", c.seeds.global},
        {"zoo", c.seeds.zoo},
        {"probe", c.seeds.probe},
        {"attestor", c.seeds.attestor},
        {"train", c.seeds.train}}},
      {"plan", c.plan},
      {"probe", c.probe},
      {"encoder", c.encoder},
      {"train", c.train},
      {"policy", {{"calibrate", c.policy.calibrate}, {"t_lo", c.policy.t_lo}, {"t_hi", c.policy.t_hi}}},
      {"scenarios", scenarios},
      {"scenario_params", c.scenario_params},
      {"output", {{"plots", c.output.plots}, {"reports", c.output.reports}}},
      {"jobs", c.jobs}};
  // Stage seeds live in the seeds block only.
  j["plan"].erase("seed");
  j["probe"].erase("seed");
  j["train"].erase("seed");
}

namespace {

// Runs a field parser, prefixing JSON type errors with the field path.
template <typename F>
void field(const std::string& name, F&& f) {
  try {
    f();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, name + ": " + e.what());
  }
}

}  // namespace

void from_json(const nlohmann::json& j, RunConfig& c) {
  require(j.is_object(), ErrorCode::Config, "config must be a JSON object");
  if (j.contains("schema")) {
    require(j.at("schema") == kConfigSchema, ErrorCode::Config,
            "schema: unsupported version (expected " + std::to_string(kConfigSchema) + ")");
  }
  require(j.contains("seeds") && j.at("seeds").contains("global"), ErrorCode::Config,
          "seeds.global is required");
  ModelKind kind = ModelKind::classifier;
  field("plan.kind", [&] {
    if (j.contains("plan")) kind = model_kind_from_string(j.at("plan").at("kind").get<std::string>());
  });
  std::uint64_t global = 0;
  field("seeds.global", [&] { global = j.at("seeds").at("global").get<std::uint64_t>(); });
  c = RunConfig::desk_default(kind, global);
  field("workspace", [&] { c.workspace = j.value("workspace", c.workspace.string()); });
  field("seeds", [&] {
    const auto& s = j.at("seeds");
    c.seeds.zoo = s.value("zoo", c.seeds.zoo);
    c.seeds.probe = s.value("probe", c.seeds.probe);
    c.seeds.attestor = s.value("attestor", c.seeds.attestor);
    c.seeds.train = s.value("train", c.seeds.train);
  });
  field("plan", [&] {
    if (j.contains("plan")) {
      c.plan = j.at("plan").get<FamilyPlan>();
      c.encoder = encoder_for(c.plan.arch);
    }
  });
  field("probe", [&] {
    if (j.contains("probe")) c.probe = j.at("probe").get<ProbeConfig>();
  });
  field("encoder", [&] {
    if (j.contains("encoder")) {
      nlohmann::json e = c.encoder;
      e.update(j.at("encoder"));
      c.encoder = e.get<EncoderConfig>();
    }
  });
  field("train", [&] {
    if (j.contains("train")) {
      nlohmann::json t = c.train;
      t.update(j.at("train"));
      c.train = t.get<AttestorTrainConfig>();
    }
  });
  field("policy", [&] {
    if (j.contains("policy")) {
      const auto& p = j.at("policy");
      c.policy.calibrate = p.value("calibrate", c.policy.calibrate);
      c.policy.t_lo = p.value("t_lo", c.policy.t_lo);
      c.policy.t_hi = p.value("t_hi", c.policy.t_hi);
    }
  });
  field("scenarios", [&] {
    if (j.contains("scenarios")) {
      c.scenarios.clear();
      for (const auto& s : j.at("scenarios")) c.scenarios.push_back(scenario_from_string(s.get<std::string>()));
    } else {
      c.scenarios = default_scenarios(c.plan.kind);
    }
  });
  field("scenario_params", [&] {
    if (j.contains("scenario_params")) c.scenario_params = j.at("scenario_params").get<ScenarioParams>();
  });
  field("output", [&] {
    if (j.contains("output")) {
      c.output.plots = j.at("output").value("plots", c.output.plots);
      c.output.reports = j.at("output").value("reports", c.output.reports);
    }
  });
  field("jobs", [&] { c.jobs = j.value("jobs", c.jobs); });
  apply_seeds(c);
}

RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // nlohmann reports a byte offset; translate it to line and column.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    fail(ErrorCode::Config, "config parse error at line " + std::to_string(line) + ", column " +
                                std::to_string(col) + ": " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::vector<std::string> stage_plan(const RunConfig& cfg, const std::string& command) {
  const std::string zoo = "zoo-build: " + std::to_string(cfg.plan.families) + " " + to_string(cfg.plan.kind) +
                          " families x " + std::to_string(cfg.plan.generations + 1) + " generations -> " +
                          cfg.zoo_dir().string();
  const std::string probe = "probe: probes for every chain member -> " + cfg.probe_dir().string();
  const std::string train = "train-attestor: " + std::to_string(cfg.train.epochs) + " epochs, margin " +
                            std::to_string(cfg.train.margin) + (cfg.policy.calibrate ? ", calibrate" : "") +
                            " -> " + cfg.attestor_dir().string();
  std::string scen;
  for (auto s : cfg.scenarios) scen += (scen.empty() ? "" : ",") + to_string(s);
  const std::string eval = "evaluate: " + scen + " -> " + cfg.report_dir().string();
  if (command == "zoo-build") return {zoo};
  if (command == "probe") return {probe};
  if (command == "train-attestor") return {train};
  if (command == "evaluate") return {eval};
  if (command == "attest") return {"attest: score one (parent, suspect) pair"};
  return {zoo, probe, train, eval};
}

FamilyManifest load_zoo(const RunConfig& cfg) {
  const fs::path path = cfg.zoo_dir() / "family.json";
  require(fs::exists(path), ErrorCode::Io, "no zoo manifest at " + path.string() + " (run zoo-build first)");
  return load_manifest(path);
}

FamilyManifest run_zoo_build(const RunConfig& cfg, const Logger& log) {
  const fs::path plan_path = cfg.zoo_dir() / "plan.json";
  const std::string plan_text = nlohmann::json(cfg.plan).dump(2);
  if (fs::exists(plan_path) && fs::exists(cfg.zoo_dir() / "family.json")) {
    std::ifstream f(plan_path);
    std::stringstream ss;
    ss << f.rdbuf();
    if (ss.str() == plan_text + "\n") {
      if (log) log("zoo-build: plan unchanged, reusing " + cfg.zoo_dir().string());
      return load_zoo(cfg);
    }
  }
  fs::create_directories(cfg.zoo_dir());
  ModelStore store(cfg.zoo_dir());
  FamilyManifest m = build_family(cfg.plan, store, cfg.jobs);
  std::ofstream(plan_path) << plan_text << "\n";
  if (log) log("zoo-build: " + std::to_string(m.records.size()) + " records, manifest " + m.content_hash());
  return m;
}

std::size_t run_probe(const RunConfig& cfg, KnowledgeBank& bank, const Logger& log) {
  const FamilyManifest& m = bank.manifest();
  fs::create_directories(cfg.probe_dir());
  std::size_t count = 0, failures = 0;
  for (const auto& g : m.groups) {
    for (const ModelRecord* r : m.chain(g.family_id)) {
      const ProbeSet& p = bank.probe(r->model_id);
      save_probe(cfg.probe_dir() / r->model_id, p);
      failures += p.failed_boundaries();
      ++count;
    }
  }
  if (log) log("probe: " + std::to_string(count) + " probes, " + std::to_string(failures) + " boundary failures");
  return count;
}

Attestor run_train_attestor(const RunConfig& cfg, KnowledgeBank& bank, const Logger& log) {
  const ExampleStore ex = training_examples(bank, cfg.seeds.train);
  Attestor a = init_attestor(cfg.encoder, cfg.seeds.attestor);
  a.margin = cfg.train.margin;
  a.training_families = ex.families;
  const TrainLog tl = train_attestor(a, ex.examples, cfg.train);
  if (log) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "train-attestor: %zu positives, final loss %.4f", ex.examples.size(),
                  tl.epoch_loss.empty() ? 0.0 : tl.epoch_loss.back());
    log(buf);
  }
  if (cfg.policy.calibrate) {
    Evaluator ev{bank, a, {}};
    const AttestationPolicy p = ev.calibrate_on(ev.calibration_split);
    if (p.calibrated) {
      a.calibration = p;
      if (log) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "calibrate: T_lo=%.3f T_hi=%.3f%s", p.t_lo, p.t_hi,
                      p.overlap_warning ? " (bands overlap)" : "");
        log(buf);
      }
    } else if (log) {
      log("calibrate: warning: too few calibration scores, using universal thresholds 0.3/0.7");
    }
  }
  save_attestor(cfg.attestor_dir(), a);
  if (log) log("train-attestor: saved " + cfg.attestor_dir().string() + " (" + attestor_hash(a) + ")");
  return a;
}

AttestationPolicy policy_of(const RunConfig& cfg, const Attestor& attestor) {
  if (cfg.policy.calibrate && attestor.calibration.is_object()) return attestor.calibration.get<AttestationPolicy>();
  AttestationPolicy p;
  p.t_lo = cfg.policy.t_lo;
  p.t_hi = cfg.policy.t_hi;
  return p;
}

std::vector<AttestationReport> run_evaluate(const RunConfig& cfg, KnowledgeBank& bank, const Attestor& attestor,
                                            const Logger& log) {
  Evaluator ev{bank, attestor, policy_of(cfg, attestor)};
  std::vector<AttestationReport> out;
  for (Scenario s : cfg.scenarios) {
    AttestationReport r = ev.run(s, cfg.scenario_params);
    write_report(cfg.report_dir(), r, cfg.output.plots);
    if (log) {
      std::string line = "evaluate: " + r.scenario;
      for (const auto& m : r.metrics) {
        char buf[96];
        std::snprintf(buf, sizeof buf, " %s tpr=%.3f fpr=%.3f", m.name.c_str(), m.tpr, m.fpr);
        line += buf;
      }
      log(line);
    }
    out.push_back(std::move(r));
  }
  return out;
}

AttestResult run_attest(const RunConfig& cfg, KnowledgeBank& bank, const Attestor& attestor,
                        const std::string& parent_id, const std::string& suspect_id) {
  const FamilyManifest& m = bank.manifest();
  require(m.find(parent_id) != nullptr, ErrorCode::InvalidArgument, "unknown parent model '" + parent_id + "'");
  require(m.find(suspect_id) != nullptr, ErrorCode::InvalidArgument, "unknown suspect model '" + suspect_id + "'");
  Evaluator ev{bank, attestor, policy_of(cfg, attestor)};
  return {ev.score(parent_id, suspect_id, "attest", false), ev.policy};
}

std::string verdict_line(const AttestResult& r) {
  char buf[128];
  switch (r.pair.verdict) {
    case Verdict::direct_lineage:
      std::snprintf(buf, sizeof buf, "S=%.4f direct_lineage (T_hi=%.2f)", r.pair.s, r.policy.t_hi);
      break;
    case Verdict::distant_lineage:
      std::snprintf(buf, sizeof buf, "S=%.4f distant_lineage (T_lo=%.2f, T_hi=%.2f)", r.pair.s, r.policy.t_lo,
                    r.policy.t_hi);
      break;
    case Verdict::non_lineage:
      std::snprintf(buf, sizeof buf, "S=%.4f non_lineage (T_lo=%.2f)", r.pair.s, r.policy.t_lo);
      break;
  }
  return buf;
}

nlohmann::json attest_json(const AttestResult& r) {
  return {{"parent", r.pair.parent_id},
          {"suspect", r.pair.child_id},
          {"s", r.pair.s},
          {"verdict", to_string(r.pair.verdict)},
          {"policy", r.policy},
          {"flags",
           {{"boundary_failures", r.pair.flags.boundary_failures},
            {"excluded_keys", r.pair.flags.excluded_keys},
            {"truncated_responses", r.pair.flags.truncated_responses}}}};
}

int exit_code(Verdict v) {
  switch (v) {
    case Verdict::direct_lineage: return 0;
    case Verdict::distant_lineage: return 1;
    case Verdict::non_lineage: return 2;
  }
  return 2;
}

}  // namespace mla
