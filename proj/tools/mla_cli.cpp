// mla: build model zoos, train the lineage attestor and evaluate it.

#include "mla/error.hpp"
#include "mla/pipeline.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>

namespace {

using namespace mla;

constexpr int kExitError = 10;
constexpr int kExitConfig = 11;
constexpr int kExitMissing = 12;

struct Options {
  std::string config_path;
  std::string workspace;
  int jobs = 0;
  bool dry_run = false;
  bool plots = false;
  std::vector<std::string> scenarios;
  std::optional<double> prune_rate;
  std::vector<double> rhos;
  std::string parent;
  std::string suspect;
  bool json = false;
  std::string kind = "classifier";
  std::uint64_t seed = 1;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

RunConfig resolve_config(const Options& o, bool overlay_plan) {
  RunConfig c = o.config_path.empty() ? RunConfig::desk_default(ModelKind::classifier)
                                      : load_run_config(o.config_path);
  if (const char* ws = std::getenv("MLA_WORKSPACE"); ws && *ws) c.workspace = ws;
  if (const char* jobs = std::getenv("MLA_JOBS"); jobs && *jobs) {
    try {
      c.jobs = std::stoi(jobs);
    } catch (const std::exception&) {
      fail(ErrorCode::Config, "MLA_JOBS must be an integer");
    }
  }
  if (!o.workspace.empty()) c.workspace = o.workspace;
  if (o.jobs > 0) c.jobs = o.jobs;
  if (o.plots) c.output.plots = true;
  if (!o.scenarios.empty()) {
    c.scenarios.clear();
    for (const auto& s : o.scenarios) c.scenarios.push_back(scenario_from_string(s));
  }
  if (o.prune_rate) {
    c.scenario_params.prune_rates = {*o.prune_rate};
    if (overlay_plan) c.plan.attacks.prune_rates = {*o.prune_rate};
  }
  if (!o.rhos.empty()) {
    c.scenario_params.perturb_rhos = o.rhos;
    if (overlay_plan) c.plan.attacks.perturb_rhos = o.rhos;
  }
  c.validate();
  return c;
}

void print_plan(const RunConfig& c, const std::string& command) {
  std::cout << "config ok; workspace " << c.workspace.string() << ", jobs " << c.jobs << "\n";
  for (const auto& s : stage_plan(c, command)) std::cout << "  " << s << "\n";
}

struct Session {
  RunConfig cfg;
  FamilyManifest manifest;
  std::unique_ptr<ModelStore> store;
  std::unique_ptr<KnowledgeBank> bank;

  explicit Session(RunConfig c) : cfg(std::move(c)) {}
  void open(FamilyManifest m) {
    manifest = std::move(m);
    store = std::make_unique<ModelStore>(cfg.zoo_dir());
    bank = std::make_unique<KnowledgeBank>(manifest, *store, cfg.probe);
  }
};

Attestor load_trained(const RunConfig& c) {
  require(std::filesystem::exists(c.attestor_dir()), ErrorCode::Io,
          "no attestor at " + c.attestor_dir().string() + " (run train-attestor first)");
  return load_attestor(c.attestor_dir());
}

int exit_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::Config: return kExitConfig;
    case ErrorCode::Io: return kExitMissing;
    default: return kExitError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model lineage attestation toolkit"};
  app.require_subcommand(1);
  Options o;
  app.set_version_flag("--version", std::string("mla ") + kToolkitVersion + " (config schema " +
                                        std::to_string(kConfigSchema) + ", manifest schema " +
                                        std::to_string(kManifestSchema) + ")");

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("-w,--workspace", o.workspace, "Workspace directory (overrides MLA_WORKSPACE)");
    sub->add_option("-j,--jobs", o.jobs, "Parallel jobs (overrides MLA_JOBS)")->check(CLI::PositiveNumber);
    sub->add_flag("--dry-run", o.dry_run, "Validate the config and print the stage plan");
  };
  auto scenario_opts = [&](CLI::App* sub) {
    sub->add_option("--scenario", o.scenarios, "Scenario(s) to run");
    sub->add_option("--p", o.prune_rate, "WPA pruning rate")->check(CLI::Range(0.0, 0.999));
    sub->add_option("--rho", o.rhos, "Perturbation strength(s)");
    sub->add_flag("--plots", o.plots, "Also write ROC and density SVGs");
  };

  auto* zoo = app.add_subcommand("zoo-build", "Train the model families and write the manifest");
  common(zoo);
  auto* probe = app.add_subcommand("probe", "Build and save probe sets for every chain member");
  common(probe);
  auto* train = app.add_subcommand("train-attestor", "Train the encoders and fusion, then calibrate thresholds");
  common(train);
  auto* attest = app.add_subcommand("attest", "Score one (parent, suspect) pair");
  common(attest);
  attest->add_option("--parent", o.parent, "Claimed parent model id")->required();
  attest->add_option("--suspect", o.suspect, "Suspect model id")->required();
  attest->add_flag("--json", o.json, "Also print the result as JSON");
  auto* evaluate = app.add_subcommand("evaluate", "Run attack and ablation scenarios");
  common(evaluate);
  scenario_opts(evaluate);
  auto* pipeline = app.add_subcommand("pipeline", "zoo-build, probe, train-attestor and evaluate in one run");
  common(pipeline);
  scenario_opts(pipeline);
  auto* defaults = app.add_subcommand("default-config", "Print a desk default config");
  defaults->add_option("--kind", o.kind, "classifier, denoiser or seqmodel");
  defaults->add_option("--seed", o.seed, "Global seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  std::string stage = "config";
  try {
    if (defaults->parsed()) {
      std::cout << nlohmann::json(RunConfig::desk_default(model_kind_from_string(o.kind), o.seed)).dump(2) << "\n";
      return 0;
    }
    const auto start = std::chrono::steady_clock::now();
    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig cfg = resolve_config(o, command == "pipeline");
    if (o.dry_run) {
      print_plan(cfg, command);
      return 0;
    }
    Session s(cfg);

    if (command == "zoo-build" || command == "pipeline") {
      stage = "zoo-build";
      s.open(run_zoo_build(cfg, log_line));
      std::cout << "manifest " << s.manifest.content_hash() << " (" << s.manifest.records.size() << " records)\n";
    } else {
      stage = "load";
      s.open(load_zoo(cfg));
    }
    if (command == "probe" || command == "pipeline") {
      stage = "probe";
      run_probe(cfg, *s.bank, log_line);
    }
    std::optional<Attestor> attestor;
    if (command == "train-attestor" || command == "pipeline") {
      stage = "train-attestor";
      attestor = run_train_attestor(cfg, *s.bank, log_line);
    } else if (command == "attest" || command == "evaluate") {
      stage = "load";
      attestor = load_trained(cfg);
    }
    if (command == "attest") {
      stage = "attest";
      const AttestResult r = run_attest(cfg, *s.bank, *attestor, o.parent, o.suspect);
      std::cout << verdict_line(r) << "\n";
      const auto& f = r.pair.flags;
      if (f.boundary_failures || f.excluded_keys || f.truncated_responses) {
        std::cout << "flags: boundary_failures=" << f.boundary_failures << " excluded_keys=" << f.excluded_keys
                  << " truncated_responses=" << f.truncated_responses << "\n";
      }
      if (o.json) std::cout << attest_json(r).dump(2) << "\n";
      return exit_code(r.pair.verdict);
    }
    if (command == "evaluate" || command == "pipeline") {
      stage = "evaluate";
      const auto reports = run_evaluate(cfg, *s.bank, *attestor, log_line);
      std::cout << reports.size() << " reports in " << cfg.report_dir().string() << "\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char buf[64];
    std::snprintf(buf, sizeof buf, "total runtime %.1f s", secs);
    std::cout << buf << "\n";
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << "\n";
    return exit_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << "\n";
    return kExitError;
  }
}
