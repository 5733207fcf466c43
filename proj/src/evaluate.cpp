#include "mla/evaluate.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

namespace mla {

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  std::vector<std::string> domains;
  for (auto d : c.domains) domains.push_back(text::to_string(d));
  j = nlohmann::json{{"eps_b", c.boundary.eps_b},
                     {"step", c.boundary.step},
                     {"max_iters", c.boundary.max_iters},
                     {"generic_samples", c.generic_samples},
                     {"domains", domains},
                     {"prompts_per_domain", c.prompts_per_domain},
                     {"responses", c.settings.responses},
                     {"temperature", c.settings.sampling.temperature},
                     {"max_length", c.settings.sampling.max_length},
                     {"noise_seed", c.settings.noise_seed},
                     {"sampling_seed", c.settings.sampling.seed},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.boundary.eps_b = j.value("eps_b", d.boundary.eps_b);
  c.boundary.step = j.value("step", d.boundary.step);
  c.boundary.max_iters = j.value("max_iters", d.boundary.max_iters);
  c.generic_samples = j.value("generic_samples", d.generic_samples);
  c.domains.clear();
  if (j.contains("domains")) {
    for (const auto& s : j.at("domains")) c.domains.push_back(text::domain_from_string(s.get<std::string>()));
  } else {
    c.domains = d.domains;
  }
  c.prompts_per_domain = j.value("prompts_per_domain", d.prompts_per_domain);
  c.settings.responses = j.value("responses", d.settings.responses);
  c.settings.sampling.temperature = j.value("temperature", d.settings.sampling.temperature);
  c.settings.sampling.max_length = j.value("max_length", d.settings.sampling.max_length);
  c.settings.noise_seed = j.value("noise_seed", d.settings.noise_seed);
  c.settings.sampling.seed = j.value("sampling_seed", d.settings.sampling.seed);
  c.seed = j.value("seed", d.seed);
}

// Knowledge bank ------------------------------------------------------------

KnowledgeBank::KnowledgeBank(const FamilyManifest& manifest, const ModelStore& store, ProbeConfig cfg)
    : manifest_(manifest), store_(store), cfg_(std::move(cfg)) {}

KnowledgeBank::ParentState& KnowledgeBank::parent_state(const std::string& parent_id) {
  std::lock_guard lock(mu_);
  auto it = parents_.find(parent_id);
  if (it != parents_.end()) return *it->second;
  const ModelRecord& rec = manifest_.record(parent_id);
  auto st = std::make_unique<ParentState>();
  st->params = store_.load(parent_id);
  switch (rec.kind) {
    case ModelKind::classifier:
      st->probe = build_probe_classifier(parent_id, rec.arch, st->params, dataset_of(manifest_, rec), cfg_.boundary);
      break;
    case ModelKind::denoiser: {
      const Dataset data = dataset_of(manifest_, rec);
      st->probe = build_probe_generic(parent_id, data, std::min(cfg_.generic_samples, data.size()),
                                      derive_seed(cfg_.seed, parent_id));
      break;
    }
    case ModelKind::seqmodel:
      st->probe = build_probe_prompts(parent_id, cfg_.domains, cfg_.prompts_per_domain, cfg_.settings.responses);
      st->embedder = std::make_unique<ResponseEmbedder>(parent_id, rec.arch, st->params);
      break;
  }
  return *(parents_[parent_id] = std::move(st));
}

const ProbeSet& KnowledgeBank::probe(const std::string& parent_id) { return parent_state(parent_id).probe; }

KnowledgeSet KnowledgeBank::extract_locked(ParentState& st, const ModelRecord&, const ModelView& model,
                                           std::size_t* truncated) {
  return extract_knowledge(model, st.probe, cfg_.settings, st.embedder.get(), truncated);
}

const KnowledgeSet& KnowledgeBank::knowledge(const std::string& parent_id, const std::string& model_id) {
  std::lock_guard lock(mu_);
  ParentState& st = parent_state(parent_id);
  auto it = st.sets.find(model_id);
  if (it != st.sets.end()) return *it->second;
  const ModelRecord& rec = manifest_.record(model_id);
  const ParameterVector params = model_id == parent_id ? st.params : store_.load(model_id);
  std::size_t truncated = 0;
  auto ks = std::make_unique<KnowledgeSet>(
      extract_locked(st, manifest_.record(parent_id), ModelView{model_id, rec.arch, &params}, &truncated));
  st.truncated[model_id] = truncated;
  return *(st.sets[model_id] = std::move(ks));
}

const KnowledgeSet& KnowledgeBank::delta_knowledge(const std::string& parent_id, const std::string& child_id) {
  std::lock_guard lock(mu_);
  ParentState& st = parent_state(parent_id);
  const std::string key = "delta:" + child_id;
  auto it = st.sets.find(key);
  if (it != st.sets.end()) return *it->second;
  const ModelRecord& parent = manifest_.record(parent_id);
  const ParameterVector theta0 = store_.load(parent.init_ref);
  std::size_t excluded = 0;
  const ParameterVector delta = evolution_weights(theta0, st.params, store_.load(child_id), &excluded);
  std::size_t truncated = 0;
  auto ks = std::make_unique<KnowledgeSet>(
      extract_locked(st, parent, ModelView{"delta(" + parent_id + "," + child_id + ")", parent.arch, &delta}, &truncated));
  st.excluded[child_id] = excluded;
  st.truncated[key] = truncated;
  return *(st.sets[key] = std::move(ks));
}

KnowledgeTriplet KnowledgeBank::triplet(const std::string& parent_id, const std::string& child_id) {
  return {&knowledge(parent_id, parent_id), &knowledge(parent_id, child_id), &delta_knowledge(parent_id, child_id)};
}

ScoreFlags KnowledgeBank::flags(const std::string& parent_id, const std::string& child_id) {
  triplet(parent_id, child_id);
  std::lock_guard lock(mu_);
  ParentState& st = parent_state(parent_id);
  ScoreFlags f;
  f.boundary_failures = st.probe.failed_boundaries();
  f.excluded_keys = st.excluded[child_id];
  f.truncated_responses = st.truncated[parent_id] + st.truncated[child_id] + st.truncated["delta:" + child_id];
  return f;
}

// Relations -------------------------------------------------------------------

std::string to_string(Relation r) {
  switch (r) {
    case Relation::parent: return "parent";
    case Relation::grandparent: return "grandparent";
    case Relation::great_grandparent: return "great_grandparent";
    case Relation::non_lineage: return "non_lineage";
    case Relation::other: return "other";
  }
  return "unknown";
}

Relation relation_from_distance(int d) {
  switch (d) {
    case 1: return Relation::parent;
    case 2: return Relation::grandparent;
    case 3: return Relation::great_grandparent;
    default: return Relation::other;
  }
}

std::optional<int> lineage_distance(const FamilyManifest& m, const std::string& ancestor,
                                    const std::string& descendant) {
  int d = 0;
  const ModelRecord* cur = &m.record(descendant);
  while (true) {
    if (cur->model_id == ancestor) return d;
    if (!cur->parent_id) return std::nullopt;
    cur = &m.record(*cur->parent_id);
    ++d;
  }
}

namespace {

std::vector<std::string> split_families(const FamilyManifest& m, const std::string& split) {
  std::vector<std::string> out;
  for (const auto& g : m.groups) {
    if (split.empty() || g.split == split) out.push_back(g.family_id);
  }
  return out;
}

}  // namespace

ExampleStore training_examples(KnowledgeBank& bank, std::uint64_t seed, std::size_t cross_per_positive) {
  const FamilyManifest& m = bank.manifest();
  ExampleStore out;
  out.families = split_families(m, "train");
  std::vector<std::vector<const ModelRecord*>> chains;
  for (const auto& f : out.families) chains.push_back(m.chain(f));
  Rng rng(derive_seed(seed, "negatives"));
  for (std::size_t f = 0; f < chains.size(); ++f) {
    const auto& chain = chains[f];
    for (std::size_t i = 0; i + 1 < chain.size(); ++i) {
      const std::string& p = chain[i]->model_id;
      TrainingExample ex;
      ex.positive = bank.triplet(p, chain[i + 1]->model_id);
      for (std::size_t j = i + 2; j < chain.size(); ++j) {
        ex.negatives.push_back({bank.triplet(p, chain[j]->model_id), NegativeKind::within_family});
      }
      std::vector<const ModelRecord*> others;
      for (std::size_t g = 0; g < chains.size(); ++g) {
        if (g == f) continue;
        others.insert(others.end(), chains[g].begin(), chains[g].end());
      }
      rng.shuffle(others);
      others.resize(std::min(others.size(), cross_per_positive));
      for (const auto* o : others) ex.negatives.push_back({bank.triplet(p, o->model_id), NegativeKind::cross_family});
      out.examples.push_back(std::move(ex));
    }
  }
  return out;
}

// Policy, verdicts and metrics ---------------------------------------------

void to_json(nlohmann::json& j, const AttestationPolicy& p) {
  j = nlohmann::json{{"t_lo", p.t_lo},
                     {"t_hi", p.t_hi},
                     {"calibrated", p.calibrated},
                     {"overlap_warning", p.overlap_warning},
                     {"source_families", p.source_families}};
}

void from_json(const nlohmann::json& j, AttestationPolicy& p) {
  AttestationPolicy d;
  p.t_lo = j.value("t_lo", d.t_lo);
  p.t_hi = j.value("t_hi", d.t_hi);
  p.calibrated = j.value("calibrated", false);
  p.overlap_warning = j.value("overlap_warning", false);
  p.source_families = j.value("source_families", std::vector<std::string>{});
  require(p.t_lo >= 0.0 && p.t_lo <= p.t_hi && p.t_hi <= 1.0, ErrorCode::Config,
          "policy: thresholds must satisfy 0 <= t_lo <= t_hi <= 1");
}

double quantile(std::vector<double> values, double q) {
  require(!values.empty(), ErrorCode::InsufficientData, "quantile of an empty sample");
  require(q >= 0.0 && q <= 1.0, ErrorCode::InvalidArgument, "quantile level must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

AttestationPolicy calibrate(const std::map<Relation, std::vector<double>>& scores) {
  auto get = [&](Relation r) -> const std::vector<double>& {
    auto it = scores.find(r);
    require(it != scores.end() && it->second.size() >= 5, ErrorCode::InsufficientData,
            "calibrate: need at least 5 " + to_string(r) + " scores");
    return it->second;
  };
  const double parent_lo = quantile(get(Relation::parent), 0.1);
  const double grand_hi = quantile(get(Relation::grandparent), 0.9);
  const double great_lo = quantile(get(Relation::great_grandparent), 0.1);
  const double non_hi = quantile(get(Relation::non_lineage), 0.9);
  AttestationPolicy p;
  p.calibrated = true;
  p.t_hi = std::clamp(0.5 * (parent_lo + grand_hi), 0.0, 1.0);
  p.t_lo = std::clamp(0.5 * (great_lo + non_hi), 0.0, 1.0);
  p.overlap_warning = parent_lo < grand_hi || great_lo < non_hi;
  if (p.t_lo > p.t_hi) {
    p.t_lo = p.t_hi;
    p.overlap_warning = true;
  }
  return p;
}

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::direct_lineage: return "direct_lineage";
    case Verdict::distant_lineage: return "distant_lineage";
    case Verdict::non_lineage: return "non_lineage";
  }
  return "unknown";
}

Verdict verdict(double s, const AttestationPolicy& policy) {
  if (s >= policy.t_hi) return Verdict::direct_lineage;
  if (s >= policy.t_lo) return Verdict::distant_lineage;
  return Verdict::non_lineage;
}

RocCurve roc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  require(scores.size() == labels.size(), ErrorCode::InvalidArgument, "roc: scores and labels differ in length");
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  const std::size_t neg = labels.size() - pos;
  require(pos > 0 && neg > 0, ErrorCode::SingleClass, "roc needs both positive and negative labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve c;
  c.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t n = 0; n < order.size();) {
    const double t = scores[order[n]];
    for (; n < order.size() && scores[order[n]] == t; ++n) (labels[order[n]] ? tp : fp)++;
    c.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                        static_cast<double>(tp) / static_cast<double>(pos), t});
  }
  for (std::size_t n = 1; n < c.points.size(); ++n) {
    const auto& a = c.points[n - 1];
    const auto& b = c.points[n];
    c.auc += (b.fpr - a.fpr) * 0.5 * (a.tpr + b.tpr);
  }
  return c;
}

double silverman_bandwidth(const std::vector<double>& values) {
  require(values.size() >= 2, ErrorCode::InsufficientData, "bandwidth needs at least 2 values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const double iqr = quantile(values, 0.75) - quantile(values, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  return std::max(kBandwidthFloor, 0.9 * spread * std::pow(n, -0.2));
}

double kde(const std::vector<double>& values, double bandwidth, double at) {
  require(!values.empty() && bandwidth > 0.0, ErrorCode::InvalidArgument, "kde needs values and a positive bandwidth");
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  double sum = 0.0;
  for (double v : values) {
    const double z = (at - v) / bandwidth;
    sum += std::exp(-0.5 * z * z);
  }
  return kInvSqrt2Pi * sum / (static_cast<double>(values.size()) * bandwidth);
}

std::map<Relation, DensitySummary> kde_report(const std::map<Relation, std::vector<double>>& scores) {
  constexpr int kGrid = 201;
  std::map<Relation, DensitySummary> out;
  for (const auto& [rel, values] : scores) {
    require(values.size() >= 3, ErrorCode::InsufficientData, "kde_report: need at least 3 " + to_string(rel) + " scores");
    DensitySummary d;
    d.n = values.size();
    d.bandwidth = silverman_bandwidth(values);
    d.median = quantile(values, 0.5);
    d.p10 = quantile(values, 0.1);
    d.p90 = quantile(values, 0.9);
    double best = -1.0;
    for (int g = 0; g < kGrid; ++g) {
      const double x = -1.0 + 2.0 * g / (kGrid - 1);
      const double y = kde(values, d.bandwidth, x);
      d.grid.push_back(x);
      d.density.push_back(y);
      if (y > best) {
        best = y;
        d.mode = x;
      }
    }
    out[rel] = std::move(d);
  }
  return out;
}

// Scenario names and params ---------------------------------------------------

namespace {

constexpr std::pair<Scenario, const char*> kScenarioNames[] = {
    {Scenario::AGA, "AGA"},
    {Scenario::WPA, "WPA"},
    {Scenario::perturb, "perturb"},
    {Scenario::overwrite, "overwrite"},
    {Scenario::distill, "distill"},
    {Scenario::infuse, "infuse"},
    {Scenario::false_claim, "false_claim"},
    {Scenario::probe_ablation, "probe_ablation"},
    {Scenario::component_ablation, "component_ablation"},
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string to_string(Scenario s) {
  for (const auto& [k, name] : kScenarioNames) {
    if (k == s) return name;
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& s) {
  for (const auto& [k, name] : kScenarioNames) {
    if (s == name) return k;
  }
  fail(ErrorCode::Config, "unknown scenario '" + s + "'");
}

void to_json(nlohmann::json& j, const ScenarioParams& p) {
  j = nlohmann::json{{"prune_rates", p.prune_rates},
                     {"perturb_rhos", p.perturb_rhos},
                     {"probe_fractions", p.probe_fractions},
                     {"distill_buckets", p.distill_buckets}};
}

void from_json(const nlohmann::json& j, ScenarioParams& p) {
  ScenarioParams d;
  p.prune_rates = j.value("prune_rates", d.prune_rates);
  p.perturb_rhos = j.value("perturb_rhos", d.perturb_rhos);
  p.probe_fractions = j.value("probe_fractions", d.probe_fractions);
  p.distill_buckets = j.value("distill_buckets", d.distill_buckets);
  for (double f : p.probe_fractions) {
    require(f > 0.0 && f <= 1.0, ErrorCode::Config, "scenario.probe_fractions entries must be in (0, 1]");
  }
  require(p.distill_buckets >= 1, ErrorCode::Config, "scenario.distill_buckets must be at least 1");
}

// Reports -----------------------------------------------------------------------

nlohmann::json report_json(const AttestationReport& r) {
  nlohmann::json j;
  j["scenario"] = r.scenario;
  j["manifest_hash"] = r.manifest_hash;
  j["attestor_hash"] = r.attestor_hash;
  j["config_hash"] = r.config_hash;
  j["policy"] = r.policy;
  j["metrics"] = nlohmann::json::array();
  for (const auto& m : r.metrics) {
    j["metrics"].push_back({{"name", m.name},
                            {"positives", m.positives},
                            {"negatives", m.negatives},
                            {"tpr", m.tpr},
                            {"fpr", m.fpr},
                            {"threshold", m.threshold}});
  }
  if (r.curve) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : r.curve->points) {
      nlohmann::json t = std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json(nullptr);
      pts.push_back({{"fpr", p.fpr}, {"tpr", p.tpr}, {"threshold", t}});
    }
    j["roc"] = {{"auc", r.curve->auc}, {"points", pts}};
  }
  nlohmann::json dens = nlohmann::json::object();
  for (const auto& [rel, d] : r.densities) {
    dens[to_string(rel)] = {{"n", d.n},        {"bandwidth", d.bandwidth}, {"mode", d.mode},
                            {"median", d.median}, {"p10", d.p10},           {"p90", d.p90}};
  }
  j["densities"] = dens;
  j["extra"] = r.extra;
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"parent", p.parent_id},
                     {"child", p.child_id},
                     {"group", p.group},
                     {"positive", p.positive},
                     {"s", p.s},
                     {"verdict", to_string(p.verdict)},
                     {"flags",
                      {{"boundary_failures", p.flags.boundary_failures},
                       {"excluded_keys", p.flags.excluded_keys},
                       {"truncated_responses", p.flags.truncated_responses}}}});
  }
  j["pairs"] = pairs;
  return j;
}

std::string report_csv(const AttestationReport& r) {
  std::ostringstream os;
  os << "parent_id,child_id,group,positive,s,verdict,boundary_failures,excluded_keys,truncated_responses\n";
  for (const auto& p : r.pairs) {
    os << p.parent_id << ',' << p.child_id << ',' << p.group << ',' << (p.positive ? 1 : 0) << ',' << fixed(p.s, 6)
       << ',' << to_string(p.verdict) << ',' << p.flags.boundary_failures << ',' << p.flags.excluded_keys << ','
       << p.flags.truncated_responses << '\n';
  }
  return os.str();
}

namespace {

constexpr int kPlotW = 480;
constexpr int kPlotH = 360;
constexpr int kMargin = 48;

std::string svg_open(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW << "\" height=\"" << kPlotH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kPlotW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n"
     << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kPlotW - 2 * kMargin << "\" height=\""
     << kPlotH - 2 * kMargin << "\" fill=\"none\" stroke=\"black\"/>\n";
  return os.str();
}

std::string polyline(const std::vector<std::pair<double, double>>& unit_xy, const std::string& colour) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
  const double w = kPlotW - 2 * kMargin;
  const double h = kPlotH - 2 * kMargin;
  for (const auto& [x, y] : unit_xy) os << fixed(kMargin + x * w, 2) << ',' << fixed(kPlotH - kMargin - y * h, 2) << ' ';
  os << "\"/>\n";
  return os.str();
}

}  // namespace

std::string roc_svg(const RocCurve& c, const std::string& title) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& p : c.points) pts.emplace_back(p.fpr, p.tpr);
  std::ostringstream os;
  os << svg_open(title + " (AUC " + fixed(c.auc, 3) + ")") << polyline({{0, 0}, {1, 1}}, "#bbbbbb")
     << polyline(pts, "#1f77b4") << "</svg>\n";
  return os.str();
}

std::string density_svg(const std::map<Relation, DensitySummary>& d, const std::string& title) {
  static const std::map<Relation, std::string> colours{{Relation::parent, "#d62728"},
                                                       {Relation::grandparent, "#ff7f0e"},
                                                       {Relation::great_grandparent, "#2ca02c"},
                                                       {Relation::non_lineage, "#1f77b4"},
                                                       {Relation::other, "#7f7f7f"}};
  double peak = 0.0;
  for (const auto& [rel, s] : d) {
    for (double y : s.density) peak = std::max(peak, y);
  }
  std::ostringstream os;
  os << svg_open(title);
  int row = 0;
  for (const auto& [rel, s] : d) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < s.grid.size(); ++i) {
      pts.emplace_back((s.grid[i] + 1.0) / 2.0, peak > 0.0 ? s.density[i] / peak : 0.0);
    }
    os << polyline(pts, colours.at(rel)) << "<text x=\"" << kMargin + 8 << "\" y=\"" << kMargin + 16 + 16 * row++
       << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << colours.at(rel) << "\">" << to_string(rel)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_report(const std::filesystem::path& dir, const AttestationReport& r, bool plots) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + p.string());
    out << text;
  };
  write(dir / (r.scenario + ".json"), report_json(r).dump(2) + "\n");
  write(dir / (r.scenario + ".csv"), report_csv(r));
  if (!plots) return;
  if (r.curve) write(dir / (r.scenario + "_roc.svg"), roc_svg(*r.curve, r.scenario));
  if (!r.densities.empty()) write(dir / (r.scenario + "_density.svg"), density_svg(r.densities, r.scenario));
}

// Evaluator ----------------------------------------------------------------------

ScoredPair Evaluator::score(const std::string& parent_id, const std::string& child_id, const std::string& group,
                            bool positive, Ablation ablation, int probe_classes) {
  KnowledgeTriplet t = bank.triplet(parent_id, child_id);
  ScoredPair p;
  p.parent_id = parent_id;
  p.child_id = child_id;
  p.group = group;
  p.positive = positive;
  if (probe_classes > 0 && probe_classes < t.parent->k) {
    const KnowledgeSet kp = restrict_classes(*t.parent, probe_classes);
    const KnowledgeSet kc = restrict_classes(*t.child, probe_classes);
    const KnowledgeSet kd = restrict_classes(*t.delta, probe_classes);
    p.s = score_knowledge(attestor, {&kp, &kc, &kd}, ablation);
  } else {
    p.s = score_knowledge(attestor, t, ablation);
  }
  p.verdict = verdict(p.s, policy);
  p.flags = bank.flags(parent_id, child_id);
  return p;
}

namespace {

using Chain = std::vector<const ModelRecord*>;

// Ancestor/descendant pairs of a chain, keyed by generations apart.
std::vector<std::tuple<std::string, std::string, int>> chain_pairs(const std::vector<std::string>& ids) {
  std::vector<std::tuple<std::string, std::string, int>> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size() && j - i <= 3; ++j) {
      out.emplace_back(ids[i], ids[j], static_cast<int>(j - i));
    }
  }
  return out;
}

std::vector<std::string> ids_of(const Chain& c) {
  std::vector<std::string> out;
  for (const auto* r : c) out.push_back(r->model_id);
  return out;
}

// Cross-family claims: each family's chain members paired with the next
// family's later-generation members.
std::vector<std::pair<std::string, std::string>> non_lineage_pairs(const std::vector<Chain>& chains) {
  std::vector<std::pair<std::string, std::string>> out;
  if (chains.size() < 2) return out;
  for (std::size_t f = 0; f < chains.size(); ++f) {
    const Chain& a = chains[f];
    const Chain& b = chains[(f + 1) % chains.size()];
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = i + 1; j < b.size() && j - i <= 3; ++j) out.emplace_back(a[i]->model_id, b[j]->model_id);
    }
  }
  return out;
}

ScenarioMetrics rate(const std::string& name, const std::vector<ScoredPair>& pairs, double threshold,
                     const std::function<bool(const ScoredPair&)>& in_scope = nullptr) {
  ScenarioMetrics m;
  m.name = name;
  m.threshold = threshold;
  std::size_t tp = 0, fp = 0;
  for (const auto& p : pairs) {
    if (in_scope && !in_scope(p)) continue;
    if (p.positive) {
      ++m.positives;
      tp += p.s >= threshold;
    } else {
      ++m.negatives;
      fp += p.s >= threshold;
    }
  }
  if (m.positives) m.tpr = static_cast<double>(tp) / static_cast<double>(m.positives);
  if (m.negatives) m.fpr = static_cast<double>(fp) / static_cast<double>(m.negatives);
  return m;
}

RocCurve roc_of(const std::vector<ScoredPair>& pairs) {
  std::vector<double> s;
  std::vector<bool> l;
  for (const auto& p : pairs) {
    s.push_back(p.s);
    l.push_back(p.positive);
  }
  return roc(s, l);
}

Relation relation_of_group(const std::string& g) {
  if (g == "parent") return Relation::parent;
  if (g == "grandparent") return Relation::grandparent;
  if (g == "great_grandparent") return Relation::great_grandparent;
  if (g == "non_lineage") return Relation::non_lineage;
  return Relation::other;
}

std::map<Relation, std::vector<double>> by_relation(const std::vector<ScoredPair>& pairs) {
  std::map<Relation, std::vector<double>> out;
  for (const auto& p : pairs) {
    const Relation r = relation_of_group(p.group);
    if (r != Relation::other) out[r].push_back(p.s);
  }
  return out;
}

// Records of a family carrying tag `key` (optionally with value `value`).
std::vector<const ModelRecord*> tagged(const FamilyManifest& m, const std::string& family, const std::string& key,
                                       const std::string& value = {}) {
  std::vector<const ModelRecord*> out;
  for (const auto& r : m.records) {
    if (r.family_id == family && r.has_tag(key) && (value.empty() || r.tag(key) == value)) out.push_back(&r);
  }
  std::sort(out.begin(), out.end(), [](const ModelRecord* a, const ModelRecord* b) {
    return a->generation != b->generation ? a->generation < b->generation : a->model_id < b->model_id;
  });
  return out;
}

// Distinct values of a numeric tag across the given families, ascending.
std::vector<double> tag_values(const FamilyManifest& m, const std::vector<std::string>& families,
                               const std::string& key) {
  std::set<double> vals;
  for (const auto& r : m.records) {
    if (r.has_tag(key) && std::find(families.begin(), families.end(), r.family_id) != families.end()) {
      vals.insert(std::stod(r.tag(key)));
    }
  }
  return {vals.begin(), vals.end()};
}

}  // namespace

std::map<Relation, std::vector<double>> Evaluator::relation_scores(const std::string& split,
                                                                   std::vector<ScoredPair>* pairs, Ablation ablation) {
  const FamilyManifest& m = bank.manifest();
  std::vector<Chain> chains;
  for (const auto& f : split_families(m, split)) chains.push_back(m.chain(f));
  std::vector<ScoredPair> all;
  for (const auto& c : chains) {
    for (const auto& [p, ch, d] : chain_pairs(ids_of(c))) {
      all.push_back(score(p, ch, to_string(relation_from_distance(d)), true, ablation));
    }
  }
  for (const auto& [p, ch] : non_lineage_pairs(chains)) all.push_back(score(p, ch, "non_lineage", false, ablation));
  auto out = by_relation(all);
  if (pairs) pairs->insert(pairs->end(), all.begin(), all.end());
  return out;
}

AttestationPolicy Evaluator::calibrate_on(const std::string& split, Ablation ablation) {
  const auto scores = relation_scores(split, nullptr, ablation);
  try {
    AttestationPolicy p = calibrate(scores);
    p.source_families = split_families(bank.manifest(), split);
    return p;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InsufficientData) throw;
    return AttestationPolicy{};
  }
}

AttestationReport Evaluator::run(Scenario scenario, const ScenarioParams& params) {
  const FamilyManifest& m = bank.manifest();
  const std::vector<std::string> families = split_families(m, "test");
  require(families.size() >= 2, ErrorCode::MissingScenarioData, "scenarios need at least two test families");
  std::vector<Chain> chains;
  for (const auto& f : families) chains.push_back(m.chain(f));

  AttestationReport r;
  r.scenario = to_string(scenario);
  r.manifest_hash = m.content_hash();
  r.attestor_hash = attestor_hash(attestor);
  {
    nlohmann::json cfg{{"probe", bank.config()}, {"params", params}, {"policy", policy}};
    r.config_hash = hex64(fnv1a(cfg.dump()));
  }
  r.policy = policy;

  auto baseline = [&](std::vector<ScoredPair>& out, const std::string& group_prefix, Ablation a = Ablation::none,
                      int classes = 0) {
    for (const auto& c : chains) {
      for (const auto& [p, ch, d] : chain_pairs(ids_of(c))) {
        const std::string g = group_prefix.empty() ? to_string(relation_from_distance(d)) : group_prefix;
        out.push_back(score(p, ch, g, true, a, classes));
      }
    }
  };
  auto negatives = [&](std::vector<ScoredPair>& out, const std::string& group, Ablation a = Ablation::none,
                       int classes = 0) {
    for (const auto& [p, ch] : non_lineage_pairs(chains)) out.push_back(score(p, ch, group, false, a, classes));
  };
  auto group_is = [](const std::string& g) { return [g](const ScoredPair& p) { return p.group == g; }; };
  auto group_or_neg = [](const std::string& g) {
    return [g](const ScoredPair& p) { return p.group == g || !p.positive; };
  };
  const bool classifier = m.kind == ModelKind::classifier;

  switch (scenario) {
    case Scenario::AGA: {
      baseline(r.pairs, "");
      negatives(r.pairs, "non_lineage");
      r.metrics.push_back(rate("lineage_within_3", r.pairs, policy.t_lo));
      for (const char* g : {"parent", "grandparent", "great_grandparent"}) {
        r.metrics.push_back(rate(g, r.pairs, policy.t_lo, group_or_neg(g)));
      }
      ScenarioMetrics direct = rate("direct", r.pairs, policy.t_hi);
      {
        std::size_t tp = 0, np = 0, fp = 0, nn = 0;
        for (const auto& p : r.pairs) {
          if (p.group == "parent") {
            ++np;
            tp += p.s >= policy.t_hi;
          } else {
            ++nn;
            fp += p.s >= policy.t_hi;
          }
        }
        direct.positives = np;
        direct.negatives = nn;
        direct.tpr = np ? static_cast<double>(tp) / static_cast<double>(np) : 0.0;
        direct.fpr = nn ? static_cast<double>(fp) / static_cast<double>(nn) : 0.0;
      }
      r.metrics.push_back(direct);
      r.curve = roc_of(r.pairs);
      r.densities = kde_report(by_relation(r.pairs));
      break;
    }
    case Scenario::WPA: {
      std::vector<double> rates = params.prune_rates;
      if (rates.empty()) rates = tag_values(m, families, "wpa");
      require(!rates.empty(), ErrorCode::MissingScenarioData, "no pruned chains in the test families");
      baseline(r.pairs, "no_attack");
      negatives(r.pairs, "non_lineage");
      const ScenarioMetrics base = rate("no_attack", r.pairs, policy.t_lo, group_or_neg("no_attack"));
      r.metrics.push_back(base);
      for (double p : rates) {
        const std::string g = "wpa" + fixed(p, 2);
        for (std::size_t f = 0; f < families.size(); ++f) {
          std::vector<std::string> ids{chains[f].front()->model_id};
          for (const auto* rec : tagged(m, families[f], "wpa", fixed(p, 2))) {
            if (!rec->has_tag("pruned")) ids.push_back(rec->model_id);
          }
          require(ids.size() >= 2, ErrorCode::MissingScenarioData, "no pruned chain at p=" + fixed(p, 2) + " in " + families[f]);
          for (const auto& [a, b, d] : chain_pairs(ids)) r.pairs.push_back(score(a, b, g, true));
        }
        const ScenarioMetrics mm = rate(g, r.pairs, policy.t_lo, group_or_neg(g));
        r.metrics.push_back(mm);
        r.extra["tpr_drop"][g] = base.tpr - mm.tpr;
      }
      break;
    }
    case Scenario::perturb: {
      std::vector<double> rhos = params.perturb_rhos;
      if (rhos.empty()) rhos = tag_values(m, families, "perturbed");
      require(!rhos.empty(), ErrorCode::MissingScenarioData, "no perturbed models in the test families");
      negatives(r.pairs, "non_lineage");
      // Claims against each perturbed chain member, with the unperturbed member as baseline.
      auto claims = [&](const std::string& g, const std::function<std::string(const ModelRecord&)>& variant) {
        for (const auto& c : chains) {
          for (std::size_t j = 1; j < c.size(); ++j) {
            const std::string child = variant(*c[j]);
            for (std::size_t i = (j > 3 ? j - 3 : 0); i < j; ++i) r.pairs.push_back(score(c[i]->model_id, child, g, true));
          }
        }
      };
      claims("unperturbed", [](const ModelRecord& rec) { return rec.model_id; });
      const ScenarioMetrics base = rate("unperturbed", r.pairs, policy.t_lo, group_or_neg("unperturbed"));
      r.metrics.push_back(base);
      for (double rho : rhos) {
        const std::string g = "rho" + fixed(rho, 2);
        claims(g, [&](const ModelRecord& rec) {
          const std::string id = rec.model_id + "-pert" + fixed(rho, 2);
          require(m.find(id) != nullptr, ErrorCode::MissingScenarioData, "missing perturbed model " + id);
          return id;
        });
        const ScenarioMetrics mm = rate(g, r.pairs, policy.t_lo, group_or_neg(g));
        r.metrics.push_back(mm);
        r.extra["tpr_drop"][g] = base.tpr - mm.tpr;
      }
      break;
    }
    case Scenario::overwrite: {
      require(classifier, ErrorCode::MissingScenarioData, "overwrite applies to classifier zoos");
      for (std::size_t f = 0; f < families.size(); ++f) {
        const auto ow = tagged(m, families[f], "overwritten");
        require(!ow.empty(), ErrorCode::MissingScenarioData, "no overwritten models in " + families[f]);
        r.pairs.push_back(score(chains[f][0]->model_id, chains[f][1]->model_id, "baseline_root", true));
        for (const auto* rec : ow) {
          const std::string frac = rec->tag("overwritten");
          r.pairs.push_back(score(*rec->parent_id, rec->model_id, "direct_" + frac, true));
          r.pairs.push_back(score(chains[f][0]->model_id, rec->model_id, "root_" + frac, true));
        }
      }
      negatives(r.pairs, "non_lineage");
      std::set<std::string> groups;
      for (const auto& p : r.pairs) {
        if (p.positive) groups.insert(p.group);
      }
      for (const auto& g : groups) r.metrics.push_back(rate(g, r.pairs, policy.t_lo, group_or_neg(g)));
      break;
    }
    case Scenario::distill: {
      require(classifier, ErrorCode::MissingScenarioData, "distill applies to classifier zoos");
      struct Suspect {
        ScoredPair pair;
        double accuracy;
      };
      std::vector<Suspect> suspects;
      for (std::size_t f = 0; f < families.size(); ++f) {
        for (const auto* student : tagged(m, families[f], "distilled")) {
          const ModelRecord& victim = m.record(*student->parent_id);
          const ModelRecord* proxy = nullptr;
          for (const auto* c : m.children(student->model_id)) {
            if (c->has_tag("reverse_distilled")) proxy = c;
          }
          require(proxy != nullptr, ErrorCode::MissingScenarioData, "no reverse-distilled proxy for " + student->model_id);
          const double acc = classifier_accuracy(student->arch, bank.store().load(student->model_id), dataset_of(m, victim));
          suspects.push_back({score(victim.model_id, proxy->model_id, "student", true), acc});
          // Negative control: the same proxy claimed by the next family's root.
          const std::string other = chains[(f + 1) % chains.size()].front()->model_id;
          r.pairs.push_back(score(other, proxy->model_id, "unrelated_teacher", false));
        }
      }
      require(!suspects.empty(), ErrorCode::MissingScenarioData, "no distilled students in the test families");
      std::stable_sort(suspects.begin(), suspects.end(),
                       [](const Suspect& a, const Suspect& b) { return a.accuracy < b.accuracy; });
      const auto buckets = static_cast<std::size_t>(std::min<int>(params.distill_buckets, static_cast<int>(suspects.size())));
      nlohmann::json bucket_info = nlohmann::json::array();
      for (std::size_t b = 0; b < buckets; ++b) {
        const std::size_t lo = b * suspects.size() / buckets;
        const std::size_t hi = (b + 1) * suspects.size() / buckets;
        const std::string g = "bucket" + std::to_string(b);
        for (std::size_t n = lo; n < hi; ++n) {
          suspects[n].pair.group = g;
          r.pairs.push_back(suspects[n].pair);
        }
        r.metrics.push_back(rate(g, r.pairs, policy.t_lo, group_or_neg(g)));
        bucket_info.push_back({{"bucket", g},
                               {"accuracy_min", suspects[lo].accuracy},
                               {"accuracy_max", suspects[hi - 1].accuracy},
                               {"tpr", r.metrics.back().tpr}});
      }
      r.extra["buckets"] = bucket_info;
      for (std::size_t f = 0; f < families.size(); ++f) {
        for (const auto* self : tagged(m, families[f], "closed_loop")) {
          r.pairs.push_back(score(*self->parent_id, self->model_id, "closed_loop", true));
        }
      }
      r.metrics.push_back(rate("closed_loop", r.pairs, policy.t_hi, group_is("closed_loop")));
      break;
    }
    case Scenario::infuse: {
      require(classifier, ErrorCode::MissingScenarioData, "infuse applies to classifier zoos");
      std::set<std::string> groups;
      for (std::size_t f = 0; f < families.size(); ++f) {
        const auto forged = tagged(m, families[f], "infused");
        require(!forged.empty(), ErrorCode::MissingScenarioData, "no infused models in " + families[f]);
        for (const auto* rec : forged) {
          const std::string target = rec->tag("infuse_target");
          const ModelRecord& child = m.record(target);
          const std::string g = "infused" + rec->tag("infused");
          groups.insert(g);
          r.pairs.push_back(score(rec->model_id, target, g, false));
          r.pairs.push_back(score(*child.parent_id, target, "genuine_parent", true));
        }
      }
      r.metrics.push_back(rate("genuine_parent", r.pairs, policy.t_hi, group_is("genuine_parent")));
      for (const auto& g : groups) {
        const ScenarioMetrics mm = rate(g, r.pairs, policy.t_hi, group_is(g));
        r.metrics.push_back(mm);
        double top = -1.0;
        for (const auto& p : r.pairs) {
          if (p.group == g) top = std::max(top, p.s);
        }
        r.extra["max_forged_score"][g] = top;
      }
      break;
    }
    case Scenario::false_claim: {
      std::set<std::pair<std::string, std::string>> edges;
      for (const auto& e : m.edges) edges.insert({e.parent, e.child});
      for (const auto& c : chains) {
        for (const auto& [p, ch, d] : chain_pairs(ids_of(c))) {
          const bool direct = d == 1;
          if (!direct) {
            const ModelRecord& claimed = m.record(p);
            const ModelRecord& child = m.record(ch);
            require(claimed.family_id == child.family_id && !edges.count({p, ch}) && *child.parent_id != p,
                    ErrorCode::InvalidArgument, "false claim " + p + " -> " + ch + " is not a non-direct family member");
          }
          r.pairs.push_back(score(p, ch, direct ? "direct_parent" : "non_direct_" + std::to_string(d), direct));
        }
      }
      r.curve = roc_of(r.pairs);
      r.metrics.push_back(rate("direct_claims", r.pairs, policy.t_hi));
      r.extra["auc"] = r.curve->auc;
      break;
    }
    case Scenario::probe_ablation: {
      require(classifier, ErrorCode::MissingScenarioData, "probe_ablation applies to classifier zoos");
      const int k = chains.front().front()->arch.classes;
      for (double frac : params.probe_fractions) {
        const int classes = std::clamp(static_cast<int>(std::lround(frac * k)), 2, k);
        const std::string g = "classes" + std::to_string(classes);
        std::vector<ScoredPair> part;
        baseline(part, g, Ablation::none, classes);
        negatives(part, g + "_non_lineage", Ablation::none, classes);
        ScenarioMetrics mm = rate(g, part, policy.t_lo);
        r.metrics.push_back(mm);
        std::vector<ScoredPair> claims;
        for (const auto& p : part) {
          if (p.positive) claims.push_back(p);
        }
        for (auto& p : claims) p.positive = lineage_distance(m, p.parent_id, p.child_id) == 1;
        r.extra["false_claim_auc"][g] = roc_of(claims).auc;
        r.pairs.insert(r.pairs.end(), part.begin(), part.end());
      }
      break;
    }
    case Scenario::component_ablation: {
      std::vector<Ablation> ablations{Ablation::none, Ablation::no_delta, Ablation::sum_fusion};
      if (classifier) ablations.push_back(Ablation::mean_pool);
      double full = 0.0;
      for (Ablation a : ablations) {
        const std::string g = to_string(a);
        std::vector<ScoredPair> part;
        baseline(part, g, a);
        negatives(part, g + "_non_lineage", a);
        // Each variant gets its own thresholds from the calibration split.
        const AttestationPolicy own = a == Ablation::none || !policy.calibrated ? policy : calibrate_on(calibration_split, a);
        r.extra["thresholds"][g] = {{"t_lo", own.t_lo}, {"t_hi", own.t_hi}, {"calibrated", own.calibrated}};
        const ScenarioMetrics mm = rate(g, part, own.t_lo);
        r.metrics.push_back(mm);
        if (a == Ablation::none) {
          full = mm.tpr;
        } else {
          r.extra["tpr_gap"][g] = full - mm.tpr;
        }
        r.pairs.insert(r.pairs.end(), part.begin(), part.end());
      }
      break;
    }
  }
  return r;
}

}  // namespace mla
