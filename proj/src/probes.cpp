#include "mla/probes.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

namespace mla {

std::string to_string(SampleKind k) {
  switch (k) {
    case SampleKind::centroid: return "centroid";
    case SampleKind::boundary: return "boundary";
    case SampleKind::generic_input: return "generic_input";
    case SampleKind::prompt: return "prompt";
  }
  return "unknown";
}

std::string to_string(ProbeKind k) {
  switch (k) {
    case ProbeKind::classifier: return "classifier";
    case ProbeKind::generic: return "generic";
    case ProbeKind::prompts: return "prompts";
  }
  return "unknown";
}

namespace {

SampleKind sample_kind_from_string(const std::string& s) {
  if (s == "centroid") return SampleKind::centroid;
  if (s == "boundary") return SampleKind::boundary;
  if (s == "generic_input") return SampleKind::generic_input;
  if (s == "prompt") return SampleKind::prompt;
  fail(ErrorCode::Io, "unknown probe sample kind '" + s + "'");
}

ProbeKind probe_kind_from_string(const std::string& s) {
  if (s == "classifier") return ProbeKind::classifier;
  if (s == "generic") return ProbeKind::generic;
  if (s == "prompts") return ProbeKind::prompts;
  fail(ErrorCode::Io, "unknown probe kind '" + s + "'");
}

std::vector<double> to_float_precision(std::vector<double> v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  return v;
}

Matrix row_of(const std::vector<double>& v) {
  return Eigen::Map<const Matrix>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
}

struct Probe {
  double objective = 0.0;
  double gap = 0.0;
  double margin = 0.0;
  bool saturated = false;
  std::vector<double> grad;
};

// Objective and input gradient at x. When softmax saturates the probability
// objective is flat, so the logit gap (z_i - z_j)^2 drives the descent instead.
Probe evaluate(const ArchSpec& arch, const Bindings& bound, const std::vector<double>& x, int i, int j) {
  ad::Var xv = ad::leaf(row_of(x));
  auto out = classifier_forward(arch, bound, xv);
  ad::Var probs = ad::softmax_rows(out.logits);
  const Matrix& p = probs.value();
  const auto k = static_cast<int>(p.cols());
  const double gi = p(0, i), gj = p(0, j);
  int other = -1;
  for (int l = 0; l < k; ++l) {
    if (l == i || l == j) continue;
    if (other < 0 || p(0, l) > p(0, other)) other = l;
  }
  Probe r;
  r.gap = std::abs(gi - gj);
  r.margin = std::min(gi, gj) - (other >= 0 ? p(0, other) : 0.0);
  r.saturated = r.gap > 0.999;
  ad::Var obj;
  if (r.saturated) {
    ad::Var zi = ad::slice_cols(out.logits, i, 1);
    ad::Var zj = ad::slice_cols(out.logits, j, 1);
    obj = ad::square(ad::sub(zi, zj));
  } else {
    ad::Var pi = ad::slice_cols(probs, i, 1);
    ad::Var pj = ad::slice_cols(probs, j, 1);
    obj = ad::square(ad::sub(pi, pj));
    if (other >= 0) {
      ad::Var lo = gi < gj ? pi : pj;
      ad::Var excess = ad::relu(ad::sub(ad::slice_cols(probs, other, 1), lo));
      obj = ad::add(obj, ad::square(excess));
    }
  }
  r.objective = obj.item();
  ad::backward(obj);
  const Matrix& g = xv.grad();
  if (g.size() == 0) {
    r.grad.assign(x.size(), 0.0);
  } else {
    r.grad.assign(g.data(), g.data() + g.size());
  }
  return r;
}

bool meets(const Probe& p, double eps_b) { return p.gap <= eps_b && p.margin >= -eps_b; }

}  // namespace

Matrix ProbeSet::inputs() const {
  if (samples.empty()) return Matrix(0, 0);
  const auto d = static_cast<Eigen::Index>(samples[0].input.size());
  Matrix m(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    require(static_cast<Eigen::Index>(samples[s].input.size()) == d, ErrorCode::ShapeMismatch,
            "probe payloads differ in width");
    for (Eigen::Index c = 0; c < d; ++c) m(static_cast<Eigen::Index>(s), c) = samples[s].input[static_cast<std::size_t>(c)];
  }
  return m;
}

std::size_t ProbeSet::failed_boundaries() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const ProbeSample& s) {
    return s.kind == SampleKind::boundary && !s.converged;
  }));
}

std::size_t ProbeSet::classifier_index(int k, int i, int j) {
  if (i == j) return static_cast<std::size_t>(i);
  // Boundaries of class i occupy k-1 slots after all centroids.
  return static_cast<std::size_t>(k + i * (k - 1) + (j < i ? j : j - 1));
}

std::string ProbeSet::content_hash() const {
  std::uint64_t h = fnv1a(to_string(kind) + "|" + source_model_id);
  for (const auto& s : samples) {
    h = fnv1a(s.id, h);
    for (double v : s.input) {
      const auto f = static_cast<float>(v);
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(&f), sizeof(f)), h);
    }
    for (int t : s.tokens) h = fnv1a(std::to_string(t) + ",", h);
  }
  return hex64(h);
}

ProbeSample centroid_sample(const ArchSpec& arch, const ParameterVector& params, const Dataset& data, int cls) {
  std::vector<Eigen::Index> rows;
  for (std::size_t r = 0; r < data.labels.size(); ++r) {
    if (data.labels[r] == cls) rows.push_back(static_cast<Eigen::Index>(r));
  }
  if (rows.empty()) fail(ErrorCode::EmptyClass, "class " + std::to_string(cls) + " has no training samples");
  Matrix mean = Matrix::Zero(1, data.inputs.cols());
  for (auto r : rows) mean += data.inputs.row(r);
  mean /= static_cast<double>(rows.size());

  ProbeSample s;
  s.kind = SampleKind::centroid;
  s.class_from = s.class_to = cls;
  s.id = "c" + std::to_string(cls);
  s.input = to_float_precision(std::vector<double>(mean.data(), mean.data() + mean.size()));

  Eigen::Index arg = 0;
  classifier_probs(arch, params, row_of(s.input)).row(0).maxCoeff(&arg);
  if (arg == cls) return s;

  // Fallback: the class-i training sample the model is most confident about.
  Matrix members(static_cast<Eigen::Index>(rows.size()), data.inputs.cols());
  for (std::size_t n = 0; n < rows.size(); ++n) members.row(static_cast<Eigen::Index>(n)) = data.inputs.row(rows[n]);
  const Matrix probs = classifier_probs(arch, params, members);
  Eigen::Index best = 0;
  probs.col(cls).maxCoeff(&best);
  s.input = to_float_precision(std::vector<double>(members.row(best).data(), members.row(best).data() + members.cols()));
  return s;
}

BoundaryResult boundary_sample(const ArchSpec& arch, const ParameterVector& params, const ProbeSample& start, int i,
                               int j, const BoundaryConfig& cfg) {
  require(i != j, ErrorCode::InvalidArgument, "boundary_sample: classes must differ");
  require(i >= 0 && j >= 0 && i < static_cast<int>(params.at("head.weight").shape[0]) &&
              j < static_cast<int>(params.at("head.weight").shape[0]),
          ErrorCode::InvalidArgument, "boundary_sample: class index out of range");
  const Bindings bound = bind(params, false);
  std::vector<double> x = start.input;
  Probe cur = evaluate(arch, bound, x, i, j);
  double eta = cfg.step;
  int it = 0;
  for (; it < cfg.max_iters && !meets(cur, cfg.eps_b); ++it) {
    double norm = 0.0;
    for (double g : cur.grad) norm += g * g;
    norm = std::sqrt(norm);
    if (norm == 0.0 || eta < 1e-12) break;
    std::vector<double> nx(x.size());
    for (std::size_t d = 0; d < x.size(); ++d) {
      nx[d] = std::clamp(x[d] - eta * cur.grad[d] / norm, cfg.clip_min, cfg.clip_max);
    }
    Probe next = evaluate(arch, bound, nx, i, j);
    // Switching between the logit and probability objectives is always accepted
    // when it leaves the saturated region.
    const bool improved = (cur.saturated && !next.saturated) ||
                          (cur.saturated == next.saturated && next.objective < cur.objective);
    if (improved) {
      x = std::move(nx);
      cur = std::move(next);
    } else {
      eta *= 0.5;
    }
  }

  BoundaryResult res;
  res.sample.kind = SampleKind::boundary;
  res.sample.class_from = i;
  res.sample.class_to = j;
  res.sample.id = "b" + std::to_string(i) + "_" + std::to_string(j);
  res.sample.input = to_float_precision(x);
  res.sample.iterations = it;
  const Probe fin = evaluate(arch, bound, res.sample.input, i, j);
  res.gap = fin.gap;
  res.margin = fin.margin;
  res.found = meets(fin, cfg.eps_b);
  res.sample.converged = res.found;
  return res;
}

ProbeSample require_boundary(const ArchSpec& arch, const ParameterVector& params, const ProbeSample& start, int i,
                             int j, const BoundaryConfig& cfg) {
  auto r = boundary_sample(arch, params, start, i, j, cfg);
  if (!r.found) {
    fail(ErrorCode::BoundaryNotFound, "no boundary point between classes " + std::to_string(i) + " and " +
                                          std::to_string(j) + " within " + std::to_string(cfg.max_iters) + " iterations");
  }
  return r.sample;
}

bool satisfies_boundary(const ArchSpec& arch, const ParameterVector& params, const std::vector<double>& x, int i, int j,
                        double eps_b) {
  const Matrix p = classifier_probs(arch, params, row_of(x));
  const double gi = p(0, i), gj = p(0, j);
  double other = 0.0;
  for (Eigen::Index l = 0; l < p.cols(); ++l) {
    if (l != i && l != j) other = std::max(other, p(0, l));
  }
  return std::abs(gi - gj) <= eps_b && std::min(gi, gj) >= other - eps_b;
}

namespace {

int argmax_row(const Matrix& p, Eigen::Index r) {
  Eigen::Index a = 0;
  p.row(r).maxCoeff(&a);
  return static_cast<int>(a);
}

// Starting points on segments between class-i and class-j training samples
// where the predicted class switches from i straight to j. The crossing is
// refined by bisection on g_i - g_j. Pairs are visited nearest first.
std::vector<ProbeSample> crossing_starts(const ArchSpec& arch, const ParameterVector& params, const Dataset& data,
                                         int i, int j, std::size_t limit) {
  std::vector<Eigen::Index> rows_i, rows_j;
  for (std::size_t r = 0; r < data.labels.size(); ++r) {
    if (data.labels[r] == i) rows_i.push_back(static_cast<Eigen::Index>(r));
    if (data.labels[r] == j) rows_j.push_back(static_cast<Eigen::Index>(r));
  }
  std::vector<std::tuple<double, Eigen::Index, Eigen::Index>> pairs;
  for (auto a : rows_i) {
    for (auto b : rows_j) pairs.emplace_back((data.inputs.row(a) - data.inputs.row(b)).squaredNorm(), a, b);
  }
  std::sort(pairs.begin(), pairs.end());
  constexpr int kGrid = 32;
  std::vector<ProbeSample> starts;
  for (const auto& [dist, a, b] : pairs) {
    if (starts.size() >= limit) break;
    const Matrix xa = data.inputs.row(a), xb = data.inputs.row(b);
    Matrix grid(kGrid + 1, xa.cols());
    for (int g = 0; g <= kGrid; ++g) grid.row(g) = xa + (xb - xa) * (static_cast<double>(g) / kGrid);
    const Matrix probs = classifier_probs(arch, params, grid);
    for (int g = 0; g < kGrid; ++g) {
      if (argmax_row(probs, g) != i || argmax_row(probs, g + 1) != j) continue;
      double lo = static_cast<double>(g) / kGrid, hi = static_cast<double>(g + 1) / kGrid;
      for (int step = 0; step < 30; ++step) {
        const double mid = 0.5 * (lo + hi);
        const Matrix pm = classifier_probs(arch, params, xa + (xb - xa) * mid);
        (pm(0, i) > pm(0, j) ? lo : hi) = mid;
      }
      const Matrix x = xa + (xb - xa) * (0.5 * (lo + hi));
      ProbeSample s;
      s.input.assign(x.data(), x.data() + x.size());
      starts.push_back(std::move(s));
      break;
    }
  }
  return starts;
}

}  // namespace

ProbeSet build_probe_classifier(const std::string& source_model_id, const ArchSpec& arch,
                                const ParameterVector& params, const Dataset& data, BoundaryConfig cfg) {
  const int k = static_cast<int>(params.at("head.weight").shape[0]);
  require(k >= 1, ErrorCode::InvalidArgument, "build_probe_classifier: model has no classes");
  if (cfg.clip_min <= -1e299) {
    cfg.clip_min = data.value_min;
    cfg.clip_max = data.value_max;
  }
  ProbeSet set;
  set.kind = ProbeKind::classifier;
  set.source_model_id = source_model_id;
  set.k = k;
  std::vector<ProbeSample> centroids;
  for (int i = 0; i < k; ++i) centroids.push_back(centroid_sample(arch, params, data, i));
  set.samples = centroids;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      auto best = boundary_sample(arch, params, centroids[static_cast<std::size_t>(i)], i, j, cfg);
      if (!best.found) {
        for (const auto& start : crossing_starts(arch, params, data, i, j, 8)) {
          auto r = boundary_sample(arch, params, start, i, j, cfg);
          r.sample.iterations += best.sample.iterations;
          if (r.found) {
            best = std::move(r);
            break;
          }
        }
      }
      set.samples.push_back(std::move(best.sample));
    }
  }
  return set;
}

ProbeSet build_probe_generic(const std::string& source_model_id, const Dataset& data, std::size_t n,
                             std::uint64_t seed) {
  require(n <= data.size(), ErrorCode::InvalidArgument, "build_probe_generic: n exceeds dataset size");
  Rng rng(seed);
  auto perm = rng.permutation(data.size());
  std::vector<std::size_t> chosen(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(chosen.begin(), chosen.end());
  ProbeSet set;
  set.kind = ProbeKind::generic;
  set.source_model_id = source_model_id;
  for (std::size_t idx : chosen) {
    ProbeSample s;
    s.kind = SampleKind::generic_input;
    s.id = "x" + std::to_string(idx);
    const auto row = data.inputs.row(static_cast<Eigen::Index>(idx));
    s.input = to_float_precision(std::vector<double>(row.data(), row.data() + row.size()));
    set.samples.push_back(std::move(s));
  }
  return set;
}

ProbeSet build_probe_prompts(const std::string& source_model_id, const std::vector<text::Domain>& domains,
                             int per_domain, int r) {
  require(per_domain >= 1 && r >= 1, ErrorCode::InvalidArgument, "build_probe_prompts: per_domain and r must be positive");
  ProbeSet set;
  set.kind = ProbeKind::prompts;
  set.source_model_id = source_model_id;
  set.r = r;
  for (auto d : domains) {
    for (int i = 0; i < per_domain; ++i) {
      ProbeSample s;
      s.kind = SampleKind::prompt;
      s.tokens = text::probe_prompt(d, i);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s-%03d", text::to_string(d).c_str(), i);
      s.id = buf;
      set.samples.push_back(std::move(s));
    }
  }
  return set;
}

void save_probe(const std::filesystem::path& base, const ProbeSet& probe) {
  nlohmann::json meta;
  meta["schema_version"] = 1;
  meta["kind"] = to_string(probe.kind);
  meta["source_model_id"] = probe.source_model_id;
  meta["k"] = probe.k;
  meta["r"] = probe.r;
  meta["content_hash"] = probe.content_hash();
  meta["samples"] = nlohmann::json::array();
  for (const auto& s : probe.samples) {
    nlohmann::json js{{"id", s.id}, {"kind", to_string(s.kind)}, {"i", s.class_from}, {"j", s.class_to},
                      {"converged", s.converged}, {"iterations", s.iterations}};
    if (s.kind == SampleKind::prompt) {
      js["text"] = text::decode(s.tokens);
      js["tokens"] = s.tokens;
    }
    meta["samples"].push_back(std::move(js));
  }
  const auto dir = base.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  {
    std::ofstream f(base.string() + ".json");
    if (!f) fail(ErrorCode::Io, "cannot write probe metadata " + base.string());
    f << meta.dump(2) << "\n";
  }
  if (probe.kind != ProbeKind::prompts && !probe.samples.empty()) {
    const Matrix m = probe.inputs();
    ParameterVector payload;
    payload.set("inputs", Tensor::from_matrix(m, {m.rows(), m.cols()}));
    save_checkpoint(base.string() + ".bin", payload);
  }
}

ProbeSet load_probe(const std::filesystem::path& base) {
  std::ifstream f(base.string() + ".json");
  if (!f) fail(ErrorCode::Io, "cannot read probe metadata " + base.string());
  const auto meta = nlohmann::json::parse(f);
  ProbeSet set;
  set.kind = probe_kind_from_string(meta.at("kind").get<std::string>());
  set.source_model_id = meta.at("source_model_id").get<std::string>();
  set.k = meta.at("k").get<int>();
  set.r = meta.at("r").get<int>();
  Matrix inputs;
  if (set.kind != ProbeKind::prompts && !meta.at("samples").empty()) {
    inputs = load_checkpoint(base.string() + ".bin").at("inputs").matrix();
  }
  Eigen::Index row = 0;
  for (const auto& js : meta.at("samples")) {
    ProbeSample s;
    s.id = js.at("id").get<std::string>();
    s.kind = sample_kind_from_string(js.at("kind").get<std::string>());
    s.class_from = js.at("i").get<int>();
    s.class_to = js.at("j").get<int>();
    s.converged = js.at("converged").get<bool>();
    s.iterations = js.at("iterations").get<int>();
    if (s.kind == SampleKind::prompt) {
      s.tokens = js.at("tokens").get<std::vector<int>>();
    } else {
      s.input.assign(inputs.row(row).data(), inputs.row(row).data() + inputs.cols());
      ++row;
    }
    set.samples.push_back(std::move(s));
  }
  return set;
}

}  // namespace mla
