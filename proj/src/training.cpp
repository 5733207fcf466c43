#include "mla/training.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cmath>
#include <map>

namespace mla {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"optimizer", c.optimizer}, {"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.optimizer = j.value("optimizer", std::string("adam"));
  c.lr = j.value("lr", 1e-4);
  c.epochs = j.value("epochs", 50);
  c.batch_size = j.value("batch_size", 32);
  c.seed = j.value("seed", std::uint64_t{0});
}

namespace {

void check_config(const TrainConfig& cfg) {
  require(cfg.optimizer == "adam", ErrorCode::Config, "only the adam optimizer is supported");
  require(cfg.epochs >= 0 && cfg.batch_size >= 1 && cfg.lr > 0.0, ErrorCode::Config,
          "train config needs epochs >= 0, batch_size >= 1, lr > 0");
}

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  Matrix out(static_cast<Eigen::Index>(end - begin), m.cols());
  for (std::size_t i = begin; i < end; ++i) out.row(static_cast<Eigen::Index>(i - begin)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

void finish(ParameterVector& params, const TrainResult& r) {
  if (!r.epoch_loss.empty() && !std::isfinite(r.epoch_loss.back())) {
    fail(ErrorCode::DivergedTraining, "final training loss is not finite");
  }
  require(params.all_finite(), ErrorCode::DivergedTraining, "weights became non-finite");
  params.round_to_float();
}

// Generic epoch/batch driver: `loss_fn(order, begin, end, rng)` returns the
// batch loss as a graph over `bound`.
template <typename LossFn>
TrainResult run(ParameterVector& params, std::size_t n, const TrainConfig& cfg, LossFn&& loss_fn) {
  check_config(cfg);
  TrainResult result;
  if (cfg.epochs == 0 || n == 0) return result;
  Adam opt(cfg.lr);
  Rng rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(n, b + static_cast<std::size_t>(cfg.batch_size));
      Bindings bound = bind(params, true);
      ad::Var loss = loss_fn(bound, order, b, e, rng);
      ad::backward(loss);
      opt.step(params, gradients(bound, params));
      total += loss.item();
      ++batches;
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
    if (!std::isfinite(result.epoch_loss.back())) break;
  }
  finish(params, result);
  return result;
}

}  // namespace

TrainResult train_classifier(const ArchSpec& arch, ParameterVector& params, const Matrix& inputs,
                             const std::vector<int>& labels, const TrainConfig& cfg) {
  require(static_cast<std::size_t>(inputs.rows()) == labels.size(), ErrorCode::ShapeMismatch,
          "train_classifier: inputs and labels differ in length");
  return run(params, labels.size(), cfg,
             [&](const Bindings& bound, const std::vector<std::size_t>& order, std::size_t b, std::size_t e, Rng&) {
               std::vector<int> y;
               for (std::size_t i = b; i < e; ++i) y.push_back(labels[order[i]]);
               auto out = classifier_forward(arch, bound, ad::constant(take_rows(inputs, order, b, e)));
               return ad::cross_entropy(out.logits, y);
             });
}

TrainResult distill_classifier(const ArchSpec& arch, ParameterVector& params, const Matrix& inputs,
                               const Matrix& teacher_probs, double temperature, const TrainConfig& cfg) {
  require(inputs.rows() == teacher_probs.rows(), ErrorCode::ShapeMismatch, "distill: inputs and targets differ");
  return run(params, static_cast<std::size_t>(inputs.rows()), cfg,
             [&](const Bindings& bound, const std::vector<std::size_t>& order, std::size_t b, std::size_t e, Rng&) {
               auto out = classifier_forward(arch, bound, ad::constant(take_rows(inputs, order, b, e)));
               return ad::distill_kl(out.logits, take_rows(teacher_probs, order, b, e), temperature);
             });
}

namespace {

struct NoisedBatch {
  Matrix x_t;
  Matrix noise;
  std::vector<int> t;
};

NoisedBatch add_noise(const Matrix& x0, Rng& rng) {
  NoisedBatch nb{Matrix(x0.rows(), x0.cols()), Matrix(x0.rows(), x0.cols()), {}};
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    const int t = static_cast<int>(rng.index(kDiffusionSteps));
    const double ab = alpha_bar(t);
    nb.t.push_back(t);
    for (Eigen::Index c = 0; c < x0.cols(); ++c) {
      const double eps = rng.normal();
      nb.noise(r, c) = eps;
      nb.x_t(r, c) = std::sqrt(ab) * x0(r, c) + std::sqrt(1.0 - ab) * eps;
    }
  }
  return nb;
}

}  // namespace

TrainResult train_denoiser(const ArchSpec& arch, ParameterVector& params, const Matrix& images,
                           const TrainConfig& cfg) {
  return run(params, static_cast<std::size_t>(images.rows()), cfg,
             [&](const Bindings& bound, const std::vector<std::size_t>& order, std::size_t b, std::size_t e, Rng& rng) {
               auto nb = add_noise(take_rows(images, order, b, e), rng);
               auto out = denoiser_forward(arch, bound, ad::constant(nb.x_t), nb.t);
               return ad::mse(out.noise, nb.noise);
             });
}

double denoiser_loss(const ArchSpec& arch, const ParameterVector& params, const Matrix& images, std::uint64_t seed) {
  Rng rng(seed);
  auto nb = add_noise(images, rng);
  auto out = denoiser_forward(arch, bind(params, false), ad::constant(nb.x_t), nb.t);
  return ad::mse(out.noise, nb.noise).item();
}

namespace {

// Cross-entropy of next-token predictions over response positions for a batch
// of equal-length examples.
ad::Var seq_batch_loss(const ArchSpec& arch, const Bindings& bound, const std::vector<const text::Example*>& batch) {
  std::vector<std::vector<int>> seqs;
  for (const auto* ex : batch) {
    std::vector<int> s = ex->prompt;
    s.insert(s.end(), ex->response.begin(), ex->response.end());
    seqs.push_back(std::move(s));
  }
  const std::size_t plen = batch[0]->prompt.size();
  const std::size_t len = seqs[0].size();
  auto out = seq_forward(arch, bound, seqs);
  std::vector<ad::Var> terms;
  for (std::size_t t = plen - 1; t + 1 < len; ++t) {
    std::vector<int> next;
    for (const auto& s : seqs) next.push_back(s[t + 1]);
    terms.push_back(ad::cross_entropy(out.logits[t], next));
  }
  ad::Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return ad::scale(total, 1.0 / static_cast<double>(terms.size()));
}

std::map<std::pair<std::size_t, std::size_t>, std::vector<const text::Example*>> by_shape(
    const std::vector<text::Example>& examples) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<const text::Example*>> groups;
  for (const auto& ex : examples) groups[{ex.prompt.size(), ex.response.size()}].push_back(&ex);
  return groups;
}

}  // namespace

TrainResult train_seqmodel(const ArchSpec& arch, ParameterVector& params, const std::vector<text::Example>& examples,
                           const TrainConfig& cfg) {
  check_config(cfg);
  TrainResult result;
  if (cfg.epochs == 0 || examples.empty()) return result;
  // Batches never mix prompt/response shapes.
  std::vector<std::vector<const text::Example*>> batches;
  for (const auto& [_, group] : by_shape(examples)) {
    for (std::size_t b = 0; b < group.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(group.size(), b + static_cast<std::size_t>(cfg.batch_size));
      batches.emplace_back(group.begin() + static_cast<std::ptrdiff_t>(b), group.begin() + static_cast<std::ptrdiff_t>(e));
    }
  }
  Adam opt(cfg.lr);
  Rng rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.permutation(batches.size());
    double total = 0.0;
    for (std::size_t bi : order) {
      Bindings bound = bind(params, true);
      ad::Var loss = seq_batch_loss(arch, bound, batches[bi]);
      ad::backward(loss);
      opt.step(params, gradients(bound, params));
      total += loss.item();
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    if (!std::isfinite(result.epoch_loss.back())) break;
  }
  finish(params, result);
  return result;
}

double seqmodel_loss(const ArchSpec& arch, const ParameterVector& params, const std::vector<text::Example>& examples) {
  if (examples.empty()) return 0.0;
  const Bindings bound = bind(params, false);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& [_, group] : by_shape(examples)) {
    total += seq_batch_loss(arch, bound, group).item() * static_cast<double>(group.size());
    n += group.size();
  }
  return total / static_cast<double>(n);
}

Matrix soft_targets(const ArchSpec& arch, const ParameterVector& params, const Matrix& inputs, double temperature) {
  auto out = classifier_forward(arch, bind(params, false), ad::constant(inputs));
  return ad::softmax_rows(ad::scale(out.logits, 1.0 / temperature)).value();
}

}  // namespace mla
