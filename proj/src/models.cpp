#include "mla/models.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cmath>

namespace mla {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::classifier: return "classifier";
    case ModelKind::denoiser: return "denoiser";
    case ModelKind::seqmodel: return "seqmodel";
  }
  return "unknown";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "classifier") return ModelKind::classifier;
  if (s == "denoiser") return ModelKind::denoiser;
  if (s == "seqmodel") return ModelKind::seqmodel;
  fail(ErrorCode::Config, "unknown model kind '" + s + "'");
}

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::mlp: return "mlp";
    case Backbone::convnet: return "convnet";
    case Backbone::unet: return "unet";
    case Backbone::rnn: return "rnn";
  }
  return "unknown";
}

Backbone backbone_from_string(const std::string& s) {
  if (s == "mlp") return Backbone::mlp;
  if (s == "convnet") return Backbone::convnet;
  if (s == "unet") return Backbone::unet;
  if (s == "rnn") return Backbone::rnn;
  fail(ErrorCode::Config, "unknown backbone '" + s + "'");
}

int ArchSpec::feature_dim() const {
  switch (backbone) {
    case Backbone::mlp: return hidden.empty() ? input_dim : hidden.back();
    case Backbone::convnet: return hidden.back();
    case Backbone::unet: return hidden.at(2) * input_dim * input_dim;
    case Backbone::rnn: return hidden.at(1);
  }
  return 0;
}

void to_json(nlohmann::json& j, const ArchSpec& a) {
  j = nlohmann::json{{"kind", to_string(a.kind)},
                     {"backbone", to_string(a.backbone)},
                     {"input_dim", a.input_dim},
                     {"hidden", a.hidden},
                     {"classes", a.classes},
                     {"image_side", a.image_side}};
}

void from_json(const nlohmann::json& j, ArchSpec& a) {
  a.kind = model_kind_from_string(j.at("kind").get<std::string>());
  a.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  a.input_dim = j.at("input_dim").get<int>();
  a.hidden = j.at("hidden").get<std::vector<int>>();
  a.classes = j.value("classes", 0);
  a.image_side = j.value("image_side", 4);
}

namespace {

struct Layer {
  std::string name;
  std::vector<std::int64_t> shape;
};

std::vector<Layer> layout(const ArchSpec& a) {
  std::vector<Layer> out;
  auto dense = [&](const std::string& n, int o, int i) {
    out.push_back({n + ".weight", {o, i}});
    out.push_back({n + ".bias", {o}});
  };
  auto conv = [&](const std::string& n, int o, int i) {
    out.push_back({n + ".weight", {o, i, 3, 3}});
    out.push_back({n + ".bias", {o}});
  };
  switch (a.backbone) {
    case Backbone::mlp: {
      int in = a.input_dim;
      for (std::size_t l = 0; l < a.hidden.size(); ++l) {
        dense("fc" + std::to_string(l), a.hidden[l], in);
        in = a.hidden[l];
      }
      dense("head", a.classes, in);
      break;
    }
    case Backbone::convnet: {
      require(a.hidden.size() == 3, ErrorCode::InvalidArgument, "convnet needs three channel widths");
      require(a.image_side * a.image_side == a.input_dim, ErrorCode::InvalidArgument,
              "convnet input_dim must equal image_side^2");
      int in = 1;
      for (std::size_t l = 0; l < 3; ++l) {
        conv("conv" + std::to_string(l), a.hidden[l], in);
        in = a.hidden[l];
      }
      dense("head", a.classes, in);
      break;
    }
    case Backbone::unet: {
      require(a.hidden.size() == 3 && a.input_dim % 2 == 0, ErrorCode::InvalidArgument,
              "unet needs three channel widths and an even side");
      conv("down", a.hidden[0], 1);
      conv("mid", a.hidden[1], a.hidden[0]);
      dense("time", a.hidden[1], 2);
      conv("up", a.hidden[2], a.hidden[1] + a.hidden[0]);
      conv("out", 1, a.hidden[2]);
      break;
    }
    case Backbone::rnn: {
      require(a.hidden.size() == 2, ErrorCode::InvalidArgument, "rnn needs {embed, hidden}");
      out.push_back({"embed.weight", {a.input_dim, a.hidden[0]}});
      out.push_back({"rnn.input.weight", {a.hidden[1], a.hidden[0]}});
      out.push_back({"rnn.hidden.weight", {a.hidden[1], a.hidden[1]}});
      out.push_back({"rnn.bias", {a.hidden[1]}});
      dense("head", a.input_dim, a.hidden[1]);
      break;
    }
  }
  return out;
}

Tensor init_tensor(const Layer& l, const std::vector<Layer>& all, std::uint64_t seed) {
  Rng rng(derive_seed(seed, l.name));
  std::int64_t fan_in = 1;
  if (l.shape.size() >= 2) {
    for (std::size_t i = 1; i < l.shape.size(); ++i) fan_in *= l.shape[i];
  } else {
    // Bias: use the fan-in of the matching weight.
    const std::string stem = l.name.substr(0, l.name.rfind('.'));
    for (const auto& o : all) {
      if (o.name.rfind(stem, 0) == 0 && o.shape.size() >= 2) {
        fan_in = 1;
        for (std::size_t i = 1; i < o.shape.size(); ++i) fan_in *= o.shape[i];
        break;
      }
    }
  }
  const double bound = l.name == "embed.weight" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(l.shape);
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

const ad::Var& get(const Bindings& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) fail(ErrorCode::ShapeMismatch, "network parameter '" + name + "' missing");
  return it->second;
}

// Conv weights are stored (out, in, 3, 3) and used as (out, in*9) which is the
// same row-major memory; biases are stored (out) and used as a 1 x out row.
}  // namespace

ParameterVector init_params(const ArchSpec& arch, std::uint64_t seed) {
  const auto layers = layout(arch);
  ParameterVector pv;
  for (const auto& l : layers) pv.set(l.name, init_tensor(l, layers, seed));
  pv.round_to_float();
  return pv;
}

void reset_head(ParameterVector& params, const ArchSpec& arch, int classes, std::uint64_t seed) {
  require(arch.kind == ModelKind::classifier, ErrorCode::InvalidArgument, "reset_head: not a classifier");
  ArchSpec resized = arch;
  resized.classes = classes;
  const auto layers = layout(resized);
  for (const auto& l : layers) {
    if (l.name.rfind("head.", 0) == 0) params.set(l.name, init_tensor(l, layers, derive_seed(seed, "head-reset")));
  }
  params.round_to_float();
}

Bindings bind(const ParameterVector& params, bool trainable) {
  Bindings out;
  for (const auto& [name, t] : params.entries()) {
    Matrix m = t.matrix();
    out.emplace(name, trainable ? ad::leaf(std::move(m)) : ad::constant(std::move(m)));
  }
  return out;
}

ParameterVector gradients(const Bindings& bound, const ParameterVector& like) {
  ParameterVector g;
  for (const auto& [name, t] : like.entries()) {
    Tensor gt = Tensor::zeros(t.shape);
    auto it = bound.find(name);
    if (it != bound.end() && it->second.grad().size() == static_cast<Eigen::Index>(gt.size())) {
      const Matrix& gm = it->second.grad();
      std::copy(gm.data(), gm.data() + gm.size(), gt.data.begin());
    }
    g.set(name, std::move(gt));
  }
  return g;
}

ClassifierOutput classifier_forward(const ArchSpec& arch, const Bindings& p, const ad::Var& x) {
  require(arch.kind == ModelKind::classifier, ErrorCode::InvalidArgument, "classifier_forward: wrong kind");
  require(x.cols() == arch.input_dim, ErrorCode::ShapeMismatch,
          "classifier_forward: expected inputs of width " + std::to_string(arch.input_dim));
  ad::Var h = x;
  if (arch.backbone == Backbone::mlp) {
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
      const std::string n = "fc" + std::to_string(l);
      h = ad::relu(ad::linear(h, get(p, n + ".weight"), get(p, n + ".bias")));
    }
  } else if (arch.backbone == Backbone::convnet) {
    ad::MapShape s{1, arch.image_side, arch.image_side};
    for (std::size_t l = 0; l < 3; ++l) {
      const std::string n = "conv" + std::to_string(l);
      h = ad::relu(ad::conv3x3(h, get(p, n + ".weight"), get(p, n + ".bias"), s));
      s.channels = arch.hidden[l];
    }
    h = ad::spatial_mean(h, s);
  } else {
    fail(ErrorCode::InvalidArgument, "classifier_forward: unsupported backbone");
  }
  ad::Var logits = ad::linear(h, get(p, "head.weight"), get(p, "head.bias"));
  return {h, logits};
}

Matrix classifier_features(const ArchSpec& arch, const ParameterVector& params, const Matrix& x) {
  auto out = classifier_forward(arch, bind(params, false), ad::constant(x));
  return out.features.value();
}

Matrix classifier_probs(const ArchSpec& arch, const ParameterVector& params, const Matrix& x) {
  auto out = classifier_forward(arch, bind(params, false), ad::constant(x));
  return ad::softmax_rows(out.logits).value();
}

double classifier_accuracy(const ArchSpec& arch, const ParameterVector& params, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const Matrix probs = classifier_probs(arch, params, data.inputs);
  std::size_t hit = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index arg = 0;
    probs.row(r).maxCoeff(&arg);
    if (arg == data.labels[static_cast<std::size_t>(r)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

double alpha_bar(int t) {
  // Linear beta schedule 1e-4 .. 0.02 over kDiffusionSteps steps.
  double ab = 1.0;
  for (int s = 0; s <= t; ++s) {
    const double beta = 1e-4 + (0.02 - 1e-4) * s / (kDiffusionSteps - 1);
    ab *= 1.0 - beta;
  }
  return ab;
}

ad::MapShape upblock_shape(const ArchSpec& arch) { return {arch.hidden.at(2), arch.input_dim, arch.input_dim}; }

DenoiserOutput denoiser_forward(const ArchSpec& arch, const Bindings& p, const ad::Var& x_t,
                                const std::vector<int>& timesteps) {
  require(arch.backbone == Backbone::unet, ErrorCode::InvalidArgument, "denoiser_forward: not a unet");
  const int side = arch.input_dim;
  require(x_t.cols() == side * side, ErrorCode::ShapeMismatch, "denoiser_forward: image size");
  require(static_cast<Eigen::Index>(timesteps.size()) == x_t.rows(), ErrorCode::ShapeMismatch,
          "denoiser_forward: one timestep per sample");
  const int c0 = arch.hidden[0], c1 = arch.hidden[1];
  const ad::MapShape in{1, side, side};
  ad::Var h1 = ad::relu(ad::conv3x3(x_t, get(p, "down.weight"), get(p, "down.bias"), in));
  const ad::MapShape s1{c0, side, side};
  ad::Var pooled = ad::avg_pool2(h1, s1);
  const ad::MapShape s2{c0, side / 2, side / 2};
  Matrix tf(x_t.rows(), 2);
  for (Eigen::Index b = 0; b < tf.rows(); ++b) {
    const double f = static_cast<double>(timesteps[static_cast<std::size_t>(b)]) / kDiffusionSteps;
    tf(b, 0) = std::sin(M_PI * f);
    tf(b, 1) = std::cos(M_PI * f);
  }
  ad::Var tbias = ad::linear(ad::constant(std::move(tf)), get(p, "time.weight"), get(p, "time.bias"));
  ad::Var mid = ad::conv3x3(pooled, get(p, "mid.weight"), get(p, "mid.bias"), s2);
  const ad::MapShape s3{c1, side / 2, side / 2};
  mid = ad::relu(ad::add_channel_bias(mid, tbias, s3));
  ad::Var up = ad::upsample2(mid, s3);
  ad::Var cat = ad::concat_cols(up, h1);
  const ad::MapShape s4{c1 + c0, side, side};
  ad::Var feat = ad::relu(ad::conv3x3(cat, get(p, "up.weight"), get(p, "up.bias"), s4));
  ad::Var noise = ad::conv3x3(feat, get(p, "out.weight"), get(p, "out.bias"), upblock_shape(arch));
  return {feat, noise};
}

SeqOutput seq_forward(const ArchSpec& arch, const Bindings& p, const std::vector<std::vector<int>>& tokens) {
  require(arch.backbone == Backbone::rnn, ErrorCode::InvalidArgument, "seq_forward: not an rnn");
  require(!tokens.empty(), ErrorCode::InvalidArgument, "seq_forward: empty batch");
  const std::size_t len = tokens[0].size();
  for (const auto& s : tokens) {
    require(s.size() == len, ErrorCode::ShapeMismatch, "seq_forward: sequences must share a length");
  }
  const auto batch = static_cast<Eigen::Index>(tokens.size());
  SeqOutput out;
  ad::Var h = ad::constant(Matrix::Zero(batch, arch.hidden[1]));
  std::vector<int> ids(tokens.size());
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t b = 0; b < tokens.size(); ++b) ids[b] = tokens[b][t];
    ad::Var e = ad::gather_rows(get(p, "embed.weight"), ids);
    ad::Var pre = ad::add(ad::linear(e, get(p, "rnn.input.weight"), get(p, "rnn.bias")),
                          ad::matmul_nt(h, get(p, "rnn.hidden.weight")));
    h = ad::tanh(pre);
    out.hidden.push_back(h);
    out.logits.push_back(ad::linear(h, get(p, "head.weight"), get(p, "head.bias")));
  }
  return out;
}

void Adam::step(ParameterVector& params, const ParameterVector& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, t] : params.entries()) {
    if (!grads.contains(name)) continue;
    const auto& g = grads.at(name).data;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != g.size()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      t.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

}  // namespace mla
