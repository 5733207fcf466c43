#include "mla/paramspace.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mla {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'A', 'W'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

std::string shape_str(const std::vector<std::int64_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(ErrorCode::Io, "checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  require(shape_size(shape) == data.size(), ErrorCode::ShapeMismatch,
          "tensor data size does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

std::size_t shape_size(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Matrix Tensor::matrix() const {
  Eigen::Index rows = 1, cols = static_cast<Eigen::Index>(data.size());
  if (shape.size() >= 2) {
    rows = shape[0];
    cols = static_cast<Eigen::Index>(data.size()) / std::max<Eigen::Index>(rows, 1);
  }
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

Tensor Tensor::from_matrix(const Matrix& m, std::vector<std::int64_t> shape) {
  require(shape_size(shape) == static_cast<std::size_t>(m.size()), ErrorCode::ShapeMismatch,
          "matrix size does not match shape " + shape_str(shape));
  return Tensor(std::move(shape), std::vector<double>(m.data(), m.data() + m.size()));
}

const Tensor& ParameterVector::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorCode::ShapeMismatch, "missing parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterVector::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorCode::ShapeMismatch, "missing parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterVector::total_dim() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

ShapeMap ParameterVector::shapes() const {
  ShapeMap out;
  for (const auto& [k, t] : entries_) out[k] = t.shape;
  return out;
}

bool ParameterVector::all_finite() const {
  for (const auto& [_, t] : entries_) {
    for (double v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void ParameterVector::round_to_float() {
  for (auto& [_, t] : entries_) {
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
  }
}

bool ParameterVector::operator==(const ParameterVector& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [k, t] : entries_) {
    auto it = other.entries_.find(k);
    if (it == other.entries_.end() || it->second.shape != t.shape || it->second.data != t.data) return false;
  }
  return true;
}

AlignmentSpec align(const ShapeMap& a, const ShapeMap& b) {
  require(!a.empty() && !b.empty(), ErrorCode::EmptyIntersection, "align: empty parameter vector");
  AlignmentSpec spec;
  std::vector<std::string> names;
  for (const auto& [k, _] : a) names.push_back(k);
  for (const auto& [k, _] : b) {
    if (!a.count(k)) names.push_back(k);
  }
  std::sort(names.begin(), names.end());
  for (const auto& k : names) {
    auto ia = a.find(k);
    auto ib = b.find(k);
    if (ia != a.end() && ib != b.end() && ia->second == ib->second) {
      spec.shared_keys.push_back(k);
    } else {
      spec.excluded_keys.push_back(k);
    }
  }
  require(!spec.shared_keys.empty(), ErrorCode::EmptyIntersection, "align: no parameter shared with identical shape");
  return spec;
}

AlignmentSpec align(const ParameterVector& a, const ParameterVector& b) { return align(a.shapes(), b.shapes()); }

AlignmentSpec align(const ShapeMap& a, const ShapeMap& b, const ShapeMap& c) {
  AlignmentSpec ab = align(a, b);
  AlignmentSpec out;
  out.excluded_keys = ab.excluded_keys;
  for (const auto& k : ab.shared_keys) {
    auto it = c.find(k);
    if (it != c.end() && it->second == a.at(k)) {
      out.shared_keys.push_back(k);
    } else {
      out.excluded_keys.push_back(k);
    }
  }
  for (const auto& [k, _] : c) {
    if (!a.count(k) && !b.count(k)) out.excluded_keys.push_back(k);
  }
  std::sort(out.excluded_keys.begin(), out.excluded_keys.end());
  require(!out.shared_keys.empty(), ErrorCode::EmptyIntersection, "align: no parameter shared by all three vectors");
  return out;
}

ParameterVector evolution_model(const ParameterVector& theta0, const ParameterVector& thetaP,
                                const ParameterVector& thetaC, const AlignmentSpec& spec) {
  ParameterVector out = theta0;
  for (const auto& k : spec.shared_keys) {
    const Tensor& t0 = theta0.at(k);
    const Tensor& tp = thetaP.at(k);
    const Tensor& tc = thetaC.at(k);
    if (t0.shape != tp.shape || tp.shape != tc.shape) {
      fail(ErrorCode::ShapeMismatch, "evolution_model: '" + k + "' shapes " + shape_str(t0.shape) + " " +
                                         shape_str(tp.shape) + " " + shape_str(tc.shape));
    }
    Tensor& o = out.at(k);
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      const double v = t0.data[i] + tp.data[i] - tc.data[i];
      if (!std::isfinite(v)) fail(ErrorCode::NonFinite, "evolution_model: non-finite value in '" + k + "'");
      o.data[i] = v;
    }
  }
  return out;
}

bool is_prunable(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !(ends_with(".bias") || name.find("norm") != std::string::npos);
}

ParameterVector prune(const ParameterVector& theta, double rate) {
  require(rate >= 0.0 && rate < 1.0, ErrorCode::InvalidArgument, "prune: rate must lie in [0, 1)");
  ParameterVector out = theta;
  struct Slot {
    double mag;
    const std::string* name;
    std::size_t index;
  };
  std::vector<Slot> slots;
  for (const auto& [k, t] : theta.entries()) {
    if (!is_prunable(k)) continue;
    for (std::size_t i = 0; i < t.data.size(); ++i) slots.push_back({std::abs(t.data[i]), &k, i});
  }
  const auto n_zero = static_cast<std::size_t>(std::floor(rate * static_cast<double>(slots.size())));
  if (n_zero == 0) return out;
  // Map iteration already orders by (name, index), so a stable sort on magnitude
  // yields the (|value|, name, index) order.
  std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.mag < b.mag; });
  for (std::size_t i = 0; i < n_zero; ++i) out.at(*slots[i].name).data[slots[i].index] = 0.0;
  return out;
}

ParameterVector perturb(const ParameterVector& theta, double rho, std::uint64_t seed) {
  require(rho >= 0.0, ErrorCode::InvalidArgument, "perturb: rho must be non-negative");
  ParameterVector out = theta;
  if (rho == 0.0) return out;
  for (auto& [k, t] : out.entries()) {
    if (t.data.empty()) continue;
    double mean_abs = 0.0;
    for (double v : t.data) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(t.data.size());
    const double s = rho * mean_abs;
    Rng rng(derive_seed(seed, k));
    for (double& v : t.data) v += rng.uniform(-s, s);
  }
  require(out.all_finite(), ErrorCode::NonFinite, "perturb produced non-finite values");
  return out;
}

double param_distance(const ParameterVector& a, const ParameterVector& b) {
  const auto spec = align(a, b);
  double sq = 0.0;
  for (const auto& k : spec.shared_keys) {
    const auto& ta = a.at(k).data;
    const auto& tb = b.at(k).data;
    for (std::size_t i = 0; i < ta.size(); ++i) {
      const double d = ta[i] - tb[i];
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

std::string serialize_checkpoint(const ParameterVector& pv) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(pv.size()));
  for (const auto& [name, t] : pv.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint8_t>(out, kDtypeF32);
    for (double v : t.data) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

ParameterVector deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) fail(ErrorCode::Io, "not a checkpoint");
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(bytes, pos);
  require(version == kCheckpointVersion, ErrorCode::Io, "unsupported checkpoint version " + std::to_string(version));
  const auto count = take<std::uint32_t>(bytes, pos);
  ParameterVector pv;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) fail(ErrorCode::Io, "checkpoint truncated");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto ndim = take<std::uint32_t>(bytes, pos);
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(take<std::uint64_t>(bytes, pos));
    const auto dtype = take<std::uint8_t>(bytes, pos);
    require(dtype == kDtypeF32, ErrorCode::Io, "unsupported dtype in '" + name + "'");
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<float>(take<std::uint32_t>(bytes, pos));
    pv.set(name, Tensor(std::move(shape), std::move(data)));
  }
  return pv;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterVector& pv) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot write " + path.string());
  const auto bytes = serialize_checkpoint(pv);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ParameterVector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

void save_sidecar(const std::filesystem::path& path, const ParameterVector& pv) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["dtype"] = "float32";
  j["entries"] = nlohmann::json::array();
  for (const auto& [name, t] : pv.entries()) j["entries"].push_back({{"name", name}, {"shape", t.shape}});
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot write " + path.string());
  f << j.dump(2) << "\n";
}

ShapeMap load_sidecar(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot read " + path.string());
  const auto j = nlohmann::json::parse(f);
  ShapeMap out;
  for (const auto& e : j.at("entries")) out[e.at("name").get<std::string>()] = e.at("shape").get<std::vector<std::int64_t>>();
  return out;
}

}  // namespace mla
