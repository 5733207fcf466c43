#include "mla/datasets.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <algorithm>
#include <cmath>

namespace mla {

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic_blobs: return "synthetic_blobs";
    case DatasetKind::synthetic_images: return "synthetic_images";
    case DatasetKind::synthetic_text: return "synthetic_text";
  }
  return "unknown";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "synthetic_blobs") return DatasetKind::synthetic_blobs;
  if (s == "synthetic_images") return DatasetKind::synthetic_images;
  if (s == "synthetic_text") return DatasetKind::synthetic_text;
  fail(ErrorCode::Config, "unknown dataset kind '" + s + "'");
}

void to_json(nlohmann::json& j, const DatasetRef& d) {
  j = nlohmann::json{{"name", d.name},
                     {"kind", to_string(d.kind)},
                     {"seed", d.seed},
                     {"class_count", d.class_count},
                     {"dim", d.dim},
                     {"samples_per_class", d.samples_per_class},
                     {"separation", d.separation},
                     {"noise", d.noise}};
}

void from_json(const nlohmann::json& j, DatasetRef& d) {
  d.name = j.at("name").get<std::string>();
  d.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
  d.seed = j.at("seed").get<std::uint64_t>();
  d.class_count = j.value("class_count", 0);
  d.dim = j.value("dim", 16);
  d.samples_per_class = j.value("samples_per_class", 100);
  d.separation = j.value("separation", 3.0);
  d.noise = j.value("noise", 1.0);
}

namespace {

Dataset blobs(const DatasetRef& ref) {
  require(ref.class_count >= 1 && ref.dim >= 1 && ref.samples_per_class >= 1, ErrorCode::InvalidArgument,
          "blobs: class_count, dim and samples_per_class must be positive");
  Rng rng(ref.seed);
  Matrix means(ref.class_count, ref.dim);
  for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = rng.normal(0.0, ref.separation);
  Dataset d;
  d.class_count = ref.class_count;
  const int n = ref.class_count * ref.samples_per_class;
  d.inputs.resize(n, ref.dim);
  d.labels.resize(static_cast<std::size_t>(n));
  // Class-major order: all of class 0, then class 1, ...
  for (int c = 0; c < ref.class_count; ++c) {
    for (int s = 0; s < ref.samples_per_class; ++s) {
      const int row = c * ref.samples_per_class + s;
      for (int f = 0; f < ref.dim; ++f) d.inputs(row, f) = means(c, f) + rng.normal(0.0, ref.noise);
      d.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  d.value_min = d.inputs.minCoeff();
  d.value_max = d.inputs.maxCoeff();
  return d;
}

Dataset images(const DatasetRef& ref) {
  require(ref.class_count >= 1 && ref.dim >= 2 && ref.samples_per_class >= 1, ErrorCode::InvalidArgument,
          "images: class_count, dim and samples_per_class must be positive");
  Rng rng(ref.seed);
  const int side = ref.dim;
  const int px = side * side;
  Matrix protos(ref.class_count, px);
  for (int c = 0; c < ref.class_count; ++c) {
    Matrix field(side, side);
    for (Eigen::Index i = 0; i < field.size(); ++i) field.data()[i] = rng.normal();
    // 3x3 box blur gives spatially coherent prototypes.
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= side || xx < 0 || xx >= side) continue;
            acc += field(yy, xx);
            ++cnt;
          }
        }
        protos(c, y * side + x) = acc / cnt;
      }
    }
    const double mx = protos.row(c).cwiseAbs().maxCoeff();
    protos.row(c) *= std::min(1.0, ref.separation / 3.0) / std::max(mx, 1e-9);
  }
  Dataset d;
  d.class_count = ref.class_count;
  const int n = ref.class_count * ref.samples_per_class;
  d.inputs.resize(n, px);
  d.labels.resize(static_cast<std::size_t>(n));
  for (int c = 0; c < ref.class_count; ++c) {
    for (int s = 0; s < ref.samples_per_class; ++s) {
      const int row = c * ref.samples_per_class + s;
      for (int p = 0; p < px; ++p) {
        d.inputs(row, p) = std::clamp(protos(c, p) + rng.normal(0.0, 0.3 * ref.noise), -1.0, 1.0);
      }
      d.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  d.value_min = -1.0;
  d.value_max = 1.0;
  return d;
}

}  // namespace

Dataset generate(const DatasetRef& ref) {
  switch (ref.kind) {
    case DatasetKind::synthetic_blobs: return blobs(ref);
    case DatasetKind::synthetic_images: return images(ref);
    case DatasetKind::synthetic_text: break;
  }
  fail(ErrorCode::InvalidArgument, "generate: text datasets are produced by text::generate_examples");
}

namespace text {

std::string to_string(Domain d) {
  switch (d) {
    case Domain::qa: return "qa";
    case Domain::arithmetic: return "arithmetic";
    case Domain::sequence: return "sequence";
  }
  return "unknown";
}

Domain domain_from_string(const std::string& s) {
  if (s == "qa") return Domain::qa;
  if (s == "arithmetic") return Domain::arithmetic;
  if (s == "sequence") return Domain::sequence;
  fail(ErrorCode::Config, "unknown prompt domain '" + s + "'");
}

std::string decode(const std::vector<int>& tokens) {
  static const char* kChars = "0123456789+=?;abcdefghij>";
  std::string out;
  for (int t : tokens) out.push_back(t >= 0 && t < kVocab ? kChars[t] : '#');
  return out;
}

namespace {

struct Rules {
  int shift;
  int step_twist;
  std::vector<int> letter_map;
};

Rules rules_for(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "text-rules"));
  Rules r;
  r.shift = static_cast<int>(rng.index(10));
  r.step_twist = static_cast<int>(rng.index(3));
  auto perm = rng.permutation(10);
  r.letter_map.assign(perm.begin(), perm.end());
  return r;
}

Example make_example(Domain d, int a, int b, const Rules& r) {
  Example ex{d, {}, {}};
  switch (d) {
    case Domain::arithmetic:
      ex.prompt = {a, kPlus, b, kEquals};
      ex.response = {(a + b + r.shift) % 10, kEnd};
      break;
    case Domain::qa:
      ex.prompt = {kLetterA + a, kQuery};
      ex.response = {kLetterA + r.letter_map[static_cast<std::size_t>(a)], kLetterA + r.letter_map[static_cast<std::size_t>(b)], kEnd};
      break;
    case Domain::sequence: {
      const int step = 1 + b % 3;
      ex.prompt = {kSeqMark, a, (a + step) % 10};
      const int s2 = step + r.step_twist;
      int last = (a + step) % 10;
      for (int i = 0; i < 3; ++i) {
        last = (last + s2) % 10;
        ex.response.push_back(last);
      }
      ex.response.push_back(kEnd);
      break;
    }
  }
  return ex;
}

}  // namespace

std::vector<Example> generate_examples(const DatasetRef& ref) {
  require(ref.kind == DatasetKind::synthetic_text, ErrorCode::InvalidArgument, "generate_examples: not a text dataset");
  require(ref.samples_per_class >= 1, ErrorCode::InvalidArgument, "generate_examples: need at least one sample");
  const Rules rules = rules_for(ref.seed);
  Rng rng(ref.seed);
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(ref.samples_per_class));
  for (int i = 0; i < ref.samples_per_class; ++i) {
    const auto d = static_cast<Domain>(i % 3);
    const int a = static_cast<int>(rng.index(10));
    const int b = static_cast<int>(rng.index(10));
    out.push_back(make_example(d, a, b, rules));
  }
  return out;
}

std::vector<int> probe_prompt(Domain d, int index) {
  // Fixed enumeration of the prompt space; index wraps.
  const int a = (index * 7 + 3) % 10;
  const int b = (index * 3 + 1) % 10;
  return make_example(d, a, b, Rules{0, 0, std::vector<int>(10, 0)}).prompt;
}

}  // namespace text

}  // namespace mla
