#pragma once

// Deterministic synthetic data generators addressed by DatasetRef.

#include "mla/autograd.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mla {

enum class DatasetKind { synthetic_blobs, synthetic_images, synthetic_text };

struct DatasetRef {
  std::string name;
  DatasetKind kind = DatasetKind::synthetic_blobs;
  std::uint64_t seed = 0;
  int class_count = 0;         // blobs/images; ignored for text
  int dim = 16;                // blobs: feature dim; images: side length
  int samples_per_class = 100; // text: total sample count
  double separation = 3.0;     // blobs: std of class means; images: prototype contrast
  double noise = 1.0;

  bool operator==(const DatasetRef&) const = default;
};

void to_json(nlohmann::json& j, const DatasetRef& d);
void from_json(const nlohmann::json& j, DatasetRef& d);
std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

// Rows are samples; labels index classes. For images each row is a 1 x side x side map.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  int class_count = 0;
  double value_min = 0.0;
  double value_max = 0.0;

  std::size_t size() const { return labels.size(); }
};

Dataset generate(const DatasetRef& ref);

// Text domain -----------------------------------------------------------

namespace text {

// 0-9 digits, then operators, then letters a-j.
inline constexpr int kVocab = 25;
inline constexpr int kPlus = 10;
inline constexpr int kEquals = 11;
inline constexpr int kQuery = 12;
inline constexpr int kEnd = 13;
inline constexpr int kLetterA = 14;
inline constexpr int kSeqMark = 24;

enum class Domain { qa, arithmetic, sequence };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);
std::string decode(const std::vector<int>& tokens);

struct Example {
  Domain domain;
  std::vector<int> prompt;
  std::vector<int> response;  // terminated by kEnd
};

// The dataset seed fixes the task rules (answer shift, letter mapping, step twist).
std::vector<Example> generate_examples(const DatasetRef& ref);

// Prompt i of a domain; independent of any dataset seed.
std::vector<int> probe_prompt(Domain d, int index);

}  // namespace text

}  // namespace mla
