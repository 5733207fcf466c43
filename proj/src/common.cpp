#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cstdio>

namespace mla {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyIntersection: return "EmptyIntersection";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DivergedTraining: return "DivergedTraining";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::BoundaryNotFound: return "BoundaryNotFound";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::InsufficientPairs: return "InsufficientPairs";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::MissingScenarioData: return "MissingScenarioData";
    case ErrorCode::GenerationOverflow: return "GenerationOverflow";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Config: return "ConfigError";
    case ErrorCode::Io: return "IoError";
  }
  return "Unknown";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer over the combined state
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return derive_seed(seed, fnv1a(label));
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace mla
