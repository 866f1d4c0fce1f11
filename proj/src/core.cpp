#include "mmedit/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mmedit {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnknownConcept: return "UnknownConcept";
    case ErrorCode::ConceptNotPresent: return "ConceptNotPresent";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::SlotArityMismatch: return "SlotArityMismatch";
    case ErrorCode::MissingSpecialToken: return "MissingSpecialToken";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::MissingPair: return "MissingPair";
    case ErrorCode::ScoreOutOfRange: return "ScoreOutOfRange";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::NoImageCandidate: return "NoImageCandidate";
    case ErrorCode::InsufficientConcepts: return "InsufficientConcepts";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::CrcMismatch: return "CrcMismatch";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller; the sine branch is discarded so each draw consumes exactly
  // two words of the stream.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "Rng::index on empty range");
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

Vec Rng::normal_vec(Index n) {
  Vec v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal();
  return v;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Vec l2_normalize(const Vec& v) {
  if (v.size() < 1) throw Error(ErrorCode::InvalidArgument, "l2_normalize of empty vector");
  const double n = v.norm();
  if (!(n >= 1e-12)) throw Error(ErrorCode::ZeroVector, "cannot normalize a vector with norm < 1e-12");
  return v / n;
}

double cosine(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "cosine of vectors with sizes " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na >= 1e-12) || !(nb >= 1e-12)) throw Error(ErrorCode::ZeroVector, "cosine with a zero-norm operand");
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace mmedit
