#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mmedit {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using Index = Eigen::Index;

enum class ErrorCode {
  InvalidArgument,
  ZeroVector,
  DimensionMismatch,
  UnknownConcept,
  ConceptNotPresent,
  UnknownToken,
  SlotArityMismatch,
  MissingSpecialToken,
  ShapeMismatch,
  NonFiniteLoss,
  EmptyBatch,
  MissingPair,
  ScoreOutOfRange,
  StepOutOfRange,
  NoImageCandidate,
  InsufficientConcepts,
  MalformedRecord,
  EmptyCorpus,
  MissingCheckpoint,
  BadMagic,
  CrcMismatch,
  VersionUnsupported,
  Io,
};

std::string_view to_string(ErrorCode code);

// Every failure in the library is reported through this type; `code()` is
// what callers and tests branch on, the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Deterministic RNG. Uniform and normal draws are derived from the raw
// mt19937_64 stream by hand so outputs do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  Vec normal_vec(Index n);

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// v / ||v||_2. Throws ZeroVector when ||v|| < 1e-12.
Vec l2_normalize(const Vec& v);
double cosine(const Vec& a, const Vec& b);

bool all_finite(const Mat& m);

}  // namespace mmedit
