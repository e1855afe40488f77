#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lprobe/network.hpp"

namespace lprobe {

inline constexpr float kDefaultSigmaFloor = 1e-6f;
inline constexpr std::size_t kDefaultCalibrationSamples = 256;

/// Running per-neuron sum and sum of squares over samples of one activation
/// shape. Population standard deviation on finalize.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(Shape shape);

  /// Adds every sample of a batch [N, shape...].
  void add_batch(const Tensor& batch);
  void merge(const MomentAccumulator& other);

  std::size_t count() const { return count_; }
  /// max(floor, sqrt(E[x²] − E[x]²)) per neuron.
  Tensor finalize(float floor) const;

 private:
  Shape shape_;
  std::vector<double> sum_, sum_sq_;
  std::size_t count_ = 0;
};

struct CalibrationOptions {
  std::size_t num_samples = kDefaultCalibrationSamples;
  std::uint64_t seed = 0;
  float floor = kDefaultSigmaFloor;
  std::size_t workers = 1;
};

/// Estimates σ at every injection point from unperturbed passes with z ~ N(0, I).
/// The result is independent of `workers`.
SigmaProfile calibrate(const Network& generator, const CalibrationOptions& options);

/// σ = 1 everywhere (no scaling).
SigmaProfile unit_sigma(const Network& generator);

}  // namespace lprobe
