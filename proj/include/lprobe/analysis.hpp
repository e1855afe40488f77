#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lprobe/attack.hpp"

namespace lprobe {

enum class Outcome { unpert_rejected, success, class_changed };

std::string to_string(Outcome outcome);
Outcome outcome_from(const std::string& text);

/// Human-vote outcome for one perturbed image.
struct Disposition {
  std::string image_id;
  Outcome outcome = Outcome::unpert_rejected;
  /// Vote counts per choice (index 0 = choice 1) for each stage.
  std::array<std::size_t, 4> unperturbed_tally{};
  std::array<std::size_t, 4> perturbed_tally{};
};

using DispositionMap = std::map<std::string, Outcome>;

/// Identifier linking an attack record to its labeled image: classifier/subset/tuple.
std::string image_id(const AttackRecord& record);

inline constexpr std::size_t kDefaultGroupSize = 30;

/// Cumulative success proportion against perturbation magnitude.
struct CurveSeries {
  /// Sorted distinct magnitudes of counted successes.
  std::vector<double> grid;
  /// Proportion over all included records at each grid point.
  std::vector<double> proportion;
  /// Mean and population standard deviation across groups at each grid point.
  std::vector<double> mean;
  std::vector<double> stddev;
  std::size_t denominator = 0;
  std::size_t counted_successes = 0;
  std::size_t group_size = kDefaultGroupSize;
  std::size_t group_count = 0;
  /// The last group holds fewer than group_size records.
  bool last_group_incomplete = false;
  std::size_t skipped = 0;
  std::size_t unpert_rejected = 0;
};

/// Builds the curve. With `dispositions` null the curve is human-free: every
/// success counts, optionally only up to `magnitude_cap`.
CurveSeries build_curve(std::span<const AttackRecord> records, const DispositionMap* dispositions,
                        std::size_t group_size = kDefaultGroupSize,
                        std::optional<double> magnitude_cap = std::nullopt);

struct MagnitudeCell {
  std::string classifier;
  std::string layer_subset;
  /// Absent when the cell has no counted success.
  std::optional<double> mean;
  std::size_t count = 0;
};

/// Mean success magnitude per classifier × layer subset over disposition-success records.
std::vector<MagnitudeCell> mean_magnitude_table(std::span<const AttackRecord> records,
                                                const DispositionMap* dispositions);

struct TradeoffPoint {
  double bound = 0.0;
  std::size_t success_count = 0;
  std::size_t class_changed_count = 0;
};

/// For each bound, successes with magnitude ≤ bound split by disposition.
/// The grid must be nondecreasing.
std::vector<TradeoffPoint> threshold_tradeoff(std::span<const AttackRecord> records,
                                              const DispositionMap& dispositions,
                                              const std::vector<double>& bound_grid);

}  // namespace lprobe
