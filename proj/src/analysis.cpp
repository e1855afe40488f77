#include "lprobe/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "lprobe/error.hpp"

namespace lprobe {

namespace {

const Outcome* find_outcome(const DispositionMap* dispositions, const AttackRecord& r) {
  if (!dispositions) return nullptr;
  auto it = dispositions->find(image_id(r));
  return it == dispositions->end() ? nullptr : &it->second;
}

// Whether a success record counts toward the numerator.
bool counted_success(const AttackRecord& r, const DispositionMap* dispositions, std::optional<double> cap) {
  if (r.status != AttackStatus::success) return false;
  if (cap && r.success_magnitude > *cap) return false;
  if (!dispositions) return true;
  const Outcome* o = find_outcome(dispositions, r);
  if (!o) throw Error("success record " + image_id(r) + " has no disposition");
  return *o == Outcome::success;
}

}  // namespace

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::unpert_rejected: return "unpert_rejected";
    case Outcome::success: return "success";
    case Outcome::class_changed: return "class_changed";
  }
  return "unpert_rejected";
}

Outcome outcome_from(const std::string& text) {
  if (text == "unpert_rejected") return Outcome::unpert_rejected;
  if (text == "success") return Outcome::success;
  if (text == "class_changed") return Outcome::class_changed;
  throw ConfigError("unknown disposition '" + text + "'");
}

std::string image_id(const AttackRecord& record) {
  return record.classifier + "/" + record.layer_subset + "/" + std::to_string(record.tuple_id);
}

CurveSeries build_curve(std::span<const AttackRecord> records, const DispositionMap* dispositions,
                        std::size_t group_size, std::optional<double> magnitude_cap) {
  if (records.empty()) throw Error("cannot build a curve from an empty record set");
  if (group_size == 0) throw ConfigError("group_size must be positive");

  CurveSeries curve;
  curve.group_size = group_size;
  std::vector<const AttackRecord*> included;
  for (const auto& r : records) {
    if (r.status == AttackStatus::skipped_misclassified) {
      ++curve.skipped;
      continue;
    }
    const Outcome* o = find_outcome(dispositions, r);
    if (o && *o == Outcome::unpert_rejected) {
      ++curve.unpert_rejected;
      continue;
    }
    included.push_back(&r);
  }
  curve.denominator = included.size();
  if (included.empty()) return curve;

  std::vector<double> mags;
  for (const auto* r : included)
    if (counted_success(*r, dispositions, magnitude_cap)) mags.push_back(r->success_magnitude);
  curve.counted_successes = mags.size();
  std::sort(mags.begin(), mags.end());
  curve.grid = mags;
  curve.grid.erase(std::unique(curve.grid.begin(), curve.grid.end()), curve.grid.end());

  auto proportion_at = [&](std::span<const AttackRecord* const> group) {
    std::vector<double> group_mags;
    for (const auto* r : group)
      if (counted_success(*r, dispositions, magnitude_cap)) group_mags.push_back(r->success_magnitude);
    std::sort(group_mags.begin(), group_mags.end());
    std::vector<double> out;
    out.reserve(curve.grid.size());
    for (double m : curve.grid) {
      const auto n = std::upper_bound(group_mags.begin(), group_mags.end(), m) - group_mags.begin();
      out.push_back(static_cast<double>(n) / static_cast<double>(group.size()));
    }
    return out;
  };

  curve.proportion = proportion_at(included);

  std::vector<std::vector<double>> groups;
  for (std::size_t begin = 0; begin < included.size(); begin += group_size) {
    const std::size_t len = std::min(group_size, included.size() - begin);
    groups.push_back(proportion_at(std::span(included).subspan(begin, len)));
    if (len < group_size) curve.last_group_incomplete = true;
  }
  curve.group_count = groups.size();
  const double g = static_cast<double>(groups.size());
  curve.mean.assign(curve.grid.size(), 0.0);
  curve.stddev.assign(curve.grid.size(), 0.0);
  for (std::size_t k = 0; k < curve.grid.size(); ++k) {
    double sum = 0.0;
    for (const auto& grp : groups) sum += grp[k];
    const double mean = sum / g;
    double sq = 0.0;
    for (const auto& grp : groups) sq += (grp[k] - mean) * (grp[k] - mean);
    curve.mean[k] = mean;
    curve.stddev[k] = std::sqrt(sq / g);
  }
  return curve;
}

std::vector<MagnitudeCell> mean_magnitude_table(std::span<const AttackRecord> records,
                                                const DispositionMap* dispositions) {
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> cells;
  for (const auto& r : records) {
    auto& cell = cells[{r.classifier, r.layer_subset}];
    if (r.status == AttackStatus::skipped_misclassified) continue;
    const Outcome* o = find_outcome(dispositions, r);
    if (o && *o == Outcome::unpert_rejected) continue;
    if (!counted_success(r, dispositions, std::nullopt)) continue;
    cell.first += r.success_magnitude;
    ++cell.second;
  }
  std::vector<MagnitudeCell> table;
  for (const auto& [key, acc] : cells) {
    MagnitudeCell c{key.first, key.second, std::nullopt, acc.second};
    if (acc.second > 0) c.mean = acc.first / static_cast<double>(acc.second);
    table.push_back(std::move(c));
  }
  return table;
}

std::vector<TradeoffPoint> threshold_tradeoff(std::span<const AttackRecord> records,
                                              const DispositionMap& dispositions,
                                              const std::vector<double>& bound_grid) {
  if (!std::is_sorted(bound_grid.begin(), bound_grid.end()))
    throw ConfigError("bound grid must be sorted in nondecreasing order");
  std::vector<double> ok, changed;
  for (const auto& r : records) {
    if (r.status != AttackStatus::success) continue;
    const Outcome* o = find_outcome(&dispositions, r);
    if (!o) throw Error("success record " + image_id(r) + " has no disposition");
    if (*o == Outcome::success) ok.push_back(r.success_magnitude);
    if (*o == Outcome::class_changed) changed.push_back(r.success_magnitude);
  }
  std::sort(ok.begin(), ok.end());
  std::sort(changed.begin(), changed.end());
  std::vector<TradeoffPoint> out;
  for (double b : bound_grid) {
    out.push_back({b, static_cast<std::size_t>(std::upper_bound(ok.begin(), ok.end(), b) - ok.begin()),
                   static_cast<std::size_t>(std::upper_bound(changed.begin(), changed.end(), b) - changed.begin())});
  }
  return out;
}

}  // namespace lprobe
