#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lprobe/analysis.hpp"
#include "lprobe/attack.hpp"
#include "lprobe/graph.hpp"
#include "lprobe/network.hpp"
#include "lprobe/tensor.hpp"

namespace lprobe::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

struct GradcheckReport {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst_abs = 0.0;

  double pass_rate() const { return checked ? static_cast<double>(passed) / checked : 0.0; }
};

inline constexpr double kFdStep = 1e-3;
inline constexpr double kFdRelTol = 1e-3;
inline constexpr double kFdAbsFloor = 1e-5;

inline bool fd_agrees(double analytic, double numeric) {
  const double tol = std::max(kFdAbsFloor, kFdRelTol * std::max(std::abs(analytic), std::abs(numeric)));
  return std::abs(analytic - numeric) <= tol;
}

/// Builds an output from leaf vars; leaves appear in the same order as `inputs`.
using OutputBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Central differences on `samples` coordinates drawn uniformly over every
/// element of the inputs listed in `wrt`. The checked scalar is a fixed random
/// weighting of the output, reduced in double outside the graph so that
/// outputs a coordinate does not touch cancel exactly. Scalar outputs are
/// used as they are.
inline GradcheckReport gradcheck(const OutputBuilder& build, std::vector<Tensor> inputs,
                                 const std::vector<std::size_t>& wrt, std::size_t samples, std::uint64_t seed) {
  std::optional<Tensor> weights;
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Tensor t = xs[i];
      t.set_requires_grad(grads && std::find(wrt.begin(), wrt.end(), i) != wrt.end());
      vars.push_back(g.leaf(std::move(t)));
    }
    Var out = build(g, vars);
    const Tensor& y = g.value(out);
    if (!weights) {
      std::mt19937_64 wrng(seed ^ 0x9e3779b97f4a7c15ull);
      weights = y.size() == 1 ? Tensor(y.shape(), 1.0f) : random_tensor(y.shape(), wrng);
    }
    const double value = dot(y, *weights);
    if (grads) {
      Var loss = y.size() == 1 ? g.sum(out) : g.sum(g.mul(out, g.constant(*weights)));
      Gradients gr = g.backward(loss);
      for (std::size_t i : wrt) grads->push_back(gr.of(vars[i]));
    }
    return value;
  };

  std::vector<Tensor> grads;
  evaluate(inputs, &grads);

  std::size_t total = 0;
  for (std::size_t i : wrt) total += inputs[i].size();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);

  GradcheckReport report;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = pick(rng);
    std::size_t which = 0;
    while (flat >= inputs[wrt[which]].size()) flat -= inputs[wrt[which++]].size();
    Tensor& x = inputs[wrt[which]];
    const float orig = x[flat];
    x[flat] = static_cast<float>(orig + kFdStep);
    const double plus = evaluate(inputs, nullptr);
    x[flat] = static_cast<float>(orig - kFdStep);
    const double minus = evaluate(inputs, nullptr);
    x[flat] = orig;
    const double numeric = (plus - minus) / (2.0 * kFdStep);
    const double analytic = grads[which][flat];
    ++report.checked;
    if (fd_agrees(analytic, numeric)) ++report.passed;
    report.worst_abs = std::max(report.worst_abs, std::abs(analytic - numeric));
  }
  return report;
}

inline std::shared_ptr<const Tensor> share(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

/// Single-boundary linear toy: the generator is the identity on a latent
/// vector with one injection point at the input, the classifier is a
/// bias-free dense layer.
struct LinearToy {
  Network generator;
  Network classifier;
  SigmaProfile sigma;
};

inline LinearToy make_linear_toy(const Tensor& w, const Tensor& sigma) {
  const std::size_t classes = w.dim(0), m = w.dim(1);
  NetworkSpec gspec;
  gspec.role = NetworkRole::generator;
  gspec.width = m;
  gspec.input_shape = {m};
  gspec.layers.push_back({"identity", DropoutLayer{0.0f}, {}});
  gspec.injection_points = {0};
  Network gen(std::move(gspec), {});

  NetworkSpec cspec;
  cspec.role = NetworkRole::classifier;
  cspec.width = classes;
  cspec.input_shape = {m};
  cspec.layers.push_back({"score", DenseLayer{m, classes, "w", "b"}, {}});
  WeightMap weights{{"w", share(w)}, {"b", share(Tensor({classes}))}};
  Network cls(std::move(cspec), std::move(weights));

  SigmaProfile s;
  s.sigma.push_back(sigma);
  s.sample_count = 2;
  return {std::move(gen), std::move(cls), std::move(s)};
}

/// Smallest ||p|| with (w_t - w_y) . (z + p * sigma) >= 0.
inline double linear_min_norm(const Tensor& w, const Tensor& sigma, const Tensor& z, std::size_t y, std::size_t t) {
  const std::size_t m = w.dim(1);
  double margin = 0.0, dir = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double d = static_cast<double>(w[t * m + j]) - w[y * m + j];
    margin += d * z[j];
    dir += (d * sigma[j]) * (d * sigma[j]);
  }
  return std::max(0.0, -margin) / std::sqrt(dir);
}

// Two-class toy whose direction (w_t - w_y) ⊙ σ has equal-magnitude entries,
// with z placed so that the minimal norm is `radius`.
struct EqualToy {
  Tensor w, sigma, z;
};

inline EqualToy equal_toy(std::mt19937_64& rng, std::size_t m, double radius) {
  EqualToy toy{Tensor({2, m}), random_tensor({m}, rng, 0.5f, 2.0f), random_tensor({m}, rng)};
  const double c = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  for (std::size_t j = 0; j < m; ++j) toy.w[m + j] = static_cast<float>((rng() & 1 ? c : -c) / toy.sigma[j]);
  double dd = 0.0, dz = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    dd += static_cast<double>(toy.w[m + j]) * toy.w[m + j];
    dz += static_cast<double>(toy.w[m + j]) * toy.z[j];
  }
  const double want = -radius * c * std::sqrt(static_cast<double>(m));
  for (std::size_t j = 0; j < m; ++j) toy.z[j] = static_cast<float>(toy.z[j] + (want - dz) * toy.w[m + j] / dd);
  return toy;
}

// ---- analysis oracles ----

inline bool counted_success(const AttackRecord& r, const DispositionMap* d) {
  if (r.status != AttackStatus::success) return false;
  if (!d) return true;
  return d->at(image_id(r)) == Outcome::success;
}

inline bool in_denominator(const AttackRecord& r, const DispositionMap* d) {
  if (r.status == AttackStatus::skipped_misclassified) return false;
  if (d && r.status == AttackStatus::success && d->at(image_id(r)) == Outcome::unpert_rejected) return false;
  return true;
}

struct OracleCurve {
  std::vector<double> grid;
  std::vector<double> proportion;
  std::size_t denominator = 0;
};

inline OracleCurve oracle_curve(const std::vector<AttackRecord>& records, const DispositionMap* d,
                                std::optional<double> cap = std::nullopt) {
  OracleCurve c;
  std::vector<double> mags;
  for (const auto& r : records) {
    if (!in_denominator(r, d)) continue;
    ++c.denominator;
    if (counted_success(r, d) && (!cap || r.success_magnitude <= *cap)) mags.push_back(r.success_magnitude);
  }
  std::vector<double> grid = mags;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  for (double m : grid) {
    std::size_t n = 0;
    for (double v : mags) n += v <= m;
    c.grid.push_back(m);
    c.proportion.push_back(static_cast<double>(n) / static_cast<double>(c.denominator));
  }
  return c;
}

struct OracleCell {
  double sum = 0.0;
  std::size_t count = 0;
};

inline std::map<std::pair<std::string, std::string>, OracleCell> oracle_table(const std::vector<AttackRecord>& records,
                                                                              const DispositionMap* d) {
  std::map<std::pair<std::string, std::string>, OracleCell> cells;
  for (const auto& r : records) {
    auto& c = cells[{r.classifier, r.layer_subset}];
    if (counted_success(r, d)) {
      c.sum += r.success_magnitude;
      ++c.count;
    }
  }
  return cells;
}

/// Disposition rule written out longhand over tallies.
inline Outcome oracle_disposition(const std::vector<int>& stage1, const std::vector<int>& stage2) {
  int keep = 0;
  for (int c : stage1) keep += c == 1;
  if (2 * keep <= static_cast<int>(stage1.size())) return Outcome::unpert_rejected;
  int still = 0;
  for (int c : stage2) still += c == 1;
  return 2 * still > keep ? Outcome::success : Outcome::class_changed;
}

/// Random records with a matching disposition map. Magnitudes come from a
/// small set so ties are common.
inline std::pair<std::vector<AttackRecord>, DispositionMap> random_record_set(std::mt19937_64& rng,
                                                                               std::size_t count) {
  std::vector<AttackRecord> records;
  DispositionMap disp;
  std::uniform_int_distribution<int> status(0, 5), outcome(0, 2), mag(1, 12), cls(0, 1), sub(0, 2);
  const char* subsets[] = {"all", "first", "last"};
  for (std::size_t i = 0; i < count; ++i) {
    AttackRecord r;
    r.tuple_id = i;
    r.classifier = cls(rng) ? "b" : "a";
    r.layer_subset = subsets[sub(rng)];
    const int s = status(rng);
    r.status = s == 0 ? AttackStatus::skipped_misclassified : s == 1 ? AttackStatus::exhausted : AttackStatus::success;
    if (r.status == AttackStatus::success) {
      r.success_magnitude = 0.25 * mag(rng);
      disp[image_id(r)] = static_cast<Outcome>(outcome(rng));
    }
    records.push_back(r);
  }
  return {records, disp};
}

}  // namespace lprobe::testing
