#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lprobe/network.hpp"

namespace lprobe {

struct AttackConfig {
  float learning_rate = 0.03f;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  double initial_bound = 1.0;
  double bound_multiplier = 1.03;
  double bound_increment = 0.1;
  std::size_t max_steps = 2000;
  /// Fixed upper bound on the magnitude: the run stops once the relaxed
  /// bound would exceed it.
  std::optional<double> max_bound;
  /// Active injection slots; an empty mask means every slot.
  InjectionMask layer_subset;

  /// Adam lr 0.03, bound 1.0 relaxed by ×1.03 then +0.1 per step.
  static AttackConfig imagenet_profile();
  /// Adam lr 0.004, bound 0.1 relaxed by +0.001 per step.
  static AttackConfig mnist_profile();

  void validate() const;
};

enum class AttackStatus { skipped_misclassified, success, exhausted };

std::string to_string(AttackStatus status);
AttackStatus attack_status_from(const std::string& text);

/// Outcome of attacking one (y, z, t) tuple under one layer subset.
struct AttackRecord {
  std::size_t tuple_id = 0;
  std::size_t y = 0;
  std::size_t t = 0;
  AttackStatus status = AttackStatus::exhausted;
  /// flat_norm of the perturbation at first success; 0 unless status is success.
  double success_magnitude = 0.0;
  std::size_t steps_taken = 0;
  std::string layer_subset;
  std::string classifier;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string diagnostic;
};

struct AttackTuple {
  std::size_t tuple_id = 0;
  std::size_t y = 0;
  std::size_t t = 0;
  /// Latent vector with the generator's per-sample input shape.
  Tensor z;
  std::uint64_t seed = 0;
};

/// max_j out_j − out_t. Zero exactly when t attains the maximum.
float cw_loss(std::span<const float> output, std::size_t target);

/// Rescales active slots so that flat_norm ≤ bound; unchanged when already inside.
PerturbationSet project_norm(PerturbationSet perts, double bound);

double relax_bound(double bound, const AttackConfig& config);

/// Adam over the active slots of a PerturbationSet. Moment estimates persist
/// across bound relaxations.
class AdamState {
 public:
  AdamState(const PerturbationSet& shape_like, float lr, float beta1, float beta2, float eps);
  void step(PerturbationSet& perts, const std::vector<const Tensor*>& grads);
  std::size_t steps() const { return t_; }

 private:
  float lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct AttackResult {
  AttackRecord record;
  /// Perturbation at termination (p* on success).
  PerturbationSet perturbation;
};

/// Searches for the smallest-norm perturbation making `classifier` predict t.
AttackResult attack(const Network& generator, const Network& classifier, const SigmaProfile& sigma,
                    const AttackTuple& tuple, const AttackConfig& config);

/// Deterministic (y, z, t) tuples: y, t uniform with t ≠ y, z ~ N(0, I).
/// Tuple i depends only on (seed, i), so prefixes of longer lists agree.
std::vector<AttackTuple> sample_tuples(std::size_t class_count, const Shape& latent_shape, std::size_t count,
                                       std::uint64_t seed);
AttackTuple sample_tuple(std::size_t class_count, const Shape& latent_shape, std::size_t tuple_id,
                         std::uint64_t seed);

}  // namespace lprobe
