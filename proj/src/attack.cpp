#include "lprobe/attack.hpp"

#include <cmath>

#include "lprobe/error.hpp"
#include "lprobe/rng.hpp"

namespace lprobe {

AttackConfig AttackConfig::imagenet_profile() { return AttackConfig{}; }

AttackConfig AttackConfig::mnist_profile() {
  AttackConfig c;
  c.learning_rate = 0.004f;
  c.initial_bound = 0.1;
  c.bound_multiplier = 1.0;
  c.bound_increment = 0.001;
  return c;
}

void AttackConfig::validate() const {
  if (!(initial_bound > 0.0)) throw ConfigError("initial_bound must be > 0");
  if (!(bound_multiplier >= 1.0)) throw ConfigError("bound_multiplier must be >= 1");
  if (!(bound_increment >= 0.0)) throw ConfigError("bound_increment must be >= 0");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be > 0");
  if (!(adam_beta1 >= 0.0f && adam_beta1 < 1.0f) || !(adam_beta2 >= 0.0f && adam_beta2 < 1.0f))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0f)) throw ConfigError("adam_eps must be > 0");
  if (max_bound && !(*max_bound > 0.0)) throw ConfigError("max_bound must be > 0");
}

std::string to_string(AttackStatus status) {
  switch (status) {
    case AttackStatus::skipped_misclassified: return "skipped_misclassified";
    case AttackStatus::success: return "success";
    case AttackStatus::exhausted: return "exhausted";
  }
  return "exhausted";
}

AttackStatus attack_status_from(const std::string& text) {
  if (text == "skipped_misclassified") return AttackStatus::skipped_misclassified;
  if (text == "success") return AttackStatus::success;
  if (text == "exhausted") return AttackStatus::exhausted;
  throw ConfigError("unknown attack status '" + text + "'");
}

float cw_loss(std::span<const float> output, std::size_t target) {
  if (target >= output.size())
    throw ShapeError("target " + std::to_string(target) + " out of range for " + std::to_string(output.size()) +
                     " classes");
  return output[argmax(output)] - output[target];
}

PerturbationSet project_norm(PerturbationSet perts, double bound) {
  if (!(bound > 0.0)) throw ConfigError("projection bound must be > 0");
  double norm = perts.flat_norm();
  if (norm <= bound) return perts;
  double scale = bound / norm;
  // Float rounding can leave the rescaled norm a hair above the bound; shrink until it is not.
  for (int attempt = 0; attempt < 8 && norm > bound; ++attempt) {
    PerturbationSet scaled = perts;
    for (std::size_t i = 0; i < scaled.size(); ++i) {
      if (!scaled.active(i)) continue;
      for (auto& v : scaled.mutable_tensor(i).data()) v = static_cast<float>(v * scale);
    }
    norm = scaled.flat_norm();
    if (norm <= bound) return scaled;
    scale *= (bound / norm) * (1.0 - 1e-7);
  }
  throw Error("projection failed to reach the bound");
}

double relax_bound(double bound, const AttackConfig& config) {
  return bound * config.bound_multiplier + config.bound_increment;
}

AdamState::AdamState(const PerturbationSet& shape_like, float lr, float beta1, float beta2, float eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (std::size_t i = 0; i < shape_like.size(); ++i) {
    const std::size_t n = shape_like.active(i) ? shape_like.tensor(i).size() : 0;
    m_.emplace_back(n, 0.0f);
    v_.emplace_back(n, 0.0f);
  }
}

void AdamState::step(PerturbationSet& perts, const std::vector<const Tensor*>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  for (std::size_t i = 0; i < perts.size(); ++i) {
    if (!perts.active(i)) continue;
    auto p = perts.mutable_tensor(i).data();
    auto g = grads.at(i)->data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      p[j] = static_cast<float>(p[j] - lr_ * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }
}

AttackResult attack(const Network& generator, const Network& classifier, const SigmaProfile& sigma,
                    const AttackTuple& tuple, const AttackConfig& config) {
  config.validate();
  const std::size_t classes = classifier.spec().class_count();
  if (tuple.t == tuple.y) throw ConfigError("target label equals intended label");
  if (tuple.y >= classes || tuple.t >= classes) throw ConfigError("label out of range");
  if (generator.output_shape() != classifier.spec().input_shape)
    throw ShapeError("generator output " + shape_to_string(generator.output_shape()) +
                     " does not match classifier input " + shape_to_string(classifier.spec().input_shape));

  const InjectionMask mask =
      config.layer_subset.size() == 0 ? InjectionMask::all(generator.injection_count()) : config.layer_subset;
  if (mask.size() != generator.injection_count()) throw ConfigError("layer subset does not match generator");

  AttackResult result{AttackRecord{}, generator.zero_perturbations(mask)};
  AttackRecord& rec = result.record;
  rec.tuple_id = tuple.tuple_id;
  rec.y = tuple.y;
  rec.t = tuple.t;
  rec.seed = tuple.seed;

  Shape batched{1};
  batched.insert(batched.end(), tuple.z.shape().begin(), tuple.z.shape().end());
  Tensor z = tuple.z.reshaped(batched);
  z.set_requires_grad(false);

  if (predict(classifier, generator.forward(z)).label != tuple.y) {
    rec.status = AttackStatus::skipped_misclassified;
    return result;
  }

  PerturbationSet& perts = result.perturbation;
  AdamState adam(perts, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
  double bound = config.initial_bound;

  for (std::size_t step = 0;; ++step) {
    Graph graph;
    Var input = graph.leaf(z);
    std::vector<std::optional<Var>> slots(perts.size());
    for (std::size_t i = 0; i < perts.size(); ++i)
      if (perts.active(i)) {
        Tensor p = perts.tensor(i);
        p.set_requires_grad(true);
        slots[i] = graph.leaf(std::move(p));
      }
    Var image = generator.build(graph, input, slots, sigma);
    Var logits = classifier.build(graph, image);
    const Tensor& out = graph.value(logits);

    if (argmax(out.data()) == tuple.t) {
      if (step == 0) throw Error("unperturbed image already predicted as target despite passing the skip check");
      rec.status = AttackStatus::success;
      rec.success_magnitude = perts.flat_norm();
      rec.steps_taken = step;
      return result;
    }
    rec.steps_taken = step;
    if (step == config.max_steps) {
      rec.status = AttackStatus::exhausted;
      rec.diagnostic = "step limit reached";
      return result;
    }
    if (config.max_bound && bound > *config.max_bound) {
      rec.status = AttackStatus::exhausted;
      rec.diagnostic = "magnitude bound limit reached";
      return result;
    }

    Var loss = graph.cw_margin(logits, tuple.t);
    if (!std::isfinite(graph.value(loss).item())) {
      rec.status = AttackStatus::exhausted;
      rec.diagnostic = "non-finite loss at step " + std::to_string(step);
      return result;
    }
    Gradients grads = graph.backward(loss);
    std::vector<const Tensor*> slot_grads(perts.size(), nullptr);
    for (std::size_t i = 0; i < perts.size(); ++i) {
      if (!slots[i]) continue;
      slot_grads[i] = &grads.of(*slots[i]);
      if (!slot_grads[i]->all_finite()) {
        rec.status = AttackStatus::exhausted;
        rec.diagnostic = "non-finite gradient at step " + std::to_string(step);
        return result;
      }
    }
    adam.step(perts, slot_grads);
    perts = project_norm(std::move(perts), bound);
    bound = relax_bound(bound, config);
  }
}

AttackTuple sample_tuple(std::size_t class_count, const Shape& latent_shape, std::size_t tuple_id,
                         std::uint64_t seed) {
  if (class_count < 2) throw ConfigError("need at least two labels to sample targeted tuples");
  auto engine = derived_engine(seed, tuple_id);
  AttackTuple tuple;
  tuple.tuple_id = tuple_id;
  tuple.seed = seed;
  tuple.y = std::uniform_int_distribution<std::size_t>(0, class_count - 1)(engine);
  const std::size_t other = std::uniform_int_distribution<std::size_t>(0, class_count - 2)(engine);
  tuple.t = other >= tuple.y ? other + 1 : other;
  tuple.z = standard_normal(latent_shape, engine);
  return tuple;
}

std::vector<AttackTuple> sample_tuples(std::size_t class_count, const Shape& latent_shape, std::size_t count,
                                       std::uint64_t seed) {
  std::vector<AttackTuple> tuples;
  tuples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) tuples.push_back(sample_tuple(class_count, latent_shape, i, seed));
  return tuples;
}

}  // namespace lprobe
