#include "lprobe/sigma.hpp"

#include <cmath>
#include <thread>

#include "lprobe/error.hpp"
#include "lprobe/rng.hpp"

namespace lprobe {

namespace {

// Samples are reduced in fixed-size chunks combined in chunk order so the
// floating-point summation order never depends on the worker count.
constexpr std::size_t kChunk = 32;

}  // namespace

MomentAccumulator::MomentAccumulator(Shape shape)
    : shape_(std::move(shape)), sum_(shape_size(shape_), 0.0), sum_sq_(shape_size(shape_), 0.0) {}

void MomentAccumulator::add_batch(const Tensor& batch) {
  const std::size_t per = sum_.size();
  if (batch.rank() == 0 || batch.size() != batch.dim(0) * per)
    throw ShapeError("moment batch " + shape_to_string(batch.shape()) + " does not match " + shape_to_string(shape_));
  const std::size_t n = batch.dim(0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < per; ++j) {
      const double v = batch[s * per + j];
      if (!std::isfinite(v)) throw Error("non-finite activation during calibration");
      sum_[j] += v;
      sum_sq_[j] += v * v;
    }
  count_ += n;
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
  if (other.shape_ != shape_) throw ShapeError("cannot merge accumulators of different shapes");
  for (std::size_t j = 0; j < sum_.size(); ++j) {
    sum_[j] += other.sum_[j];
    sum_sq_[j] += other.sum_sq_[j];
  }
  count_ += other.count_;
}

Tensor MomentAccumulator::finalize(float floor) const {
  if (count_ == 0) throw Error("no samples accumulated");
  Tensor out(shape_);
  const double n = static_cast<double>(count_);
  for (std::size_t j = 0; j < sum_.size(); ++j) {
    const double mean = sum_[j] / n;
    const double var = std::max(0.0, sum_sq_[j] / n - mean * mean);
    out[j] = std::max(floor, static_cast<float>(std::sqrt(var)));
  }
  return out;
}

SigmaProfile calibrate(const Network& generator, const CalibrationOptions& options) {
  if (options.num_samples < 2) throw ConfigError("calibration needs at least 2 samples");
  if (!(options.floor > 0.0f)) throw ConfigError("sigma floor must be positive");
  if (generator.injection_count() == 0) throw ConfigError("network declares no injection points");

  const auto& latent = generator.spec().input_shape;
  const std::size_t chunks = (options.num_samples + kChunk - 1) / kChunk;

  auto fresh = [&] {
    std::vector<MomentAccumulator> acc;
    for (std::size_t i = 0; i < generator.injection_count(); ++i) acc.emplace_back(generator.injection_shape(i));
    return acc;
  };
  std::vector<std::vector<MomentAccumulator>> partial(chunks);

  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t count = std::min(kChunk, options.num_samples - begin);
    Shape batch_shape{count};
    batch_shape.insert(batch_shape.end(), latent.begin(), latent.end());
    Tensor z(batch_shape);
    const std::size_t per = shape_size(latent);
    for (std::size_t s = 0; s < count; ++s) {
      auto engine = derived_engine(options.seed, begin + s);
      Tensor sample = standard_normal(latent, engine);
      std::copy(sample.data().begin(), sample.data().end(), z.data().begin() + static_cast<std::ptrdiff_t>(s * per));
    }
    auto acc = fresh();
    const auto activations = generator.injection_activations(z);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i].add_batch(activations[i]);
    partial[c] = std::move(acc);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  auto total = fresh();
  for (const auto& chunk : partial)
    for (std::size_t i = 0; i < total.size(); ++i) total[i].merge(chunk[i]);

  SigmaProfile profile;
  profile.sample_count = options.num_samples;
  profile.seed = options.seed;
  profile.floor = options.floor;
  for (const auto& acc : total) profile.sigma.push_back(acc.finalize(options.floor));
  return profile;
}

SigmaProfile unit_sigma(const Network& generator) {
  SigmaProfile profile;
  for (std::size_t i = 0; i < generator.injection_count(); ++i)
    profile.sigma.emplace_back(generator.injection_shape(i), 1.0f);
  return profile;
}

}  // namespace lprobe
