#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "probebench/heads.hpp"
#include "probebench/rng.hpp"

namespace probebench {

struct GradCheckOptions {
  double eps = 1e-3;
  // Tensors larger than this are checked on a seeded random subset of this
  // many coordinates; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t sample_seed = 0;
  // Coordinates whose +-eps evaluations flip any ReLU are not comparable
  // against the one-sided analytic derivative and are skipped.
  bool skip_kinks = true;
  // Combine central differences at eps and eps/2 as (4 D(eps/2) - D(eps)) / 3,
  // cancelling the eps^2 truncation term. Without it, coordinates whose
  // gradient nearly cancels across a batch (|g| ~ 1e-7) exceed 1e-3 relative
  // error from truncation alone.
  bool richardson = true;
  // Test hook: doubles the analytic gradient of the last coordinate of the
  // last tensor before comparison.
  bool planted_bug = false;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central differences of the batch loss against loss_and_gradient.
template <typename Head>
GradCheckResult finite_difference_check(Head model, std::span<const Example* const> batch,
                                        const GradCheckOptions& options = {}) {
  if (!(options.eps > 0.0)) throw ValidationError("eps must be > 0");
  auto grad = model.template zeros_like<double>();
  loss_and_gradient(model, batch, grad);
  auto grads = grad.tensors();
  if (options.planted_bug) grads.back().back() *= 2.0;

  detail::ReluTrace base_trace;
  batch_loss(model, batch, base_trace);

  GradCheckResult result;
  Lcg64 sampler(options.sample_seed);
  auto params = model.tensors();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && coords.size() > options.max_coords_per_tensor) {
      shuffle(std::span<std::size_t>(coords), sampler);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    if (options.planted_bug && k + 1 == params.size() &&
        std::find(coords.begin(), coords.end(), p.size() - 1) == coords.end())
      coords.push_back(p.size() - 1);

    for (std::size_t i : coords) {
      const float original = p[i];
      bool kink = false;
      // Central difference; divides by the step actually taken after float rounding.
      auto central = [&](double h) {
        const float plus = static_cast<float>(static_cast<double>(original) + h);
        const float minus = static_cast<float>(static_cast<double>(original) - h);
        detail::ReluTrace plus_trace, minus_trace;
        p[i] = plus;
        const double loss_plus = batch_loss(model, batch, plus_trace);
        p[i] = minus;
        const double loss_minus = batch_loss(model, batch, minus_trace);
        p[i] = original;
        kink = kink || plus_trace.hash != base_trace.hash || minus_trace.hash != base_trace.hash;
        return (loss_plus - loss_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
      };
      double numeric = central(options.eps);
      if (options.richardson) numeric = (4.0 * central(0.5 * options.eps) - numeric) / 3.0;
      if (options.skip_kinks && kink) {
        ++result.skipped_kinks;
        continue;
      }
      const double err = relative_error(grads[k][i], numeric);
      ++result.checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = k;
        result.worst_index = i;
      }
    }
  }
  return result;
}

inline GradCheckResult finite_difference_check(const AnyHead& model, std::span<const Example* const> batch,
                                               const GradCheckOptions& options = {}) {
  return std::visit([&](const auto& h) { return finite_difference_check(h, batch, options); }, model);
}

// ---------------------------------------------------------------------------
// Standard randomized suite
// ---------------------------------------------------------------------------

struct GradCheckInstance {
  AnyHead model;
  std::vector<Example> batch;

  std::vector<const Example*> batch_pointers() const {
    std::vector<const Example*> out;
    for (const auto& x : batch) out.push_back(&x);
    return out;
  }
};

// Instance `index` cycles linear, dense, aggregate. Biases and layer logits
// are randomized so every parameter path carries gradient.
inline GradCheckInstance make_gradcheck_instance(std::size_t index, std::uint64_t seed) {
  Lcg64 rng(derive_seed(seed, index));
  const auto kind = static_cast<HeadKind>(index % 3);
  const bool small = kind == HeadKind::linear;
  HeadSpec spec;
  spec.kind = kind;
  spec.input_dim = 2 + rng.below(5);
  spec.classes = 2 + rng.below(4);
  spec.layer_count = kind == HeadKind::aggregate ? 2 + rng.below(3) : 1;
  const std::size_t batch_size = small ? 1 + rng.below(8) : 1 + rng.below(3);
  const std::size_t max_t = small ? 4 : 3;

  GradCheckInstance inst{init_head(spec, rng.next_u32()), {}};
  std::visit(
      [&](auto& h) {
        auto tensors = h.tensors();
        for (std::size_t k = 0; k < tensors.size(); ++k) {
          // Bias tensors are the odd entries after any layer-logit vector.
          const bool is_logits = kind == HeadKind::aggregate && k == 0;
          const std::size_t offset = kind == HeadKind::aggregate ? 1 : 0;
          const bool is_bias = !is_logits && ((k - offset) % 2 == 1);
          if (is_logits)
            for (auto& v : tensors[k]) v = static_cast<float>(rng.normal());
          else if (is_bias)
            for (auto& v : tensors[k]) v = static_cast<float>(rng.uniform(-0.1, 0.1));
        }
      },
      inst.model);

  for (std::size_t b = 0; b < batch_size; ++b) {
    Example x;
    x.layers = spec.layer_count;
    x.time_steps = 1 + rng.below(static_cast<std::uint32_t>(max_t));
    x.dim = spec.input_dim;
    x.values.resize(x.layers * x.time_steps * x.dim);
    for (auto& v : x.values) v = static_cast<float>(rng.normal());
    x.label = rng.below(static_cast<std::uint32_t>(spec.classes));
    inst.batch.push_back(std::move(x));
  }
  return inst;
}

struct GradCheckSuiteResult {
  double max_relative_error = 0.0;
  std::size_t instances = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t worst_instance = 0;
};

// Linear heads are checked on every coordinate; the 256-wide heads on a
// sampled subset per tensor.
inline GradCheckSuiteResult run_gradcheck_suite(std::size_t instances, double eps, std::uint64_t seed = 0,
                                                bool planted_bug = false, std::size_t sampled_coords = 48) {
  GradCheckSuiteResult out;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto inst = make_gradcheck_instance(i, seed);
    GradCheckOptions opt;
    opt.eps = eps;
    opt.sample_seed = derive_seed(seed ^ 0x5A5A, i);
    opt.max_coords_per_tensor = kind_of(inst.model) == HeadKind::linear ? 0 : sampled_coords;
    opt.planted_bug = planted_bug;
    const auto batch = inst.batch_pointers();
    const auto r = finite_difference_check(inst.model, batch, opt);
    ++out.instances;
    out.checked += r.checked;
    out.skipped_kinks += r.skipped_kinks;
    if (r.max_relative_error > out.max_relative_error) {
      out.max_relative_error = r.max_relative_error;
      out.worst_instance = i;
    }
  }
  return out;
}

}  // namespace probebench
