#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "probebench/errors.hpp"
#include "probebench/rng.hpp"

// Dense-network primitives for the probing heads. Parameters are stored as
// float; every sum is accumulated in double.
namespace probebench::nn {

// [time_steps][dim] row-major view over one layer of one utterance.
template <typename T = float>
struct SequenceView {
  std::size_t time_steps = 0;
  std::size_t dim = 0;
  std::span<const T> values;

  std::span<const T> frame(std::size_t t) const { return values.subspan(t * dim, dim); }
};

// [layers][time_steps][dim] view over a whole layer stack.
struct StackView {
  std::size_t layers = 0;
  std::size_t time_steps = 0;
  std::size_t dim = 0;
  std::span<const float> values;

  SequenceView<float> layer(std::size_t l) const {
    const std::size_t n = time_steps * dim;
    return {time_steps, dim, values.subspan(l * n, n)};
  }
};

// Affine map out = W x + b with W stored [out][in] row-major.
template <typename T>
struct Affine {
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  Affine() = default;
  Affine(std::size_t out_dim, std::size_t in_dim)
      : out(out_dim), in(in_dim), weight(out_dim * in_dim, T{}), bias(out_dim, T{}) {}

  std::span<const T> row(std::size_t o) const { return std::span<const T>(weight).subspan(o * in, in); }

  std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }

  friend bool operator==(const Affine&, const Affine&) = default;
};

// Glorot-style uniform weights in +-sqrt(6 / (fan_in + fan_out)); zero bias.
inline void glorot_init(Affine<float>& layer, Lcg64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
  for (auto& w : layer.weight) w = static_cast<float>(rng.uniform(-limit, limit));
  std::fill(layer.bias.begin(), layer.bias.end(), 0.0f);
}

template <typename T>
std::vector<double> time_average(const SequenceView<T>& seq) {
  if (seq.time_steps == 0) throw ValidationError("empty sequence");
  std::vector<double> mean(seq.dim, 0.0);
  for (std::size_t t = 0; t < seq.time_steps; ++t) {
    const auto f = seq.frame(t);
    for (std::size_t d = 0; d < seq.dim; ++d) mean[d] += static_cast<double>(f[d]);
  }
  const double inv = 1.0 / static_cast<double>(seq.time_steps);
  for (auto& m : mean) m *= inv;
  return mean;
}

template <typename In>
void affine_forward_into(const Affine<float>& p, std::span<const In> x, std::span<double> out) {
  for (std::size_t o = 0; o < p.out; ++o) {
    const float* w = p.weight.data() + o * p.in;
    double acc = static_cast<double>(p.bias[o]);
    for (std::size_t i = 0; i < p.in; ++i) acc += static_cast<double>(w[i]) * static_cast<double>(x[i]);
    out[o] = acc;
  }
}

template <typename In>
std::vector<double> affine_forward(const Affine<float>& p, std::span<const In> x) {
  if (x.size() != p.in)
    throw ValidationError("shape mismatch: affine expects " + std::to_string(p.in) + " inputs, got " +
                          std::to_string(x.size()));
  std::vector<double> out(p.out);
  affine_forward_into(p, x, std::span<double>(out));
  return out;
}

inline std::vector<double> relu(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(logits[i] - m);
  for (auto& v : out) v /= sum;
  return out;
}

inline double log_sum_exp(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - m);
  return m + std::log(sum);
}

// -log softmax(logits)[label]
inline double cross_entropy_loss(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size())
    throw ValidationError("label " + std::to_string(label) + " out of range for " +
                          std::to_string(logits.size()) + " classes");
  return std::max(0.0, log_sum_exp(logits) - logits[label]);
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer
// ---------------------------------------------------------------------------

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  std::uint64_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  AdamHyper hyper;

  OptimizerState() = default;
  OptimizerState(std::size_t parameter_count, AdamHyper h)
      : first_moment(parameter_count, 0.0), second_moment(parameter_count, 0.0), hyper(h) {}
};

// One bias-corrected update over parameter tensors paired with gradients.
// Tensors are laid end to end in the state's moment vectors.
inline void optimizer_step(std::span<const std::span<float>> params, std::span<const std::span<const double>> grads,
                           OptimizerState& state) {
  if (params.size() != grads.size()) throw InvariantError("optimizer: parameter/gradient tensor count mismatch");
  std::size_t total = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size()) throw InvariantError("optimizer: tensor shape mismatch");
    total += params[k].size();
  }
  if (state.first_moment.size() != total || state.second_moment.size() != total)
    throw InvariantError("optimizer: state does not mirror parameters");

  ++state.step_count;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);

  std::size_t offset = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i, ++offset) {
      double& m = state.first_moment[offset];
      double& v = state.second_moment[offset];
      m = h.beta1 * m + (1.0 - h.beta1) * g[i];
      v = h.beta2 * v + (1.0 - h.beta2) * g[i] * g[i];
      const double update = h.learning_rate * (m / correction1) / (std::sqrt(v / correction2) + h.epsilon);
      if (update != 0.0) p[i] = static_cast<float>(static_cast<double>(p[i]) - update);
    }
  }
}

}  // namespace probebench::nn
