#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "probebench/binary_io.hpp"
#include "probebench/errors.hpp"
#include "probebench/nn.hpp"
#include "probebench/rng.hpp"

namespace probebench {

enum class HeadKind : std::uint8_t { linear = 0, dense = 1, aggregate = 2 };

inline constexpr std::string_view head_kind_name(HeadKind k) noexcept {
  switch (k) {
    case HeadKind::linear: return "linear";
    case HeadKind::dense: return "dense";
    case HeadKind::aggregate: return "aggregate";
  }
  return "?";
}

inline HeadKind parse_head_kind(std::string_view s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "dense") return HeadKind::dense;
  if (s == "aggregate") return HeadKind::aggregate;
  throw ValidationError("unknown head kind '" + std::string(s) + "' (expected linear, dense or aggregate)");
}

inline constexpr std::size_t linear_hidden_width = 128;
inline constexpr std::size_t dense_hidden_width = 256;

// time-average -> affine(128) -> ReLU -> affine(C)
template <typename T>
struct LinearHead {
  static constexpr HeadKind kind = HeadKind::linear;
  nn::Affine<T> hidden;
  nn::Affine<T> out;

  LinearHead() = default;
  LinearHead(std::size_t input_dim, std::size_t classes)
      : hidden(linear_hidden_width, input_dim), out(classes, linear_hidden_width) {}

  std::size_t input_dim() const noexcept { return hidden.in; }
  std::size_t classes() const noexcept { return out.out; }
  std::size_t layer_count() const noexcept { return 1; }

  template <typename U>
  LinearHead<U> zeros_like() const { return LinearHead<U>(input_dim(), classes()); }

  std::vector<std::span<T>> tensors() { return {hidden.weight, hidden.bias, out.weight, out.bias}; }
  std::vector<std::span<const T>> tensors() const { return {hidden.weight, hidden.bias, out.weight, out.bias}; }

  friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

// Two per-frame (kernel-size-1) affine(256) + ReLU layers, then the time
// average, then the classification affine.
template <typename T>
struct DenseHead {
  static constexpr HeadKind kind = HeadKind::dense;
  nn::Affine<T> pw1;
  nn::Affine<T> pw2;
  nn::Affine<T> out;

  DenseHead() = default;
  DenseHead(std::size_t input_dim, std::size_t classes)
      : pw1(dense_hidden_width, input_dim), pw2(dense_hidden_width, dense_hidden_width),
        out(classes, dense_hidden_width) {}

  std::size_t input_dim() const noexcept { return pw1.in; }
  std::size_t classes() const noexcept { return out.out; }
  std::size_t layer_count() const noexcept { return 1; }

  template <typename U>
  DenseHead<U> zeros_like() const { return DenseHead<U>(input_dim(), classes()); }

  std::vector<std::span<T>> tensors() {
    return {pw1.weight, pw1.bias, pw2.weight, pw2.bias, out.weight, out.bias};
  }
  std::vector<std::span<const T>> tensors() const {
    return {pw1.weight, pw1.bias, pw2.weight, pw2.bias, out.weight, out.bias};
  }

  friend bool operator==(const DenseHead&, const DenseHead&) = default;
};

// Softmax-weighted average over all layers feeding a dense head.
template <typename T>
struct AggregationHead {
  static constexpr HeadKind kind = HeadKind::aggregate;
  std::vector<T> layer_logits;
  DenseHead<T> dense;

  AggregationHead() = default;
  AggregationHead(std::size_t layers, std::size_t input_dim, std::size_t classes)
      : layer_logits(layers, T{}), dense(input_dim, classes) {}

  std::size_t input_dim() const noexcept { return dense.input_dim(); }
  std::size_t classes() const noexcept { return dense.classes(); }
  std::size_t layer_count() const noexcept { return layer_logits.size(); }

  std::vector<double> layer_weights() const {
    std::vector<double> logits(layer_logits.begin(), layer_logits.end());
    return nn::softmax(logits);
  }

  template <typename U>
  AggregationHead<U> zeros_like() const { return AggregationHead<U>(layer_count(), input_dim(), classes()); }

  std::vector<std::span<T>> tensors() {
    std::vector<std::span<T>> out{layer_logits};
    for (auto s : dense.tensors()) out.push_back(s);
    return out;
  }
  std::vector<std::span<const T>> tensors() const {
    std::vector<std::span<const T>> out{layer_logits};
    for (auto s : dense.tensors()) out.push_back(s);
    return out;
  }

  friend bool operator==(const AggregationHead&, const AggregationHead&) = default;
};

using AnyHead = std::variant<LinearHead<float>, DenseHead<float>, AggregationHead<float>>;

template <typename Head>
std::size_t parameter_count(const Head& h) {
  std::size_t n = 0;
  for (auto t : h.tensors()) n += t.size();
  return n;
}

inline HeadKind kind_of(const AnyHead& h) {
  return std::visit([](const auto& head) { return std::decay_t<decltype(head)>::kind; }, h);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

struct HeadSpec {
  HeadKind kind = HeadKind::linear;
  std::size_t input_dim = 0;
  std::size_t classes = 0;
  std::size_t layer_count = 1;  // used by the aggregation head only
};

// Affine layers are drawn in declaration order from one generator, so an
// aggregation head and a dense head with the same seed share dense weights.
inline AnyHead init_head(const HeadSpec& spec, std::uint64_t seed) {
  if (spec.input_dim == 0 || spec.classes == 0 || spec.layer_count == 0)
    throw ValidationError("head dimensions must be positive");
  Lcg64 rng(seed);
  auto init_dense = [&](DenseHead<float>& d) {
    nn::glorot_init(d.pw1, rng);
    nn::glorot_init(d.pw2, rng);
    nn::glorot_init(d.out, rng);
  };
  switch (spec.kind) {
    case HeadKind::linear: {
      LinearHead<float> h(spec.input_dim, spec.classes);
      nn::glorot_init(h.hidden, rng);
      nn::glorot_init(h.out, rng);
      return h;
    }
    case HeadKind::dense: {
      DenseHead<float> h(spec.input_dim, spec.classes);
      init_dense(h);
      return h;
    }
    case HeadKind::aggregate: {
      AggregationHead<float> h(spec.layer_count, spec.input_dim, spec.classes);
      init_dense(h.dense);
      return h;
    }
  }
  throw InvariantError("unknown head kind");
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace detail {

// Records the ReLU on/off pattern so gradient checks can tell when a finite
// difference straddles a kink.
struct ReluTrace {
  std::uint64_t hash = 1469598103934665603ULL;
  void operator()(bool active) noexcept { hash = (hash ^ (active ? 0x9dULL : 0x3bULL)) * 1099511628211ULL; }
};

struct NoTrace {
  void operator()(bool) const noexcept {}
};

template <typename Trace>
void relu_inplace(std::span<double> v, Trace& trace) {
  for (auto& x : v) {
    const bool active = x > 0.0;
    trace(active);
    if (!active) x = 0.0;
  }
}

inline void check_input(std::size_t got, std::size_t want) {
  if (got != want)
    throw ValidationError("shape mismatch: head expects feature_dim " + std::to_string(want) + ", got " +
                          std::to_string(got));
}

template <typename In, typename Trace>
std::vector<double> linear_forward(const LinearHead<float>& p, const nn::SequenceView<In>& x, Trace& trace) {
  check_input(x.dim, p.input_dim());
  const auto avg = nn::time_average(x);
  std::vector<double> hidden(p.hidden.out);
  nn::affine_forward_into(p.hidden, std::span<const double>(avg), std::span<double>(hidden));
  relu_inplace(std::span<double>(hidden), trace);
  std::vector<double> logits(p.out.out);
  nn::affine_forward_into(p.out, std::span<const double>(hidden), std::span<double>(logits));
  return logits;
}

// Per-frame activations kept for the backward pass.
struct DenseCache {
  std::vector<double> h1;  // [T][256] post-ReLU
  std::vector<double> h2;  // [T][256] post-ReLU
  std::vector<double> pooled;
};

template <typename In, typename Trace>
std::vector<double> dense_forward(const DenseHead<float>& p, const nn::SequenceView<In>& x, Trace& trace,
                                  DenseCache* cache = nullptr) {
  check_input(x.dim, p.input_dim());
  if (x.time_steps == 0) throw ValidationError("empty sequence");
  const std::size_t H = dense_hidden_width;
  DenseCache local;
  DenseCache& c = cache ? *cache : local;
  c.h1.assign(x.time_steps * H, 0.0);
  c.h2.assign(x.time_steps * H, 0.0);
  c.pooled.assign(H, 0.0);
  for (std::size_t t = 0; t < x.time_steps; ++t) {
    std::span<double> h1(c.h1.data() + t * H, H);
    std::span<double> h2(c.h2.data() + t * H, H);
    nn::affine_forward_into(p.pw1, x.frame(t), h1);
    relu_inplace(h1, trace);
    nn::affine_forward_into(p.pw2, std::span<const double>(h1), h2);
    relu_inplace(h2, trace);
    for (std::size_t k = 0; k < H; ++k) c.pooled[k] += h2[k];
  }
  const double inv = 1.0 / static_cast<double>(x.time_steps);
  for (auto& v : c.pooled) v *= inv;
  std::vector<double> logits(p.out.out);
  nn::affine_forward_into(p.out, std::span<const double>(c.pooled), std::span<double>(logits));
  return logits;
}

// fused[t][d] = sum_l w[l] * stack[l][t][d]
inline std::vector<double> fuse_layers(std::span<const double> weights, const nn::StackView& stack) {
  const std::size_t n = stack.time_steps * stack.dim;
  std::vector<double> fused(n, 0.0);
  for (std::size_t l = 0; l < stack.layers; ++l) {
    const double w = weights[l];
    const float* src = stack.values.data() + l * n;
    for (std::size_t i = 0; i < n; ++i) fused[i] += w * static_cast<double>(src[i]);
  }
  return fused;
}

inline void check_stack(const AggregationHead<float>& p, const nn::StackView& stack) {
  if (stack.layers != p.layer_count())
    throw ValidationError("shape mismatch: aggregation head expects " + std::to_string(p.layer_count()) +
                          " layers, got " + std::to_string(stack.layers));
  check_input(stack.dim, p.input_dim());
}

template <typename Trace>
std::vector<double> aggregate_forward(const AggregationHead<float>& p, const nn::StackView& stack, Trace& trace) {
  check_stack(p, stack);
  const auto w = p.layer_weights();
  const auto fused = fuse_layers(w, stack);
  return dense_forward(p.dense, nn::SequenceView<double>{stack.time_steps, stack.dim, fused}, trace);
}

}  // namespace detail

template <typename In>
std::vector<double> linear_head_forward(const nn::SequenceView<In>& features, const LinearHead<float>& p) {
  detail::NoTrace trace;
  return detail::linear_forward(p, features, trace);
}

template <typename In>
std::vector<double> dense_head_forward(const nn::SequenceView<In>& features, const DenseHead<float>& p) {
  detail::NoTrace trace;
  return detail::dense_forward(p, features, trace);
}

inline std::vector<double> aggregate_forward(const nn::StackView& stack, const AggregationHead<float>& p) {
  detail::NoTrace trace;
  return detail::aggregate_forward(p, stack, trace);
}

// ---------------------------------------------------------------------------
// Training samples and batched loss/gradient
// ---------------------------------------------------------------------------

// One utterance's features for a head: a single layer ([1][T][D]) for the
// linear and dense heads, the full stack for the aggregation head.
struct Example {
  std::size_t layers = 1;
  std::size_t time_steps = 0;
  std::size_t dim = 0;
  std::vector<float> values;
  std::size_t label = 0;

  nn::StackView stack() const { return {layers, time_steps, dim, values}; }
  nn::SequenceView<float> sequence() const { return {time_steps, dim, values}; }
};

template <typename Trace = detail::NoTrace>
std::vector<double> head_logits(const LinearHead<float>& p, const Example& x, Trace&& trace = {}) {
  return detail::linear_forward(p, x.sequence(), trace);
}
template <typename Trace = detail::NoTrace>
std::vector<double> head_logits(const DenseHead<float>& p, const Example& x, Trace&& trace = {}) {
  return detail::dense_forward(p, x.sequence(), trace);
}
template <typename Trace = detail::NoTrace>
std::vector<double> head_logits(const AggregationHead<float>& p, const Example& x, Trace&& trace = {}) {
  return detail::aggregate_forward(p, x.stack(), trace);
}

inline std::vector<double> head_logits(const AnyHead& h, const Example& x) {
  return std::visit([&](const auto& head) { return head_logits(head, x); }, h);
}

// Mean cross-entropy over the batch. Forward only.
template <typename Head, typename Trace = detail::NoTrace>
double batch_loss(const Head& p, std::span<const Example* const> batch, Trace&& trace = {}) {
  if (batch.empty()) throw ValidationError("empty batch");
  double total = 0.0;
  for (const Example* x : batch) {
    const auto logits = head_logits(p, *x, trace);
    total += nn::cross_entropy_loss(logits, x->label);
  }
  return total / static_cast<double>(batch.size());
}

namespace detail {

// grad += scale * (dlogits outer input), returns W^T dlogits when requested.
inline void affine_backward(const nn::Affine<float>& p, std::span<const double> input, std::span<const double> dout,
                            nn::Affine<double>& g, std::span<double> dinput) {
  for (std::size_t o = 0; o < p.out; ++o) {
    const double d = dout[o];
    if (d == 0.0) continue;
    g.bias[o] += d;
    double* gw = g.weight.data() + o * p.in;
    for (std::size_t i = 0; i < p.in; ++i) gw[i] += d * input[i];
    if (!dinput.empty()) {
      const float* w = p.weight.data() + o * p.in;
      for (std::size_t i = 0; i < p.in; ++i) dinput[i] += d * static_cast<double>(w[i]);
    }
  }
}

// dlogits = scale * (softmax(logits) - onehot(label)); returns the loss.
inline double output_gradient(std::span<const double> logits, std::size_t label, double scale,
                              std::vector<double>& dlogits) {
  const double loss = nn::cross_entropy_loss(logits, label);
  dlogits = nn::softmax(logits);
  dlogits[label] -= 1.0;
  for (auto& v : dlogits) v *= scale;
  return loss;
}

inline double accumulate(const LinearHead<float>& p, const Example& x, double scale, LinearHead<double>& g) {
  const auto seq = x.sequence();
  check_input(seq.dim, p.input_dim());
  const auto avg = nn::time_average(seq);
  std::vector<double> hidden(p.hidden.out);
  nn::affine_forward_into(p.hidden, std::span<const double>(avg), std::span<double>(hidden));
  NoTrace none;
  relu_inplace(std::span<double>(hidden), none);
  std::vector<double> logits(p.out.out);
  nn::affine_forward_into(p.out, std::span<const double>(hidden), std::span<double>(logits));

  std::vector<double> dlogits;
  const double loss = output_gradient(logits, x.label, scale, dlogits);
  std::vector<double> dhidden(p.hidden.out, 0.0);
  affine_backward(p.out, hidden, dlogits, g.out, dhidden);
  for (std::size_t k = 0; k < dhidden.size(); ++k)
    if (hidden[k] <= 0.0) dhidden[k] = 0.0;
  affine_backward(p.hidden, avg, dhidden, g.hidden, {});
  return loss;
}

// Backward through a dense head. When dinput is non-empty it receives
// d loss / d input[t][d].
template <typename In>
double accumulate_dense(const DenseHead<float>& p, const nn::SequenceView<In>& x, std::size_t label, double scale,
                        DenseHead<double>& g, std::span<double> dinput) {
  DenseCache c;
  NoTrace none;
  const auto logits = dense_forward(p, x, none, &c);
  std::vector<double> dlogits;
  const double loss = output_gradient(logits, label, scale, dlogits);

  const std::size_t H = dense_hidden_width;
  std::vector<double> dpooled(H, 0.0);
  affine_backward(p.out, c.pooled, dlogits, g.out, dpooled);
  const double inv = 1.0 / static_cast<double>(x.time_steps);
  for (auto& v : dpooled) v *= inv;

  std::vector<double> dz2(H), dz1(H), frame(x.dim);
  for (std::size_t t = 0; t < x.time_steps; ++t) {
    std::span<const double> h1(c.h1.data() + t * H, H);
    std::span<const double> h2(c.h2.data() + t * H, H);
    for (std::size_t k = 0; k < H; ++k) dz2[k] = h2[k] > 0.0 ? dpooled[k] : 0.0;
    std::fill(dz1.begin(), dz1.end(), 0.0);
    affine_backward(p.pw2, h1, dz2, g.pw2, dz1);
    for (std::size_t k = 0; k < H; ++k)
      if (h1[k] <= 0.0) dz1[k] = 0.0;
    const auto f = x.frame(t);
    for (std::size_t d = 0; d < x.dim; ++d) frame[d] = static_cast<double>(f[d]);
    affine_backward(p.pw1, frame, dz1, g.pw1, dinput.empty() ? std::span<double>{} : dinput.subspan(t * x.dim, x.dim));
  }
  return loss;
}

inline double accumulate(const DenseHead<float>& p, const Example& x, double scale, DenseHead<double>& g) {
  return accumulate_dense(p, x.sequence(), x.label, scale, g, {});
}

inline double accumulate(const AggregationHead<float>& p, const Example& x, double scale, AggregationHead<double>& g) {
  const auto stack = x.stack();
  check_stack(p, stack);
  const auto w = p.layer_weights();
  const auto fused = fuse_layers(w, stack);
  std::vector<double> dfused(fused.size(), 0.0);
  const double loss = accumulate_dense(p.dense, nn::SequenceView<double>{stack.time_steps, stack.dim, fused},
                                       x.label, scale, g.dense, dfused);
  // d fused / d w[l] = stack[l]; then back through the softmax.
  std::vector<double> dw(stack.layers, 0.0);
  const std::size_t n = fused.size();
  for (std::size_t l = 0; l < stack.layers; ++l) {
    const float* src = stack.values.data() + l * n;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += dfused[i] * static_cast<double>(src[i]);
    dw[l] = acc;
  }
  double mean = 0.0;
  for (std::size_t l = 0; l < stack.layers; ++l) mean += w[l] * dw[l];
  for (std::size_t l = 0; l < stack.layers; ++l) g.layer_logits[l] += w[l] * (dw[l] - mean);
  return loss;
}

}  // namespace detail

// Exact gradient of the mean batch cross-entropy. grad is overwritten.
template <typename Head, typename Grad>
double loss_and_gradient(const Head& p, std::span<const Example* const> batch, Grad& grad) {
  if (batch.empty()) throw ValidationError("empty batch");
  grad = p.template zeros_like<double>();
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const Example* x : batch) total += detail::accumulate(p, *x, scale, grad);
  return total * scale;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "HEAD" | u32 version | u8 head_kind | u32 D | u32 C | u32 layer_count |
//   float32 tensors in declaration order
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> head_magic{'H', 'E', 'A', 'D'};
inline constexpr std::uint32_t head_version = 1;

inline binary::Writer encode_head(const AnyHead& head) {
  binary::Writer w;
  w.bytes(head_magic.data(), head_magic.size());
  w.u32(head_version);
  std::visit(
      [&](const auto& h) {
        w.u8(static_cast<std::uint8_t>(std::decay_t<decltype(h)>::kind));
        w.u32(static_cast<std::uint32_t>(h.input_dim()));
        w.u32(static_cast<std::uint32_t>(h.classes()));
        w.u32(static_cast<std::uint32_t>(h.layer_count()));
        for (auto t : h.tensors()) w.floats(t);
      },
      head);
  return w;
}

inline void save_head(const AnyHead& head, const std::filesystem::path& path) { encode_head(head).save(path); }

inline AnyHead load_head(const std::filesystem::path& path) {
  auto in = binary::Reader::from_file(path);
  const std::string source = path.string();
  try {
    std::array<char, 4> magic{};
    in.bytes(magic.data(), magic.size());
    if (magic != head_magic) throw IoError("not a head checkpoint: " + source);
    if (const auto v = in.u32(); v != head_version)
      throw IoError("unsupported version " + std::to_string(v) + ": " + source);
    const auto kind = in.u8();
    const std::size_t D = in.u32(), C = in.u32(), L = in.u32();
    if (kind > 2) throw IoError("corrupt checkpoint (head kind " + std::to_string(kind) + "): " + source);
    const HeadSpec spec{static_cast<HeadKind>(kind), D, C, L};
    if (D == 0 || C == 0 || L == 0) throw IoError("corrupt checkpoint (zero dimension): " + source);
    AnyHead head = spec.kind == HeadKind::linear  ? AnyHead(LinearHead<float>(D, C))
                   : spec.kind == HeadKind::dense ? AnyHead(DenseHead<float>(D, C))
                                                  : AnyHead(AggregationHead<float>(L, D, C));
    std::visit([&](auto& h) {
      for (auto t : h.tensors()) in.floats(t);
    }, head);
    if (in.remaining() != 0) throw IoError("corrupt checkpoint (trailing bytes): " + source);
    return head;
  } catch (const binary::Truncated&) {
    throw IoError("corrupt checkpoint (truncated): " + source);
  }
}

}  // namespace probebench
