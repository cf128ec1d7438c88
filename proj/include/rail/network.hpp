#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "rail/ops.hpp"
#include "rail/rng.hpp"
#include "rail/tensor.hpp"

// Miniature V-shaped segmentation networks. Two variants share one
// parameter layout: the residual variant only adds an identity skip around
// each conv block, so parameter name sets and counts are identical and the
// two are element-wise combinable for averaging.

namespace rail {

enum class NetVariant { vnet, resvnet };

struct NetworkSpec {
  NetVariant variant = NetVariant::vnet;
  int in_channels = 1;
  int num_classes = 2;
  int base_channels = 4;
  int depth = 3;  // encoder levels; patch extents must divide 2^(depth-1)
  Int3 patch_shape = {32, 32, 16};
};

inline int spec_divisor(const NetworkSpec& spec) { return 1 << (spec.depth - 1); }

inline void validate_spec(const NetworkSpec& spec) {
  if (spec.depth < 2 || spec.depth > 5)
    throw std::invalid_argument("NetworkSpec: depth must be in [2,5], got " +
                                std::to_string(spec.depth));
  if (spec.base_channels < 1)
    throw std::invalid_argument("NetworkSpec: base_channels must be >= 1");
  if (spec.num_classes < 2)
    throw std::invalid_argument("NetworkSpec: num_classes must be >= 2");
  const int div = spec_divisor(spec);
  for (int i = 0; i < 3; ++i)
    if (spec.patch_shape[i] % div != 0 || spec.patch_shape[i] <= 0)
      throw std::invalid_argument(
          std::string("NetworkSpec: patch extent ") +
          std::to_string(spec.patch_shape[i]) + " on axis " +
          detail::vol_axis_name(i) + " not divisible by " +
          std::to_string(div));
}

// Flat ordered collection of named parameter tensors. Order and names are
// stable across runs for a given spec shape (checkpoint compatibility).
template <typename T>
struct NetworkParams {
  std::vector<std::pair<std::string, Tensor<T>>> entries;
  std::unordered_map<std::string, std::size_t> index;

  void push(std::string name, Tensor<T> t) {
    index.emplace(name, entries.size());
    entries.emplace_back(std::move(name), std::move(t));
  }

  Tensor<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end())
      throw std::invalid_argument("NetworkParams: unknown parameter " + name);
    return entries[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<NetworkParams*>(this)->at(name);
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.second.size();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries) e.second.zero_grad();
  }

  NetworkParams clone(bool requires_grad) const {
    NetworkParams out;
    for (const auto& e : entries) {
      Tensor<T> t = e.second.clone();
      if (requires_grad) t.set_requires_grad(true);
      out.push(e.first, std::move(t));
    }
    return out;
  }
};

namespace detail {

inline int level_channels(const NetworkSpec& spec, int level) {
  return spec.base_channels << level;
}

template <typename T>
Tensor<T> init_kernel(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> vals(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : vals) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(vals), true);
}

template <typename T>
void add_conv_unit(NetworkParams<T>& p, const std::string& prefix, int cin,
                   int cout, int k, Rng& rng) {
  p.push(prefix + ".conv.w",
         init_kernel<T>({cout, cin, k, k, k},
                        static_cast<std::int64_t>(cin) * k * k * k, rng));
  p.push(prefix + ".conv.b", Tensor<T>::zeros({cout}, true));
  p.push(prefix + ".norm.g", Tensor<T>::filled({cout}, T(1), true));
  p.push(prefix + ".norm.b", Tensor<T>::zeros({cout}, true));
}

template <typename T>
void add_block(NetworkParams<T>& p, const std::string& prefix, int ch,
               Rng& rng) {
  add_conv_unit(p, prefix + ".c0", ch, ch, 3, rng);
  add_conv_unit(p, prefix + ".c1", ch, ch, 3, rng);
}

template <typename T>
Tensor<T> conv_unit(const NetworkParams<T>& p, const std::string& prefix,
                    const Tensor<T>& x, Int3 stride, Int3 pad, Tape<T>* tape) {
  Tensor<T> h = conv3d(x, p.at(prefix + ".conv.w"), stride, pad, tape);
  h = add_bias(h, p.at(prefix + ".conv.b"), tape);
  h = instance_norm(h, p.at(prefix + ".norm.g"), p.at(prefix + ".norm.b"),
                    1e-5, tape);
  return relu(h, tape);
}

// Two conv units; the residual variant adds the block input back on top.
template <typename T>
Tensor<T> block_forward(const NetworkParams<T>& p, const std::string& prefix,
                        const Tensor<T>& x, bool residual, Tape<T>* tape) {
  Tensor<T> h = conv_unit(p, prefix + ".c0", x, {1, 1, 1}, {1, 1, 1}, tape);
  h = conv_unit(p, prefix + ".c1", h, {1, 1, 1}, {1, 1, 1}, tape);
  return residual ? add(h, x, tape) : h;
}

}  // namespace detail

// Deterministic parameter initialization: fan-in scaled uniform kernels,
// zero biases, unit norm scales, and a zero classifier head so that the
// initial prediction is exactly uniform.
template <typename T>
NetworkParams<T> build(const NetworkSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  Rng rng(seed);
  NetworkParams<T> p;
  const int base = spec.base_channels;
  detail::add_conv_unit(p, "stem", spec.in_channels, base, 3, rng);
  for (int level = 0; level < spec.depth; ++level) {
    if (level > 0) {
      const int cin = detail::level_channels(spec, level - 1);
      const int cout = detail::level_channels(spec, level);
      detail::add_conv_unit(p, "down" + std::to_string(level), cin, cout, 2,
                            rng);
    }
    detail::add_block(p, "enc" + std::to_string(level),
                      detail::level_channels(spec, level), rng);
  }
  for (int level = spec.depth - 1; level >= 1; --level) {
    const int cin = detail::level_channels(spec, level);
    const int cout = detail::level_channels(spec, level - 1);
    const std::string up = "up" + std::to_string(level);
    p.push(up + ".tconv.w",
           detail::init_kernel<T>({cin, cout, 2, 2, 2},
                                  static_cast<std::int64_t>(cin) * 8, rng));
    p.push(up + ".tconv.b", Tensor<T>::zeros({cout}, true));
    p.push(up + ".norm.g", Tensor<T>::filled({cout}, T(1), true));
    p.push(up + ".norm.b", Tensor<T>::zeros({cout}, true));
    detail::add_block(p, "dec" + std::to_string(level - 1), cout, rng);
  }
  p.push("head.conv.w",
         Tensor<T>::zeros({spec.num_classes, base, 1, 1, 1}, true));
  p.push("head.conv.b", Tensor<T>::zeros({spec.num_classes}, true));
  return p;
}

// Logits [B,K,W,H,D] spatially aligned with the input patch.
template <typename T>
Tensor<T> forward(const NetworkParams<T>& params, const NetworkSpec& spec,
                  const Tensor<T>& x, Tape<T>* tape = nullptr) {
  if (x.rank() != 5)
    throw std::invalid_argument("forward: input rank " +
                                std::to_string(x.rank()) + " != 5");
  if (x.shape()[1] != spec.in_channels)
    throw std::invalid_argument("forward: input channels " +
                                std::to_string(x.shape()[1]) + " != " +
                                std::to_string(spec.in_channels));
  for (int i = 0; i < 3; ++i)
    if (x.shape()[2 + i] != spec.patch_shape[i])
      throw std::invalid_argument(
          std::string("forward: input extent ") +
          std::to_string(x.shape()[2 + i]) + " on axis " +
          detail::vol_axis_name(i) + " != patch extent " +
          std::to_string(spec.patch_shape[i]));

  const bool residual = spec.variant == NetVariant::resvnet;
  Tensor<T> h = detail::conv_unit(params, "stem", x, {1, 1, 1}, {1, 1, 1}, tape);
  std::vector<Tensor<T>> enc(spec.depth);
  for (int level = 0; level < spec.depth; ++level) {
    if (level > 0)
      h = detail::conv_unit(params, "down" + std::to_string(level), h,
                            {2, 2, 2}, {0, 0, 0}, tape);
    h = detail::block_forward(params, "enc" + std::to_string(level), h,
                              residual, tape);
    enc[level] = h;
  }
  for (int level = spec.depth - 1; level >= 1; --level) {
    const std::string up = "up" + std::to_string(level);
    h = transposed_conv3d(h, params.at(up + ".tconv.w"), {2, 2, 2}, tape);
    h = add_bias(h, params.at(up + ".tconv.b"), tape);
    h = instance_norm(h, params.at(up + ".norm.g"), params.at(up + ".norm.b"),
                      1e-5, tape);
    h = relu(h, tape);
    h = add(h, enc[level - 1], tape);  // additive encoder skip
    h = detail::block_forward(params, "dec" + std::to_string(level - 1), h,
                              residual, tape);
  }
  Tensor<T> logits =
      conv3d(h, params.at("head.conv.w"), {1, 1, 1}, {0, 0, 0}, tape);
  return add_bias(logits, params.at("head.conv.b"), tape);
}

}  // namespace rail
