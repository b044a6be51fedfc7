#include "ifnet/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "ifnet/kernels.hpp"

namespace ifnet {
namespace {

std::uint64_t fresh_generation() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  // splitmix64 finalizer over an FNV-style fold
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  fail(ErrorKind::ShapeMismatch, std::string(op) + ": " + detail);
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* col) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = x + c * height * width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          T* row = dst + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(row, row + out_w, T(0));
            continue;
          }
          const T* src_row = src + static_cast<std::size_t>(iy) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                          ? T(0)
                          : src_row[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h,
                std::size_t out_w, T* dx) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = dx + c * height * width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst_row = dst + static_cast<std::size_t>(iy) * width;
          const T* row = src + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            dst_row[static_cast<std::size_t>(ix)] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Graph<T>::Graph() : generation_(fresh_generation()) {}

template <typename T>
void Graph<T>::reset() {
  nodes_.clear();
  trace_.clear();
  signature_ = 0;
  at_kink_ = false;
  generation_ = fresh_generation();
}

template <typename T>
void Graph<T>::note_branch(std::uint64_t decision) {
  signature_ = mix(signature_, decision);
}

template <typename T>
std::size_t Graph<T>::check(Var v, std::string_view op) const {
  if (v.generation_ != generation_ || v.id_ >= nodes_.size())
    fail(ErrorKind::BackwardBeforeForward,
         std::string(op) + ": variable does not belong to the current forward pass");
  return v.id_;
}

template <typename T>
std::vector<T>& Graph<T>::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.value().size()) n.grad.assign(n.value().size(), T(0));
  return n.grad;
}

template <typename T>
typename Graph<T>::Var Graph<T>::push(std::string_view op, Tensor<T> value, bool needs_grad,
                                      std::function<void(Graph&, std::size_t)> backward) {
  Node n;
  n.op = op;
  n.owned = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(nodes_.size() - 1, generation_);
}

template <typename T>
typename Graph<T>::Var Graph<T>::bind(Tensor<T>& tensor) {
  Node n;
  n.op = "leaf";
  n.bound = &tensor;
  n.grad_target = &tensor;
  n.needs_grad = tensor.requires_grad();
  if (n.needs_grad) {
    n.backward = [](Graph& g, std::size_t self) {
      auto& node = g.nodes_[self];
      auto dst = node.grad_target->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
    };
  }
  nodes_.push_back(std::move(n));
  return Var(nodes_.size() - 1, generation_);
}

template <typename T>
typename Graph<T>::Var Graph<T>::bind(const Tensor<T>& tensor) {
  Node n;
  n.op = "leaf";
  n.bound = &tensor;
  nodes_.push_back(std::move(n));
  return Var(nodes_.size() - 1, generation_);
}

template <typename T>
typename Graph<T>::Var Graph<T>::constant(Tensor<T> tensor) {
  tensor.set_requires_grad(false);
  return push("constant", std::move(tensor), false, {});
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  return nodes_[check(v, "value")].value();
}

template <typename T>
std::vector<T> Graph<T>::grad(Var v) const {
  const auto& n = nodes_[check(v, "grad")];
  if (n.grad.size() == n.value().size()) return n.grad;
  return std::vector<T>(n.value().size(), T(0));
}

template <typename T>
std::vector<std::string_view> Graph<T>::recorded_ops() const {
  std::vector<std::string_view> ops;
  ops.reserve(nodes_.size());
  for (const auto& n : nodes_) ops.push_back(n.op);
  return ops;
}

template <typename T>
void Graph<T>::backward(Var output, const Tensor<T>& seed) {
  if (nodes_.empty())
    fail(ErrorKind::BackwardBeforeForward, "backward called on an empty graph");
  const std::size_t out = check(output, "backward");
  if (seed.size() != nodes_[out].value().size())
    shape_error("backward", "seed " + shape_string(seed.shape()) + " vs output " +
                                shape_string(nodes_[out].value().shape()));
  for (auto& n : nodes_) n.grad.clear();
  trace_.clear();
  auto& g = grad_buffer(out);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::size_t id = out + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
    trace_.push_back(n.op);
    n.backward(*this, id);
  }
}

template <typename T>
void Graph<T>::backward(Var scalar_output) {
  const auto& v = value(scalar_output);
  if (v.size() != 1)
    fail(ErrorKind::NonScalarOutput,
         "backward without seed needs a scalar output, got " + shape_string(v.shape()));
  backward(scalar_output, Tensor<T>(v.shape(), std::vector<T>{T(1)}));
}

template <typename T>
typename Graph<T>::Var Graph<T>::conv2d(Var x, Var weight, std::size_t stride,
                                        std::size_t padding) {
  const std::size_t xi = check(x, "conv2d");
  const std::size_t wi = check(weight, "conv2d");
  const auto& xs = nodes_[xi].value().shape();
  const auto& ws = nodes_[wi].value().shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0)
    shape_error("conv2d", "input " + shape_string(xs) + " weight " + shape_string(ws));
  const std::size_t batch = xs[0], channels = xs[1], height = xs[2], width = xs[3];
  const std::size_t out_c = ws[0], k = ws[2];
  if (height + 2 * padding < k || width + 2 * padding < k)
    shape_error("conv2d", "kernel larger than padded input " + shape_string(xs));
  const std::size_t out_h = (height + 2 * padding - k) / stride + 1;
  const std::size_t out_w = (width + 2 * padding - k) / stride + 1;
  const std::size_t plane = out_h * out_w;
  const std::size_t patch = channels * k * k;

  const auto& kern = kernels::active<T>();
  Tensor<T> out(Shape{batch, out_c, out_h, out_w});
  std::vector<T> col(patch * plane);
  const T* xv = nodes_[xi].value().data();
  const T* wv = nodes_[wi].value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(xv + b * channels * height * width, channels, height, width, k, stride, padding, out_h,
           out_w, col.data());
    kern.gemm_nn(out_c, plane, patch, wv, col.data(), out.data() + b * out_c * plane);
  }

  const bool needs = nodes_[xi].needs_grad || nodes_[wi].needs_grad;
  return push("conv2d", std::move(out), needs, [=](Graph& g, std::size_t self) {
    const auto& kt = kernels::active<T>();
    const T* gy = g.nodes_[self].grad.data();
    const T* xval = g.nodes_[xi].value().data();
    const T* wval = g.nodes_[wi].value().data();
    const bool dx_needed = g.nodes_[xi].needs_grad;
    const bool dw_needed = g.nodes_[wi].needs_grad;
    T* dw = dw_needed ? g.grad_buffer(wi).data() : nullptr;
    T* dx = dx_needed ? g.grad_buffer(xi).data() : nullptr;
    std::vector<T> buf(patch * plane);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* gy_b = gy + b * out_c * plane;
      if (dw_needed) {
        im2col(xval + b * channels * height * width, channels, height, width, k, stride, padding,
               out_h, out_w, buf.data());
        kt.gemm_nt(out_c, patch, plane, gy_b, buf.data(), dw);
      }
      if (dx_needed) {
        std::fill(buf.begin(), buf.end(), T(0));
        kt.gemm_tn(patch, plane, out_c, wval, gy_b, buf.data());
        col2im_add(buf.data(), channels, height, width, k, stride, padding, out_h, out_w,
                   dx + b * channels * height * width);
      }
    }
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::affine(Var x, Var weight, Var bias) {
  const std::size_t xi = check(x, "affine");
  const std::size_t wi = check(weight, "affine");
  const std::size_t bi = check(bias, "affine");
  const auto& xs = nodes_[xi].value().shape();
  const auto& ws = nodes_[wi].value().shape();
  const auto& bs = nodes_[bi].value().shape();
  if (xs.empty() || ws.size() != 2 || bs.size() != 1 || bs[0] != ws[0] ||
      nodes_[xi].value().size() != xs[0] * ws[1])
    shape_error("affine", "input " + shape_string(xs) + " weight " + shape_string(ws) + " bias " +
                              shape_string(bs));
  const std::size_t batch = xs[0], in = ws[1], outd = ws[0];
  Tensor<T> out(Shape{batch, outd});
  const T* bv = nodes_[bi].value().data();
  for (std::size_t r = 0; r < batch; ++r) std::copy(bv, bv + outd, out.data() + r * outd);
  kernels::active<T>().gemm_nt(batch, outd, in, nodes_[xi].value().data(),
                               nodes_[wi].value().data(), out.data());
  const bool needs = nodes_[xi].needs_grad || nodes_[wi].needs_grad || nodes_[bi].needs_grad;
  return push("affine", std::move(out), needs, [=](Graph& g, std::size_t self) {
    const auto& kt = kernels::active<T>();
    const T* gy = g.nodes_[self].grad.data();
    if (g.nodes_[wi].needs_grad)
      kt.gemm_tn(outd, in, batch, gy, g.nodes_[xi].value().data(), g.grad_buffer(wi).data());
    if (g.nodes_[xi].needs_grad)
      kt.gemm_nn(batch, in, outd, gy, g.nodes_[wi].value().data(), g.grad_buffer(xi).data());
    if (g.nodes_[bi].needs_grad) {
      auto& db = g.grad_buffer(bi);
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t o = 0; o < outd; ++o) db[o] += gy[r * outd + o];
    }
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::batch_norm(Var x, BatchNormState<T>& state, bool train,
                                            T momentum, T eps) {
  return batch_norm_impl(x, state, train ? &state : nullptr, train, momentum, eps);
}

template <typename T>
typename Graph<T>::Var Graph<T>::batch_norm(Var x, const BatchNormState<T>& state, T eps) {
  return batch_norm_impl(x, state, nullptr, false, T(0), eps);
}

template <typename T>
typename Graph<T>::Var Graph<T>::batch_norm_impl(Var x, const BatchNormState<T>& state,
                                                 BatchNormState<T>* update, bool train,
                                                 T momentum, T eps) {
  const std::size_t xi = check(x, "batch_norm");
  const auto& xs = nodes_[xi].value().shape();
  if (xs.size() < 2 || state.running_mean.size() != xs[1] || state.running_var.size() != xs[1])
    shape_error("batch_norm", "input " + shape_string(xs) + " with " +
                                  std::to_string(state.running_mean.size()) + " channels");
  const std::size_t batch = xs[0], channels = xs[1];
  const std::size_t spatial = nodes_[xi].value().size() / (batch * channels);
  const std::size_t count = batch * spatial;
  const T* xv = nodes_[xi].value().data();

  std::vector<T> inv_std(channels);
  std::vector<T> mean(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (train) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) s += xv[(b * channels + c) * spatial + p];
      const T mu = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) {
          const T d = xv[(b * channels + c) * spatial + p] - mu;
          v += d * d;
        }
      const T var = v / static_cast<T>(count);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      if (update) {
        update->running_mean[c] = (T(1) - momentum) * update->running_mean[c] + momentum * mu;
        update->running_var[c] = (T(1) - momentum) * update->running_var[c] + momentum * unbiased;
      }
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }
  Tensor<T> out(xs);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < spatial; ++p) {
        const std::size_t i = (b * channels + c) * spatial + p;
        out[i] = (xv[i] - mean[c]) * inv_std[c];
      }

  return push("batch_norm", std::move(out), nodes_[xi].needs_grad,
              [=](Graph& g, std::size_t self) {
                const T* gy = g.nodes_[self].grad.data();
                const T* xhat = g.nodes_[self].value().data();
                auto& dx = g.grad_buffer(xi);
                for (std::size_t c = 0; c < channels; ++c) {
                  if (!train) {
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t p = 0; p < spatial; ++p) {
                        const std::size_t i = (b * channels + c) * spatial + p;
                        dx[i] += gy[i] * inv_std[c];
                      }
                    continue;
                  }
                  T sum_g = 0, sum_gx = 0;
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t p = 0; p < spatial; ++p) {
                      const std::size_t i = (b * channels + c) * spatial + p;
                      sum_g += gy[i];
                      sum_gx += gy[i] * xhat[i];
                    }
                  const T n = static_cast<T>(count);
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t p = 0; p < spatial; ++p) {
                      const std::size_t i = (b * channels + c) * spatial + p;
                      dx[i] += inv_std[c] / n * (n * gy[i] - sum_g - xhat[i] * sum_gx);
                    }
                }
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::relu(Var x) {
  const std::size_t xi = check(x, "relu");
  const auto& in = nodes_[xi].value();
  Tensor<T> out(in.shape());
  std::uint64_t word = 0;
  std::uint64_t sig = signature_;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    if (v == T(0)) at_kink_ = true;
    const bool on = v > T(0);
    out[i] = on ? v : T(0);
    word = (word << 1) | (on ? 1u : 0u);
    if ((i & 63) == 63) {
      sig = mix(sig, word);
      word = 0;
    }
  }
  signature_ = mix(sig, word);
  return push("relu", std::move(out), nodes_[xi].needs_grad, [=](Graph& g, std::size_t self) {
    const auto& gy = g.nodes_[self].grad;
    const auto& y = g.nodes_[self].value();
    auto& dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (y[i] > T(0)) dx[i] += gy[i];
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::square(Var x) {
  const std::size_t xi = check(x, "square");
  const auto& in = nodes_[xi].value();
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
  return push("square", std::move(out), nodes_[xi].needs_grad, [=](Graph& g, std::size_t self) {
    const auto& gy = g.nodes_[self].grad;
    const auto& xv = g.nodes_[xi].value();
    auto& dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += T(2) * xv[i] * gy[i];
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::l2_normalize(Var x) {
  const std::size_t xi = check(x, "l2_normalize");
  const auto& in = nodes_[xi].value();
  if (in.rank() != 2) shape_error("l2_normalize", "expects [B, D], got " + shape_string(in.shape()));
  const std::size_t rows = in.extent(0), dim = in.extent(1);
  constexpr T floor = T(1e-12);
  const auto& kern = kernels::active<T>();
  Tensor<T> out(in.shape());
  std::vector<T> denom(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * dim;
    const T norm = std::sqrt(kern.dot(row, row, dim));
    note_branch(norm > floor ? 1 : 0);
    denom[r] = std::max(norm, floor);
    for (std::size_t c = 0; c < dim; ++c) out[r * dim + c] = row[c] / denom[r];
  }
  return push("l2_normalize", std::move(out), nodes_[xi].needs_grad,
              [=](Graph& g, std::size_t self) {
                const auto& kt = kernels::active<T>();
                const auto& gy = g.nodes_[self].grad;
                const auto& y = g.nodes_[self].value();
                auto& dx = g.grad_buffer(xi);
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* yr = y.data() + r * dim;
                  const T* gr = gy.data() + r * dim;
                  const bool clamped = !(denom[r] > floor);
                  const T proj = clamped ? T(0) : kt.dot(yr, gr, dim);
                  for (std::size_t c = 0; c < dim; ++c)
                    dx[r * dim + c] += (gr[c] - yr[c] * proj) / denom[r];
                }
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::reshape(Var x, Shape shape) {
  const std::size_t xi = check(x, "reshape");
  const auto& in = nodes_[xi].value();
  if (shape_size(shape) != in.size())
    shape_error("reshape", shape_string(in.shape()) + " -> " + shape_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(in.values().begin(), in.values().end()));
  return push("reshape", std::move(out), nodes_[xi].needs_grad, [=](Graph& g, std::size_t self) {
    const auto& gy = g.nodes_[self].grad;
    auto& dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += gy[i];
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::sum(Var x) {
  const std::size_t xi = check(x, "sum");
  T s = 0;
  for (T v : nodes_[xi].value().values()) s += v;
  return push("sum", Tensor<T>(Shape{1}, std::vector<T>{s}), nodes_[xi].needs_grad,
              [=](Graph& g, std::size_t self) {
                const T gy = g.nodes_[self].grad[0];
                for (auto& d : g.grad_buffer(xi)) d += gy;
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::mean(Var x) {
  const std::size_t xi = check(x, "mean");
  const auto& in = nodes_[xi].value();
  if (in.size() == 0) shape_error("mean", "empty input");
  T s = 0;
  for (T v : in.values()) s += v;
  const T n = static_cast<T>(in.size());
  return push("mean", Tensor<T>(Shape{1}, std::vector<T>{s / n}), nodes_[xi].needs_grad,
              [=](Graph& g, std::size_t self) {
                const T gy = g.nodes_[self].grad[0] / n;
                for (auto& d : g.grad_buffer(xi)) d += gy;
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::reduce_extreme(Var x, bool take_max) {
  const std::string_view op = take_max ? "max" : "min";
  const std::size_t xi = check(x, op);
  const auto& in = nodes_[xi].value();
  if (in.size() == 0) shape_error(op, "empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < in.size(); ++i)
    if (take_max ? in[i] > in[best] : in[i] < in[best]) best = i;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (i != best && in[i] == in[best]) at_kink_ = true;
  note_branch(best);
  return push(op, Tensor<T>(Shape{1}, std::vector<T>{in[best]}), nodes_[xi].needs_grad,
              [=](Graph& g, std::size_t self) {
                g.grad_buffer(xi)[best] += g.nodes_[self].grad[0];
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::max(Var x) {
  return reduce_extreme(x, true);
}

template <typename T>
typename Graph<T>::Var Graph<T>::min(Var x) {
  return reduce_extreme(x, false);
}

template <typename T>
typename Graph<T>::Var Graph<T>::pairwise_distance(Var a, Var b) {
  const std::size_t ai = check(a, "pairwise_distance");
  const std::size_t bi = check(b, "pairwise_distance");
  const auto& av = nodes_[ai].value();
  const auto& bv = nodes_[bi].value();
  if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(1))
    shape_error("pairwise_distance", shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  const std::size_t n = av.extent(0), m = bv.extent(0), dim = av.extent(1);
  const auto& kern = kernels::active<T>();
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const T d = std::sqrt(std::max(
          kern.squared_distance(av.data() + i * dim, bv.data() + j * dim, dim), T(0)));
      if (d == T(0)) at_kink_ = true;
      out[i * m + j] = d;
    }
  const bool needs = nodes_[ai].needs_grad || nodes_[bi].needs_grad;
  return push("pairwise_distance", std::move(out), needs, [=](Graph& g, std::size_t self) {
    const auto& gy = g.nodes_[self].grad;
    const auto& d = g.nodes_[self].value();
    const T* a_val = g.nodes_[ai].value().data();
    const T* b_val = g.nodes_[bi].value().data();
    T* da = g.nodes_[ai].needs_grad ? g.grad_buffer(ai).data() : nullptr;
    T* db = g.nodes_[bi].needs_grad ? g.grad_buffer(bi).data() : nullptr;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const T dist = d[i * m + j];
        const T gv = gy[i * m + j];
        if (dist == T(0) || gv == T(0)) continue;
        const T coef = gv / dist;
        for (std::size_t c = 0; c < dim; ++c) {
          const T diff = coef * (a_val[i * dim + c] - b_val[j * dim + c]);
          if (da) da[i * dim + c] += diff;
          if (db) db[j * dim + c] -= diff;
        }
      }
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::grouped_distance(Var anchors, Var candidates,
                                                  std::size_t per_anchor) {
  const std::size_t ai = check(anchors, "grouped_distance");
  const std::size_t ci = check(candidates, "grouped_distance");
  const auto& av = nodes_[ai].value();
  const auto& cv = nodes_[ci].value();
  if (av.rank() != 2 || cv.rank() != 2 || av.extent(1) != cv.extent(1) || per_anchor == 0 ||
      cv.extent(0) != av.extent(0) * per_anchor)
    shape_error("grouped_distance", shape_string(av.shape()) + " vs " +
                                        shape_string(cv.shape()) + " with " +
                                        std::to_string(per_anchor) + " per anchor");
  const std::size_t n = av.extent(0), dim = av.extent(1);
  const auto& kern = kernels::active<T>();
  Tensor<T> out(Shape{n, per_anchor});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < per_anchor; ++j) {
      const T d = std::sqrt(std::max(
          kern.squared_distance(av.data() + i * dim, cv.data() + (i * per_anchor + j) * dim, dim),
          T(0)));
      if (d == T(0)) at_kink_ = true;
      out[i * per_anchor + j] = d;
    }
  const bool needs = nodes_[ai].needs_grad || nodes_[ci].needs_grad;
  return push("grouped_distance", std::move(out), needs, [=](Graph& g, std::size_t self) {
    const auto& gy = g.nodes_[self].grad;
    const auto& d = g.nodes_[self].value();
    const T* a_val = g.nodes_[ai].value().data();
    const T* c_val = g.nodes_[ci].value().data();
    T* da = g.nodes_[ai].needs_grad ? g.grad_buffer(ai).data() : nullptr;
    T* dc = g.nodes_[ci].needs_grad ? g.grad_buffer(ci).data() : nullptr;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < per_anchor; ++j) {
        const std::size_t e = i * per_anchor + j;
        if (d[e] == T(0) || gy[e] == T(0)) continue;
        const T coef = gy[e] / d[e];
        for (std::size_t c = 0; c < dim; ++c) {
          const T diff = coef * (a_val[i * dim + c] - c_val[e * dim + c]);
          if (da) da[i * dim + c] += diff;
          if (dc) dc[e * dim + c] -= diff;
        }
      }
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::gather(Var x, std::vector<std::size_t> flat_indices) {
  const std::size_t xi = check(x, "gather");
  const auto& in = nodes_[xi].value();
  Tensor<T> out(Shape{flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= in.size())
      shape_error("gather", "index " + std::to_string(flat_indices[i]) + " outside " +
                                shape_string(in.shape()));
    out[i] = in[flat_indices[i]];
  }
  return push("gather", std::move(out), nodes_[xi].needs_grad,
              [xi, idx = std::move(flat_indices)](Graph& g, std::size_t self) {
                const auto& gy = g.nodes_[self].grad;
                auto& dx = g.grad_buffer(xi);
                for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += gy[i];
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::gather_rows(Var x, std::vector<std::size_t> rows) {
  const std::size_t xi = check(x, "gather_rows");
  const auto& in = nodes_[xi].value();
  if (in.rank() != 2) shape_error("gather_rows", "expects rank 2, got " + shape_string(in.shape()));
  const std::size_t dim = in.extent(1);
  Tensor<T> out(Shape{rows.size(), dim});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= in.extent(0))
      shape_error("gather_rows", "row " + std::to_string(rows[r]) + " outside " +
                                     shape_string(in.shape()));
    std::copy_n(in.data() + rows[r] * dim, dim, out.data() + r * dim);
  }
  return push("gather_rows", std::move(out), nodes_[xi].needs_grad,
              [xi, dim, idx = std::move(rows)](Graph& g, std::size_t self) {
                const auto& gy = g.nodes_[self].grad;
                auto& dx = g.grad_buffer(xi);
                for (std::size_t r = 0; r < idx.size(); ++r)
                  for (std::size_t c = 0; c < dim; ++c) dx[idx[r] * dim + c] += gy[r * dim + c];
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::elementwise_binary(Var a, Var b, T sign_b, std::string_view op) {
  const std::size_t ai = check(a, op);
  const std::size_t bi = check(b, op);
  const auto& av = nodes_[ai].value();
  const auto& bv = nodes_[bi].value();
  if (av.shape() != bv.shape())
    shape_error(op, shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = sign_b > T(0) ? av[i] + bv[i] : av[i] - bv[i];
  const bool needs = nodes_[ai].needs_grad || nodes_[bi].needs_grad;
  return push(op, std::move(out), needs, [=](Graph& g, std::size_t self) {
    const auto& gy = g.nodes_[self].grad;
    if (g.nodes_[ai].needs_grad) {
      auto& da = g.grad_buffer(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
    }
    if (g.nodes_[bi].needs_grad) {
      auto& db = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) db[i] += sign_b * gy[i];
    }
  });
}

template <typename T>
typename Graph<T>::Var Graph<T>::add(Var a, Var b) {
  return elementwise_binary(a, b, T(1), "add");
}

template <typename T>
typename Graph<T>::Var Graph<T>::sub(Var a, Var b) {
  return elementwise_binary(a, b, T(-1), "sub");
}

template <typename T>
typename Graph<T>::Var Graph<T>::mul_elementwise(Var a, std::vector<T> factors) {
  const std::size_t ai = check(a, "mul_elementwise");
  const auto& av = nodes_[ai].value();
  if (factors.size() != av.size())
    shape_error("mul_elementwise", std::to_string(factors.size()) + " factors for " +
                                       shape_string(av.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = factors[i] * av[i];
  return push("mul_elementwise", std::move(out), nodes_[ai].needs_grad,
              [ai, f = std::move(factors)](Graph& g, std::size_t self) {
                const auto& gy = g.nodes_[self].grad;
                auto& da = g.grad_buffer(ai);
                for (std::size_t i = 0; i < gy.size(); ++i) da[i] += f[i] * gy[i];
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::add_scalar(Var a, T value) {
  const std::size_t ai = check(a, "add_scalar");
  const auto& av = nodes_[ai].value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = value + av[i];
  return push("add_scalar", std::move(out), nodes_[ai].needs_grad,
              [ai](Graph& g, std::size_t self) {
                const auto& gy = g.nodes_[self].grad;
                auto& da = g.grad_buffer(ai);
                for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
              });
}

template <typename T>
typename Graph<T>::Var Graph<T>::mul_scalar(Var a, T value) {
  const std::size_t ai = check(a, "mul_scalar");
  const auto& av = nodes_[ai].value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = value * av[i];
  return push("mul_scalar", std::move(out), nodes_[ai].needs_grad,
              [ai, value](Graph& g, std::size_t self) {
                const auto& gy = g.nodes_[self].grad;
                auto& da = g.grad_buffer(ai);
                for (std::size_t i = 0; i < gy.size(); ++i) da[i] += value * gy[i];
              });
}

template class Graph<float>;
template class Graph<double>;

}  // namespace ifnet
