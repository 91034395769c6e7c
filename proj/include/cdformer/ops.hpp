/*
 * Copyright (c) 2026 The cdformer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Differentiable operations over Tensor<T>. Every function returns a new
// tensor; when an input requires grad the result records a backward closure.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdformer/tensor.hpp"

namespace cdformer {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline std::size_t leading_rows(const Shape& s) {
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = detail::grad_of(a.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = detail::grad_of(b.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += g[i];
    }
  });
}

template <Scalar T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = detail::grad_of(a.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = detail::grad_of(b.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = detail::grad_of(a.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (T* gb = detail::grad_of(b.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [a, s](TensorNode<T>& self) {
    if (T* ga = detail::grad_of(a.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * s;
    }
  });
}

template <Scalar T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>("sum", Shape{}, {acc}, {a}, [a](TensorNode<T>& self) {
    if (T* ga = detail::grad_of(a.node())) {
      const T g = self.grad[0];
      for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
    }
  });
}

template <Scalar T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <Scalar T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a}, [a](TensorNode<T>& self) {
    if (T* ga = detail::grad_of(a.node())) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
  });
}

/// Tanh-approximated Gaussian error linear unit:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <Scalar T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = static_cast<T>(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> v(x.ptr(), static_cast<Eigen::Index>(x.numel()));
  auto th = std::make_shared<Arr>((kC * (v + kA * v.cube())).tanh());
  std::vector<T> out(x.numel());
  Eigen::Map<Arr>(out.data(), v.size()) = T(0.5) * v * (T(1) + *th);
  return make_result<T>("gelu", x.shape(), std::move(out), {x}, [x, th](TensorNode<T>& self) {
    T* gx = detail::grad_of(x.node());
    if (!gx) return;
    const Eigen::Index n = static_cast<Eigen::Index>(self.grad.size());
    const Eigen::Map<const Arr> v(x.ptr(), n), g(self.grad.data(), n);
    const Arr& t = *th;
    Eigen::Map<Arr>(gx, n) +=
        g * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * kC * (T(1) + T(3) * kA * v.square()));
  });
}

// ---------------------------------------------------------------- linear algebra

/// Batched matrix product with numpy-style broadcasting of leading extents.
template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t P = a.dim(-2), Q = a.dim(-1), R = b.dim(-1);
  const Shape ab(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  const std::size_t rank = std::max(ab.size(), bb.size());
  Shape batch(rank, 1), sa(rank, 1), sb(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    if (i < ab.size()) sa[rank - 1 - i] = ab[ab.size() - 1 - i];
    if (i < bb.size()) sb[rank - 1 - i] = bb[bb.size() - 1 - i];
  }
  for (std::size_t i = 0; i < rank; ++i) {
    if (sa[i] != sb[i] && sa[i] != 1 && sb[i] != 1) {
      throw DimensionError("matmul: batch extents not broadcastable " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
    }
    batch[i] = std::max(sa[i], sb[i]);
  }
  const std::size_t nb = shape_numel(batch);
  std::vector<std::size_t> off_a(nb), off_b(nb);
  for (std::size_t flat = 0; flat < nb; ++flat) {
    std::size_t rem = flat, ia = 0, ib = 0, stride_a = 1, stride_b = 1;
    for (std::size_t d = rank; d-- > 0;) {
      const std::size_t coord = rem % batch[d];
      rem /= batch[d];
      ia += (sa[d] == 1 ? 0 : coord) * stride_a;
      ib += (sb[d] == 1 ? 0 : coord) * stride_b;
      stride_a *= sa[d];
      stride_b *= sb[d];
    }
    off_a[flat] = ia * P * Q;
    off_b[flat] = ib * Q * R;
  }
  std::vector<T> out(nb * P * R);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::MatMap<T>(out.data() + i * P * R, P, R).noalias() =
        detail::ConstMatMap<T>(a.ptr() + off_a[i], P, Q) * detail::ConstMatMap<T>(b.ptr() + off_b[i], Q, R);
  }
  Shape out_shape = batch;
  out_shape.push_back(P);
  out_shape.push_back(R);
  return make_result<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                        [a, b, off_a, off_b, P, Q, R](TensorNode<T>& self) {
                          T* ga = detail::grad_of(a.node());
                          T* gb = detail::grad_of(b.node());
                          for (std::size_t i = 0; i < off_a.size(); ++i) {
                            detail::ConstMatMap<T> g(self.grad.data() + i * P * R, P, R);
                            if (ga) {
                              detail::MatMap<T>(ga + off_a[i], P, Q).noalias() +=
                                  g * detail::ConstMatMap<T>(b.ptr() + off_b[i], Q, R).transpose();
                            }
                            if (gb) {
                              detail::MatMap<T>(gb + off_b[i], Q, R).noalias() +=
                                  detail::ConstMatMap<T>(a.ptr() + off_a[i], P, Q).transpose() * g;
                            }
                          }
                        });
}

/// Weight (C_in x C_out) and optional bias (C_out).
template <Scalar T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  bool has_bias() const { return bias.defined(); }
};

/// x . W + b over the last axis.
template <Scalar T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  const Tensor<T>& w = p.weight;
  const Tensor<T>& b = p.bias;
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = detail::leading_rows(x.shape());
  const std::size_t cin = w.dim(0), cout = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match C_out=" + std::to_string(cout));
  }
  std::vector<T> out(rows * cout);
  detail::MatMap<T> y(out.data(), rows, cout);
  y.noalias() = detail::ConstMatMap<T>(x.ptr(), rows, cin) * detail::ConstMatMap<T>(w.ptr(), cin, cout);
  if (b.defined()) {
    const T* bp = b.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out.data() + r * cout;
      for (std::size_t c = 0; c < cout; ++c) row[c] += bp[c];
    }
  }
  Shape shape = x.shape();
  shape.back() = cout;
  return make_result<T>("linear", std::move(shape), std::move(out), {x, w, b},
                        [x, w, b, rows, cin, cout](TensorNode<T>& self) {
                          detail::ConstMatMap<T> g(self.grad.data(), rows, cout);
                          if (T* gx = detail::grad_of(x.node())) {
                            detail::MatMap<T>(gx, rows, cin).noalias() +=
                                g * detail::ConstMatMap<T>(w.ptr(), cin, cout).transpose();
                          }
                          if (T* gw = detail::grad_of(w.node())) {
                            detail::MatMap<T>(gw, cin, cout).noalias() +=
                                detail::ConstMatMap<T>(x.ptr(), rows, cin).transpose() * g;
                          }
                          if (b.defined()) {
                            if (T* gb = detail::grad_of(b.node())) {
                              for (std::size_t r = 0; r < rows; ++r) {
                                const T* gr = self.grad.data() + r * cout;
                                for (std::size_t c = 0; c < cout; ++c) gb[c] += gr[c];
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- normalization

/// Softmax over the last axis, shifted by the row maximum.
template <Scalar T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw DimensionError("softmax_last: empty last axis");
  const std::size_t L = x.dim(-1);
  const std::size_t rows = x.numel() / L;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * L;
    T* o = out.data() + r * L;
    const T mx = *std::max_element(in, in + L);
    T s = 0;
    for (std::size_t j = 0; j < L; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < L; ++j) o[j] /= s;
  }
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>("softmax_last", x.shape(), std::move(out), {x}, [x, saved, L, rows](TensorNode<T>& self) {
    T* gx = detail::grad_of(x.node());
    if (!gx) return;
    const std::vector<T>& y = *saved;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * L;
      const T* yr = y.data() + r * L;
      T dot = 0;
      for (std::size_t j = 0; j < L; ++j) dot += g[j] * yr[j];
      for (std::size_t j = 0; j < L; ++j) gx[r * L + j] += yr[j] * (g[j] - dot);
    }
  });
}

/// Gain and shift of a layer normalization over the last axis.
template <Scalar T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <Scalar T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t C = x.dim(-1);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " do not match C=" + std::to_string(C));
  }
  const std::size_t rows = x.numel() / C;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * C;
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += in[c];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (in[c] - mu) * rs;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = h * gamma[c] + beta[c];
    }
  }
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, rstd, rows, C](TensorNode<T>& self) {
                          T* gx = detail::grad_of(x.node());
                          T* gg = detail::grad_of(gamma.node());
                          T* gbt = detail::grad_of(beta.node());
                          const T inv_c = T(1) / static_cast<T>(C);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* g = self.grad.data() + r * C;
                            const T* h = xhat->data() + r * C;
                            if (gg || gbt) {
                              for (std::size_t c = 0; c < C; ++c) {
                                if (gg) gg[c] += g[c] * h[c];
                                if (gbt) gbt[c] += g[c];
                              }
                            }
                            if (gx) {
                              T m1 = 0, m2 = 0;
                              for (std::size_t c = 0; c < C; ++c) {
                                const T dh = g[c] * gamma[c];
                                m1 += dh;
                                m2 += dh * h[c];
                              }
                              m1 *= inv_c;
                              m2 *= inv_c;
                              const T rs = (*rstd)[r];
                              for (std::size_t c = 0; c < C; ++c) {
                                gx[r * C + c] += rs * (g[c] * gamma[c] - m1 - h[c] * m2);
                              }
                            }
                          }
                        });
}

template <Scalar T>
Tensor<T> layer_norm(const Tensor<T>& x, const NormParams<T>& p, T eps = T(1e-5)) {
  return layer_norm(x, p.gamma, p.beta, eps);
}

// ---------------------------------------------------------------- indexing

/// out[i..., :] = x[idx[i...], :]. Backward scatter-adds into source rows.
template <Scalar T>
Tensor<T> gather_rows(const Tensor<T>& x, const IndexTensor& idx) {
  if (x.rank() != 2) throw DimensionError("gather_rows: source must be rank 2, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  for (std::int64_t i : idx.data) {
    if (i < 0 || static_cast<std::size_t>(i) >= N) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range [0, " + std::to_string(N) + ")");
    }
  }
  std::vector<T> out(idx.data.size() * C);
  for (std::size_t r = 0; r < idx.data.size(); ++r) {
    std::copy_n(x.ptr() + static_cast<std::size_t>(idx.data[r]) * C, C, out.data() + r * C);
  }
  Shape shape = idx.shape;
  shape.push_back(C);
  return make_result<T>("gather_rows", std::move(shape), std::move(out), {x}, [x, idx, C](TensorNode<T>& self) {
    T* gx = detail::grad_of(x.node());
    if (!gx) return;
    for (std::size_t r = 0; r < idx.data.size(); ++r) {
      T* dst = gx + static_cast<std::size_t>(idx.data[r]) * C;
      const T* src = self.grad.data() + r * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  });
}

/// Max over the second-to-last axis: [..., K, C] -> [..., C]. Gradient goes
/// to the first maximal element along K.
template <Scalar T>
Tensor<T> reduce_max_axis(const Tensor<T>& x) {
  if (x.rank() < 2 || x.dim(-2) < 1) throw DimensionError("reduce_max_axis: need [..., K>=1, C], got " + shape_str(x.shape()));
  const std::size_t K = x.dim(-2), C = x.dim(-1);
  const std::size_t outer = x.numel() / (K * C);
  std::vector<T> out(outer * C);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(outer * C, 0);
  for (std::size_t m = 0; m < outer; ++m) {
    const T* base = x.ptr() + m * K * C;
    for (std::size_t c = 0; c < C; ++c) {
      T best = base[c];
      std::uint32_t bi = 0;
      for (std::size_t k = 1; k < K; ++k) {
        if (base[k * C + c] > best) {
          best = base[k * C + c];
          bi = static_cast<std::uint32_t>(k);
        }
      }
      out[m * C + c] = best;
      (*arg)[m * C + c] = bi;
    }
  }
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.push_back(C);
  return make_result<T>("reduce_max_axis", std::move(shape), std::move(out), {x},
                        [x, arg, K, C, outer](TensorNode<T>& self) {
                          T* gx = detail::grad_of(x.node());
                          if (!gx) return;
                          for (std::size_t m = 0; m < outer; ++m) {
                            for (std::size_t c = 0; c < C; ++c) {
                              gx[(m * K + (*arg)[m * C + c]) * C + c] += self.grad[m * C + c];
                            }
                          }
                        });
}

/// Averages src rows into n destination rows by membership idx; rows with no
/// members come out zero. src has shape idx.shape + [C].
template <Scalar T>
Tensor<T> scatter_mean_rows(const Tensor<T>& src, const IndexTensor& idx, std::size_t n) {
  const std::size_t members = idx.data.size();
  if (members == 0 || src.numel() % members != 0) {
    throw DimensionError("scatter_mean_rows: source " + shape_str(src.shape()) + " incompatible with index " +
                         shape_str(idx.shape));
  }
  const std::size_t C = src.numel() / members;
  auto inv_count = std::make_shared<std::vector<T>>(n, T(0));
  for (std::int64_t i : idx.data) {
    if (i < 0 || static_cast<std::size_t>(i) >= n) {
      throw IndexError("scatter_mean_rows: index " + std::to_string(i) + " out of range [0, " + std::to_string(n) + ")");
    }
    (*inv_count)[static_cast<std::size_t>(i)] += T(1);
  }
  for (T& c : *inv_count) c = c > T(0) ? T(1) / c : T(0);
  std::vector<T> out(n * C, T(0));
  for (std::size_t r = 0; r < members; ++r) {
    T* dst = out.data() + static_cast<std::size_t>(idx.data[r]) * C;
    const T* s = src.ptr() + r * C;
    for (std::size_t c = 0; c < C; ++c) dst[c] += s[c];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] *= (*inv_count)[i];
  }
  return make_result<T>("scatter_mean_rows", Shape{n, C}, std::move(out), {src},
                        [src, idx, inv_count, C](TensorNode<T>& self) {
                          T* gs = detail::grad_of(src.node());
                          if (!gs) return;
                          for (std::size_t r = 0; r < idx.data.size(); ++r) {
                            const auto i = static_cast<std::size_t>(idx.data[r]);
                            const T w = (*inv_count)[i];
                            for (std::size_t c = 0; c < C; ++c) gs[r * C + c] += self.grad[i * C + c] * w;
                          }
                        });
}

/// out[a, :] = sum_j weights[a, j] * src[idx[a, j], :]; differentiable in src.
template <Scalar T>
Tensor<T> weighted_gather(const Tensor<T>& src, const IndexTensor& idx, const std::vector<T>& weights) {
  if (src.rank() != 2 || idx.shape.size() != 2 || weights.size() != idx.data.size()) {
    throw DimensionError("weighted_gather: bad shapes " + shape_str(src.shape()) + " / " + shape_str(idx.shape));
  }
  const std::size_t A = idx.rows(), J = idx.cols(), C = src.dim(1);
  for (std::int64_t i : idx.data) {
    if (i < 0 || static_cast<std::size_t>(i) >= src.dim(0)) {
      throw IndexError("weighted_gather: index " + std::to_string(i) + " out of range");
    }
  }
  std::vector<T> out(A * C, T(0));
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t j = 0; j < J; ++j) {
      const T w = weights[a * J + j];
      const T* s = src.ptr() + static_cast<std::size_t>(idx(a, j)) * C;
      for (std::size_t c = 0; c < C; ++c) out[a * C + c] += w * s[c];
    }
  }
  return make_result<T>("weighted_gather", Shape{A, C}, std::move(out), {src},
                        [src, idx, weights, A, J, C](TensorNode<T>& self) {
                          T* gs = detail::grad_of(src.node());
                          if (!gs) return;
                          for (std::size_t a = 0; a < A; ++a) {
                            for (std::size_t j = 0; j < J; ++j) {
                              const T w = weights[a * J + j];
                              T* d = gs + static_cast<std::size_t>(idx(a, j)) * C;
                              for (std::size_t c = 0; c < C; ++c) d[c] += w * self.grad[a * C + c];
                            }
                          }
                        });
}

// ---------------------------------------------------------------- losses

/// Mean over rows of -sum_u target_u log softmax(logits)_u with
/// target = (1 - eps) onehot(label) + eps / U.
template <Scalar T>
Tensor<T> ce_label_smoothing(const Tensor<T>& logits, const std::vector<std::int64_t>& labels, T eps) {
  if (logits.rank() != 2) throw DimensionError("ce_label_smoothing: logits must be [B, U], got " + shape_str(logits.shape()));
  if (!(eps >= T(0) && eps < T(1))) throw ContractError("ce_label_smoothing: eps must lie in [0, 1)");
  const std::size_t B = logits.dim(0), U = logits.dim(1);
  if (labels.size() != B) {
    throw DimensionError("ce_label_smoothing: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) + " rows");
  }
  for (std::int64_t l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= U) {
      throw IndexError("ce_label_smoothing: label " + std::to_string(l) + " out of range [0, " + std::to_string(U) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(B * U);
  T total = 0;
  const T off = eps / static_cast<T>(U);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * U;
    const T mx = *std::max_element(z, z + U);
    T s = 0;
    for (std::size_t u = 0; u < U; ++u) s += std::exp(z[u] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t u = 0; u < U; ++u) {
      const T logp = z[u] - lse;
      (*probs)[b * U + u] = std::exp(logp);
      const T target = off + (static_cast<std::int64_t>(u) == labels[b] ? T(1) - eps : T(0));
      total -= target * logp;
    }
  }
  total /= static_cast<T>(B);
  return make_result<T>("ce_label_smoothing", Shape{}, {total}, {logits},
                        [logits, labels, probs, B, U, eps, off](TensorNode<T>& self) {
                          T* gl = detail::grad_of(logits.node());
                          if (!gl) return;
                          const T g = self.grad[0] / static_cast<T>(B);
                          for (std::size_t b = 0; b < B; ++b) {
                            for (std::size_t u = 0; u < U; ++u) {
                              const T target = off + (static_cast<std::int64_t>(u) == labels[b] ? T(1) - eps : T(0));
                              gl[b * U + u] += g * ((*probs)[b * U + u] - target);
                            }
                          }
                        });
}

}  // namespace cdformer
