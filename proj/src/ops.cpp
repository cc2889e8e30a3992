#include "wav2sleep/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace wav2sleep {

namespace {

std::string describe(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(x.shape()));
  }
}

template <typename T>
std::vector<T>& grad_of(detail::Node<T>& node) {
  return node.grad_buffer();
}

// y += a * x over n elements.
template <typename T>
inline void axpy(std::size_t n, T a, const T* __restrict x, T* __restrict y) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
inline T dot(std::size_t n, const T* __restrict x, const T* __restrict y) {
  T acc{0};
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
inline T gaussian_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
inline T gaussian_pdf(T x) {
  return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

}  // namespace

// --- AttentionMask ---------------------------------------------------------

AttentionMask AttentionMask::all(std::size_t queries, std::size_t keys) {
  AttentionMask mask;
  mask.groups = 1;
  mask.queries = queries;
  mask.keys = keys;
  mask.allowed.assign(queries * keys, 1);
  return mask;
}

AttentionMask AttentionMask::from_keys(const std::vector<std::vector<bool>>& keys_allowed,
                                       std::size_t queries) {
  AttentionMask mask;
  mask.groups = keys_allowed.size();
  mask.queries = queries;
  mask.keys = keys_allowed.empty() ? 0 : keys_allowed.front().size();
  mask.allowed.resize(mask.groups * queries * mask.keys);
  for (std::size_t g = 0; g < mask.groups; ++g) {
    if (keys_allowed[g].size() != mask.keys) {
      throw ShapeError("attention mask: ragged key rows");
    }
    for (std::size_t q = 0; q < queries; ++q) {
      for (std::size_t k = 0; k < mask.keys; ++k) {
        mask.allowed[(g * queries + q) * mask.keys + k] = keys_allowed[g][k] ? 1 : 0;
      }
    }
  }
  return mask;
}

void AttentionMask::validate() const {
  if (allowed.size() != groups * queries * keys) {
    throw ShapeError("attention mask: storage does not match [groups, queries, keys]");
  }
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t q = 0; q < queries; ++q) {
      bool any = false;
      for (std::size_t k = 0; k < keys && !any; ++k) any = at(g, q, k);
      if (!any) {
        throw PreconditionError("attention mask: query row " + std::to_string(q) + " of group " +
                                std::to_string(g) + " has no allowed key");
      }
    }
  }
}

// --- elementwise and structural -------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(describe("add", a.shape(), b.shape()));
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      auto& g = grad_of(*parent);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(describe("mul", a.shape(), b.shape()));
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), {&x}, [factor](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (auto v : x.values()) total += v;
  return Tensor<T>::make_result({}, {total}, {&x}, [](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    const T up = self.grad[0];
    for (auto& gi : g) gi += up;
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  require_rank(row, 1, "add_row");
  if (x.rank() == 0 || x.shape().back() != row.dim(0)) {
    throw ShapeError(describe("add_row", x.shape(), row.shape()));
  }
  const std::size_t d = row.dim(0);
  const std::size_t rows = x.numel() / d;
  auto xv = x.values();
  auto rv = row.values();
  std::vector<T> out(xv.begin(), xv.end());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += rv[j];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {&x, &row},
                                [d, rows](detail::Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pr = *self.parents[1];
                                  if (px.requires_grad) {
                                    auto& g = grad_of(px);
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (pr.requires_grad) {
                                    auto& g = grad_of(pr);
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError(describe("reshape", x.shape(), shape));
  auto xv = x.values();
  return Tensor<T>::make_result(std::move(shape), std::vector<T>(xv.begin(), xv.end()), {&x},
                                [](detail::Node<T>& self) {
                                  auto& g = grad_of(*self.parents[0]);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> swap_last_axes(const Tensor<T>& x) {
  require_rank(x, 3, "swap_last_axes");
  const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2);
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t a = 0; a < A; ++a) {
    const T* src = xv.data() + a * B * C;
    T* dst = out.data() + a * B * C;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) dst[c * B + b] = src[b * C + c];
    }
  }
  return Tensor<T>::make_result({A, C, B}, std::move(out), {&x}, [A, B, C](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t a = 0; a < A; ++a) {
      T* dst = g.data() + a * B * C;
      const T* src = self.grad.data() + a * B * C;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) dst[b * C + c] += src[c * B + b];
      }
    }
  });
}

template <typename T>
Tensor<T> fold_epochs(const Tensor<T>& x, std::size_t epochs) {
  require_rank(x, 3, "fold_epochs");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (epochs == 0 || L % epochs != 0) {
    throw ShapeError("fold_epochs: length " + std::to_string(L) + " is not a multiple of " +
                     std::to_string(epochs) + " epochs");
  }
  const std::size_t per = L / epochs;
  const std::size_t width = C * per;
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.data() + (b * C + c) * L;
      for (std::size_t t = 0; t < epochs; ++t) {
        T* dst = out.data() + (b * epochs + t) * width + c * per;
        std::copy_n(src + t * per, per, dst);
      }
    }
  }
  return Tensor<T>::make_result(
      {B, epochs, width}, std::move(out), {&x}, [B, C, L, epochs, per, width](detail::Node<T>& self) {
        auto& g = grad_of(*self.parents[0]);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            T* dst = g.data() + (b * C + c) * L;
            for (std::size_t t = 0; t < epochs; ++t) {
              const T* src = self.grad.data() + (b * epochs + t) * width + c * per;
              for (std::size_t j = 0; j < per; ++j) dst[t * per + j] += src[j];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& row, std::size_t n) {
  require_rank(row, 1, "broadcast_rows");
  const std::size_t d = row.dim(0);
  auto rv = row.values();
  std::vector<T> out(n * d);
  for (std::size_t r = 0; r < n; ++r) std::copy(rv.begin(), rv.end(), out.begin() + r * d);
  return Tensor<T>::make_result({n, d}, std::move(out), {&row}, [n, d](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
    }
  });
}

template <typename T>
Tensor<T> stack_tokens(const std::vector<Tensor<T>>& tokens) {
  if (tokens.empty()) throw PreconditionError("stack_tokens: no tokens");
  const Shape& first = tokens.front().shape();
  if (first.size() != 2) throw ShapeError("stack_tokens: tokens must be [N, d]");
  for (const auto& t : tokens) {
    if (t.shape() != first) throw ShapeError(describe("stack_tokens", first, t.shape()));
  }
  const std::size_t N = first[0], d = first[1], m = tokens.size();
  std::vector<T> out(N * m * d);
  for (std::size_t j = 0; j < m; ++j) {
    auto tv = tokens[j].values();
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(tv.data() + n * d, d, out.data() + (n * m + j) * d);
    }
  }
  return Tensor<T>::make_result({N, m, d}, std::move(out), tokens, [N, m, d](detail::Node<T>& self) {
    for (std::size_t j = 0; j < m; ++j) {
      auto& parent = *self.parents[j];
      if (!parent.requires_grad) continue;
      auto& g = grad_of(parent);
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = self.grad.data() + (n * m + j) * d;
        for (std::size_t i = 0; i < d; ++i) g[n * d + i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> take_token(const Tensor<T>& x, std::size_t index) {
  require_rank(x, 3, "take_token");
  const std::size_t N = x.dim(0), m = x.dim(1), d = x.dim(2);
  if (index >= m) throw ShapeError("take_token: index out of range");
  auto xv = x.values();
  std::vector<T> out(N * d);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(xv.data() + (n * m + index) * d, d, out.data() + n * d);
  }
  return Tensor<T>::make_result({N, d}, std::move(out), {&x}, [N, m, d, index](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < d; ++i) g[(n * m + index) * d + i] += self.grad[n * d + i];
    }
  });
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> rows, std::size_t total) {
  if (x.rank() == 0 || x.dim(0) != rows.size()) {
    throw ShapeError("scatter_rows: leading dimension must equal the number of target rows");
  }
  const std::size_t stride = rows.empty() ? 0 : x.numel() / rows.size();
  for (auto r : rows) {
    if (r >= total) throw ShapeError("scatter_rows: target row out of range");
  }
  Shape shape = x.shape();
  shape[0] = total;
  std::vector<T> out(numel(shape), T{0});
  auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xv.data() + i * stride, stride, out.data() + rows[i] * stride);
  }
  std::vector<std::size_t> targets(rows.begin(), rows.end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {&x},
                                [targets = std::move(targets), stride](detail::Node<T>& self) {
                                  auto& g = grad_of(*self.parents[0]);
                                  for (std::size_t i = 0; i < targets.size(); ++i) {
                                    const T* src = self.grad.data() + targets[i] * stride;
                                    for (std::size_t j = 0; j < stride; ++j) g[i * stride + j] += src[j];
                                  }
                                });
}

// --- network layers --------------------------------------------------------

namespace {

// Time-tile width for the convolution kernels; a tile of every source row
// stays in L1 while a block of destination rows is accumulated.
constexpr std::size_t kConvTile = 512;
constexpr std::size_t kConvRows = 4;

// dst[j][t] += sum_i sum_k w[j][i][k] * src[i][t + offs[k]] over one tile of
// JB destination rows, with zeros outside [0, L).
template <typename T, std::size_t K, std::size_t JB>
void conv_tile(const T* src, std::size_t n_src, const T* w, std::size_t k_runtime,
               const std::ptrdiff_t* offs, std::ptrdiff_t len, std::ptrdiff_t t0, std::ptrdiff_t tn,
               T (*acc)[kConvTile]) {
  const std::size_t kk = K ? K : k_runtime;
  const std::ptrdiff_t inner_lo = std::clamp<std::ptrdiff_t>(-offs[0], t0, t0 + tn);
  const std::ptrdiff_t inner_hi = std::clamp<std::ptrdiff_t>(len - offs[kk - 1], inner_lo, t0 + tn);
  for (std::size_t i = 0; i < n_src; ++i) {
    const T* row = src + i * static_cast<std::size_t>(len);
    T wl[JB][K ? K : 16];
    for (std::size_t j = 0; j < JB; ++j) {
      for (std::size_t k = 0; k < kk; ++k) wl[j][k] = w[(j * n_src + i) * kk + k];
    }
    auto edge = [&](std::ptrdiff_t t) {
      for (std::size_t k = 0; k < kk; ++k) {
        const auto s = t + offs[k];
        if (s < 0 || s >= len) continue;
        for (std::size_t j = 0; j < JB; ++j) acc[j][t - t0] += wl[j][k] * row[s];
      }
    };
    for (std::ptrdiff_t t = t0; t < inner_lo; ++t) edge(t);
    if constexpr (K != 0) {
      for (std::size_t j = 0; j < JB; ++j) {
        T* a = acc[j] - t0;
        const T* wk = wl[j];
#pragma omp simd
        for (std::ptrdiff_t t = inner_lo; t < inner_hi; ++t) {
          T sum = a[t];
          for (std::size_t k = 0; k < K; ++k) sum += wk[k] * row[t + offs[k]];
          a[t] = sum;
        }
      }
    } else {
      for (std::size_t k = 0; k < kk; ++k) {
        for (std::size_t j = 0; j < JB; ++j) {
          if (inner_hi > inner_lo) {
            axpy<T>(static_cast<std::size_t>(inner_hi - inner_lo), wl[j][k], row + inner_lo + offs[k],
                    acc[j] + (inner_lo - t0));
          }
        }
      }
    }
    for (std::ptrdiff_t t = inner_hi; t < t0 + tn; ++t) edge(t);
  }
}

// Adds the correlation of n_src rows into n_dst rows (each of length len).
// w is laid out [n_dst][n_src][k]; offs are ascending tap offsets.
template <typename T>
void conv_accumulate(const T* src, std::size_t n_src, const T* w, std::size_t k,
                     const std::ptrdiff_t* offs, std::size_t len, T* dst, std::size_t n_dst) {
  if (k > 16) throw PreconditionError("conv1d: kernel size above 16 is not supported");
  alignas(64) T acc[kConvRows][kConvTile];
  const auto slen = static_cast<std::ptrdiff_t>(len);
  for (std::size_t t0 = 0; t0 < len; t0 += kConvTile) {
    const auto tn = static_cast<std::ptrdiff_t>(std::min(kConvTile, len - t0));
    for (std::size_t j0 = 0; j0 < n_dst; j0 += kConvRows) {
      const std::size_t jb = std::min(kConvRows, n_dst - j0);
      for (std::size_t j = 0; j < jb; ++j) std::fill_n(acc[j], tn, T{0});
      const T* wj = w + j0 * n_src * k;
      const auto st0 = static_cast<std::ptrdiff_t>(t0);
      auto run = [&]<std::size_t K>() {
        if (jb == kConvRows) {
          conv_tile<T, K, kConvRows>(src, n_src, wj, k, offs, slen, st0, tn, acc);
        } else {
          for (std::size_t j = 0; j < jb; ++j) {
            conv_tile<T, K, 1>(src, n_src, wj + j * n_src * k, k, offs, slen, st0, tn, acc + j);
          }
        }
      };
      switch (k) {
        case 1: run.template operator()<1>(); break;
        case 3: run.template operator()<3>(); break;
        case 5: run.template operator()<5>(); break;
        case 7: run.template operator()<7>(); break;
        default: run.template operator()<0>(); break;
      }
      for (std::size_t j = 0; j < jb; ++j) {
        T* out = dst + (j0 + j) * len + t0;
#pragma omp simd
        for (std::ptrdiff_t t = 0; t < tn; ++t) out[t] += acc[j][t];
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 std::size_t dilation) {
  require_rank(input, 3, "conv1d input");
  require_rank(weights, 3, "conv1d weights");
  require_rank(bias, 1, "conv1d bias");
  const std::size_t B = input.dim(0), Cin = input.dim(1), L = input.dim(2);
  const std::size_t Cout = weights.dim(0), K = weights.dim(2);
  if (weights.dim(1) != Cin) throw ShapeError(describe("conv1d", input.shape(), weights.shape()));
  if (bias.dim(0) != Cout) throw ShapeError(describe("conv1d bias", weights.shape(), bias.shape()));
  if (K % 2 == 0) throw PreconditionError("conv1d: kernel size must be odd");
  if (dilation == 0) throw PreconditionError("conv1d: dilation must be positive");
  if ((K - 1) * dilation + 1 > L) {
    throw PreconditionError("conv1d: effective kernel span " + std::to_string((K - 1) * dilation + 1) +
                            " exceeds input length " + std::to_string(L));
  }
  const auto pad = static_cast<std::ptrdiff_t>((K - 1) / 2 * dilation);
  std::vector<std::ptrdiff_t> offs(K);
  for (std::size_t k = 0; k < K; ++k) offs[k] = static_cast<std::ptrdiff_t>(k * dilation) - pad;

  auto xv = input.values();
  auto wv = weights.values();
  auto bv = bias.values();
  std::vector<T> out(B * Cout * L);
  for (std::size_t b = 0; b < B; ++b) {
    T* dst = out.data() + b * Cout * L;
    for (std::size_t co = 0; co < Cout; ++co) std::fill_n(dst + co * L, L, bv[co]);
    conv_accumulate<T>(xv.data() + b * Cin * L, Cin, wv.data(), K, offs.data(), L, dst, Cout);
  }

  return Tensor<T>::make_result(
      {B, Cout, L}, std::move(out), {&input, &weights, &bias},
      [B, Cin, Cout, K, L, offs = std::move(offs)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gout = self.grad.data();
        const auto len = static_cast<std::ptrdiff_t>(L);
        if (pb.requires_grad) {
          auto& gb = grad_of(pb);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t co = 0; co < Cout; ++co) {
              const T* g = gout + (b * Cout + co) * L;
              T total{0};
#pragma omp simd reduction(+ : total)
              for (std::size_t t = 0; t < L; ++t) total += g[t];
              gb[co] += total;
            }
          }
        }
        if (pw.requires_grad) {
          auto& gw = grad_of(pw);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t0 = 0; t0 < L; t0 += kConvTile) {
              const auto tn = static_cast<std::ptrdiff_t>(std::min(kConvTile, L - t0));
              const auto st0 = static_cast<std::ptrdiff_t>(t0);
              for (std::size_t co = 0; co < Cout; ++co) {
                const T* g = gout + (b * Cout + co) * L;
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                  const T* in = px.value.data() + (b * Cin + ci) * L;
                  T* gwk = gw.data() + (co * Cin + ci) * K;
                  for (std::size_t k = 0; k < K; ++k) {
                    const auto lo = std::max<std::ptrdiff_t>(st0, -offs[k]);
                    const auto hi = std::min<std::ptrdiff_t>(st0 + tn, len - offs[k]);
                    if (hi > lo) gwk[k] += dot<T>(static_cast<std::size_t>(hi - lo), g + lo, in + lo + offs[k]);
                  }
                }
              }
            }
          }
        }
        if (px.requires_grad) {
          // gin[ci][s] = sum over co, k of w[co][ci][k] * g[co][s - off_k]: the
          // same correlation with transposed weights and reversed taps.
          std::vector<T> wt(Cin * Cout * K);
          std::vector<std::ptrdiff_t> rev(K);
          for (std::size_t k = 0; k < K; ++k) rev[k] = -offs[K - 1 - k];
          for (std::size_t co = 0; co < Cout; ++co) {
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              for (std::size_t k = 0; k < K; ++k) {
                wt[(ci * Cout + co) * K + k] = pw.value[(co * Cin + ci) * K + (K - 1 - k)];
              }
            }
          }
          auto& gx = grad_of(px);
          for (std::size_t b = 0; b < B; ++b) {
            conv_accumulate<T>(gout + b * Cout * L, Cout, wt.data(), K, rev.data(), L,
                               gx.data() + b * Cin * L, Cin);
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool1d(const Tensor<T>& input) {
  require_rank(input, 3, "maxpool1d");
  const std::size_t B = input.dim(0), C = input.dim(1), L = input.dim(2);
  if (L % 2 != 0) {
    throw PreconditionError("maxpool1d: length " + std::to_string(L) + " is odd");
  }
  const std::size_t half = L / 2;
  auto xv = input.values();
  std::vector<T> out(B * C * half);
  std::vector<std::uint8_t> second(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T a = xv[2 * i];
    const T b = xv[2 * i + 1];
    const bool pick_second = b > a;
    second[i] = pick_second ? 1 : 0;
    out[i] = pick_second ? b : a;
  }
  return Tensor<T>::make_result({B, C, half}, std::move(out), {&input},
                                [second = std::move(second)](detail::Node<T>& self) {
                                  auto& g = grad_of(*self.parents[0]);
                                  for (std::size_t i = 0; i < second.size(); ++i) {
                                    g[2 * i + second[i]] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  require_rank(weights, 2, "affine weights");
  require_rank(bias, 1, "affine bias");
  const std::size_t Din = weights.dim(0), Dout = weights.dim(1);
  if (input.rank() == 0 || input.shape().back() != Din) {
    throw ShapeError(describe("affine", input.shape(), weights.shape()));
  }
  if (bias.dim(0) != Dout) throw ShapeError(describe("affine bias", weights.shape(), bias.shape()));
  const std::size_t rows = input.numel() / Din;
  Shape shape = input.shape();
  shape.back() = Dout;

  auto xv = input.values();
  auto wv = weights.values();
  auto bv = bias.values();
  std::vector<T> out(rows * Dout);
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data() + r * Dout;
    std::copy(bv.begin(), bv.end(), o);
    const T* x = xv.data() + r * Din;
    for (std::size_t i = 0; i < Din; ++i) axpy<T>(Dout, x[i], wv.data() + i * Dout, o);
  }
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), {&input, &weights, &bias},
      [rows, Din, Dout](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gout = self.grad.data();
        if (pb.requires_grad) {
          auto& gb = grad_of(pb);
          for (std::size_t r = 0; r < rows; ++r) axpy<T>(Dout, T{1}, gout + r * Dout, gb.data());
        }
        if (pw.requires_grad) {
          auto& gw = grad_of(pw);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* x = px.value.data() + r * Din;
            const T* g = gout + r * Dout;
            for (std::size_t i = 0; i < Din; ++i) {
              if (x[i] != T{0}) axpy<T>(Dout, x[i], g, gw.data() + i * Dout);
            }
          }
        }
        if (px.requires_grad) {
          auto& gx = grad_of(px);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* g = gout + r * Dout;
            T* gi = gx.data() + r * Din;
            for (std::size_t i = 0; i < Din; ++i) gi[i] += dot<T>(Dout, g, pw.value.data() + i * Dout);
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& input) {
  auto xv = input.values();
  std::vector<T> out(xv.size());
  // Derivative cached during the forward pass so backward needs no erf calls.
  std::vector<T> slope(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = xv[i];
    const T cdf = gaussian_cdf(x);
    out[i] = x * cdf;
    slope[i] = cdf + x * gaussian_pdf(x);
  }
  return Tensor<T>::make_result(input.shape(), std::move(out), {&input},
                                [slope = std::move(slope)](detail::Node<T>& self) {
                                  auto& g = grad_of(*self.parents[0]);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * slope[i];
                                });
}

namespace {

// Normalizes `count` contiguous slices of length `len`; writes xhat and 1/std.
template <typename T>
void normalize_slices(const T* x, std::size_t count, std::size_t len, T epsilon, T* xhat,
                      T* inv_std) {
  for (std::size_t s = 0; s < count; ++s) {
    const T* in = x + s * len;
    double mean = 0.0;
    for (std::size_t i = 0; i < len; ++i) mean += in[i];
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double c = in[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(len);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
    inv_std[s] = static_cast<T>(inv);
    for (std::size_t i = 0; i < len; ++i) {
      xhat[s * len + i] = static_cast<T>((in[i] - mean) * inv);
    }
  }
}

// dL/dx for xhat = (x - mean) * inv_std given dL/dxhat.
template <typename T>
void normalize_backward(const T* gxhat, const T* xhat, T inv_std, std::size_t len, T* gx) {
  double mean_g = 0.0, mean_gx = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    mean_g += gxhat[i];
    mean_gx += static_cast<double>(gxhat[i]) * xhat[i];
  }
  mean_g /= static_cast<double>(len);
  mean_gx /= static_cast<double>(len);
  for (std::size_t i = 0; i < len; ++i) {
    gx[i] += static_cast<T>(inv_std * (gxhat[i] - mean_g - xhat[i] * mean_gx));
  }
}

}  // namespace

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& scale_, const Tensor<T>& shift,
                        T epsilon) {
  require_rank(input, 3, "instance_norm");
  const std::size_t B = input.dim(0), C = input.dim(1), L = input.dim(2);
  if (L == 0) throw PreconditionError("instance_norm: empty length");
  require_shape(scale_, {C}, "instance_norm scale");
  require_shape(shift, {C}, "instance_norm shift");
  std::vector<T> xhat(B * C * L);
  std::vector<T> inv_std(B * C);
  normalize_slices(input.values().data(), B * C, L, epsilon, xhat.data(), inv_std.data());
  auto sv = scale_.values();
  auto hv = shift.values();
  std::vector<T> out(xhat.size());
  for (std::size_t s = 0; s < B * C; ++s) {
    const std::size_t c = s % C;
    for (std::size_t i = 0; i < L; ++i) out[s * L + i] = sv[c] * xhat[s * L + i] + hv[c];
  }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {&input, &scale_, &shift},
      [B, C, L, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        auto& ph = *self.parents[2];
        const T* gout = self.grad.data();
        if (ps.requires_grad || ph.requires_grad) {
          auto& gs = grad_of(ps);
          auto& gh = grad_of(ph);
          for (std::size_t s = 0; s < B * C; ++s) {
            const std::size_t c = s % C;
            gs[c] += dot<T>(L, gout + s * L, xhat.data() + s * L);
            T acc{0};
            for (std::size_t i = 0; i < L; ++i) acc += gout[s * L + i];
            gh[c] += acc;
          }
        }
        if (px.requires_grad) {
          auto& gx = grad_of(px);
          std::vector<T> gxhat(L);
          for (std::size_t s = 0; s < B * C; ++s) {
            const T sc = ps.value[s % C];
            for (std::size_t i = 0; i < L; ++i) gxhat[i] = gout[s * L + i] * sc;
            normalize_backward(gxhat.data(), xhat.data() + s * L, inv_std[s], L, gx.data() + s * L);
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& scale_, const Tensor<T>& shift,
                     T epsilon) {
  if (input.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = input.shape().back();
  if (d == 0) throw PreconditionError("layer_norm: empty feature dimension");
  require_shape(scale_, {d}, "layer_norm scale");
  require_shape(shift, {d}, "layer_norm shift");
  const std::size_t rows = input.numel() / d;
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(rows);
  normalize_slices(input.values().data(), rows, d, epsilon, xhat.data(), inv_std.data());
  auto sv = scale_.values();
  auto hv = shift.values();
  std::vector<T> out(xhat.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = sv[j] * xhat[r * d + j] + hv[j];
  }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {&input, &scale_, &shift},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        auto& ph = *self.parents[2];
        const T* gout = self.grad.data();
        if (ps.requires_grad || ph.requires_grad) {
          auto& gs = grad_of(ps);
          auto& gh = grad_of(ph);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              gs[j] += gout[r * d + j] * xhat[r * d + j];
              gh[j] += gout[r * d + j];
            }
          }
        }
        if (px.requires_grad) {
          auto& gx = grad_of(px);
          std::vector<T> gxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gxhat[j] = gout[r * d + j] * ps.value[j];
            normalize_backward(gxhat.data(), xhat.data() + r * d, inv_std[r], d, gx.data() + r * d);
          }
        }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return input;
  if (rate >= 1.0) throw PreconditionError("dropout: rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // Four 16-bit uniforms per engine call; the drop rate is quantized to 2^-16.
  const auto threshold = static_cast<std::uint32_t>(std::lround(rate * 65536.0));
  auto xv = input.values();
  std::vector<T> mask(xv.size());
  std::vector<T> out(xv.size());
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (i % 4 == 0) bits = rng();
    const auto u = static_cast<std::uint32_t>(bits & 0xffff);
    bits >>= 16;
    mask[i] = u < threshold ? T{0} : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return Tensor<T>::make_result(input.shape(), std::move(out), {&input},
                                [mask = std::move(mask)](detail::Node<T>& self) {
                                  auto& g = grad_of(*self.parents[0]);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t C = logits.shape().back();
  const std::size_t rows = logits.numel() / C;
  auto xv = logits.values();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = xv.data() + r * C;
    T* p = out.data() + r * C;
    const T m = *std::max_element(x, x + C);
    T total{0};
    for (std::size_t c = 0; c < C; ++c) total += (p[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < C; ++c) p[c] /= total;
  }
  return Tensor<T>::make_result(logits.shape(), out, {&logits}, [rows, C](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = self.value.data() + r * C;
      const T* gp = self.grad.data() + r * C;
      const T inner = dot<T>(C, p, gp);
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += p[c] * (gp[c] - inner);
    }
  });
}

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, const AttentionMask& mask) {
  require_rank(q, 3, "attention queries");
  require_rank(k, 3, "attention keys");
  require_rank(v, 3, "attention values");
  const std::size_t N = q.dim(0), mq = q.dim(1), d = q.dim(2), mk = k.dim(1);
  if (k.dim(0) != N || k.dim(2) != d) throw ShapeError(describe("attention", q.shape(), k.shape()));
  if (v.shape() != k.shape()) throw ShapeError(describe("attention", k.shape(), v.shape()));
  if (heads == 0 || d % heads != 0) {
    throw PreconditionError("attention: feature width " + std::to_string(d) +
                            " not divisible by " + std::to_string(heads) + " heads");
  }
  if (mask.queries != mq || mask.keys != mk) {
    throw ShapeError("attention: mask is " + std::to_string(mask.queries) + "x" +
                     std::to_string(mask.keys) + " but tokens are " + std::to_string(mq) + "x" +
                     std::to_string(mk));
  }
  if (mask.groups == 0 || N % mask.groups != 0) {
    throw ShapeError("attention: batch of " + std::to_string(N) + " not divisible into " +
                     std::to_string(mask.groups) + " mask groups");
  }
  mask.validate();
  const std::size_t per_group = N / mask.groups;
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  std::vector<T> out(N * mq * d, T{0});
  std::vector<T> probs(N * heads * mq * mk, T{0});
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t g = n / per_group;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < mq; ++i) {
        const T* qi = qv.data() + (n * mq + i) * d + h * dh;
        T* p = probs.data() + ((n * heads + h) * mq + i) * mk;
        T best = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < mk; ++j) {
          if (!mask.at(g, i, j)) continue;
          p[j] = dot<T>(dh, qi, kv.data() + (n * mk + j) * d + h * dh) * inv_sqrt;
          best = std::max(best, p[j]);
        }
        T total{0};
        for (std::size_t j = 0; j < mk; ++j) {
          if (!mask.at(g, i, j)) continue;
          p[j] = std::exp(p[j] - best);
          total += p[j];
        }
        T* o = out.data() + (n * mq + i) * d + h * dh;
        for (std::size_t j = 0; j < mk; ++j) {
          if (!mask.at(g, i, j)) continue;
          p[j] /= total;
          axpy<T>(dh, p[j], vv.data() + (n * mk + j) * d + h * dh, o);
        }
      }
    }
  }

  return Tensor<T>::make_result(
      {N, mq, d}, std::move(out), {&q, &k, &v},
      [N, mq, mk, d, dh, heads, inv_sqrt, per_group, mask, probs = std::move(probs)](
          detail::Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        std::vector<T> gp(mk);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t g = n / per_group;
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < mq; ++i) {
              const T* p = probs.data() + ((n * heads + h) * mq + i) * mk;
              const T* go = self.grad.data() + (n * mq + i) * d + h * dh;
              T inner{0};
              for (std::size_t j = 0; j < mk; ++j) {
                gp[j] = T{0};
                if (!mask.at(g, i, j)) continue;
                const std::size_t kj = (n * mk + j) * d + h * dh;
                gp[j] = dot<T>(dh, go, pv.value.data() + kj);
                inner += p[j] * gp[j];
                if (pv.requires_grad) axpy<T>(dh, p[j], go, grad_of(pv).data() + kj);
              }
              const std::size_t qi = (n * mq + i) * d + h * dh;
              for (std::size_t j = 0; j < mk; ++j) {
                if (!mask.at(g, i, j)) continue;
                const T gs = p[j] * (gp[j] - inner) * inv_sqrt;
                const std::size_t kj = (n * mk + j) * d + h * dh;
                if (pq.requires_grad) axpy<T>(dh, gs, pk.value.data() + kj, grad_of(pq).data() + qi);
                if (pk.requires_grad) axpy<T>(dh, gs, pq.value.data() + qi, grad_of(pk).data() + kj);
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> masked_multi_head_attention(const Tensor<T>& queries, const Tensor<T>& keys,
                                      const Tensor<T>& values, std::size_t heads,
                                      const AttentionMask& mask, const AttentionParams<T>& params) {
  auto q = affine(queries, params.query_weights, params.query_bias);
  auto k = affine(keys, params.key_weights, params.key_bias);
  auto v = affine(values, params.value_weights, params.value_bias);
  auto mixed = scaled_dot_attention(q, k, v, heads, mask);
  return affine(mixed, params.out_weights, params.out_bias);
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() == 0) throw ShapeError("softmax_cross_entropy: scalar logits");
  const std::size_t C = logits.shape().back();
  const std::size_t rows = logits.numel() / C;
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  auto xv = logits.values();
  for (auto x : xv) {
    if (!std::isfinite(x)) throw PreconditionError("softmax_cross_entropy: non-finite logit");
  }
  std::vector<T> probs(xv.size(), T{0});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0) continue;
    if (static_cast<std::size_t>(y) >= C) {
      throw PreconditionError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    const T* x = xv.data() + r * C;
    T* p = probs.data() + r * C;
    const T m = *std::max_element(x, x + C);
    T norm{0};
    for (std::size_t c = 0; c < C; ++c) norm += (p[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < C; ++c) p[c] /= norm;
    total += static_cast<double>(m + std::log(norm) - x[y]);
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      {}, {static_cast<T>(total)}, {&logits},
      [rows, C, probs = std::move(probs), targets = std::move(targets)](detail::Node<T>& self) {
        auto& g = grad_of(*self.parents[0]);
        const T up = self.grad[0];
        for (std::size_t r = 0; r < rows; ++r) {
          if (targets[r] < 0) continue;
          for (std::size_t c = 0; c < C; ++c) {
            const T onehot = static_cast<int>(c) == targets[r] ? T{1} : T{0};
            g[r * C + c] += up * (probs[r * C + c] - onehot);
          }
        }
      });
}

#define WAV2SLEEP_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> swap_last_axes(const Tensor<T>&);                                            \
  template Tensor<T> fold_epochs(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> broadcast_rows(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> stack_tokens(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> take_token(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> scatter_rows(const Tensor<T>&, std::span<const std::size_t>, std::size_t);  \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template Tensor<T> maxpool1d(const Tensor<T>&);                                                 \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);                         \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template Tensor<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                          std::size_t, const AttentionMask&);                     \
  template Tensor<T> masked_multi_head_attention(const Tensor<T>&, const Tensor<T>&,              \
                                                 const Tensor<T>&, std::size_t,                   \
                                                 const AttentionMask&, const AttentionParams<T>&); \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);

WAV2SLEEP_INSTANTIATE_OPS(float)
WAV2SLEEP_INSTANTIATE_OPS(double)

#undef WAV2SLEEP_INSTANTIATE_OPS

}  // namespace wav2sleep
