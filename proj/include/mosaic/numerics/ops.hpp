#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mosaic/numerics/prng.hpp"
#include "mosaic/numerics/tensor.hpp"

namespace mosaic::ops {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require(a.shape() == b.shape(), [&] { return std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()); });
}

// Leading dims of a tensor of rank >= 2 collapsed into one batch count.
inline std::size_t batch_count(const Shape& s, std::size_t trailing) {
    std::size_t n = 1;
    for (std::size_t i = 0; i + trailing < s.size(); ++i) n *= s[i];
    return n;
}

// Views [C,H,W] as [1,C,H,W].
inline Shape as_nchw(const Shape& s, const char* op) {
    if (s.size() == 3) return {1, s[0], s[1], s[2]};
    require(s.size() == 4, [&] { return std::string(op) + ": expected rank 3 or 4 input, got " + shape_str(s); });
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return mosaic::detail::make_result<T>(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return mosaic::detail::make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return mosaic::detail::make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    return mosaic::detail::make_result<T>(a.shape(), std::move(out), {a}, "scale", [factor](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    return mosaic::detail::make_result<T>(a.shape(), std::move(out), {a}, "relu", [](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.data[i] > T(0)) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.data()) s += v;
    return mosaic::detail::make_result<T>({1}, {s}, {a}, "sum", [](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    const T inv = T(1) / static_cast<T>(a.numel());
    T s = T(0);
    for (T v : a.data()) s += v;
    return mosaic::detail::make_result<T>({1}, {s * inv}, {a}, "mean", [inv](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0] * inv;
    });
}

/// mean_b weight[b] * mean_j (pred[b,j] - target[b,j])^2 over the leading
/// (batch) dimension. `target` and `weight` are treated as constants.
template <typename T>
Tensor<T> weighted_mse(const Tensor<T>& pred, const Tensor<T>& target, std::span<const T> weight) {
    detail::require_same_shape(pred, target, "weighted_mse");
    require(pred.rank() >= 1 && pred.dim(0) == weight.size(),
            "weighted_mse: one weight per batch element required");
    const std::size_t batch = pred.dim(0);
    const std::size_t per = pred.numel() / batch;
    T total = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
        T s = T(0);
        for (std::size_t j = 0; j < per; ++j) {
            const T d = pred[b * per + j] - target[b * per + j];
            s += d * d;
        }
        total += weight[b] * (s / static_cast<T>(per));
    }
    total /= static_cast<T>(batch);
    std::vector<T> w(weight.begin(), weight.end());
    std::vector<T> tgt(target.data().begin(), target.data().end());
    return mosaic::detail::make_result<T>(
        {1}, {total}, {pred}, "weighted_mse",
        [w = std::move(w), tgt = std::move(tgt), batch, per](Node<T>& self) {
            auto& p = *self.parents[0];
            auto& g = p.ensure_grad();
            const T base = self.grad[0] * T(2) / static_cast<T>(batch * per);
            for (std::size_t b = 0; b < batch; ++b) {
                const T c = base * w[b];
                for (std::size_t j = 0; j < per; ++j) {
                    const std::size_t i = b * per + j;
                    g[i] += c * (p.data[i] - tgt[i]);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// x[..., K] @ w[K, N] -> [..., N]. With rank-2 x this is the ordinary matrix
/// product.
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
    require(x.rank() >= 1 && w.rank() == 2 && x.shape().back() == w.dim(0),
            [&] { return "matmul: incompatible shapes " + shape_str(x.shape()) + " @ " + shape_str(w.shape()); });
    const std::size_t k = w.dim(0), n = w.dim(1);
    const std::size_t m = x.numel() / k;
    std::vector<T> out(m * n, T(0));
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T a = xd[i * k + kk];
            const T* wr = wd + kk * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += a * wr[j];
        }
    }
    Shape shape = x.shape();
    shape.back() = n;
    return mosaic::detail::make_result<T>(std::move(shape), std::move(out), {x, w}, "matmul",
                                          [m, k, n](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const T* go = self.grad.data();
        if (px.requires_grad) {
            // dx[i,:] = sum_j go[i,j] * w^T[j,:]
            std::vector<T> wt(n * k);
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t j = 0; j < n; ++j) wt[j * k + kk] = pw.data[kk * n + j];
            auto& gx = px.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                T* row = gx.data() + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const T c = go[i * n + j];
                    const T* wr = wt.data() + j * k;
                    for (std::size_t kk = 0; kk < k; ++kk) row[kk] += c * wr[kk];
                }
            }
        }
        if (pw.requires_grad) {
            // dw[kk,:] = sum_i x[i,kk] * go[i,:]
            auto& gw = pw.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const T a = px.data[i * k + kk];
                    T* row = gw.data() + kk * n;
                    const T* gr = go + i * n;
                    for (std::size_t j = 0; j < n; ++j) row[j] += a * gr[j];
                }
            }
        }
    });
}

/// Batched a[..., M, K] @ b[..., K, N] -> [..., M, N] (same leading dims).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() >= 2 && a.rank() == b.rank(), "bmm: rank mismatch");
    const std::size_t r = a.rank();
    const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
    require(b.dim(r - 2) == k && std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
            [&] { return "bmm: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()); });
    const std::size_t batch = detail::batch_count(a.shape(), 2);
    std::vector<T> out(batch * m * n, T(0));
    for (std::size_t s = 0; s < batch; ++s) {
        const T* ad = a.data().data() + s * m * k;
        const T* bd = b.data().data() + s * k * n;
        T* od = out.data() + s * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T c = ad[i * k + kk];
                for (std::size_t j = 0; j < n; ++j) od[i * n + j] += c * bd[kk * n + j];
            }
    }
    Shape shape = a.shape();
    shape[r - 1] = n;
    return mosaic::detail::make_result<T>(std::move(shape), std::move(out), {a, b}, "bmm",
                                          [batch, m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t s = 0; s < batch; ++s) {
            const T* go = self.grad.data() + s * m * n;
            if (pa.requires_grad) {
                // da[i,kk] = sum_j go[i,j] b[kk,j]
                T* ga = pa.ensure_grad().data() + s * m * k;
                const T* bd = pb.data.data() + s * k * n;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bd[kk * n + j];
                        ga[i * k + kk] += acc;
                    }
            }
            if (pb.requires_grad) {
                // db[kk,j] = sum_i a[i,kk] go[i,j]
                T* gb = pb.ensure_grad().data() + s * k * n;
                const T* ad = pa.data.data() + s * m * k;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T c = ad[i * k + kk];
                        for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += c * go[i * n + j];
                    }
            }
        }
    });
}

/// Batched a[..., M, K] @ b[..., N, K]^T -> [..., M, N].
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() >= 2 && a.rank() == b.rank(), "bmm_nt: rank mismatch");
    const std::size_t r = a.rank();
    const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 2);
    require(b.dim(r - 1) == k && std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
            [&] { return "bmm_nt: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()) + "^T"; });
    const std::size_t batch = detail::batch_count(a.shape(), 2);
    std::vector<T> out(batch * m * n, T(0));
    for (std::size_t s = 0; s < batch; ++s) {
        const T* ad = a.data().data() + s * m * k;
        const T* bd = b.data().data() + s * n * k;
        T* od = out.data() + s * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::size_t kk = 0; kk < k; ++kk) acc += ad[i * k + kk] * bd[j * k + kk];
                od[i * n + j] = acc;
            }
    }
    Shape shape = a.shape();
    shape[r - 1] = n;
    return mosaic::detail::make_result<T>(std::move(shape), std::move(out), {a, b}, "bmm_nt",
                                          [batch, m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t s = 0; s < batch; ++s) {
            const T* go = self.grad.data() + s * m * n;
            const T* ad = pa.data.data() + s * m * k;
            const T* bd = pb.data.data() + s * n * k;
            if (pa.requires_grad) {
                T* ga = pa.ensure_grad().data() + s * m * k;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T c = go[i * n + j];
                        for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += c * bd[j * k + kk];
                    }
            }
            if (pb.requires_grad) {
                T* gb = pb.ensure_grad().data() + s * n * k;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T c = go[i * n + j];
                        for (std::size_t kk = 0; kk < k; ++kk) gb[j * k + kk] += c * ad[i * k + kk];
                    }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax family (over the last dimension)

namespace detail {

// Row-wise softmax with max subtraction. A row containing NaN comes out all
// NaN.
template <typename T>
void softmax_rows(std::span<const T> in, std::span<T> out, std::size_t n) {
    const std::size_t rows = in.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = in.data() + r * n;
        T* y = out.data() + r * n;
        T mx = x[0];
        bool has_nan = false;
        for (std::size_t i = 0; i < n; ++i) {
            has_nan = has_nan || std::isnan(x[i]);
            mx = x[i] > mx ? x[i] : mx;
        }
        if (has_nan) {
            for (std::size_t i = 0; i < n; ++i) y[i] = std::numeric_limits<T>::quiet_NaN();
            continue;
        }
        T z = T(0);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - mx);
            z += y[i];
        }
        for (std::size_t i = 0; i < n; ++i) y[i] /= z;
    }
}

// g_in += factor * J_softmax(y)^T g_out, row-wise.
template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> g_out, std::span<T> g_in, std::size_t n,
                           T factor) {
    const std::size_t rows = y.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * n;
        const T* gr = g_out.data() + r * n;
        T dot = T(0);
        for (std::size_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
        T* gi = g_in.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) gi[i] += factor * yr[i] * (gr[i] - dot);
    }
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& v) {
    require(v.rank() >= 1 && v.numel() > 0, "softmax: empty input");
    const std::size_t n = v.shape().back();
    std::vector<T> out(v.numel());
    detail::softmax_rows<T>(v.data(), out, n);
    return mosaic::detail::make_result<T>(v.shape(), std::move(out), {v}, "softmax", [n](Node<T>& self) {
        detail::softmax_rows_backward<T>(self.data, self.grad, self.parents[0]->ensure_grad(), n, T(1));
    });
}

/// Gumbel noise -log(-log(u)) with u clamped to [1e-12, 1 - 1e-12].
inline double gumbel_noise(Prng& rng) {
    double u = rng.uniform();
    u = std::clamp(u, 1e-12, 1.0 - 1e-12);
    return -std::log(-std::log(u));
}

/// Row-wise Gumbel-Softmax over the last dimension. Soft mode returns
/// softmax((logits + g) / temperature). Hard mode returns the one-hot argmax
/// of that soft sample (ties to the lowest index) while back-propagating the
/// soft sample's gradient (straight-through). `rng == nullptr` disables the
/// noise.
template <typename T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, T temperature, bool hard, Prng* rng) {
    require(temperature > T(0), "gumbel_softmax: temperature must be positive");
    require(logits.rank() >= 1 && logits.numel() > 0, "gumbel_softmax: empty input");
    const std::size_t n = logits.shape().back();
    std::vector<T> perturbed(logits.numel());
    for (std::size_t i = 0; i < perturbed.size(); ++i) {
        const T g = rng ? static_cast<T>(gumbel_noise(*rng)) : T(0);
        perturbed[i] = (logits[i] + g) / temperature;
    }
    std::vector<T> soft(logits.numel());
    detail::softmax_rows<T>(perturbed, soft, n);
    std::vector<T> out = soft;
    if (hard) {
        for (std::size_t r = 0; r < out.size() / n; ++r) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < n; ++i)
                if (soft[r * n + i] > soft[r * n + best]) best = i;
            for (std::size_t i = 0; i < n; ++i) out[r * n + i] = i == best ? T(1) : T(0);
        }
    }
    const T inv_t = T(1) / temperature;
    return mosaic::detail::make_result<T>(logits.shape(), std::move(out), {logits}, "gumbel_softmax",
                                          [soft = std::move(soft), n, inv_t](Node<T>& self) {
        detail::softmax_rows_backward<T>(soft, self.grad, self.parents[0]->ensure_grad(), n, inv_t);
    });
}

// ---------------------------------------------------------------------------
// Stride-2 2x2 convolution and its transpose

/// input [B,Cin,H,W] (or [Cin,H,W]), kernel [Cout,Cin,2,2], bias [Cout]
/// -> [B,Cout,H/2,W/2]. No padding.
template <typename T>
Tensor<T> conv2x2_s2(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
    const Shape in = detail::as_nchw(input.shape(), "conv2x2_s2");
    const std::size_t B = in[0], C = in[1], H = in[2], W = in[3];
    require(H % 2 == 0 && W % 2 == 0 && H > 0 && W > 0, "conv2x2_s2: spatial dims must be even");
    require(kernel.rank() == 4 && kernel.dim(1) == C && kernel.dim(2) == 2 && kernel.dim(3) == 2,
            [&] { return "conv2x2_s2: kernel shape " + shape_str(kernel.shape()) + " incompatible with input " +
                shape_str(input.shape()); });
    const std::size_t O = kernel.dim(0);
    require(bias.rank() == 1 && bias.dim(0) == O, "conv2x2_s2: bias must have Cout entries");
    const std::size_t h = H / 2, w = W / 2;
    std::vector<T> out(B * O * h * w);
    const T* x = input.data().data();
    // Kernel as [C*4, O] so the inner loop runs over output channels.
    const std::size_t M = C * 4;
    std::vector<T> kt(M * O);
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t m = 0; m < M; ++m) kt[m * O + o] = kernel[o * M + m];
    std::vector<T> patch(M), acc(O);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                for (std::size_t c = 0; c < C; ++c) {
                    const T* xs = x + ((b * C + c) * H + 2 * i) * W + 2 * j;
                    patch[c * 4] = xs[0];
                    patch[c * 4 + 1] = xs[1];
                    patch[c * 4 + 2] = xs[W];
                    patch[c * 4 + 3] = xs[W + 1];
                }
                for (std::size_t o = 0; o < O; ++o) acc[o] = bias[o];
                for (std::size_t m = 0; m < M; ++m) {
                    const T v = patch[m];
                    const T* kr = kt.data() + m * O;
                    for (std::size_t o = 0; o < O; ++o) acc[o] += v * kr[o];
                }
                for (std::size_t o = 0; o < O; ++o) out[((b * O + o) * h + i) * w + j] = acc[o];
            }
    Shape shape = input.rank() == 3 ? Shape{O, h, w} : Shape{B, O, h, w};
    return mosaic::detail::make_result<T>(std::move(shape), std::move(out), {input, kernel, bias}, "conv2x2_s2",
                                          [B, C, H, W, O, h, w](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* go = self.grad.data();
        T* gx = px.requires_grad ? px.ensure_grad().data() : nullptr;
        T* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) {
                        const T g = go[((b * O + o) * h + i) * w + j];
                        if (gb) gb[o] += g;
                        for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t xo = ((b * C + c) * H + 2 * i) * W + 2 * j;
                            const std::size_t ko = (o * C + c) * 4;
                            if (gx) {
                                const T* ks = pk.data.data() + ko;
                                gx[xo] += g * ks[0];
                                gx[xo + 1] += g * ks[1];
                                gx[xo + W] += g * ks[2];
                                gx[xo + W + 1] += g * ks[3];
                            }
                            if (gk) {
                                const T* xs = px.data.data() + xo;
                                gk[ko] += g * xs[0];
                                gk[ko + 1] += g * xs[1];
                                gk[ko + 2] += g * xs[W];
                                gk[ko + 3] += g * xs[W + 1];
                            }
                        }
                    }
    });
}

/// input [B,Cin,h,w] (or [Cin,h,w]), kernel [Cin,Cout,2,2], bias [Cout]
/// -> [B,Cout,2h,2w]. Each input cell scatters into its own 2x2 block.
template <typename T>
Tensor<T> deconv2x2_s2(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
    const Shape in = detail::as_nchw(input.shape(), "deconv2x2_s2");
    const std::size_t B = in[0], C = in[1], h = in[2], w = in[3];
    require(kernel.rank() == 4 && kernel.dim(0) == C && kernel.dim(2) == 2 && kernel.dim(3) == 2,
            [&] { return "deconv2x2_s2: kernel shape " + shape_str(kernel.shape()) + " incompatible with input " +
                shape_str(input.shape()); });
    const std::size_t O = kernel.dim(1);
    require(bias.rank() == 1 && bias.dim(0) == O, "deconv2x2_s2: bias must have Cout entries");
    const std::size_t H = 2 * h, W = 2 * w;
    std::vector<T> out(B * O * H * W);
    const T* x = input.data().data();
    const T* k = kernel.data().data();  // row c holds the O*4 values it scatters
    const std::size_t M = O * 4;
    std::vector<T> acc(M);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                for (std::size_t m = 0; m < M; ++m) acc[m] = T(0);
                for (std::size_t c = 0; c < C; ++c) {
                    const T v = x[((b * C + c) * h + i) * w + j];
                    const T* kr = k + c * M;
                    for (std::size_t m = 0; m < M; ++m) acc[m] += v * kr[m];
                }
                for (std::size_t o = 0; o < O; ++o) {
                    T* os = out.data() + ((b * O + o) * H + 2 * i) * W + 2 * j;
                    os[0] = bias[o] + acc[o * 4];
                    os[1] = bias[o] + acc[o * 4 + 1];
                    os[W] = bias[o] + acc[o * 4 + 2];
                    os[W + 1] = bias[o] + acc[o * 4 + 3];
                }
            }
    Shape shape = input.rank() == 3 ? Shape{O, H, W} : Shape{B, O, H, W};
    return mosaic::detail::make_result<T>(std::move(shape), std::move(out), {input, kernel, bias},
                                          "deconv2x2_s2", [B, C, h, w, O, H, W](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* go = self.grad.data();
        if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t p = 0; p < H * W; ++p) gb[o] += go[(b * O + o) * H * W + p];
        }
        T* gx = px.requires_grad ? px.ensure_grad().data() : nullptr;
        T* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) {
                        const std::size_t xo = ((b * C + c) * h + i) * w + j;
                        const T v = px.data[xo];
                        T acc = T(0);
                        for (std::size_t o = 0; o < O; ++o) {
                            const std::size_t ko = (c * O + o) * 4;
                            const T* gs = go + ((b * O + o) * H + 2 * i) * W + 2 * j;
                            if (gx) {
                                const T* ks = pk.data.data() + ko;
                                acc += gs[0] * ks[0] + gs[1] * ks[1] + gs[W] * ks[2] + gs[W + 1] * ks[3];
                            }
                            if (gk) {
                                gk[ko] += v * gs[0];
                                gk[ko + 1] += v * gs[1];
                                gk[ko + 2] += v * gs[W];
                                gk[ko + 3] += v * gs[W + 1];
                            }
                        }
                        if (gx) gx[xo] += acc;
                    }
    });
}

// ---------------------------------------------------------------------------
// Layout helpers for treating spatial cells as attention tokens

/// [B,C,h,w] -> [B,h*w,C]; token index is the row-major cell index.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
    require(x.rank() == 4, [&] { return "to_tokens: expected [B,C,h,w], got " + shape_str(x.shape()); });
    const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) out[(b * P + p) * C + c] = x[(b * C + c) * P + p];
    return mosaic::detail::make_result<T>({B, P, C}, std::move(out), {x}, "to_tokens", [B, C, P](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < P; ++p) g[(b * C + c) * P + p] += self.grad[(b * P + p) * C + c];
    });
}

/// [B,h*w,C] -> [B,C,h,w]; inverse of to_tokens.
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t h, std::size_t w) {
    require(t.rank() == 3 && t.dim(1) == h * w, [&] { return "from_tokens: expected [B,h*w,C], got " + shape_str(t.shape()); });
    const std::size_t B = t.dim(0), P = t.dim(1), C = t.dim(2);
    std::vector<T> out(t.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) out[(b * C + c) * P + p] = t[(b * P + p) * C + c];
    return mosaic::detail::make_result<T>({B, C, h, w}, std::move(out), {t}, "from_tokens",
                                          [B, C, P](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < P; ++p) g[(b * P + p) * C + c] += self.grad[(b * C + c) * P + p];
    });
}

/// x[b,c,...] += table[rows[b], c]. Used for the optional per-timestep bias.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& table, std::vector<std::size_t> rows) {
    require(x.rank() >= 2 && table.rank() == 2 && table.dim(1) == x.dim(1) && rows.size() == x.dim(0),
            "add_row_bias: shape mismatch");
    const std::size_t B = x.dim(0), C = x.dim(1), P = x.numel() / (B * C), R = table.dim(0);
    for (auto r : rows) require(r < R, "add_row_bias: row index out of range");
    std::vector<T> out(x.data().begin(), x.data().end());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) out[(b * C + c) * P + p] += table[rows[b] * C + c];
    return mosaic::detail::make_result<T>(x.shape(), std::move(out), {x, table}, "add_row_bias",
                                          [rows = std::move(rows), B, C, P](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pt = *self.parents[1];
        if (px.requires_grad) {
            auto& g = px.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pt.requires_grad) {
            auto& g = pt.ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < P; ++p) g[rows[b] * C + c] += self.grad[(b * C + c) * P + p];
        }
    });
}

// ---------------------------------------------------------------------------
// Attention

/// tokens [..., n, d]; wq, wk, wv [d, d].
///   out = (residual ? tokens : 0) + softmax(scale * Q K^T) V
/// with Q = tokens wq, K = tokens wk, V = tokens wv, softmax over keys.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& tokens, const Tensor<T>& wq, const Tensor<T>& wk,
                               const Tensor<T>& wv, T scale_factor, bool residual) {
    require(tokens.rank() >= 2 && tokens.dim(tokens.rank() - 2) >= 1, "attention: need at least one token");
    const std::size_t d = tokens.shape().back();
    for (const auto* w : {&wq, &wk, &wv})
        require(w->rank() == 2 && w->dim(0) == d && w->dim(1) == d,
                [&] { return "attention: projection must be [d,d] with d=" + std::to_string(d); });
    auto q = matmul(tokens, wq);
    auto k = matmul(tokens, wk);
    auto v = matmul(tokens, wv);
    auto alpha = softmax(scale(bmm_nt(q, k), scale_factor));
    auto mixed = bmm(alpha, v);
    return residual ? add(tokens, mixed) : mixed;
}

}  // namespace mosaic::ops
