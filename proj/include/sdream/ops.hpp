#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdream/error.hpp"
#include "sdream/tensor.hpp"

namespace sdream::ops {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, padding, out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_area() const { return out_h * out_w; }
};

// col is [C*kh*kw, out_h*out_w] row-major.
inline void im2col(const double* image, const ConvGeometry& g, double* col) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * g.out_area();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* image) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * g.out_area();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                  static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, NCHW input and DCkk kernel.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(kernel, 4, "conv2d", "kernel");
  detail::require_rank(bias, 1, "conv2d", "bias");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t n = input.dim(0), d = kernel.dim(0);
  if (kernel.dim(1) != input.dim(1) || bias.dim(0) != d) {
    throw DimensionError("conv2d: input " + shape_string(input.shape()) + ", kernel " +
                         shape_string(kernel.shape()) + ", bias " + shape_string(bias.shape()) +
                         " are incompatible");
  }
  detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3),
                         stride, padding, 0, 0};
  if (g.kh > g.height + 2 * padding || g.kw > g.width + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " larger than padded input " + shape_string(input.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  const std::size_t in_size = g.channels * g.height * g.width;
  const std::size_t out_size = d * g.out_area();
  auto cols = std::make_shared<std::vector<double>>(n * g.patch() * g.out_area());
  std::vector<double> out(n * out_size);
  detail::ConstMatrixMap w(kernel.data().data(), static_cast<Eigen::Index>(d),
                           static_cast<Eigen::Index>(g.patch()));
  for (std::size_t s = 0; s < n; ++s) {
    double* col = cols->data() + s * g.patch() * g.out_area();
    detail::im2col(input.data().data() + s * in_size, g, col);
    detail::MatrixMap o(out.data() + s * out_size, static_cast<Eigen::Index>(d),
                        static_cast<Eigen::Index>(g.out_area()));
    o.noalias() = w * detail::ConstMatrixMap(col, static_cast<Eigen::Index>(g.patch()),
                                             static_cast<Eigen::Index>(g.out_area()));
    for (std::size_t k = 0; k < d; ++k) o.row(static_cast<Eigen::Index>(k)).array() += bias[k];
  }

  return Tensor::make_result(
      Shape{n, d, g.out_h, g.out_w}, std::move(out), {input, kernel, bias},
      [g, n, d, in_size, out_size, cols](sdream::detail::Node& self) {
        auto g_in = input_grad(self, 0);
        auto g_k = input_grad(self, 1);
        auto g_b = input_grad(self, 2);
        const auto& kdata = *self.inputs[1]->data;
        detail::ConstMatrixMap w(kdata.data(), static_cast<Eigen::Index>(d),
                                 static_cast<Eigen::Index>(g.patch()));
        std::vector<double> dcol(g.patch() * g.out_area());
        for (std::size_t s = 0; s < n; ++s) {
          detail::ConstMatrixMap dout(self.grad.data() + s * out_size,
                                      static_cast<Eigen::Index>(d),
                                      static_cast<Eigen::Index>(g.out_area()));
          detail::ConstMatrixMap col(cols->data() + s * g.patch() * g.out_area(),
                                     static_cast<Eigen::Index>(g.patch()),
                                     static_cast<Eigen::Index>(g.out_area()));
          if (!g_k.empty()) {
            detail::MatrixMap dw(g_k.data(), static_cast<Eigen::Index>(d),
                                 static_cast<Eigen::Index>(g.patch()));
            dw.noalias() += dout * col.transpose();
          }
          if (!g_b.empty()) {
            // Plain loop: Eigen's vectorized sum peels by address, which would
            // make the result depend on where the buffer was allocated.
            const double* gp = self.grad.data() + s * out_size;
            for (std::size_t k = 0; k < d; ++k) {
              double acc = 0.0;
              for (std::size_t i = 0; i < g.out_area(); ++i) acc += gp[k * g.out_area() + i];
              g_b[k] += acc;
            }
          }
          if (!g_in.empty()) {
            detail::MatrixMap dc(dcol.data(), static_cast<Eigen::Index>(g.patch()),
                                 static_cast<Eigen::Index>(g.out_area()));
            dc.noalias() = w.transpose() * dout;
            detail::col2im_add(dcol.data(), g, g_in.data() + s * in_size);
          }
        }
      },
      "conv2d");
}

inline Tensor relu(const Tensor& input) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_result(
      input.shape(), std::move(out), {input},
      [](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        const auto& x = *self.inputs[0]->data;
        for (std::size_t i = 0; i < gi.size(); ++i) {
          if (x[i] > 0.0) gi[i] += self.grad[i];
        }
      },
      "relu");
}

/// Non-overlapping mean pooling with a square window.
inline Tensor avg_pool2d(const Tensor& input, std::size_t window) {
  detail::require_rank(input, 4, "avg_pool2d", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw DimensionError("avg_pool2d: spatial dims " + shape_string(input.shape()) +
                         " not divisible by window " + std::to_string(window));
  }
  const std::size_t oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  std::vector<double> out(n * c * oh * ow, 0.0);
  const auto x = input.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            acc += x[(p * h + oy * window + dy) * w + ox * window + dx];
          }
        }
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  return Tensor::make_result(
      Shape{n, c, oh, ow}, std::move(out), {input},
      [=](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (std::size_t p = 0; p < n * c; ++p) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double g = self.grad[(p * oh + oy) * ow + ox] * inv;
              for (std::size_t dy = 0; dy < window; ++dy) {
                double* row = gi.data() + (p * h + oy * window + dy) * w + ox * window;
                for (std::size_t dx = 0; dx < window; ++dx) row[dx] += g;
              }
            }
          }
        }
      },
      "avg_pool2d");
}

/// Non-overlapping max pooling; ties route the gradient to the first maximum
/// in row-major window order.
inline Tensor max_pool2d(const Tensor& input, std::size_t window) {
  detail::require_rank(input, 4, "max_pool2d", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw DimensionError("max_pool2d: spatial dims " + shape_string(input.shape()) +
                         " not divisible by window " + std::to_string(window));
  }
  const std::size_t oh = h / window, ow = w / window;
  std::vector<double> out(n * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto x = input.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (p * h + oy * window) * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (p * h + oy * window + dy) * w + ox * window + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = x[best];
        (*argmax)[o] = best;
      }
    }
  }
  return Tensor::make_result(
      Shape{n, c, oh, ow}, std::move(out), {input},
      [argmax](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (std::size_t o = 0; o < argmax->size(); ++o) gi[(*argmax)[o]] += self.grad[o];
      },
      "max_pool2d");
}

/// Spatial mean: [N,C,H,W] -> [N,C].
inline Tensor global_avg_pool(const Tensor& input) {
  detail::require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), area = input.dim(2) * input.dim(3);
  const double inv = 1.0 / static_cast<double>(area);
  std::vector<double> out(n * c);
  const auto x = input.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += x[p * area + i];
    out[p] = acc * inv;
  }
  return Tensor::make_result(
      Shape{n, c}, std::move(out), {input},
      [=](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (std::size_t p = 0; p < n * c; ++p) {
          const double g = self.grad[p] * inv;
          for (std::size_t i = 0; i < area; ++i) gi[p * area + i] += g;
        }
      },
      "global_avg_pool");
}

/// input · weightᵀ + bias for input [N,F], weight [C,F], bias [C].
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  detail::require_rank(bias, 1, "linear", "bias");
  const std::size_t n = input.dim(0), f = input.dim(1), c = weight.dim(0);
  if (weight.dim(1) != f || bias.dim(0) != c) {
    throw DimensionError("linear: input " + shape_string(input.shape()) + ", weight " +
                         shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()) +
                         " are incompatible");
  }
  const auto N = static_cast<Eigen::Index>(n), F = static_cast<Eigen::Index>(f),
             C = static_cast<Eigen::Index>(c);
  std::vector<double> out(n * c);
  detail::MatrixMap o(out.data(), N, C);
  o.noalias() = detail::ConstMatrixMap(input.data().data(), N, F) *
                detail::ConstMatrixMap(weight.data().data(), C, F).transpose();
  for (Eigen::Index r = 0; r < N; ++r) {
    for (Eigen::Index k = 0; k < C; ++k) o(r, k) += bias[static_cast<std::size_t>(k)];
  }
  return Tensor::make_result(
      Shape{n, c}, std::move(out), {input, weight, bias},
      [=](sdream::detail::Node& self) {
        detail::ConstMatrixMap dout(self.grad.data(), N, C);
        if (auto gi = input_grad(self, 0); !gi.empty()) {
          detail::MatrixMap(gi.data(), N, F).noalias() +=
              dout * detail::ConstMatrixMap(self.inputs[1]->data->data(), C, F);
        }
        if (auto gw = input_grad(self, 1); !gw.empty()) {
          detail::MatrixMap(gw.data(), C, F).noalias() +=
              dout.transpose() * detail::ConstMatrixMap(self.inputs[0]->data->data(), N, F);
        }
        if (auto gb = input_grad(self, 2); !gb.empty()) {
          for (Eigen::Index r = 0; r < N; ++r) {
            for (Eigen::Index k = 0; k < C; ++k) gb[static_cast<std::size_t>(k)] += dout(r, k);
          }
        }
      },
      "linear");
}

/// sqrt(sum v²) over all elements. The gradient at the zero tensor is zero.
inline Tensor frobenius_norm(const Tensor& input) {
  double acc = 0.0;
  for (double v : input.data()) acc += v * v;
  const double norm = std::sqrt(acc);
  return Tensor::make_result(
      Shape{}, {norm}, {input},
      [norm](sdream::detail::Node& self) {
        if (norm == 0.0) return;
        auto gi = input_grad(self, 0);
        const auto& x = *self.inputs[0]->data;
        const double scale = self.grad[0] / norm;
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += x[i] * scale;
      },
      "frobenius_norm");
}

/// Frobenius norm of every sample of a batch: [N, ...] -> [N].
inline Tensor sample_norms(const Tensor& input) {
  if (input.rank() == 0) throw DimensionError("sample_norms: input must have a batch axis");
  const std::size_t n = input.dim(0), per = n ? input.numel() / n : 0;
  std::vector<double> out(n);
  const auto x = input.data();
  for (std::size_t s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += x[s * per + i] * x[s * per + i];
    out[s] = std::sqrt(acc);
  }
  std::vector<double> norms = out;
  return Tensor::make_result(
      Shape{n}, std::move(out), {input},
      [n, per, norms = std::move(norms)](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        const auto& x = *self.inputs[0]->data;
        for (std::size_t s = 0; s < n; ++s) {
          if (norms[s] == 0.0) continue;
          const double scale = self.grad[s] / norms[s];
          for (std::size_t i = 0; i < per; ++i) gi[s * per + i] += x[s * per + i] * scale;
        }
      },
      "sample_norms");
}

inline Tensor sum(const Tensor& input) {
  double acc = 0.0;
  for (double v : input.data()) acc += v;
  return Tensor::make_result(
      Shape{}, {acc}, {input},
      [](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (double& g : gi) g += self.grad[0];
      },
      "sum");
}

inline Tensor mean(const Tensor& input) {
  double acc = 0.0;
  for (double v : input.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(input.numel());
  return Tensor::make_result(
      Shape{}, {acc * inv}, {input},
      [inv](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (double& g : gi) g += self.grad[0] * inv;
      },
      "mean");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(
      a.shape(), std::move(out), {a, b},
      [](sdream::detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
          auto gi = input_grad(self, k);
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(
      a.shape(), std::move(out), {a, b},
      [](sdream::detail::Node& self) {
        auto ga = input_grad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        auto gb = input_grad(self, 1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(
      a.shape(), std::move(out), {a, b},
      [](sdream::detail::Node& self) {
        const auto& x = *self.inputs[0]->data;
        const auto& y = *self.inputs[1]->data;
        auto ga = input_grad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * y[i];
        auto gb = input_grad(self, 1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * x[i];
      },
      "mul");
}

inline Tensor scale(const Tensor& input, double factor) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (double& v : out) v *= factor;
  return Tensor::make_result(
      input.shape(), std::move(out), {input},
      [factor](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * factor;
      },
      "scale");
}

/// Row-wise log-softmax over the last axis of [N,C], max-shifted.
inline Tensor log_softmax(const Tensor& logits) {
  detail::require_rank(logits, 2, "log_softmax", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data().data() + r * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(row[k] - m);
    const double lse = m + std::log(z);
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] = row[k] - lse;
  }
  return Tensor::make_result(
      Shape{n, c}, out, {logits},
      [n, c, out](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (std::size_t r = 0; r < n; ++r) {
          double gsum = 0.0;
          for (std::size_t k = 0; k < c; ++k) gsum += self.grad[r * c + k];
          for (std::size_t k = 0; k < c; ++k) {
            gi[r * c + k] += self.grad[r * c + k] - std::exp(out[r * c + k]) * gsum;
          }
        }
      },
      "log_softmax");
}

inline Tensor softmax(const Tensor& logits) {
  detail::require_rank(logits, 2, "softmax", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data().data() + r * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += (out[r * c + k] = std::exp(row[k] - m));
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] /= z;
  }
  return Tensor::make_result(
      Shape{n, c}, out, {logits},
      [n, c, out](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0.0;
          for (std::size_t k = 0; k < c; ++k) dot += self.grad[r * c + k] * out[r * c + k];
          for (std::size_t k = 0; k < c; ++k) {
            gi[r * c + k] += out[r * c + k] * (self.grad[r * c + k] - dot);
          }
        }
      },
      "softmax");
}

/// Elementwise log((eᵃ + eᵇ)/2), i.e. the log of the two-way mixture of
/// probabilities given their logs. Equal inputs return the input exactly.
inline Tensor log_mean_exp(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "log_mean_exp");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = std::max(a[i], b[i]);
    out[i] = m + std::log(0.5 * std::exp(a[i] - m) + 0.5 * std::exp(b[i] - m));
  }
  return Tensor::make_result(
      a.shape(), out, {a, b},
      [out](sdream::detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
          auto gi = input_grad(self, k);
          const auto& x = *self.inputs[k]->data;
          for (std::size_t i = 0; i < gi.size(); ++i) {
            gi[i] += self.grad[i] * 0.5 * std::exp(x[i] - out[i]);
          }
        }
      },
      "log_mean_exp");
}

/// Mean cross-entropy of row-wise softmax(logits) against class indices.
inline Tensor softmax_ce(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_ce", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_ce: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("softmax_ce: empty batch");
  std::vector<int> target(labels.begin(), labels.end());
  for (int y : target) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("softmax_ce: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
    }
  }
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data().data() + r * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += (probs[r * c + k] = std::exp(row[k] - m));
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] /= z;
    loss -= row[static_cast<std::size_t>(target[r])] - m - std::log(z);
  }
  const double inv = 1.0 / static_cast<double>(n);
  return Tensor::make_result(
      Shape{}, {loss * inv}, {logits},
      [n, c, inv, probs = std::move(probs), target = std::move(target)](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        const double g = self.grad[0] * inv;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t k = 0; k < c; ++k) {
            const double onehot = static_cast<int>(k) == target[r] ? 1.0 : 0.0;
            gi[r * c + k] += g * (probs[r * c + k] - onehot);
          }
        }
      },
      "softmax_ce");
}

}  // namespace sdream::ops
