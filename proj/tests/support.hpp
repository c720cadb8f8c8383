// Shared helpers for the test binaries: random tensors, central finite
// differences and straightforward loop implementations of the layers.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "sdream/sdream.hpp"

namespace sdream::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), 0 when both are zero.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

/// Central differences of a scalar function with respect to leaf `wrt`,
/// perturbing its storage in place and restoring it afterwards.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& wrt, double h = 1e-5) {
  auto data = wrt.mutable_data();
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = f();
    data[i] = saved - h;
    const double down = f();
    data[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

/// Worst relative error between reverse-mode and finite-difference gradients
/// over every leaf in `leaves`. `loss` must rebuild the graph on each call.
inline double gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  loss().backward();
  double worst = 0.0;
  for (auto& t : leaves) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    const auto numeric = numeric_grad([&] { return loss().item(); }, t, h);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Loop oracles over NCHW data.

inline std::vector<double> conv2d_loops(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t stride,
                                        std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t d = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * d * oh * ow);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b[o];
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(w)) continue;
                acc += x[((s * c + ci) * h + r) * w + q] * k[((o * c + ci) * kh + u) * kw + v];
              }
          out[((s * d + o) * oh + i) * ow + j] = acc;
        }
  return out;
}

inline std::vector<double> pool_loops(const Tensor& x, std::size_t win, bool max) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / win, ow = w / win;
  std::vector<double> out(n * c * oh * ow);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = max ? -INFINITY : 0.0;
        for (std::size_t u = 0; u < win; ++u)
          for (std::size_t v = 0; v < win; ++v) {
            const double val = x[(p * h + i * win + u) * w + j * win + v];
            acc = max ? std::max(acc, val) : acc + val;
          }
        out[(p * oh + i) * ow + j] = max ? acc : acc / static_cast<double>(win * win);
      }
  return out;
}

inline std::vector<double> linear_loops(const Tensor& x, const Tensor& wt, const Tensor& b) {
  const std::size_t n = x.dim(0), f = x.dim(1), c = wt.dim(0);
  std::vector<double> out(n * c);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < c; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < f; ++i) acc += x[s * f + i] * wt[o * f + i];
      out[s * c + o] = acc;
    }
  return out;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("sdream_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small architecture for fast tests: two conv blocks on 8x8 inputs.
inline Architecture tiny_arch(std::size_t classes = 3) {
  Architecture a;
  a.input_size = 8;
  a.widths = {4, 6};
  a.classes = classes;
  return a;
}

}  // namespace sdream::testing
