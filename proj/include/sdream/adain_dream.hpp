#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdream/error.hpp"
#include "sdream/model.hpp"
#include "sdream/ops.hpp"
#include "sdream/rng.hpp"
#include "sdream/tensor.hpp"

namespace sdream {

/// Divisor used for the channel variance: H·W (population) or H·W − 1.
enum class VarianceDivisor { population, sample };

/// Channel-wise mean and standard deviation of one sample's feature map.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

namespace detail {

inline double variance_divisor(std::size_t area, VarianceDivisor divisor) {
  if (divisor == VarianceDivisor::sample) {
    if (area < 2) throw DimensionError("sample variance needs at least 2 spatial cells");
    return static_cast<double>(area - 1);
  }
  return static_cast<double>(area);
}

inline void plane_stats(const double* plane, std::size_t area, double divisor, double& mu,
                        double& sigma) {
  double acc = 0.0;
  for (std::size_t i = 0; i < area; ++i) acc += plane[i];
  mu = acc / static_cast<double>(area);
  double sq = 0.0;
  for (std::size_t i = 0; i < area; ++i) sq += (plane[i] - mu) * (plane[i] - mu);
  sigma = std::sqrt(sq / divisor);
}

}  // namespace detail

/// Statistics of every sample in a [N, D, H, W] batch.
inline std::vector<ChannelStats> channel_stats(const Tensor& z,
                                               VarianceDivisor divisor = VarianceDivisor::population) {
  ops::detail::require_rank(z, 4, "channel_stats", "input");
  const std::size_t n = z.dim(0), d = z.dim(1), area = z.dim(2) * z.dim(3);
  if (area == 0) throw DimensionError("channel_stats: empty spatial extent");
  const double div = detail::variance_divisor(area, divisor);
  std::vector<ChannelStats> out(n, ChannelStats{std::vector<double>(d), std::vector<double>(d)});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < d; ++c) {
      detail::plane_stats(z.data().data() + (s * d + c) * area, area, div, out[s].mean[c],
                          out[s].std[c]);
    }
  }
  return out;
}

/// Adaptive instance normalization: per sample and channel,
/// (content − μ_c)·σ_s/(σ_c + eps) + μ_s. Differentiable with respect to
/// `content` only; the style statistics are constants.
inline Tensor adain(const Tensor& content, const Tensor& style, double eps,
                    VarianceDivisor divisor = VarianceDivisor::population) {
  ops::detail::require_rank(content, 4, "adain", "content");
  ops::detail::require_same_shape(content, style, "adain");
  const std::size_t n = content.dim(0), d = content.dim(1), area = content.dim(2) * content.dim(3);
  const double div = detail::variance_divisor(area, divisor);
  const std::size_t planes = n * d;
  std::vector<double> mu_c(planes), sigma_c(planes), ratio(planes);
  std::vector<double> out(content.numel());
  const double* x = content.data().data();
  const double* y = style.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    double mu_s = 0.0, sigma_s = 0.0;
    detail::plane_stats(y + p * area, area, div, mu_s, sigma_s);
    detail::plane_stats(x + p * area, area, div, mu_c[p], sigma_c[p]);
    ratio[p] = sigma_s / (sigma_c[p] + eps);
    // r·z + (μ_s − r·μ_c) reproduces z exactly when the statistics already match.
    const double shift = mu_s - ratio[p] * mu_c[p];
    for (std::size_t i = 0; i < area; ++i) out[p * area + i] = ratio[p] * x[p * area + i] + shift;
  }
  return Tensor::make_result(
      content.shape(), std::move(out), {content},
      [=](sdream::detail::Node& self) {
        auto gi = input_grad(self, 0);
        const auto& z = *self.inputs[0]->data;
        for (std::size_t p = 0; p < planes; ++p) {
          const double* g = self.grad.data() + p * area;
          const double* zp = z.data() + p * area;
          double gsum = 0.0, gz = 0.0;
          for (std::size_t i = 0; i < area; ++i) {
            gsum += g[i];
            gz += g[i] * (zp[i] - mu_c[p]);
          }
          const double gmean = gsum / static_cast<double>(area);
          // d σ_c / d z_j = (z_j − μ_c)/(div·σ_c); zero for a constant plane.
          const double sigma_term =
              sigma_c[p] > 0.0 ? ratio[p] / (sigma_c[p] + eps) * gz / (div * sigma_c[p]) : 0.0;
          for (std::size_t i = 0; i < area; ++i) {
            gi[p * area + i] += ratio[p] * (g[i] - gmean) - sigma_term * (zp[i] - mu_c[p]);
          }
        }
      },
      "adain");
}

enum class DreamMode { stylized, deepdream };

struct DreamConfig {
  double alpha = 0.3;
  std::size_t iterations = 1;
  double eps = 1e-5;
  /// Half-width of the uniform initial noise, in normalized units.
  double noise_bound = 0.0;
  /// Per-channel projection box Δ in normalized units.
  std::vector<double> lower{0.0, 0.0, 0.0};
  std::vector<double> upper{1.0, 1.0, 1.0};
  bool standardize_grad = true;
  DreamMode mode = DreamMode::stylized;
  VarianceDivisor divisor = VarianceDivisor::population;

  void set_bounds(const Normalization& norm) {
    const auto lo = norm.lower();
    const auto hi = norm.upper();
    lower.assign(lo.begin(), lo.end());
    upper.assign(hi.begin(), hi.end());
  }

  void validate(std::size_t channels) const {
    if (!(alpha > 0.0) && iterations > 0) throw ConfigError("dream: alpha must be > 0");
    if (!(noise_bound >= 0.0)) throw ConfigError("dream: noise_bound must be >= 0");
    if (!(eps >= 0.0)) throw ConfigError("dream: eps must be >= 0");
    if (lower.size() != channels || upper.size() != channels) {
      throw ConfigError("dream: bounds must have one entry per input channel (" +
                        std::to_string(channels) + ")");
    }
    for (std::size_t c = 0; c < channels; ++c) {
      if (!(lower[c] < upper[c])) throw ConfigError("dream: lower bound must be < upper bound");
    }
  }
};

/// Per-sample objective values: ‖adain(f(x), f(x̄))‖_F in stylized mode,
/// ‖f(x)‖_F in deepdream mode. Shape [N].
inline Tensor dream_objective(const Model& model, const Tensor& x, const Tensor& style_features,
                              DreamMode mode, double eps, VarianceDivisor divisor) {
  Tensor features = model.extract_features(x, ParamGrad::frozen);
  if (mode == DreamMode::stylized) features = adain(features, style_features, eps, divisor);
  return ops::sample_norms(features);
}

/// The dream loss ‖adain(f(x), f(x̄), eps)‖_F, summed over the batch (for a
/// single sample it is exactly the norm). Gradients reach `x` only.
inline Tensor dream_loss(const Model& model, const Tensor& x, const Tensor& x_style, double eps,
                         VarianceDivisor divisor = VarianceDivisor::population) {
  ops::detail::require_same_shape(x, x_style, "dream_loss");
  const Tensor style = model.extract_features(x_style.detach(), ParamGrad::frozen);
  return ops::sum(dream_objective(model, x, style, DreamMode::stylized, eps, divisor));
}

struct DreamTrace {
  /// objective[i][s]: objective of sample s at iterate i (i = 0..K).
  std::vector<std::vector<double>> objective;
};

namespace detail {

inline void project(std::vector<double>& img, const Shape& shape, const DreamConfig& cfg) {
  const std::size_t n = shape[0], c = shape[1], area = shape[2] * shape[3];
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = img.data() + (s * c + ch) * area;
      for (std::size_t i = 0; i < area; ++i) p[i] = std::clamp(p[i], cfg.lower[ch], cfg.upper[ch]);
    }
  }
}

/// (g − mean)/std over each sample's whole gradient, with the unbiased std.
/// A constant gradient is left as is.
inline void standardize(std::span<double> grad, std::size_t n) {
  const std::size_t per = grad.size() / n;
  if (per < 2) return;
  for (std::size_t s = 0; s < n; ++s) {
    auto g = grad.subspan(s * per, per);
    double acc = 0.0;
    for (double v : g) acc += v;
    const double mu = acc / static_cast<double>(per);
    double sq = 0.0;
    for (double v : g) sq += (v - mu) * (v - mu);
    const double sd = std::sqrt(sq / static_cast<double>(per - 1));
    if (!(sd > 0.0)) continue;
    for (double& v : g) v = (v - mu) / sd;
  }
}

}  // namespace detail

/// Projected gradient ascent on the dream objective, starting from x plus
/// optional uniform noise. Returns a detached image inside the projection box.
/// With zero iterations the input is returned unchanged.
inline Tensor stylized_dream(const Model& model, const Tensor& x, const Tensor& x_style,
                             const DreamConfig& cfg, Rng& rng, DreamTrace* trace = nullptr) {
  ops::detail::require_rank(x, 4, "stylized_dream", "x");
  ops::detail::require_same_shape(x, x_style, "stylized_dream");
  cfg.validate(x.dim(1));
  if (cfg.iterations == 0) return x.detach();

  const std::size_t n = x.dim(0);
  Tensor style_features;
  if (cfg.mode == DreamMode::stylized) {
    style_features = model.extract_features(x_style.detach(), ParamGrad::frozen);
  }

  std::vector<double> current(x.data().begin(), x.data().end());
  if (cfg.noise_bound > 0.0) {
    for (double& v : current) v += rng.uniform(-cfg.noise_bound, cfg.noise_bound);
  }
  detail::project(current, x.shape(), cfg);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tensor xi(x.shape(), current, true);
    Tensor per_sample =
        dream_objective(model, xi, style_features, cfg.mode, cfg.eps, cfg.divisor);
    if (trace) trace->objective.emplace_back(per_sample.data().begin(), per_sample.data().end());
    ops::sum(per_sample).backward();
    std::vector<double> grad(xi.grad().begin(), xi.grad().end());
    for (double g : grad) {
      if (!std::isfinite(g)) {
        throw NumericError("stylized_dream: non-finite input gradient at iteration " +
                           std::to_string(it));
      }
    }
    if (cfg.standardize_grad) detail::standardize(grad, n);
    for (std::size_t i = 0; i < current.size(); ++i) current[i] += cfg.alpha * grad[i];
    detail::project(current, x.shape(), cfg);
  }
  Tensor result(x.shape(), std::move(current));
  if (trace) {
    Tensor final_obj = dream_objective(model, result, style_features, cfg.mode, cfg.eps, cfg.divisor);
    trace->objective.emplace_back(final_obj.data().begin(), final_obj.data().end());
  }
  return result;
}

/// Class → member item ids, for drawing same-label style partners.
class ClassIndex {
 public:
  ClassIndex(std::span<const int> labels, std::size_t classes) : members_(classes) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
        throw IndexError("class index: label " + std::to_string(labels[i]) + " out of range");
      }
      members_[static_cast<std::size_t>(labels[i])].push_back(i);
    }
  }

  const std::vector<std::size_t>& members(int label) const {
    return members_.at(static_cast<std::size_t>(label));
  }
  std::size_t classes() const { return members_.size(); }

 private:
  std::vector<std::vector<std::size_t>> members_;
};

/// Uniform draw of a different item with the same label. std::nullopt means
/// the class has no other member and the sample should skip the dream step.
inline std::optional<std::size_t> sample_style_partner(std::size_t item, int label,
                                                       const ClassIndex& index, Rng& rng) {
  if (label < 0 || static_cast<std::size_t>(label) >= index.classes()) {
    throw IndexError("style partner: label " + std::to_string(label) + " out of range");
  }
  const auto& members = index.members(label);
  if (members.empty()) throw DataError("style partner: class " + std::to_string(label) + " is empty");
  const auto self = std::find(members.begin(), members.end(), item);
  if (self == members.end()) return members[rng.below(members.size())];
  if (members.size() == 1) return std::nullopt;
  std::size_t pick = static_cast<std::size_t>(rng.below(members.size() - 1));
  if (pick >= static_cast<std::size_t>(self - members.begin())) ++pick;
  return members[pick];
}

inline std::vector<std::optional<std::size_t>> sample_style_partners(
    std::span<const std::size_t> items, std::span<const int> labels, const ClassIndex& index,
    Rng& rng) {
  if (items.size() != labels.size()) throw DimensionError("style partners: items/labels mismatch");
  std::vector<std::optional<std::size_t>> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.push_back(sample_style_partner(items[i], labels[i], index, rng));
  }
  return out;
}

}  // namespace sdream
