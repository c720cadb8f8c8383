#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sdream/adain_dream.hpp"
#include "sdream/error.hpp"
#include "sdream/model.hpp"
#include "sdream/ops.hpp"
#include "sdream/rng.hpp"
#include "sdream/synth_data.hpp"

namespace sdream {

enum class Divergence { kl, js, mse };

/// Which prediction plays the target distribution p in KL(p ‖ q).
enum class KlDirection { clean_target, sd_target };

/// Space the MSE consistency is measured in.
enum class MseSpace { probabilities, logits };

enum class TrainMode { erm, sd_ce, deepdream_consistency, sd_consistency };

struct DivergenceOptions {
  KlDirection kl_direction = KlDirection::clean_target;
  MseSpace mse_space = MseSpace::probabilities;
};

/// Consistency divergence between SD and clean predictions. Both arguments
/// are logits already divided by the temperature. KL and JS average over the
/// batch; MSE averages over all N·C entries.
inline Tensor divergence(Divergence metric, const Tensor& sd, const Tensor& clean,
                         const DivergenceOptions& opts = {}) {
  ops::detail::require_rank(sd, 2, "divergence", "sd logits");
  ops::detail::require_same_shape(sd, clean, "divergence");
  const double inv_n = 1.0 / static_cast<double>(sd.dim(0));
  switch (metric) {
    case Divergence::kl: {
      const Tensor& p_logits = opts.kl_direction == KlDirection::clean_target ? clean : sd;
      const Tensor& q_logits = opts.kl_direction == KlDirection::clean_target ? sd : clean;
      const Tensor log_p = ops::log_softmax(p_logits);
      const Tensor log_q = ops::log_softmax(q_logits);
      return ops::scale(ops::sum(ops::mul(ops::softmax(p_logits), ops::sub(log_p, log_q))), inv_n);
    }
    case Divergence::js: {
      const Tensor log_p = ops::log_softmax(clean);
      const Tensor log_q = ops::log_softmax(sd);
      const Tensor log_m = ops::log_mean_exp(log_p, log_q);
      const Tensor kl_pm = ops::sum(ops::mul(ops::softmax(clean), ops::sub(log_p, log_m)));
      const Tensor kl_qm = ops::sum(ops::mul(ops::softmax(sd), ops::sub(log_q, log_m)));
      return ops::scale(ops::add(kl_pm, kl_qm), 0.5 * inv_n);
    }
    case Divergence::mse: {
      const Tensor diff = opts.mse_space == MseSpace::probabilities
                              ? ops::sub(ops::softmax(sd), ops::softmax(clean))
                              : ops::sub(sd, clean);
      return ops::mean(ops::mul(diff, diff));
    }
  }
  throw ContractError("divergence: unknown metric");
}

struct SgdConfig {
  double lr = 0.004;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// d = g + λp; v = μv + d (v = d on the first step); p -= η v.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg = {}) : cfg_(cfg) {}

  void step(Model& model) {
    auto params = model.parameters();
    if (velocity_.empty()) velocity_.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k].mutable_data();
      const auto g = params[k].grad();
      auto& v = velocity_[k];
      const bool first = v.empty();
      if (first) v.assign(p.size(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        double d = g.empty() ? 0.0 : g[i];
        if (cfg_.weight_decay != 0.0) d += cfg_.weight_decay * p[i];
        if (cfg_.momentum != 0.0) {
          v[i] = first ? d : cfg_.momentum * v[i] + d;
          d = v[i];
        }
        p[i] -= cfg_.lr * d;
      }
    }
  }

  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainConfig {
  double tau = 10.0;
  Divergence divergence = Divergence::kl;
  DivergenceOptions divergence_options;
  double consistency_weight = 1.0;
  SgdConfig sgd;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  DreamConfig dream;
  TrainMode mode = TrainMode::sd_consistency;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("train: tau must be > 0");
    if (!(sgd.lr > 0.0)) throw ConfigError("train: lr must be > 0");
    if (!(sgd.momentum >= 0.0)) throw ConfigError("train: momentum must be >= 0");
    if (!(sgd.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (!(consistency_weight >= 0.0)) throw ConfigError("train: consistency_weight must be >= 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
  }
};

/// Index of the largest entry in each row; ties go to the lowest index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (logits[r * c + k] > logits[r * c + best]) best = k;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

/// Pre-normalized training images with labels and the class index used for
/// style-partner draws.
class TrainingSet {
 public:
  TrainingSet(const DomainDataset& ds, std::span<const std::size_t> domains, Normalization norm)
      : norm_(norm), classes_(ds.classes.size()), size_(ds.size) {
    if (domains.empty()) throw ConfigError("training set needs at least one source domain");
    std::vector<const Image*> images;
    for (std::size_t d : domains) {
      for (std::size_t c = 0; c < ds.classes.size(); ++c) {
        for (const auto& img : ds.samples.at(d).at(c)) {
          images.push_back(&img);
          labels_.push_back(static_cast<int>(c));
        }
      }
    }
    if (images.empty()) throw DataError("training set is empty");
    const Tensor all = to_tensor(images, norm_);
    pixels_.assign(all.data().begin(), all.data().end());
  }

  TrainingSet(const DomainDataset& ds, std::span<const std::size_t> domains)
      : TrainingSet(ds, domains, ds.normalization_over(domains)) {}

  std::size_t size() const { return labels_.size(); }
  std::size_t classes() const { return classes_; }
  const Normalization& normalization() const { return norm_; }
  std::span<const int> labels() const { return labels_; }
  ClassIndex class_index() const { return ClassIndex(labels_, classes_); }

  Tensor batch(std::span<const std::size_t> items) const {
    const std::size_t per = 3 * size_ * size_;
    std::vector<double> data(items.size() * per);
    for (std::size_t s = 0; s < items.size(); ++s) {
      std::memcpy(data.data() + s * per, pixels_.data() + items[s] * per, per * sizeof(double));
    }
    return Tensor({items.size(), 3, size_, size_}, std::move(data));
  }

 private:
  Normalization norm_;
  std::size_t classes_;
  std::size_t size_;
  std::vector<int> labels_;
  std::vector<double> pixels_;
};

struct StepResult {
  double ce = 0.0;
  double cons = 0.0;
  double total = 0.0;
  std::size_t correct = 0;
};

namespace detail {

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace detail

struct TrainingLoss {
  Tensor total;
  Tensor logits;  // clean logits
  double ce = 0.0;
  double cons = 0.0;  // consistency term (sd_ce: CE on the SD batch)
};

/// Objective of one step given an already generated SD batch (`x_sd` null
/// when the mode or weight needs none). x_sd is a constant of the objective.
inline TrainingLoss training_loss(const Model& model, const Tensor& x, const Tensor* x_sd,
                                  std::span<const int> labels, const TrainConfig& cfg) {
  TrainingLoss out;
  out.logits = model.predict_logits(x);
  const Tensor ce = ops::softmax_ce(out.logits, labels);
  out.total = ce;
  out.ce = ce.item();
  if (cfg.mode == TrainMode::sd_ce) {
    if (!x_sd) throw ContractError("training_loss: sd_ce needs an SD batch");
    const Tensor ce_sd = ops::softmax_ce(model.predict_logits(*x_sd), labels);
    out.cons = ce_sd.item();
    out.total = ops::add(ce, ce_sd);
  } else if (cfg.mode != TrainMode::erm && x_sd && !detail::bitwise_equal(*x_sd, x)) {
    // When x' == x the divergence is exactly 0 with zero gradient for every
    // metric, so the term is omitted and the step coincides with ERM.
    const Tensor sd_logits = model.predict_logits(*x_sd);
    const double inv_tau = 1.0 / cfg.tau;
    const Tensor cons = divergence(cfg.divergence, ops::scale(sd_logits, inv_tau),
                                   ops::scale(out.logits, inv_tau), cfg.divergence_options);
    out.cons = cons.item();
    out.total = ops::add(ce, ops::scale(cons, cfg.consistency_weight));
  }
  return out;
}

/// One optimization step on a batch.
///
/// `partners` holds the style image of every sample (for samples without a
/// partner, `has_partner[i]` is false and the sample's SD image is the clean
/// image itself). The dream config's projection box must already be set.
inline StepResult train_step(Model& model, Sgd& sgd, const Tensor& x, std::span<const int> labels,
                             const Tensor& partners, std::span<const bool> has_partner,
                             const TrainConfig& cfg, Rng& dream_rng) {
  if (x.dim(0) == 0) throw DimensionError("train_step: empty batch");
  const bool needs_sd = cfg.mode == TrainMode::sd_ce ||
                        ((cfg.mode == TrainMode::sd_consistency ||
                          cfg.mode == TrainMode::deepdream_consistency) &&
                         cfg.consistency_weight != 0.0);

  Tensor x_sd;
  if (needs_sd) {
    DreamConfig dream = cfg.dream;
    dream.mode = cfg.mode == TrainMode::deepdream_consistency ? DreamMode::deepdream
                                                              : DreamMode::stylized;
    Tensor generated = stylized_dream(model, x, partners, dream, dream_rng);
    const std::size_t per = x.numel() / x.dim(0);
    std::vector<double> merged(generated.data().begin(), generated.data().end());
    for (std::size_t s = 0; s < x.dim(0); ++s) {
      if (!has_partner[s]) std::memcpy(merged.data() + s * per, x.data().data() + s * per, per * sizeof(double));
    }
    x_sd = Tensor(x.shape(), std::move(merged));
  }

  model.zero_grad();
  TrainingLoss loss = training_loss(model, x, needs_sd ? &x_sd : nullptr, labels, cfg);
  const Tensor& total = loss.total;
  StepResult result;
  result.ce = loss.ce;
  result.cons = loss.cons;
  result.total = total.item();
  if (!std::isfinite(result.total)) {
    std::ostringstream msg;
    msg << "non-finite training loss: ce=" << result.ce << " cons=" << result.cons;
    throw NumericError(msg.str());
  }
  total.backward();
  sgd.step(model);

  const auto predicted = argmax_rows(loss.logits);
  for (std::size_t i = 0; i < labels.size(); ++i) result.correct += predicted[i] == labels[i];
  return result;
}

struct EpochStats {
  double ce = 0.0;
  double cons = 0.0;
  double acc = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;
};

using EpochCallback = std::function<void(std::size_t epoch, const EpochStats&)>;

/// Stream tags for the training substreams.
enum : std::uint64_t { kShuffleStream = 1, kPartnerStream = 2, kDreamStream = 3 };

/// Mini-batch training over a pre-built set. The model's normalization is
/// set to the training set's, and the dream projection box to the matching
/// normalized pixel range.
inline TrainReport train(Model& model, const TrainingSet& data, const TrainConfig& cfg_in,
                         const EpochCallback& on_epoch = {}) {
  cfg_in.validate();
  if (data.classes() != model.arch().classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.classes()) +
                      " classes, model has " + std::to_string(model.arch().classes));
  }
  TrainConfig cfg = cfg_in;
  model.set_normalization(data.normalization());
  cfg.dream.set_bounds(data.normalization());
  cfg.dream.validate(model.arch().in_channels);

  const auto start = std::chrono::steady_clock::now();
  const ClassIndex index = data.class_index();
  const auto labels = data.labels();
  Sgd sgd(cfg.sgd);
  TrainReport report;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(cfg.seed, {kShuffleStream, epoch});
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double ce_sum = 0.0, cons_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0, b = 0; begin < order.size(); begin += cfg.batch_size, ++b) {
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());
      std::span<const std::size_t> items(order.data() + begin, end - begin);
      std::vector<int> y(items.size());
      for (std::size_t i = 0; i < items.size(); ++i) y[i] = labels[items[i]];

      Rng partner_rng = Rng::derive(cfg.seed, {kPartnerStream, epoch, b});
      std::vector<std::size_t> partner_items(items.size());
      std::unique_ptr<bool[]> has_partner(new bool[items.size()]);
      for (std::size_t i = 0; i < items.size(); ++i) {
        auto p = sample_style_partner(items[i], y[i], index, partner_rng);
        has_partner[i] = p.has_value();
        partner_items[i] = p.value_or(items[i]);
      }
      Rng dream_rng = Rng::derive(cfg.seed, {kDreamStream, epoch, b});
      StepResult r;
      try {
        r = train_step(model, sgd, data.batch(items), y, data.batch(partner_items),
                       std::span<const bool>(has_partner.get(), items.size()), cfg, dream_rng);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " +
                           e.what());
      }
      ce_sum += r.ce * static_cast<double>(items.size());
      cons_sum += r.cons * static_cast<double>(items.size());
      correct += r.correct;
    }
    const auto n = static_cast<double>(order.size());
    report.epochs.push_back({ce_sum / n, cons_sum / n, static_cast<double>(correct) / n});
    if (on_epoch) on_epoch(epoch, report.epochs.back());
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Trains on the listed source domains of a dataset.
inline TrainReport train(Model& model, const DomainDataset& ds, std::span<const std::size_t> sources,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  return train(model, TrainingSet(ds, sources), cfg, on_epoch);
}

}  // namespace sdream
