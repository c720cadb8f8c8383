#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sdream/error.hpp"
#include "sdream/model.hpp"
#include "sdream/synth_data.hpp"
#include "sdream/training.hpp"

namespace sdream {

/// Argmax accuracy, ties to the lowest class index.
inline double evaluate(const Model& model, std::span<const Image* const> images,
                       std::span<const int> labels, std::size_t batch = 256) {
  if (images.empty()) throw DataError("evaluate: empty set");
  if (images.size() != labels.size()) throw DimensionError("evaluate: images/labels mismatch");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < images.size(); begin += batch) {
    const std::size_t end = std::min(begin + batch, images.size());
    const Tensor x = to_tensor(images.subspan(begin, end - begin), model.normalization());
    const auto pred = argmax_rows(model.predict_logits(x, ParamGrad::frozen));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[begin + i];
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

/// All images of one domain with their class labels.
inline void domain_split(const DomainDataset& ds, std::size_t domain, std::vector<const Image*>& images,
                         std::vector<int>& labels) {
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    for (const auto& img : ds.samples.at(domain).at(c)) {
      images.push_back(&img);
      labels.push_back(static_cast<int>(c));
    }
  }
}

inline double evaluate_domain(const Model& model, const DomainDataset& ds, std::size_t domain) {
  std::vector<const Image*> images;
  std::vector<int> labels;
  domain_split(ds, domain, images, labels);
  return evaluate(model, images, labels);
}

struct BiasFractions {
  double shape = 0.0;
  double texture = 0.0;
  double other = 0.0;
};

/// Fraction of cue-conflict probes classified as their shape, their texture,
/// or neither.
inline BiasFractions run_bias_probe(const Model& model, std::span<const CueConflictProbe> probes) {
  if (probes.empty()) throw DataError("bias probe: empty probe set");
  std::size_t shape = 0, texture = 0;
  constexpr std::size_t kBatch = 256;
  for (std::size_t begin = 0; begin < probes.size(); begin += kBatch) {
    const std::size_t end = std::min(begin + kBatch, probes.size());
    std::vector<const Image*> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(&probes[i].image);
    const auto pred =
        argmax_rows(model.predict_logits(to_tensor(images, model.normalization()), ParamGrad::frozen));
    for (std::size_t i = 0; i < pred.size(); ++i) {
      shape += pred[i] == probes[begin + i].shape_label;
      texture += pred[i] == probes[begin + i].texture_label;
    }
  }
  const auto n = static_cast<double>(probes.size());
  BiasFractions f;
  f.shape = static_cast<double>(shape) / n;
  f.texture = static_cast<double>(texture) / n;
  f.other = static_cast<double>(probes.size() - shape - texture) / n;
  return f;
}

enum class Protocol {
  leave_one_out,
  single_source_matrix,
  bias_probe,
  ablation,
  divergence_sweep,
  alpha_sweep,
  tau_sweep
};

struct ExperimentSpec {
  Protocol protocol = Protocol::leave_one_out;
  Architecture arch;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  /// Training modes compared by leave_one_out and bias_probe.
  std::vector<TrainMode> modes{TrainMode::sd_consistency};
  std::vector<double> alphas{0.01, 0.03, 0.09, 0.15, 0.3, 0.6, 0.9};
  std::vector<double> taus{1, 3, 5, 10, 20};
  std::vector<Divergence> divergences{Divergence::mse, Divergence::js, Divergence::kl};
  /// Cue-conflict probes scored on every trained model; 0 disables scoring
  /// outside the bias_probe protocol.
  std::size_t probe_count = 0;
  std::uint64_t probe_seed = 7;
  std::size_t threads = 1;
  /// Called after each finished training job (serialized across workers).
  std::function<void(std::size_t done, std::size_t total, const std::string& config)> progress;

  void validate(const DomainDataset& ds) const {
    if (seeds.empty()) throw ConfigError("experiment: seeds must be non-empty");
    if (threads == 0) throw ConfigError("experiment: threads must be >= 1");
    const bool multi = protocol != Protocol::bias_probe;
    if (multi && ds.domains.size() < 2) throw ConfigError("experiment: protocol needs >= 2 domains");
    if ((protocol == Protocol::leave_one_out || protocol == Protocol::bias_probe) && modes.empty()) {
      throw ConfigError("experiment: modes must be non-empty");
    }
    if (protocol == Protocol::alpha_sweep && alphas.empty()) throw ConfigError("experiment: alphas empty");
    if (protocol == Protocol::tau_sweep && taus.empty()) throw ConfigError("experiment: taus empty");
    if (protocol == Protocol::divergence_sweep && divergences.empty()) {
      throw ConfigError("experiment: divergences empty");
    }
    if (protocol == Protocol::bias_probe && probe_count == 0) {
      throw ConfigError("experiment: bias_probe needs probe_count > 0");
    }
    train.validate();
    arch.validate();
  }
};

struct RunRecord {
  std::string config;
  std::uint64_t seed = 0;
  std::vector<std::string> sources;
  std::string target;
  double accuracy = 0.0;
  std::optional<BiasFractions> bias;
};

/// Mean and population std over seeds.
struct Aggregate {
  std::string config;
  std::string target;  // "average" for the across-target summary
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

struct BiasAggregate {
  std::string config;
  BiasFractions mean;
  std::size_t count = 0;
};

struct MetricsReport {
  std::string protocol;
  /// Sweep parameter name ("alpha", "tau", "divergence") or empty.
  std::string sweep_key;
  std::vector<std::string> configs;
  std::vector<std::string> domains;
  std::vector<RunRecord> runs;
  std::vector<Aggregate> aggregates;
  std::vector<BiasAggregate> bias;

  const Aggregate& aggregate(const std::string& config, const std::string& target) const {
    for (const auto& a : aggregates) {
      if (a.config == config && a.target == target) return a;
    }
    throw ContractError("no aggregate for " + config + "/" + target);
  }

  const BiasAggregate& bias_of(const std::string& config) const {
    for (const auto& b : bias) {
      if (b.config == config) return b;
    }
    throw ContractError("no bias aggregate for " + config);
  }
};

inline std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::leave_one_out: return "leave_one_out";
    case Protocol::single_source_matrix: return "single_source_matrix";
    case Protocol::bias_probe: return "bias_probe";
    case Protocol::ablation: return "ablation";
    case Protocol::divergence_sweep: return "divergence_sweep";
    case Protocol::alpha_sweep: return "alpha_sweep";
    case Protocol::tau_sweep: return "tau_sweep";
  }
  return "?";
}

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::erm: return "erm";
    case TrainMode::sd_ce: return "sd_ce";
    case TrainMode::deepdream_consistency: return "deepdream_consistency";
    case TrainMode::sd_consistency: return "sd_consistency";
  }
  return "?";
}

inline std::string divergence_name(Divergence d) {
  switch (d) {
    case Divergence::kl: return "kl";
    case Divergence::js: return "js";
    case Divergence::mse: return "mse";
  }
  return "?";
}

/// Shortest round-trip decimal form, used for sweep labels.
inline std::string format_number(double v) {
  return nlohmann::json(v).dump();
}

namespace detail {

/// One model to train and the domains to score it on.
struct Job {
  std::string config;
  TrainConfig train;
  std::uint64_t seed;
  std::vector<std::size_t> sources;
  std::vector<std::size_t> targets;
  bool probe = false;
};

struct JobResult {
  std::vector<double> accuracy;
  std::optional<BiasFractions> bias;
};

inline JobResult run_job(const Job& job, const DomainDataset& ds, const Architecture& arch,
                         const std::vector<CueConflictProbe>& probes) {
  TrainConfig cfg = job.train;
  cfg.seed = job.seed;
  Model model = Model::init(job.seed, arch);
  train(model, ds, job.sources, cfg);
  JobResult r;
  for (std::size_t t : job.targets) r.accuracy.push_back(evaluate_domain(model, ds, t));
  if (job.probe) r.bias = run_bias_probe(model, probes);
  return r;
}

/// Runs jobs on up to `threads` workers. Results land in job order, so the
/// outcome does not depend on the thread count.
inline std::vector<JobResult> run_jobs(const std::vector<Job>& jobs, const DomainDataset& ds,
                                       const Architecture& arch,
                                       const std::vector<CueConflictProbe>& probes,
                                       std::size_t threads,
                                       const decltype(ExperimentSpec::progress)& progress = {}) {
  std::vector<JobResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = run_job(jobs[i], ds, arch, probes);
        std::lock_guard lock(failure_mutex);
        if (progress) progress(++done, jobs.size(), jobs[i].config);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t workers = std::min(threads, jobs.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

inline std::vector<std::string> names_of(const DomainDataset& ds, const std::vector<std::size_t>& ids) {
  std::vector<std::string> out;
  for (std::size_t i : ids) out.push_back(ds.domains[i]);
  return out;
}

inline void add_aggregate(MetricsReport& report, const std::string& config, const std::string& target,
                          const std::vector<double>& values) {
  Aggregate a{config, target, 0.0, 0.0, values.size()};
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  for (double v : values) a.std += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(a.std / static_cast<double>(values.size()));
  report.aggregates.push_back(a);
}

/// Per-(config, target) and per-config aggregates from the run records.
/// The "average" entry averages each seed's runs first, then takes mean and
/// std over seeds.
inline void aggregate_runs(MetricsReport& report, const std::vector<std::uint64_t>& seeds) {
  for (const auto& config : report.configs) {
    std::vector<std::string> targets;
    for (const auto& r : report.runs) {
      if (r.config == config && std::find(targets.begin(), targets.end(), r.target) == targets.end()) {
        targets.push_back(r.target);
      }
    }
    for (const auto& target : targets) {
      std::vector<double> values;
      for (const auto& r : report.runs) {
        if (r.config == config && r.target == target) values.push_back(r.accuracy);
      }
      add_aggregate(report, config, target, values);
    }
    std::vector<double> per_seed;
    for (std::uint64_t seed : seeds) {
      double acc = 0.0;
      std::size_t count = 0;
      for (const auto& r : report.runs) {
        if (r.config == config && r.seed == seed) {
          acc += r.accuracy;
          ++count;
        }
      }
      if (count) per_seed.push_back(acc / static_cast<double>(count));
    }
    if (!per_seed.empty()) add_aggregate(report, config, "average", per_seed);

    BiasAggregate b{config, {}, 0};
    for (const auto& r : report.runs) {
      if (r.config != config || !r.bias) continue;
      b.mean.shape += r.bias->shape;
      b.mean.texture += r.bias->texture;
      b.mean.other += r.bias->other;
      ++b.count;
    }
    if (b.count) {
      const auto n = static_cast<double>(b.count);
      b.mean = {b.mean.shape / n, b.mean.texture / n, b.mean.other / n};
      report.bias.push_back(b);
    }
  }
}

}  // namespace detail

/// Dispatches the protocol named in `spec`.
inline MetricsReport run_experiment(const ExperimentSpec& spec, const DomainDataset& ds) {
  spec.validate(ds);
  MetricsReport report;
  report.protocol = protocol_name(spec.protocol);
  report.domains = ds.domains;
  const auto all = ds.all_domains();

  // (config label, train config) pairs evaluated leave-one-domain-out.
  std::vector<std::pair<std::string, TrainConfig>> loo_configs;
  auto with_mode = [&](TrainMode m) {
    TrainConfig c = spec.train;
    c.mode = m;
    return c;
  };
  switch (spec.protocol) {
    case Protocol::leave_one_out:
      for (TrainMode m : spec.modes) loo_configs.emplace_back(mode_name(m), with_mode(m));
      break;
    case Protocol::ablation:
      for (TrainMode m : {TrainMode::sd_consistency, TrainMode::deepdream_consistency,
                          TrainMode::sd_ce, TrainMode::erm}) {
        loo_configs.emplace_back(mode_name(m), with_mode(m));
      }
      break;
    case Protocol::alpha_sweep:
      report.sweep_key = "alpha";
      for (double a : spec.alphas) {
        TrainConfig c = spec.train;
        c.dream.alpha = a;
        loo_configs.emplace_back("alpha=" + format_number(a), c);
      }
      break;
    case Protocol::tau_sweep:
      report.sweep_key = "tau";
      for (double t : spec.taus) {
        TrainConfig c = spec.train;
        c.tau = t;
        loo_configs.emplace_back("tau=" + format_number(t), c);
      }
      break;
    case Protocol::divergence_sweep:
      report.sweep_key = "divergence";
      for (Divergence d : spec.divergences) {
        TrainConfig c = spec.train;
        c.divergence = d;
        loo_configs.emplace_back("divergence=" + divergence_name(d), c);
      }
      break;
    case Protocol::single_source_matrix:
    case Protocol::bias_probe:
      break;
  }

  std::vector<detail::Job> jobs;
  const bool probe_all = spec.probe_count > 0;
  for (std::uint64_t seed : spec.seeds) {
    if (spec.protocol == Protocol::single_source_matrix) {
      for (std::size_t s : all) {
        std::vector<std::size_t> targets;
        for (std::size_t t : all) {
          if (t != s) targets.push_back(t);
        }
        jobs.push_back({mode_name(spec.train.mode), spec.train, seed, {s}, targets, probe_all});
      }
    } else if (spec.protocol == Protocol::bias_probe) {
      for (TrainMode m : spec.modes) jobs.push_back({mode_name(m), with_mode(m), seed, all, {}, true});
    } else {
      for (const auto& [label, cfg] : loo_configs) {
        for (std::size_t t : all) {
          std::vector<std::size_t> sources;
          for (std::size_t s : all) {
            if (s != t) sources.push_back(s);
          }
          jobs.push_back({label, cfg, seed, sources, {t}, probe_all});
        }
      }
    }
  }
  for (const auto& job : jobs) {
    if (std::find(report.configs.begin(), report.configs.end(), job.config) == report.configs.end()) {
      report.configs.push_back(job.config);
    }
  }

  std::vector<CueConflictProbe> probes;
  if (spec.probe_count > 0) probes = make_cue_conflict(ds, spec.probe_seed, spec.probe_count);
  const auto results = detail::run_jobs(jobs, ds, spec.arch, probes, spec.threads, spec.progress);

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& job = jobs[j];
    const auto sources = detail::names_of(ds, job.sources);
    if (job.targets.empty()) {
      // Probe-only run: the recorded accuracy is the shape-match fraction.
      report.runs.push_back({job.config, job.seed, sources, "cue_conflict", results[j].bias->shape,
                             results[j].bias});
    }
    for (std::size_t k = 0; k < job.targets.size(); ++k) {
      report.runs.push_back({job.config, job.seed, sources, ds.domains[job.targets[k]],
                             results[j].accuracy[k], results[j].bias});
    }
  }
  detail::aggregate_runs(report, spec.seeds);
  return report;
}

/// Single-source grid: mean accuracy over seeds for (source, target), with
/// NaN on the diagonal.
inline std::vector<std::vector<double>> source_target_matrix(const MetricsReport& report) {
  const std::size_t s = report.domains.size();
  std::vector<std::vector<double>> m(s, std::vector<double>(s, std::nan("")));
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      if (i == j) continue;
      double acc = 0.0;
      std::size_t count = 0;
      for (const auto& r : report.runs) {
        if (r.sources.size() == 1 && r.sources[0] == report.domains[i] && r.target == report.domains[j]) {
          acc += r.accuracy;
          ++count;
        }
      }
      if (count) m[i][j] = acc / static_cast<double>(count);
    }
  }
  return m;
}

inline std::vector<double> row_averages(const std::vector<std::vector<double>>& m) {
  std::vector<double> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (i != j && !std::isnan(m[i][j])) {
        acc += m[i][j];
        ++count;
      }
    }
    out.push_back(count ? acc / static_cast<double>(count) : std::nan(""));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const BiasFractions& b) {
  return {{"shape_match_frac", b.shape}, {"texture_match_frac", b.texture}, {"other_frac", b.other}};
}

inline nlohmann::ordered_json to_json(const MetricsReport& report, const nlohmann::ordered_json& config) {
  nlohmann::ordered_json out;
  out["protocol"] = report.protocol;
  out["std_kind"] = "population";
  out["config"] = config;
  out["domains"] = report.domains;
  out["configs"] = report.configs;
  auto& runs = out["runs"] = nlohmann::ordered_json::array();
  for (const auto& r : report.runs) {
    nlohmann::ordered_json j{{"config", r.config}, {"seed", r.seed}, {"sources", r.sources},
                             {"target", r.target}, {"accuracy", r.accuracy}};
    if (r.bias) j["bias"] = to_json(*r.bias);
    runs.push_back(j);
  }
  auto& aggs = out["aggregates"] = nlohmann::ordered_json::array();
  for (const auto& a : report.aggregates) {
    aggs.push_back({{"config", a.config}, {"target", a.target}, {"mean", a.mean}, {"std", a.std},
                    {"count", a.count}});
  }
  if (!report.bias.empty()) {
    auto& bias = out["bias"] = nlohmann::ordered_json::array();
    for (const auto& b : report.bias) {
      auto j = to_json(b.mean);
      j["config"] = b.config;
      j["count"] = b.count;
      bias.push_back(j);
    }
  }
  if (report.protocol == "single_source_matrix") {
    const auto m = source_target_matrix(report);
    const auto avg = row_averages(m);
    auto& rows = out["matrix"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < m.size(); ++i) {
      nlohmann::ordered_json acc;
      for (std::size_t j = 0; j < m.size(); ++j) {
        if (i != j) acc[report.domains[j]] = m[i][j];
      }
      rows.push_back({{"source", report.domains[i]}, {"accuracy", acc}, {"row_average", avg[i]}});
    }
  }
  if (!report.sweep_key.empty()) {
    auto& rows = out["sweep"] = nlohmann::ordered_json::array();
    for (const auto& config : report.configs) {
      nlohmann::ordered_json row;
      row[report.sweep_key] = config.substr(report.sweep_key.size() + 1);
      for (const auto& d : report.domains) row[d] = report.aggregate(config, d).mean;
      row["average"] = report.aggregate(config, "average").mean;
      rows.push_back(row);
    }
  }
  return out;
}

/// CSV export. Single-source grid: header row of target domains, first
/// column the source domain, blank diagonal. Bias probe: one row per config
/// with the mean fractions. Sweeps: one row per value. Other protocols: one
/// row per config with per-target means.
inline std::string to_csv(const MetricsReport& report) {
  std::ostringstream out;
  out.precision(17);
  if (report.protocol == "single_source_matrix") {
    const auto m = source_target_matrix(report);
    out << "source";
    for (const auto& d : report.domains) out << ',' << d;
    out << '\n';
    for (std::size_t i = 0; i < m.size(); ++i) {
      out << report.domains[i];
      for (std::size_t j = 0; j < m.size(); ++j) {
        out << ',';
        if (i != j) out << m[i][j];
      }
      out << '\n';
    }
    return out.str();
  }
  if (report.protocol == "bias_probe") {
    out << "config,shape_match_frac,texture_match_frac,other_frac\n";
    for (const auto& b : report.bias) {
      out << b.config << ',' << b.mean.shape << ',' << b.mean.texture << ',' << b.mean.other << '\n';
    }
    return out.str();
  }
  const std::string key = report.sweep_key.empty() ? "config" : report.sweep_key;
  out << key;
  for (const auto& d : report.domains) out << ',' << d;
  out << ",average\n";
  for (const auto& config : report.configs) {
    out << (report.sweep_key.empty() ? config : config.substr(key.size() + 1));
    for (const auto& d : report.domains) out << ',' << report.aggregate(config, d).mean;
    out << ',' << report.aggregate(config, "average").mean << '\n';
  }
  return out.str();
}

}  // namespace sdream
