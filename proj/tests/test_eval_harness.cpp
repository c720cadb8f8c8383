#include <gtest/gtest.h>

#include "support.hpp"

using namespace sdream;
using namespace sdream::testing;

namespace {

double level(std::size_t k) { return 0.1 + 0.2 * static_cast<double>(k); }

// One-block model on 4x4 inputs whose logits are −(v − μ_k)² + const, where
// v is the mean of channel 0: a nearest-centre classifier on brightness.
Model brightness_model(std::size_t classes) {
  Architecture arch;
  arch.input_size = 4;
  arch.widths = {1};
  arch.kernel = 1;
  arch.classes = classes;
  Model m = Model::init(0, arch);
  auto p = m.parameters();
  auto kernel = p[0].mutable_data();
  kernel[0] = 1.0;
  kernel[1] = kernel[2] = 0.0;
  p[1].mutable_data()[0] = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double mu = level(k);
    p[2].mutable_data()[k] = 2.0 * mu;
    p[3].mutable_data()[k] = -mu * mu;
  }
  return m;
}

Image flat_image(double v) {
  Image img(4, 4);
  for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = to_byte(v);
  return img;
}

DomainDataset tiny_dataset(std::vector<std::string> domains, std::size_t per_cell = 4) {
  DatasetSpec spec;
  spec.per_cell = per_cell;
  spec.size = 8;
  spec.domains = std::move(domains);
  spec.classes = {"disk", "square", "triangle"};
  return generate(spec);
}

ExperimentSpec tiny_experiment(Protocol protocol) {
  ExperimentSpec spec;
  spec.protocol = protocol;
  spec.arch = tiny_arch();
  spec.train.epochs = 1;
  spec.train.batch_size = 8;
  spec.train.dream.iterations = 1;
  spec.seeds = {0, 1};
  return spec;
}

}  // namespace

TEST(Evaluate, PerfectModelScoresOne) {
  const Model m = brightness_model(5);
  std::vector<Image> images;
  std::vector<int> labels;
  for (int k = 0; k < 5; ++k) {
    for (int rep = 0; rep < 3; ++rep) {
      images.push_back(flat_image(level(k)));
      labels.push_back(k);
    }
  }
  std::vector<const Image*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  EXPECT_EQ(evaluate(m, ptrs, labels), 1.0);
}

TEST(Evaluate, ConstantLogitsFollowTieRule) {
  const DomainDataset ds = [] {
    DatasetSpec spec;
    spec.per_cell = 4;
    spec.size = 8;
    spec.domains = {"noise"};
    return generate(spec);
  }();
  Architecture arch = tiny_arch(5);
  Model m = Model::init(0, arch);
  for (auto& p : m.parameters()) {
    for (double& v : p.mutable_data()) v = 0.0;
  }
  EXPECT_DOUBLE_EQ(evaluate_domain(m, ds, 0), 0.2);
}

TEST(Evaluate, EmptyAndMismatchedSets) {
  const Model m = brightness_model(3);
  std::vector<const Image*> none;
  std::vector<int> labels;
  EXPECT_THROW(evaluate(m, none, labels), DataError);
  Image img = flat_image(0.5);
  std::vector<const Image*> one{&img};
  EXPECT_THROW(evaluate(m, one, labels), DimensionError);
}

TEST(Evaluate, CheckpointAccuracyIsStable) {
  TempDir dir("eval_stable");
  const DomainDataset ds = tiny_dataset({"flat", "noise"});
  Model m = Model::init(0, tiny_arch());
  TrainConfig cfg;
  cfg.mode = TrainMode::erm;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  train(m, ds, std::vector<std::size_t>{0}, cfg);
  save_checkpoint(m, dir / "m.bin");
  const double first = evaluate_domain(load_checkpoint(dir / "m.bin"), ds, 1);
  const double second = evaluate_domain(load_checkpoint(dir / "m.bin"), ds, 1);
  EXPECT_EQ(first, second);
  EXPECT_EQ(first, evaluate_domain(m, ds, 1));
}

TEST(BiasProbe, OracleShapeModel) {
  const Model m = brightness_model(3);
  std::vector<CueConflictProbe> probes;
  for (int s = 0; s < 3; ++s) {
    for (int t = 0; t < 3; ++t) {
      if (s != t) probes.push_back({flat_image(level(s)), s, t});
    }
  }
  const auto f = run_bias_probe(m, probes);
  EXPECT_EQ(f.shape, 1.0);
  EXPECT_EQ(f.texture, 0.0);
  EXPECT_EQ(f.other, 0.0);
}

TEST(BiasProbe, FractionsSumToOne) {
  const DomainDataset ds = tiny_dataset({"flat"});
  const Model m = Model::init(3, tiny_arch());
  const auto f = run_bias_probe(m, make_cue_conflict(ds, 0, 200));
  EXPECT_NEAR(f.shape + f.texture + f.other, 1.0, 1e-12);
  EXPECT_THROW(run_bias_probe(m, std::vector<CueConflictProbe>{}), DataError);
}

namespace {

// Checks every aggregate against a recomputation from the run records.
void expect_self_consistent(const MetricsReport& report, const std::vector<std::uint64_t>& seeds) {
  for (const auto& a : report.aggregates) {
    std::vector<double> values;
    if (a.target == "average") {
      for (auto seed : seeds) {
        double acc = 0.0;
        int n = 0;
        for (const auto& r : report.runs) {
          if (r.config == a.config && r.seed == seed) {
            acc += r.accuracy;
            ++n;
          }
        }
        if (n) values.push_back(acc / n);
      }
    } else {
      for (const auto& r : report.runs) {
        if (r.config == a.config && r.target == a.target) values.push_back(r.accuracy);
      }
    }
    ASSERT_EQ(values.size(), a.count);
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    EXPECT_NEAR(a.mean, mean, 1e-15);
    EXPECT_NEAR(a.std, std::sqrt(var / static_cast<double>(values.size())), 1e-15);
  }
  for (const auto& r : report.runs) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
}

}  // namespace

TEST(LeaveOneOut, TwoDomainsTwoRunsPerSeed) {
  const DomainDataset ds = tiny_dataset({"flat", "noise"});
  ExperimentSpec spec = tiny_experiment(Protocol::leave_one_out);
  spec.modes = {TrainMode::erm};
  const auto report = run_experiment(spec, ds);
  ASSERT_EQ(report.runs.size(), 4u);
  for (auto seed : spec.seeds) {
    int n = 0;
    for (const auto& r : report.runs) n += r.seed == seed;
    EXPECT_EQ(n, 2);
  }
  EXPECT_EQ(report.runs[0].sources, (std::vector<std::string>{"noise"}));
  EXPECT_EQ(report.runs[0].target, "flat");
  expect_self_consistent(report, spec.seeds);
}

TEST(LeaveOneOut, NeedsTwoDomains) {
  const DomainDataset ds = tiny_dataset({"flat"});
  EXPECT_THROW(run_experiment(tiny_experiment(Protocol::leave_one_out), ds), ConfigError);
}

TEST(Ablation, ExactlyFourConfigurations) {
  const DomainDataset ds = tiny_dataset({"flat", "noise"});
  ExperimentSpec spec = tiny_experiment(Protocol::ablation);
  spec.seeds = {0};
  spec.probe_count = 30;
  const auto report = run_experiment(spec, ds);
  EXPECT_EQ(report.configs,
            (std::vector<std::string>{"sd_consistency", "deepdream_consistency", "sd_ce", "erm"}));
  EXPECT_EQ(report.runs.size(), 8u);
  EXPECT_EQ(report.bias.size(), 4u);
  for (const auto& b : report.bias) {
    EXPECT_NEAR(b.mean.shape + b.mean.texture + b.mean.other, 1.0, 1e-12);
  }
  expect_self_consistent(report, spec.seeds);
}

TEST(SingleSource, MatrixHasNoDiagonalAndPermutes) {
  const DomainDataset ds = tiny_dataset({"flat", "stripes", "noise"});
  ExperimentSpec spec = tiny_experiment(Protocol::single_source_matrix);
  spec.train.mode = TrainMode::erm;
  const auto report = run_experiment(spec, ds);
  EXPECT_EQ(report.runs.size(), 2u * 3u * 2u);
  const auto m = source_target_matrix(report);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(std::isnan(m[i][i]));

  const DomainDataset swapped = tiny_dataset({"noise", "flat", "stripes"});
  const auto m2 = source_target_matrix(run_experiment(spec, swapped));
  const std::size_t perm[3] = {1, 2, 0};  // old index -> new index
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (i != j) {
        EXPECT_EQ(m[i][j], m2[perm[i]][perm[j]]);
      }
    }
  }

  const auto csv = to_csv(report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "source,flat,stripes,noise");
  EXPECT_NE(csv.find("\nflat,,"), std::string::npos);
  const auto json = sdream::to_json(report, nlohmann::ordered_json::object());
  EXPECT_EQ(json["matrix"].size(), 3u);
  EXPECT_FALSE(json["matrix"][0]["accuracy"].contains("flat"));
}

TEST(Sweeps, EmitConfiguredGrid) {
  const DomainDataset ds = tiny_dataset({"flat", "noise"}, 3);
  ExperimentSpec spec = tiny_experiment(Protocol::alpha_sweep);
  spec.seeds = {0};
  spec.alphas = {0.01, 0.9};
  auto report = run_experiment(spec, ds);
  EXPECT_EQ(report.configs, (std::vector<std::string>{"alpha=0.01", "alpha=0.9"}));
  auto json = sdream::to_json(report, nlohmann::ordered_json::object());
  ASSERT_EQ(json["sweep"].size(), 2u);
  EXPECT_EQ(json["sweep"][1]["alpha"], "0.9");

  spec.protocol = Protocol::tau_sweep;
  spec.taus = {1, 20};
  report = run_experiment(spec, ds);
  EXPECT_EQ(report.configs, (std::vector<std::string>{"tau=1.0", "tau=20.0"}));
  const auto csv = to_csv(report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "tau,flat,noise,average");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);

  spec.protocol = Protocol::divergence_sweep;
  report = run_experiment(spec, ds);
  EXPECT_EQ(report.configs, (std::vector<std::string>{"divergence=mse", "divergence=js", "divergence=kl"}));
}

TEST(BiasProtocol, TrainsOnAllDomains) {
  const DomainDataset ds = tiny_dataset({"flat", "noise"});
  ExperimentSpec spec = tiny_experiment(Protocol::bias_probe);
  spec.modes = {TrainMode::erm, TrainMode::sd_consistency};
  spec.probe_count = 40;
  const auto report = run_experiment(spec, ds);
  EXPECT_EQ(report.runs.size(), 4u);
  for (const auto& r : report.runs) {
    EXPECT_EQ(r.target, "cue_conflict");
    EXPECT_EQ(r.sources.size(), 2u);
    ASSERT_TRUE(r.bias.has_value());
    EXPECT_EQ(r.accuracy, r.bias->shape);
  }
  const auto csv = to_csv(report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config,shape_match_frac,texture_match_frac,other_frac");
  spec.probe_count = 0;
  EXPECT_THROW(run_experiment(spec, ds), ConfigError);
}

TEST(Experiment, ReproducibleAndThreadInvariant) {
  const DomainDataset ds = tiny_dataset({"flat", "stripes", "noise"}, 3);
  ExperimentSpec spec = tiny_experiment(Protocol::leave_one_out);
  spec.modes = {TrainMode::sd_consistency};
  const auto a = sdream::to_json(run_experiment(spec, ds), nlohmann::ordered_json::object()).dump();
  const auto b = sdream::to_json(run_experiment(spec, ds), nlohmann::ordered_json::object()).dump();
  spec.threads = 3;
  const auto c = sdream::to_json(run_experiment(spec, ds), nlohmann::ordered_json::object()).dump();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Experiment, ReportsStdKind) {
  const DomainDataset ds = tiny_dataset({"flat", "noise"}, 3);
  ExperimentSpec spec = tiny_experiment(Protocol::leave_one_out);
  spec.seeds = {4};
  const auto json = sdream::to_json(run_experiment(spec, ds), {{"k", 1}});
  EXPECT_EQ(json["std_kind"], "population");
  EXPECT_EQ(json["config"]["k"], 1);
}
