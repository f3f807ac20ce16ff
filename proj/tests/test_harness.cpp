#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mg3d/mg3d.hpp"
#include "test_util.hpp"

namespace mg3d {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Generator, DeterministicPerSeed) {
  SyntheticSpec spec;
  spec.patients = 5;
  const auto a = generate_corpus(spec), b = generate_corpus(spec);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.volumes[i].voxels.values(), b.volumes[i].voxels.values());
    EXPECT_EQ(a.reports.reports[i].word_ids, b.reports.reports[i].word_ids);
    EXPECT_EQ(a.labels[i], b.labels[i]);
  }
  spec.seed = 1;
  EXPECT_NE(generate_corpus(spec).volumes[0].voxels.values(), a.volumes[0].voxels.values());
}

TEST(Generator, NoiseFreeVolumesDependOnlyOnFactors) {
  SyntheticSpec spec;
  spec.patients = 40;
  spec.noise = 0.0;
  const auto c = generate_corpus(spec);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = i + 1; j < c.size(); ++j)
      if (c.labels[i] == c.labels[j]) {
        EXPECT_EQ(c.volumes[i].voxels.values(), c.volumes[j].voxels.values());
        ++pairs;
      }
  EXPECT_GT(pairs, 0u);
}

TEST(Generator, LabelsSidecarShape) {
  SyntheticSpec spec;
  spec.patients = 10;
  const auto c = generate_corpus(spec);
  const auto dir = fresh_dir("mg3d_gen_labels");
  write_corpus(c, dir.string());
  const auto labels = read_labels((dir / "labels.jsonl").string());
  ASSERT_EQ(labels.size(), 10u);
  for (const auto& [id, f] : labels) {
    ASSERT_EQ(f.size(), 2u);
    for (int v : f) EXPECT_TRUE(v == 0 || v == 1);
  }
  fs::remove_all(dir);
}

TEST(Generator, EveryFactorMentionedExactlyOnce) {
  SyntheticSpec spec;
  spec.patients = 30;
  spec.factors = 3;
  const auto c = generate_corpus(spec);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto sents = c.reports.reports[i].sentences();
    for (std::size_t k = 0; k < 3; ++k) {
      const auto want = c.labels[i][k] ? spec.present_motif(k) : spec.absent_motif(k);
      const auto other = c.labels[i][k] ? spec.absent_motif(k) : spec.present_motif(k);
      EXPECT_EQ(std::count(sents.begin(), sents.end(), want), 1);
      EXPECT_EQ(std::count(sents.begin(), sents.end(), other), 0);
    }
    for (int id : c.reports.reports[i].word_ids) EXPECT_LT(id, c.reports.mask_id);
  }
}

TEST(Generator, PlantedSignalInsideRegion) {
  SyntheticSpec spec;
  spec.patients = 60;
  const auto c = generate_corpus(spec);
  for (std::size_t k = 0; k < spec.factors; ++k) {
    const auto ctr = spec.center(k);
    double in_present = 0, in_absent = 0;
    std::size_t n_present = 0, n_absent = 0;
    double outside = 0;
    std::size_t n_out = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const Volume& v = c.volumes[i];
      for (std::size_t z = 0; z < 16; ++z)
        for (std::size_t y = 0; y < 16; ++y)
          for (std::size_t x = 0; x < 16; ++x) {
            const double d = std::hypot(z - ctr[0], y - ctr[1], x - ctr[2]);
            if (d <= 2.0) {
              (c.labels[i][k] ? in_present : in_absent) += v.at(z, y, x);
              (c.labels[i][k] ? n_present : n_absent) += 1;
            } else if (c.labels[i][k] && d > 6.0) {
              outside += v.at(z, y, x);
              ++n_out;
            }
          }
    }
    ASSERT_GT(n_present, 0u);
    ASSERT_GT(n_absent, 0u);
    EXPECT_GT(in_present / n_present, outside / n_out + 1.0) << "factor " << k;
    EXPECT_GT(in_present / n_present, in_absent / n_absent + 1.0) << "factor " << k;
  }
}

TEST(Generator, InvalidSpecsRejected) {
  SyntheticSpec spec;
  spec.factors = 1;
  EXPECT_THROW(generate_corpus(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.vocab_size = 20;
  EXPECT_THROW(generate_corpus(spec), ConfigError);
}

TEST(CorpusFiles, RoundTripWithoutLoss) {
  SyntheticSpec spec;
  spec.patients = 4;
  const auto c = generate_corpus(spec);
  const auto dir = fresh_dir("mg3d_corpus_rt");
  write_corpus(c, dir.string());
  EXPECT_TRUE(fs::exists(dir / "volumes" / "p0000.mgv"));
  const auto back = read_corpus(dir.string());
  ASSERT_EQ(back.size(), 4u);
  EXPECT_EQ(back.reports.vocab_size, c.reports.vocab_size);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.volumes[i].voxels.values(), c.volumes[i].voxels.values());
    EXPECT_EQ(back.reports.reports[i].word_ids, c.reports.reports[i].word_ids);
    EXPECT_EQ(back.reports.reports[i].sentence_spans, c.reports.reports[i].sentence_spans);
    EXPECT_EQ(back.labels[i], c.labels[i]);
  }
  fs::remove(dir / "labels.jsonl");
  EXPECT_TRUE(read_corpus(dir.string()).labels.empty());
  fs::remove_all(dir);
}

TrainConfig short_config(const std::string& out_dir) {
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.out_dir = out_dir;
  cfg.model.vision.blocks = 1;
  return cfg;
}

TEST(Trainer, IdenticalRunsAreBitwiseIdentical) {
  SyntheticSpec spec;
  spec.patients = 6;
  const auto corpus = generate_corpus(spec);
  const auto d1 = fresh_dir("mg3d_det_a"), d2 = fresh_dir("mg3d_det_b");
  Trainer(short_config(d1.string()), corpus).run();
  Trainer(short_config(d2.string()), corpus).run();
  EXPECT_EQ(slurp(d1 / "metrics.jsonl"), slurp(d2 / "metrics.jsonl"));
  EXPECT_EQ(slurp(d1 / "checkpoint.ckpt"), slurp(d2 / "checkpoint.ckpt"));
  EXPECT_FALSE(slurp(d1 / "metrics.jsonl").empty());

  auto other = short_config(fresh_dir("mg3d_det_c").string());
  other.seed = 1;
  Trainer(other, corpus).run();
  EXPECT_NE(slurp(d1 / "metrics.jsonl"), slurp(fs::path(other.out_dir) / "metrics.jsonl"));
  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(other.out_dir);
}

TEST(Trainer, MetricsRecordsAreWellFormed) {
  SyntheticSpec spec;
  spec.patients = 6;
  const auto corpus = generate_corpus(spec);
  const auto dir = fresh_dir("mg3d_metrics");
  TrainConfig cfg = short_config(dir.string());
  const auto records = Trainer(cfg, corpus).run();
  std::ifstream is(dir / "metrics.jsonl");
  std::string line;
  std::size_t step = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<std::size_t>(), ++step);
    EXPECT_FALSE(j.contains("wall_time"));
    LossBundle b;
    b.mim = j.at("mim"), b.mlm = j.at("mlm"), b.sfr = j.at("sfr"), b.cml = j.at("cml"), b.ssm = j.at("ssm"),
    b.dfa = j.at("dfa"), b.intra = j.at("intra"), b.inter = j.at("inter"), b.total = j.at("total");
    EXPECT_TRUE(b.consistent(cfg.weights));
    EXPECT_NEAR(j.at("cml_per_sample").get<double>(), b.cml / 4.0, 1e-12);
    EXPECT_TRUE(j.contains("masked_mse"));
    EXPECT_TRUE(j.contains("grad_norm"));
  }
  EXPECT_EQ(step, cfg.steps);
  EXPECT_EQ(records.size(), cfg.steps);
  fs::remove_all(dir);
}

TEST(Trainer, InvalidConfigRejected) {
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.lr_fusion = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.mask_ratio_visual = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Retrieval, RanksAndRecall) {
  const std::vector<std::vector<double>> sim = {{0.9, 0.1, 0.0}, {0.8, 0.5, 0.2}, {0.1, 0.7, 0.3}};
  EXPECT_EQ(paired_ranks(sim), (std::vector<std::size_t>{1, 2, 2}));
  const auto r = recall_at_k(sim, {1, 2, 3});
  EXPECT_NEAR(r[0].recall, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(r[1].recall, 1.0);
  EXPECT_EQ(r[2].recall, 1.0);
  EXPECT_THROW(recall_at_k({}, {1}), EmptyInputError);
}

TEST(Retrieval, MonotoneAndExhaustive) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(10);
    std::vector<std::vector<double>> sim(n, std::vector<double>(n));
    for (auto& row : sim)
      for (double& v : row) v = rng.bernoulli(0.2) ? 0.5 : rng.normal();
    std::vector<std::size_t> ks;
    for (std::size_t k = 1; k <= n; ++k) ks.push_back(k);
    const auto r = recall_at_k(sim, ks);
    for (std::size_t k = 1; k < n; ++k) EXPECT_LE(r[k - 1].recall, r[k].recall);
    EXPECT_EQ(r.back().recall, 1.0);
  }
}

TEST(Retrieval, RandomModelNearChance) {
  // Average Recall@1 over random initializations approaches 1/N.
  SyntheticSpec spec;
  spec.patients = 8;
  const auto corpus = generate_corpus(spec);
  double mean = 0.0;
  const int seeds = 12;
  for (int s = 0; s < seeds; ++s) {
    ModelConfig mc;
    mc.seed = static_cast<std::uint64_t>(s);
    mc.vision.blocks = 1;
    const Mg3dModel model(mc);
    mean += eval_retrieval(model, make_samples(model, corpus), {1})[0].recall / seeds;
  }
  EXPECT_LT(mean, 0.4);
}

TEST(Probe, RecoversLinearSignalAndFailsOnShuffledLabels) {
  Rng rng(2);
  std::vector<std::vector<double>> x;
  std::vector<std::vector<int>> y;
  for (int i = 0; i < 200; ++i) {
    const int a = rng.bernoulli(0.5), b = rng.bernoulli(0.5);
    x.push_back({a * 2.0 + 0.3 * rng.normal(), b * 2.0 + 0.3 * rng.normal(), rng.normal()});
    y.push_back({a, b});
  }
  EXPECT_GT(linear_probe(x, y).mean(), 0.95);

  auto shuffled = y;
  Rng shuffler(3);
  for (auto& row : shuffled)
    for (int& v : row) v = shuffler.bernoulli(0.5);
  const double chance = linear_probe(x, shuffled).mean();
  EXPECT_GT(chance, 0.35);
  EXPECT_LT(chance, 0.65);
}

TEST(Probe, SingleClassSplitRejected) {
  std::vector<std::vector<double>> x(10, std::vector<double>{1.0});
  std::vector<std::vector<int>> y(10, std::vector<int>{1});
  EXPECT_THROW(linear_probe(x, y), EmptyInputError);
}

TEST(Probe, RawPatchMeansSeeThePlantedFactors) {
  SyntheticSpec spec;
  spec.patients = 200;
  const auto corpus = generate_corpus(spec);
  ModelConfig mc;
  mc.vision.blocks = 1;
  const Mg3dModel model(mc);
  const auto samples = make_samples(model, corpus);
  EXPECT_GT(linear_probe(patch_mean_features(samples), sample_labels(samples)).mean(), 0.85);
}

}  // namespace
}  // namespace mg3d
