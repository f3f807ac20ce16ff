#pragma once

// Training loop: batch assembly, masking, one optimizer step per call, and a
// JSON Lines metrics stream. Wall time is written to a separate timing stream
// so the metrics file stays bitwise reproducible.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mg3d/checkpoint.hpp"
#include "mg3d/corpus.hpp"
#include "mg3d/model.hpp"
#include "mg3d/optim.hpp"

namespace mg3d {

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t batch_size = 4;
  std::size_t steps = 500;
  double lr_vision = 2e-4;  // 2e-5 is the full-scale value
  double lr_fusion = 2e-3;  // 1e-4 is the full-scale value
  double weight_decay = 0.01;
  double mask_ratio_visual = 0.6;
  double mask_ratio_word = 0.15;
  LossWeights weights;
  ModelConfig model;
  std::string out_dir;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (!(lr_vision > 0.0) || !(lr_fusion > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
    if (!(mask_ratio_visual > 0.0 && mask_ratio_visual < 1.0)) throw ConfigError("visual mask ratio must lie in (0, 1)");
    if (!(mask_ratio_word > 0.0 && mask_ratio_word < 1.0)) throw ConfigError("word mask ratio must lie in (0, 1)");
    weights.validate();
    model.validate();
  }
};

struct MetricsRecord {
  std::size_t step = 0;
  LossBundle losses;
  double cml_per_sample = 0.0;
  double dfa_per_sample = 0.0;
  double masked_mse = 0.0;
  double grad_norm = 0.0;
  double wall_time = 0.0;  // seconds spent in this step

  nlohmann::json to_json() const {
    const LossBundle& l = losses;
    return nlohmann::json{{"step", step},
                          {"mim", l.mim},
                          {"mlm", l.mlm},
                          {"sfr", l.sfr},
                          {"cml", l.cml},
                          {"ssm", l.ssm},
                          {"dfa", l.dfa},
                          {"intra", l.intra},
                          {"inter", l.inter},
                          {"total", l.total},
                          {"cml_per_sample", cml_per_sample},
                          {"dfa_per_sample", dfa_per_sample},
                          {"masked_mse", masked_mse},
                          {"grad_norm", grad_norm}};
  }
};

// Builds the optimizer with the vision group first, then the fusion group.
inline AdamW make_optimizer(const Mg3dModel& model, const TrainConfig& cfg) {
  AdamWOptions opt;
  opt.weight_decay = cfg.weight_decay;
  return AdamW({AdamW::group(model.vision_parameters(), cfg.lr_vision), AdamW::group(model.fusion_parameters(), cfg.lr_fusion)},
               opt);
}

// One full step: forward both directions, all six losses, backward, update.
inline MetricsRecord train_step(const std::vector<const Sample*>& batch, const std::vector<SampleMasks>& masks,
                                Mg3dModel& model, AdamW& optimizer, const LossWeights& weights, std::size_t step) {
  const auto t0 = std::chrono::steady_clock::now();
  optimizer.zero_grad();
  BatchForward fw = forward_batch(model, batch, masks, weights);
  MetricsRecord rec;
  rec.step = step;
  rec.losses = fw.bundle;
  rec.masked_mse = fw.masked_mse;
  rec.cml_per_sample = fw.bundle.cml / static_cast<double>(batch.size());
  rec.dfa_per_sample = fw.bundle.dfa / static_cast<double>(batch.size());
  if (const std::string bad = fw.bundle.first_non_finite(); !bad.empty()) {
    throw NumericError("step " + std::to_string(step) + ": non-finite loss component '" + bad + "'");
  }
  if (fw.bundle.total_tensor.requires_grad()) backward(fw.bundle.total_tensor);
  rec.grad_norm = optimizer.grad_norm();
  if (!std::isfinite(rec.grad_norm)) throw NumericError("step " + std::to_string(step) + ": non-finite gradient norm");
  optimizer.step();
  rec.losses.total_tensor = Tensor::scalar(rec.losses.total);  // drop the graph
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline std::vector<Sample> make_samples(const Mg3dModel& model, const SyntheticCorpus& corpus) {
  if (corpus.size() == 0) throw EmptyInputError("corpus has no patients");
  if (corpus.reports.vocab_size != model.config().vocab_size || corpus.reports.mask_id != model.config().mask_id) {
    throw ConfigError("corpus vocabulary does not match the model");
  }
  std::vector<Sample> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& r = corpus.reports.reports[i];
    out.push_back(make_sample(model, r.patient_id, corpus.volumes[i], r, i < corpus.labels.size() ? corpus.labels[i] : std::vector<int>{}));
  }
  return out;
}

// Owns the model, optimizer and the two random streams (batch order, masks).
// Batches walk a per-epoch shuffle of the corpus; the last partial batch of an
// epoch is dropped unless the corpus is smaller than one batch.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const SyntheticCorpus& corpus)
      : cfg_(std::move(cfg)),
        model_((cfg_.validate(), with_vocab(cfg_.model, corpus))),
        optimizer_(make_optimizer(model_, cfg_)),
        samples_(make_samples(model_, corpus)),
        order_rng_(mix_seed(cfg_.seed, 2)),
        mask_rng_(mix_seed(cfg_.seed, 3)) {}

  const TrainConfig& config() const { return cfg_; }
  Mg3dModel& model() { return model_; }
  const Mg3dModel& model() const { return model_; }
  const std::vector<Sample>& samples() const { return samples_; }
  std::size_t steps_done() const { return step_; }

  MetricsRecord step() {
    const auto batch = next_batch();
    std::vector<SampleMasks> masks;
    for (const Sample* s : batch)
      masks.push_back(sample_masks(*s, model_.config(), cfg_.mask_ratio_visual, cfg_.mask_ratio_word, mask_rng_));
    return train_step(batch, masks, model_, optimizer_, cfg_.weights, ++step_);
  }

  // Runs `cfg.steps` steps. With an output directory, writes metrics.jsonl,
  // timing.jsonl and a final checkpoint.ckpt there.
  std::vector<MetricsRecord> run() {
    std::ofstream metrics, timing;
    if (!cfg_.out_dir.empty()) {
      std::filesystem::create_directories(cfg_.out_dir);
      metrics.open(std::filesystem::path(cfg_.out_dir) / "metrics.jsonl", std::ios::binary | std::ios::app);
      timing.open(std::filesystem::path(cfg_.out_dir) / "timing.jsonl", std::ios::binary | std::ios::app);
      if (!metrics || !timing) throw FormatError("cannot open metrics files in " + cfg_.out_dir);
    }
    std::vector<MetricsRecord> out;
    for (std::size_t i = 0; i < cfg_.steps; ++i) {
      MetricsRecord r = step();
      if (metrics.is_open()) {
        metrics << r.to_json().dump() << '\n';
        timing << nlohmann::json{{"step", r.step}, {"wall_time", r.wall_time}}.dump() << '\n';
      }
      out.push_back(std::move(r));
    }
    if (!cfg_.out_dir.empty()) save_checkpoint(model_, (std::filesystem::path(cfg_.out_dir) / "checkpoint.ckpt").string());
    return out;
  }

 private:
  static ModelConfig with_vocab(ModelConfig m, const SyntheticCorpus& corpus) {
    m.vocab_size = corpus.reports.vocab_size;
    m.mask_id = corpus.reports.mask_id;
    return m;
  }

  std::vector<const Sample*> next_batch() {
    const std::size_t n = samples_.size();
    const std::size_t b = std::min(cfg_.batch_size, n);
    if (cursor_ + b > order_.size()) {
      order_.resize(n);
      for (std::size_t i = 0; i < n; ++i) order_[i] = i;
      order_rng_.shuffle(order_);
      cursor_ = 0;
    }
    std::vector<const Sample*> batch;
    for (std::size_t i = 0; i < b; ++i) batch.push_back(&samples_[order_[cursor_ + i]]);
    cursor_ += b;
    return batch;
  }

  TrainConfig cfg_;
  Mg3dModel model_;
  AdamW optimizer_;
  std::vector<Sample> samples_;
  Rng order_rng_, mask_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
};

}  // namespace mg3d
