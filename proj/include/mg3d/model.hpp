#pragma once

// The full model and one forward pass over a batch of volume-report pairs.

#include <cstdint>
#include <string>
#include <vector>

#include "mg3d/fusion.hpp"
#include "mg3d/nn.hpp"
#include "mg3d/objectives.hpp"
#include "mg3d/text.hpp"
#include "mg3d/vision.hpp"

namespace mg3d {

struct ModelConfig {
  VisionConfig vision;
  std::size_t vocab_size = 64;
  int mask_id = 63;
  std::size_t max_sentences = kDefaultMaxSentences;
  std::size_t text_layers = 2;
  std::size_t fusion_layers = 1;
  AttentionVariant variant = AttentionVariant::proposed;
  std::uint64_t seed = 0;       // trainable parameter init
  std::uint64_t text_seed = 7;  // frozen text encoder

  std::size_t width() const { return vision.width; }
  std::size_t heads() const { return vision.heads; }

  void validate() const {
    if (vision.width == 0 || vision.heads == 0 || vision.width % vision.heads != 0) {
      throw ConfigError("model width must be a positive multiple of the head count");
    }
    if (mask_id < 0 || static_cast<std::size_t>(mask_id) >= vocab_size) throw ConfigError("mask id outside vocabulary");
    (void)vision.token_count();
  }
};

// Per-patient inputs. The frozen sentence features do not depend on masking
// and are computed once.
struct Sample {
  std::string id;
  Volume volume;
  Tensor patches;                      // D_I x p^3
  TokenizedReport report;
  SentenceFeatures sentence_features;  // whole report encoded, sentence-pooled
  SentenceFeatures isolated_features;  // each sentence encoded alone
  std::vector<int> factors;
};

struct SampleMasks {
  std::vector<bool> patches;
  WordMask words;
};

class Mg3dModel {
 public:
  Mg3dModel() = default;
  explicit Mg3dModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.width();
    text = FrozenTextEncoder(TextEncoderConfig{cfg.vocab_size, d, cfg.heads(), cfg.text_layers, 256, cfg.text_seed});
    Rng rng(mix_seed(cfg.seed, 1));
    const double sd = cfg.vision.init_std;
    vision = VisionEncoder(cfg.vision, rng);
    decoder = VolumeDecoder(d, cfg.vision.patch, rng, sd);
    const CrossAttentionConfig xc{d, cfg.heads(), cfg.variant};
    volume_fusion = FusionStack(xc, cfg.fusion_layers, rng, sd);
    report_fusion = FusionStack(xc, cfg.fusion_layers, rng, sd);
    mlm_hidden = Linear(d, d, rng, sd);
    mlm_out = Linear(d, cfg.vocab_size, rng, sd);
    report_pool = SelfAttentionPool(d, rng, sd);
    sentence_attention = MultiHeadAttention(d, cfg.heads(), rng, sd);
    sentence_pool = SelfAttentionPool(d, rng, sd);
  }

  const ModelConfig& config() const { return cfg_; }

  // Every parameter, frozen ones included, in a fixed order.
  ParamList parameters() const {
    ParamList out;
    text.collect(out, "text");
    collect_vision(out);
    collect_fusion(out);
    return out;
  }

  // Trainable parameters of the vision encoder.
  ParamList vision_parameters() const {
    ParamList out;
    collect_vision(out);
    return out;
  }

  // Trainable parameters of fusion stacks, heads and pooling layers.
  ParamList fusion_parameters() const {
    ParamList out;
    collect_fusion(out);
    return out;
  }

  ParamList frozen_parameters() const {
    ParamList out;
    text.collect(out, "text");
    return out;
  }

  Tensor mlm_logits(const Tensor& features) const { return mlm_out.forward(gelu(mlm_hidden.forward(features))); }

  FrozenTextEncoder text;
  VisionEncoder vision;
  VolumeDecoder decoder;
  FusionStack volume_fusion;  // volume-dominant, sentence-guided (masked volume reconstruction)
  FusionStack report_fusion;  // report-dominant, volume-guided (masked word reconstruction)
  Linear mlm_hidden, mlm_out;
  SelfAttentionPool report_pool;
  MultiHeadAttention sentence_attention;
  SelfAttentionPool sentence_pool;

 private:
  void collect_vision(ParamList& out) const { vision.collect(out, "vision"); }
  void collect_fusion(ParamList& out) const {
    decoder.collect(out, "decoder");
    volume_fusion.collect(out, "volume_fusion");
    report_fusion.collect(out, "report_fusion");
    mlm_hidden.collect(out, "mlm.hidden");
    mlm_out.collect(out, "mlm.out");
    report_pool.collect(out, "report_pool");
    sentence_attention.collect(out, "sentence_attention");
    sentence_pool.collect(out, "sentence_pool");
  }

  ModelConfig cfg_;
};

inline Sample make_sample(const Mg3dModel& model, std::string id, Volume volume, TokenizedReport report,
                          std::vector<int> factors = {}) {
  const auto& cfg = model.config();
  report.validate(cfg.vocab_size, cfg.max_sentences);
  Sample s;
  s.id = std::move(id);
  s.patches = patchify(volume, cfg.vision.patch);
  s.volume = std::move(volume);
  s.sentence_features = pool_sentences(encode_words(report, model.text), report.sentence_spans, cfg.max_sentences);
  s.isolated_features = encode_sentences_isolated(report, model.text, cfg.max_sentences);
  s.report = std::move(report);
  s.factors = std::move(factors);
  return s;
}

inline SampleMasks sample_masks(const Sample& s, const ModelConfig& cfg, double visual_ratio, double word_ratio,
                                Rng& rng) {
  SampleMasks m;
  m.patches = sample_patch_mask(s.patches.rows(), visual_ratio, rng);
  m.words = mask_words(s.report, word_ratio, rng, cfg.mask_id);
  return m;
}

// Everything one patient contributes to the batch losses.
struct PatientOutputs {
  Tensor visual;              // F_I, unmasked view
  Tensor masked_visual;       // I_M
  Tensor informed_visual;     // H_I
  Tensor reconstruction;      // decoded patch tokens
  Tensor informed_words;      // H_T
  Tensor logits;              // MLM logits at masked positions
  std::vector<std::size_t> targets;
  SentenceFeatures reconstructed_sentences;  // S_REC
  SentenceFeatures sentence_specific;        // H_S
  Tensor volume_global, informed_volume_global;
  Tensor report_global, informed_report_global;
  Tensor sentence_specific_global;
};

inline PatientOutputs forward_patient(const Mg3dModel& model, const Sample& s, const SampleMasks& m) {
  PatientOutputs o;
  const auto& cfg = model.config();
  const SentenceFeatures& fs = s.sentence_features;

  o.visual = encode_visual(s.patches, model.vision);
  o.masked_visual = model.vision.forward_embedded(model.vision.embed_masked(s.patches, m.patches));
  o.informed_visual = model.volume_fusion.forward(o.masked_visual, fs.features, fs.valid);
  o.reconstruction = model.decoder.decode_tokens(o.informed_visual);

  const Tensor masked_words = model.text.encode(m.words.masked_ids);
  o.informed_words = model.report_fusion.forward(masked_words, o.visual);
  o.logits = model.mlm_logits(take_rows(o.informed_words, m.words.positions));
  for (int id : m.words.originals) o.targets.push_back(static_cast<std::size_t>(id));
  o.reconstructed_sentences = pool_sentences(o.informed_words, s.report.sentence_spans, cfg.max_sentences);

  o.sentence_specific = sentence_specific_global(s.isolated_features, o.visual, model.sentence_attention);

  o.volume_global = pool_visual_global(o.visual);
  o.informed_volume_global = pool_visual_global(o.informed_visual);
  o.report_global = model.report_pool.forward(fs);
  o.informed_report_global = model.report_pool.forward(o.reconstructed_sentences);
  o.sentence_specific_global = model.sentence_pool.forward(o.sentence_specific);
  return o;
}

struct BatchForward {
  LossTerms terms;
  LossBundle bundle;
  double masked_mse = 0.0;  // reconstruction error over masked patches only
  std::vector<PatientOutputs> patients;
};

inline BatchForward forward_batch(const Mg3dModel& model, const std::vector<const Sample*>& batch,
                                  const std::vector<SampleMasks>& masks, const LossWeights& weights) {
  if (batch.empty()) throw EmptyInputError("forward_batch: empty batch");
  if (batch.size() != masks.size()) throw DimensionError("forward_batch: one mask set per sample required");
  BatchForward out;
  std::vector<Tensor> targets, recons, logits;
  std::vector<std::vector<std::size_t>> word_targets;
  std::vector<SentenceFeatures> fs, srec, iso, hs;
  std::vector<Tensor> vg, ivg, rg, irg, ssg;
  double masked_sq = 0.0;
  std::size_t masked_n = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    PatientOutputs o = forward_patient(model, *batch[b], masks[b]);
    targets.push_back(batch[b]->patches);
    recons.push_back(o.reconstruction);
    logits.push_back(o.logits);
    word_targets.push_back(o.targets);
    fs.push_back(batch[b]->sentence_features);
    srec.push_back(o.reconstructed_sentences);
    iso.push_back(batch[b]->isolated_features);
    hs.push_back(o.sentence_specific);
    vg.push_back(o.volume_global);
    ivg.push_back(o.informed_volume_global);
    rg.push_back(o.report_global);
    irg.push_back(o.informed_report_global);
    ssg.push_back(o.sentence_specific_global);

    const std::size_t len = batch[b]->patches.cols();
    for (std::size_t t = 0; t < masks[b].patches.size(); ++t) {
      if (!masks[b].patches[t]) continue;
      for (std::size_t k = 0; k < len; ++k) {
        const double d = o.reconstruction.data()[t * len + k] - batch[b]->patches.data()[t * len + k];
        masked_sq += d * d;
      }
      masked_n += len;
    }
    out.patients.push_back(std::move(o));
  }
  out.masked_mse = masked_n ? masked_sq / static_cast<double>(masked_n) : 0.0;

  out.terms.mim = mim_loss(targets, recons);
  out.terms.mlm = mlm_loss(logits, word_targets);
  out.terms.sfr = sfr_loss(fs, srec);
  out.terms.cml = cml_loss(concat_rows(vg), concat_rows(ivg), concat_rows(rg), concat_rows(irg), weights.tau);
  out.terms.ssm = ssm_loss(iso, hs);
  out.terms.dfa = dfa_loss(concat_rows(ssg), concat_rows(vg), weights.tau);
  out.bundle = compose_losses(out.terms, weights);
  return out;
}

// Global features used by the retrieval and probing evaluations.
inline Tensor volume_global_feature(const Mg3dModel& model, const Sample& s) {
  return pool_visual_global(encode_visual(s.patches, model.vision));
}

inline Tensor report_global_feature(const Mg3dModel& model, const Sample& s) {
  return model.report_pool.forward(s.sentence_features);
}

}  // namespace mg3d
