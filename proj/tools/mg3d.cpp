// Command-line driver: synthetic data generation, training, gradient checks,
// retrieval and probe evaluation, attention-map dumps.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mg3d/mg3d.hpp"

namespace {

using namespace mg3d;
namespace fs = std::filesystem;

struct Options {
  TrainConfig train;
  std::string variant = "proposed";
  std::size_t patients = 8;
  std::string data_dir;
  std::string checkpoint;
  std::size_t patient = 0;
};

void add_common(CLI::App& app, Options& o) {
  TrainConfig& t = o.train;
  app.add_option("--seed", t.seed, "Random seed");
  app.add_option("--steps", t.steps, "Training steps");
  app.add_option("--batch-size", t.batch_size, "Patients per step");
  app.add_option("--mask-ratio-visual", t.mask_ratio_visual, "Fraction of patches masked");
  app.add_option("--mask-ratio-word", t.mask_ratio_word, "Fraction of words masked");
  app.add_option("--tau", t.weights.tau, "Contrastive temperature");
  app.add_option("--lambda-alpha", t.weights.lambda_alpha, "Weight of the inter-modal term");
  app.add_option("--lambda-beta", t.weights.lambda_beta, "Weight of the sentence reconstruction term");
  app.add_option("--lambda-gamma", t.weights.lambda_gamma, "Weight of the global alignment term");
  app.add_option("--lr-vision", t.lr_vision, "Vision encoder learning rate");
  app.add_option("--lr-fusion", t.lr_fusion, "Fusion and head learning rate");
  app.add_option("--attn-variant", o.variant, "proposed or classical")->check(CLI::IsMember({"proposed", "classical"}));
  app.add_option("--out-dir", t.out_dir, "Output directory");
  app.add_option("--data", o.data_dir, "Corpus directory (generated in memory when omitted)");
  app.add_option("--patients", o.patients, "Patients to generate");
  app.add_option("--checkpoint", o.checkpoint, "Checkpoint to load");
  app.set_config("--config", "", "Flat key=value configuration file");
}

SyntheticCorpus load_corpus(const Options& o) {
  if (!o.data_dir.empty()) return read_corpus(o.data_dir, o.train.model.max_sentences);
  SyntheticSpec spec;
  spec.patients = o.patients;
  spec.seed = o.train.seed;
  return generate_corpus(spec);
}

Mg3dModel load_model(const Options& o, const SyntheticCorpus& corpus) {
  ModelConfig mc = o.train.model;
  mc.vocab_size = corpus.reports.vocab_size;
  mc.mask_id = corpus.reports.mask_id;
  Mg3dModel model(mc);
  if (!o.checkpoint.empty()) load_checkpoint(model, o.checkpoint);
  return model;
}

int gen_data(const Options& o) {
  if (o.train.out_dir.empty()) throw ConfigError("gen-data needs --out-dir");
  SyntheticSpec spec;
  spec.patients = o.patients;
  spec.seed = o.train.seed;
  write_corpus(generate_corpus(spec), o.train.out_dir);
  std::cout << "wrote " << spec.patients << " patients to " << o.train.out_dir << "\n";
  return 0;
}

int train(const Options& o) {
  const SyntheticCorpus corpus = load_corpus(o);
  Trainer trainer(o.train, corpus);
  if (!o.checkpoint.empty()) load_checkpoint(trainer.model(), o.checkpoint);
  const std::size_t every = std::max<std::size_t>(1, o.train.steps / 10);
  for (const MetricsRecord& r : trainer.run())
    if (r.step % every == 0 || r.step == o.train.steps) std::cout << r.to_json().dump() << "\n";
  return 0;
}

int grad_check(const Options& o, double h) {
  ModelConfig mc = o.train.model;
  mc.vision.dims = {4, 4, 4};
  mc.vision.patch = 2;
  mc.vision.width = 8;
  mc.vision.heads = 2;
  mc.vision.blocks = 1;
  mc.vision.init_std = 0.5;
  mc.vocab_size = 16;
  mc.mask_id = 15;
  mc.max_sentences = 2;
  mc.text_layers = 1;
  mc.seed = o.train.seed;
  const Mg3dModel model(mc);
  Rng rng(mix_seed(o.train.seed, 9));
  std::vector<Sample> samples;
  const std::vector<std::vector<std::vector<int>>> reports = {{{1, 2, 3}, {4, 5}}, {{6, 7}, {8, 9, 10}}};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    std::vector<double> vox(64);
    for (double& v : vox) v = rng.normal();
    const std::string id = "g" + std::to_string(i);
    samples.push_back(make_sample(model, id, Volume::from({4, 4, 4}, vox), TokenizedReport::from_sentences(id, reports[i], 2)));
  }
  std::vector<SampleMasks> masks;
  for (const auto& s : samples) masks.push_back(sample_masks(s, mc, 0.5, 0.3, rng));
  std::vector<Tensor> params;
  for (const auto& p : model.parameters())
    if (p.tensor.requires_grad()) params.push_back(p.tensor);
  const FdReport r = fd_check(
      [&] { return forward_batch(model, {&samples[0], &samples[1]}, masks, o.train.weights).bundle.total_tensor; }, params, h);
  std::cout << nlohmann::json{{"max_rel_error", r.max_rel_error}, {"checked", r.checked},
                              {"worst_param", r.worst_param}, {"worst_element", r.worst_element},
                              {"analytic", r.worst_analytic}, {"numeric", r.worst_numeric}}
                   .dump()
            << "\n";
  return r.max_rel_error < 1e-4 ? 0 : 1;
}

int eval_retrieval_cmd(const Options& o) {
  const SyntheticCorpus corpus = load_corpus(o);
  const Mg3dModel model = load_model(o, corpus);
  nlohmann::json out;
  for (const auto& r : eval_retrieval(model, make_samples(model, corpus), {1, 5, 10}))
    out["recall@" + std::to_string(r.k)] = r.recall;
  std::cout << out.dump() << "\n";
  return 0;
}

int probe(const Options& o) {
  const SyntheticCorpus corpus = load_corpus(o);
  if (corpus.labels.empty()) throw EmptyInputError("probe needs labels");
  const Mg3dModel model = load_model(o, corpus);
  const ProbeResult r = eval_linear_probe(model, make_samples(model, corpus));
  std::cout << nlohmann::json{{"accuracy", r.accuracy}, {"mean", r.mean()}}.dump() << "\n";
  return 0;
}

// One CSV row per (head, patch token) of the sentence-guided fusion block's
// cross-attention: averaged maps under the proposed variant, per-query maps
// otherwise.
int inspect_attn(const Options& o) {
  const SyntheticCorpus corpus = load_corpus(o);
  const Mg3dModel model = load_model(o, corpus);
  const auto samples = make_samples(model, corpus);
  if (o.patient >= samples.size()) throw IndexError("patient index out of range");
  const Sample& s = samples[o.patient];
  std::vector<Tensor> maps;
  model.volume_fusion.forward(encode_visual(s.patches, model.vision), s.sentence_features.features,
                              s.sentence_features.valid, &maps);
  std::ofstream file;
  if (!o.train.out_dir.empty()) {
    fs::create_directories(o.train.out_dir);
    file.open(fs::path(o.train.out_dir) / "attention.csv");
  }
  std::ostream& os = file.is_open() ? static_cast<std::ostream&>(file) : std::cout;
  os << "head,row,col,weight\n";
  for (std::size_t h = 0; h < maps.size(); ++h)
    for (std::size_t r = 0; r < maps[h].rows(); ++r)
      for (std::size_t c = 0; c < maps[h].cols(); ++c) os << h << ',' << r << ',' << c << ',' << maps[h].at(r, c) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mg3d"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  double h = 1e-5;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus");
  auto* tr = app.add_subcommand("train", "Pre-train on a corpus");
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the total loss");
  auto* er = app.add_subcommand("eval-retrieval", "Report-to-volume Recall@K");
  auto* pr = app.add_subcommand("probe", "Linear probe on pooled volume features");
  auto* ia = app.add_subcommand("inspect-attn", "Dump cross-attention maps as CSV");
  add_common(app, o);
  gc->add_option("--step", h, "Finite-difference step");
  ia->add_option("--patient", o.patient, "Patient index");
  CLI11_PARSE(app, argc, argv);

  try {
    o.train.model.variant = parse_attention_variant(o.variant);
    o.train.validate();
    if (gen->parsed()) return gen_data(o);
    if (tr->parsed()) return train(o);
    if (gc->parsed()) return grad_check(o, h);
    if (er->parsed()) return eval_retrieval_cmd(o);
    if (pr->parsed()) return probe(o);
    if (ia->parsed()) return inspect_attn(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
