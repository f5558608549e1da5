#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ipl/analysis.hpp"
#include "ipl/data.hpp"
#include "ipl/engine.hpp"
#include "ipl/experiments.hpp"
#include "ipl/metrics.hpp"
#include "ipl/model.hpp"
#include "ipl/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct GlobalOpts {
  std::string manifest_path;
  std::string out_dir;
  std::int64_t seed = -1;  // -1: use manifest seeds
  int threads = 1;
  int beam = 0;  // 0: use manifest beam
  std::string mode;
};

ipl::experiments::ExperimentManifest load_manifest(const GlobalOpts& g) {
  if (g.manifest_path.empty()) throw ipl::ManifestError("--manifest is required for this command");
  auto m = ipl::experiments::ExperimentManifest::from_file(g.manifest_path);
  if (g.seed >= 0) m.seeds = {static_cast<std::uint64_t>(g.seed)};
  if (g.beam > 0) m.eval.beam = g.beam;
  if (!g.mode.empty()) m.modes = {ipl::data::mode_from_name(g.mode)};
  m.validate();
  return m;
}

std::string out_root(const ipl::experiments::ExperimentManifest& m, const GlobalOpts& g) {
  return ipl::experiments::resolve_output_dir(m, g.out_dir);
}

ipl::data::FormatMode effective_mode(const ipl::experiments::ExperimentManifest& m,
                                     const GlobalOpts& g) {
  return g.mode.empty() ? m.modes.front() : ipl::data::mode_from_name(g.mode);
}

void note_threads(const GlobalOpts& g) {
  if (g.threads != 1)
    std::cerr << "note: --threads " << g.threads
              << " requested; this build executes single-threaded\n";
}

int cmd_gen_data(const GlobalOpts& g) {
  const auto m = load_manifest(g);
  const auto vocab = ipl::data::Vocab::synthetic(m.data.alphabet_size);
  const fs::path out(out_root(m, g));
  fs::create_directories(out);

  const auto train = ipl::data::generate(m.tasks, m.data.n_train, m.data.train_lo, m.data.train_hi,
                                         m.data.seed, vocab, m.model.max_seq_len);
  const auto test = ipl::data::generate(m.tasks, m.data.n_test, m.data.train_lo, m.data.train_hi,
                                        ipl::derive_seed(m.data.seed, 1), vocab,
                                        m.model.max_seq_len);
  ipl::data::write_corpus(train, vocab, (out / "corpus_train.jsonl").string());
  ipl::data::write_corpus(test, vocab, (out / "corpus_test.jsonl").string());

  const auto stats = ipl::experiments::corpus_stats(train);
  std::cout << "wrote " << (out / "corpus_train.jsonl").string() << " and corpus_test.jsonl\n";
  std::cout << "examples: " << stats.count << "\n";
  std::cout << "input tokens: " << stats.input_tokens << "\n";
  std::cout << "length histogram:\n";
  for (const auto& [len, count] : stats.length_histogram)
    std::cout << "  len " << len << ": " << count << "\n";
  const int n_buckets = m.kind == ipl::experiments::ExperimentKind::E1 ? m.e1_n_buckets : 3;
  for (std::size_t b = 0; const auto& bucket : ipl::data::bucket_by_length(train, n_buckets)) {
    std::cout << "bucket " << b++ << ": len [" << bucket.min_len << "," << bucket.max_len
              << "] examples " << bucket.examples.size() << " input_tokens "
              << bucket.input_tokens << "\n";
  }
  return 0;
}

int cmd_format(const GlobalOpts& g, const std::string& corpus_path) {
  const auto m = load_manifest(g);
  const auto vocab = ipl::data::Vocab::synthetic(m.data.alphabet_size);
  const fs::path out(out_root(m, g));
  fs::create_directories(out);
  const std::string in_path =
      corpus_path.empty() ? (out / "corpus_train.jsonl").string() : corpus_path;
  const auto examples = ipl::data::read_corpus(in_path, vocab);
  const auto mode = effective_mode(m, g);
  std::vector<ipl::data::FormattedSequence> seqs;
  seqs.reserve(examples.size());
  for (const auto& ex : examples)
    seqs.push_back(ipl::data::format_example(ex, mode, vocab, m.model.max_seq_len));
  const fs::path path = out / ("formatted_" + std::string(ipl::data::mode_name(mode)) + ".jsonl");
  ipl::data::write_formatted(seqs, path.string());
  std::cout << "wrote " << path.string() << " (" << seqs.size() << " sequences)\n";
  return 0;
}

int cmd_train(const GlobalOpts& g) {
  const auto m = load_manifest(g);
  const auto vocab = ipl::data::Vocab::synthetic(m.data.alphabet_size);
  const fs::path out(out_root(m, g));
  fs::create_directories(out);
  const auto mode = effective_mode(m, g);
  const std::uint64_t seed = m.seeds.front();

  auto model_config = m.model;
  model_config.seed = seed;
  auto train_config = m.train;
  train_config.seed = ipl::derive_seed(seed, 0x7261696eULL);
  train_config.checkpoint_dir = out.string();

  const auto corpus = ipl::data::generate(m.tasks, m.data.n_train, m.data.train_lo,
                                          m.data.train_hi, m.data.seed, vocab,
                                          model_config.max_seq_len);
  std::vector<ipl::data::FormattedSequence> seqs;
  seqs.reserve(corpus.size());
  for (const auto& ex : corpus)
    seqs.push_back(ipl::data::format_example(ex, mode, vocab, model_config.max_seq_len));

  const auto init = ipl::model::init_params(model_config);
  const auto result = ipl::engine::train(model_config, init, seqs, train_config);

  const std::string tag = std::string(ipl::data::mode_name(mode)) + "_seed" + std::to_string(seed);
  const fs::path ckpt = out / ("ckpt_" + tag + ".ipl");
  ipl::model::save_checkpoint(result.params, ckpt.string());
  ipl::engine::write_loss_curve(result.loss_curve, (out / ("loss_" + tag + ".csv")).string());
  std::cout << "trained " << result.steps_completed << " steps (mode "
            << ipl::data::mode_name(mode) << ", seed " << seed << ")\n";
  std::cout << "final loss: " << (result.loss_curve.empty() ? 0.0 : result.loss_curve.back())
            << (result.diverged ? " [DIVERGED]" : "") << "\n";
  std::cout << "wrote " << ckpt.string() << "\n";
  return result.diverged ? 1 : 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& checkpoint_path,
             const std::string& corpus_path) {
  const auto m = load_manifest(g);
  const auto vocab = ipl::data::Vocab::synthetic(m.data.alphabet_size);
  const fs::path out(out_root(m, g));
  fs::create_directories(out);
  const auto mode = effective_mode(m, g);

  const auto params = ipl::model::load_checkpoint(checkpoint_path);
  if (params.config.vocab_size != vocab.size())
    throw ipl::IncompatibleCheckpoint("checkpoint vocab does not match manifest alphabet");
  const auto examples = corpus_path.empty()
                            ? ipl::data::generate(m.tasks, m.data.n_test, m.data.train_lo,
                                                  m.data.train_hi, ipl::derive_seed(m.data.seed, 1),
                                                  vocab, params.config.max_seq_len)
                            : ipl::data::read_corpus(corpus_path, vocab);
  if (examples.empty()) throw ipl::EmptyCorpus("eval: empty test corpus");

  std::vector<std::vector<int>> outputs;
  outputs.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto seq = ipl::data::format_example(ex, mode, vocab, params.config.max_seq_len);
    outputs.push_back(ipl::analysis::decode_response(params, seq, m.eval.beam, vocab));
  }
  auto report = ipl::metrics::evaluate_outputs(examples, outputs, m.tasks, vocab);
  report.format = ipl::data::mode_name(mode);
  report.task = "all";
  report.cell = "eval";
  const std::string tag(ipl::data::mode_name(mode));
  ipl::metrics::write_reports_csv({report}, (out / ("eval_" + tag + ".csv")).string());
  ipl::metrics::write_reports_json({report}, (out / ("eval_" + tag + ".json")).string());
  std::printf("n=%d bleu=%.2f rouge1=%.4f rougeL=%.4f exact=%.4f faithful=%d wrong_task=%d hallucination=%d\n",
              report.n_examples, report.bleu, report.rouge1, report.rougeL, report.exact_match,
              report.faithful, report.wrong_task, report.hallucination);
  std::cout << "wrote " << (out / ("eval_" + tag + ".csv")).string() << " and .json\n";
  return 0;
}

int cmd_run(const GlobalOpts& g) {
  const auto m = load_manifest(g);
  const std::string out = out_root(m, g);
  ipl::experiments::run_manifest(m, out);
  std::cout << "results in " << out << "\n";
  return 0;
}

int cmd_analyze(const GlobalOpts& g, const std::string& checkpoint_path) {
  const auto m = load_manifest(g);
  const auto vocab = ipl::data::Vocab::synthetic(m.data.alphabet_size);
  const fs::path out(out_root(m, g));
  fs::create_directories(out);
  const auto mode = effective_mode(m, g);
  const auto params = ipl::model::load_checkpoint(checkpoint_path);

  const auto examples = ipl::data::generate(m.tasks, m.e3_n_examples, m.data.train_lo,
                                            m.data.train_hi, ipl::derive_seed(m.data.seed, 1),
                                            vocab, params.config.max_seq_len);
  std::vector<std::pair<std::string, ipl::analysis::RegionMassTable>> tables;
  const std::string tag(ipl::data::mode_name(mode));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto seq = ipl::data::format_example(examples[i], mode, vocab, params.config.max_seq_len);
    ipl::model::AttentionTrace trace;
    ipl::model::forward(params, seq.ids, &trace);
    const auto avg = ipl::analysis::aggregate_attention(trace);
    ipl::analysis::export_heatmap(avg, seq.spans,
                                  (out / ("attention_" + tag + "_" + std::to_string(i))).string());
    tables.emplace_back("ex" + std::to_string(i), ipl::analysis::region_mass(avg, seq.spans));
  }
  ipl::analysis::write_region_mass(tables, (out / ("region_mass_" + tag + ".csv")).string());
  for (const auto& [name, table] : tables)
    std::printf("%s: template=%.4f instruction=%.4f input=%.4f response=%.4f\n", name.c_str(),
                table.mean_template, table.mean_instruction, table.mean_input,
                table.mean_response_prefix);
  std::cout << "wrote region_mass_" << tag << ".csv and " << examples.size()
            << " heatmap pair(s) in " << out.string() << "\n";
  return 0;
}

int cmd_report(const GlobalOpts& g, std::string summary_path) {
  if (summary_path.empty()) {
    if (!g.manifest_path.empty()) {
      const auto m = load_manifest(g);
      summary_path = (fs::path(out_root(m, g)) / "summary.json").string();
    } else if (!g.out_dir.empty()) {
      summary_path = (fs::path(g.out_dir) / "summary.json").string();
    } else {
      throw ipl::ManifestError("report: pass --summary, --manifest or --out");
    }
  }
  std::ifstream f(summary_path, std::ios::binary);
  if (!f) throw ipl::IoFailure("report: cannot open " + summary_path);
  json summary;
  try {
    summary = json::parse(f);
  } catch (const json::exception& e) {
    throw ipl::IoFailure(std::string("report: bad summary.json: ") + e.what());
  }

  std::cout << "experiment: " << summary.value("name", std::string("?")) << " ("
            << summary.value("kind", std::string("?")) << ")\n";
  std::cout << "seeds:";
  for (const auto& s : summary.at("seeds")) std::cout << " " << s;
  std::cout << "\n\n";
  std::printf("%-34s %-6s %13s   per-seed\n", "metric", "mode", "mean");
  for (const auto& [metric, modes] : summary.at("metrics").items()) {
    for (const auto& [mode, cell] : modes.items()) {
      std::printf("%-34s %-6s %13.6g  ", metric.c_str(), mode.c_str(),
                  cell.at("mean").get<double>());
      for (const auto& v : cell.at("per_seed")) std::printf(" %.6g", v.get<double>());
      std::printf("\n");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instruction position lab: Pre-Ins vs Post-Ins format experiments"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--manifest", g.manifest_path, "experiment manifest (JSON)");
  app.add_option("--out", g.out_dir, "output directory (overrides manifest/IPL_RESULTS_DIR)");
  app.add_option("--seed", g.seed, "override manifest seeds with a single seed");
  app.add_option("--threads", g.threads, "worker threads (this build runs single-threaded)");
  app.add_option("--beam", g.beam, "override beam width");
  app.add_option("--mode", g.mode, "restrict to one format mode: pre|post")
      ->check(CLI::IsMember({"pre", "post"}));
  app.fallthrough();

  auto* sc_gen = app.add_subcommand("gen-data", "generate corpus JSONL files and print stats");
  auto* sc_format = app.add_subcommand("format", "format a corpus under one mode");
  std::string corpus_path;
  sc_format->add_option("--corpus", corpus_path, "corpus JSONL (default: generated train corpus)");
  auto* sc_train = app.add_subcommand("train", "train one (mode, seed) model");
  auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on a test corpus");
  std::string checkpoint_path, eval_corpus;
  sc_eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  sc_eval->add_option("--corpus", eval_corpus, "test corpus JSONL (default: manifest test set)");
  auto* sc_run = app.add_subcommand("run", "run the manifest experiment end to end");
  auto* sc_analyze = app.add_subcommand("analyze", "attention heatmaps and region mass");
  std::string analyze_ckpt;
  sc_analyze->add_option("--checkpoint", analyze_ckpt, "model checkpoint")->required();
  auto* sc_report = app.add_subcommand("report", "pretty-print a summary.json");
  std::string summary_path;
  sc_report->add_option("--summary", summary_path, "summary.json path");

  CLI11_PARSE(app, argc, argv);
  note_threads(g);

  try {
    if (sc_gen->parsed()) return cmd_gen_data(g);
    if (sc_format->parsed()) return cmd_format(g, corpus_path);
    if (sc_train->parsed()) return cmd_train(g);
    if (sc_eval->parsed()) return cmd_eval(g, checkpoint_path, eval_corpus);
    if (sc_run->parsed()) return cmd_run(g);
    if (sc_analyze->parsed()) return cmd_analyze(g, analyze_ckpt);
    if (sc_report->parsed()) return cmd_report(g, summary_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
