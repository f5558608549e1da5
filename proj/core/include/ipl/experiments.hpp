#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipl/analysis.hpp"
#include "ipl/data.hpp"
#include "ipl/engine.hpp"
#include "ipl/model.hpp"

namespace ipl::experiments {

enum class ExperimentKind { E1, E2, E3, E4 };

const char* kind_name(ExperimentKind kind);
ExperimentKind kind_from_name(const std::string& name);

struct DataConfig {
  int alphabet_size = 20;
  int n_train = 4096;
  int n_test = 256;
  int train_lo = 8;
  int train_hi = 64;
  int long_lo = 0;  // long-input test range for E1; 0 disables
  int long_hi = 0;
  std::uint64_t seed = 9001;
};

struct EvalConfig {
  int beam = 4;
  double length_alpha = 0.0;
  double temperature = 0.1;
};

// Parsed manifest. Parsing is fail-closed: unknown keys anywhere are
// rejected. model.vocab_size, model.seed and train.seed are derived per run
// and may not appear in the file.
struct ExperimentManifest {
  int version = 1;
  std::string name;
  ExperimentKind kind = ExperimentKind::E1;
  std::vector<data::FormatMode> modes{data::FormatMode::PreIns, data::FormatMode::PostIns};
  std::vector<std::uint64_t> seeds{0};
  std::vector<data::TaskSpec> tasks;
  DataConfig data;
  model::ModelConfig model;
  engine::TrainConfig train;
  EvalConfig eval;
  int e1_n_buckets = 3;
  std::vector<data::TaskSpec> e2_holdout;
  int e3_n_examples = 2;
  int e4_n_joints = 100;
  int e4_n_inst = 3;
  int e4_n_inp = 5;
  int e4_n_res = 5;
  std::string output_dir;

  static ExperimentManifest from_file(const std::string& path);
  static ExperimentManifest from_string(const std::string& text);
  std::string to_json_string() const;

  void validate() const;
};

// Output root: --out override, else manifest.output_dir, else
// $IPL_RESULTS_DIR/<name>, else results/<name>.
std::string resolve_output_dir(const ExperimentManifest& manifest, const std::string& override_dir);

// Runs the manifest end to end for every (mode, seed) cell and writes all
// artifacts plus summary.json under out_dir. Any failure leaves partial
// artifacts plus a FAILED marker file, then rethrows.
void run_manifest(const ExperimentManifest& manifest, const std::string& out_dir);

struct CorpusStats {
  int count = 0;
  std::int64_t input_tokens = 0;
  std::vector<std::pair<int, int>> length_histogram;  // (input length, count)
};

CorpusStats corpus_stats(const std::vector<data::Example>& examples);

}  // namespace ipl::experiments
