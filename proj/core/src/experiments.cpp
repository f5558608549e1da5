#include "ipl/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <set>
#include <system_error>

#include "ipl/metrics.hpp"
#include "ipl/rng.hpp"

namespace ipl::experiments {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const char* kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::E1: return "E1";
    case ExperimentKind::E2: return "E2";
    case ExperimentKind::E3: return "E3";
    case ExperimentKind::E4: return "E4";
  }
  throw ManifestError("kind_name: bad kind");
}

ExperimentKind kind_from_name(const std::string& name) {
  if (name == "E1") return ExperimentKind::E1;
  if (name == "E2") return ExperimentKind::E2;
  if (name == "E3") return ExperimentKind::E3;
  if (name == "E4") return ExperimentKind::E4;
  throw ManifestError("manifest: unknown kind '" + name + "' (expected E1..E4)");
}

namespace {

void reject_unknown_keys(const json& obj, const char* where,
                         std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok)
      throw ManifestError(std::string("manifest: unknown key '") + key + "' in " + where);
  }
}

data::TaskSpec task_from_json(const json& j, int alphabet_size) {
  reject_unknown_keys(j, "tasks[]", {"family", "param"});
  data::TaskSpec spec;
  spec.family = data::family_from_name(j.at("family").get<std::string>());
  spec.alphabet_size = alphabet_size;
  if (j.contains("param")) {
    if (!spec.has_param())
      throw ManifestError("manifest: task family '" + std::string(data::family_name(spec.family)) +
                          "' takes no param");
    spec.param = j.at("param").get<int>();
  } else if (spec.has_param()) {
    throw ManifestError("manifest: task family '" + std::string(data::family_name(spec.family)) +
                        "' requires a param");
  }
  return spec;
}

json task_to_json(const data::TaskSpec& spec) {
  json j{{"family", data::family_name(spec.family)}};
  if (spec.has_param()) j["param"] = spec.param;
  return j;
}

}  // namespace

ExperimentManifest ExperimentManifest::from_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("manifest: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_string(text);
}

ExperimentManifest ExperimentManifest::from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest: parse error: ") + e.what());
  }
  reject_unknown_keys(j, "manifest",
                      {"version", "name", "kind", "modes", "seeds", "tasks", "data", "model",
                       "train", "eval", "e1", "e2", "e3", "e4", "output_dir"});

  ExperimentManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw ManifestError("manifest: unsupported version");
    m.name = j.at("name").get<std::string>();
    m.kind = kind_from_name(j.at("kind").get<std::string>());
    const std::pair<const char*, ExperimentKind> sections[] = {
        {"e1", ExperimentKind::E1}, {"e2", ExperimentKind::E2},
        {"e3", ExperimentKind::E3}, {"e4", ExperimentKind::E4}};
    for (const auto& [section, kind] : sections)
      if (j.contains(section) && m.kind != kind)
        throw ManifestError(std::string("manifest: section '") + section +
                            "' does not match kind " + kind_name(m.kind));

    if (j.contains("modes")) {
      m.modes.clear();
      for (const json& mode : j.at("modes")) m.modes.push_back(data::mode_from_name(mode.get<std::string>()));
    }
    if (j.contains("seeds")) m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();

    if (j.contains("data")) {
      const json& d = j.at("data");
      reject_unknown_keys(d, "data",
                          {"alphabet_size", "n_train", "n_test", "train_lo", "train_hi", "long_lo",
                           "long_hi", "seed"});
      if (d.contains("alphabet_size")) m.data.alphabet_size = d.at("alphabet_size").get<int>();
      if (d.contains("n_train")) m.data.n_train = d.at("n_train").get<int>();
      if (d.contains("n_test")) m.data.n_test = d.at("n_test").get<int>();
      if (d.contains("train_lo")) m.data.train_lo = d.at("train_lo").get<int>();
      if (d.contains("train_hi")) m.data.train_hi = d.at("train_hi").get<int>();
      if (d.contains("long_lo")) m.data.long_lo = d.at("long_lo").get<int>();
      if (d.contains("long_hi")) m.data.long_hi = d.at("long_hi").get<int>();
      if (d.contains("seed")) m.data.seed = d.at("seed").get<std::uint64_t>();
    }

    m.tasks.clear();
    if (j.contains("tasks"))
      for (const json& t : j.at("tasks")) m.tasks.push_back(task_from_json(t, m.data.alphabet_size));

    if (j.contains("model")) {
      const json& mo = j.at("model");
      reject_unknown_keys(mo, "model",
                          {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "positional"});
      if (mo.contains("n_layers")) m.model.n_layers = mo.at("n_layers").get<int>();
      if (mo.contains("n_heads")) m.model.n_heads = mo.at("n_heads").get<int>();
      if (mo.contains("d_model")) m.model.d_model = mo.at("d_model").get<int>();
      if (mo.contains("d_ff")) m.model.d_ff = mo.at("d_ff").get<int>();
      if (mo.contains("max_seq_len")) m.model.max_seq_len = mo.at("max_seq_len").get<int>();
      if (mo.contains("positional")) m.model.positional = mo.at("positional").get<std::string>();
    }

    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown_keys(t, "train",
                          {"steps", "batch_size", "lr", "beta1", "beta2", "adam_eps",
                           "warmup_steps", "grad_clip_norm", "checkpoint_every", "pad_side"});
      if (t.contains("steps")) m.train.steps = t.at("steps").get<int>();
      if (t.contains("batch_size")) m.train.batch_size = t.at("batch_size").get<int>();
      if (t.contains("lr")) m.train.lr = t.at("lr").get<double>();
      if (t.contains("beta1")) m.train.beta1 = t.at("beta1").get<double>();
      if (t.contains("beta2")) m.train.beta2 = t.at("beta2").get<double>();
      if (t.contains("adam_eps")) m.train.adam_eps = t.at("adam_eps").get<double>();
      if (t.contains("warmup_steps")) m.train.warmup_steps = t.at("warmup_steps").get<int>();
      if (t.contains("grad_clip_norm")) m.train.grad_clip_norm = t.at("grad_clip_norm").get<double>();
      if (t.contains("checkpoint_every")) m.train.checkpoint_every = t.at("checkpoint_every").get<int>();
      if (t.contains("pad_side")) m.train.pad_side = engine::pad_side_from_name(t.at("pad_side").get<std::string>());
    }

    if (j.contains("eval")) {
      const json& e = j.at("eval");
      reject_unknown_keys(e, "eval", {"beam", "length_alpha", "temperature"});
      if (e.contains("beam")) m.eval.beam = e.at("beam").get<int>();
      if (e.contains("length_alpha")) m.eval.length_alpha = e.at("length_alpha").get<double>();
      if (e.contains("temperature")) m.eval.temperature = e.at("temperature").get<double>();
    }

    if (j.contains("e1")) {
      reject_unknown_keys(j.at("e1"), "e1", {"n_buckets"});
      if (j.at("e1").contains("n_buckets")) m.e1_n_buckets = j.at("e1").at("n_buckets").get<int>();
    }
    if (j.contains("e2")) {
      reject_unknown_keys(j.at("e2"), "e2", {"holdout"});
      m.e2_holdout.clear();
      for (const json& t : j.at("e2").at("holdout"))
        m.e2_holdout.push_back(task_from_json(t, m.data.alphabet_size));
    }
    if (j.contains("e3")) {
      reject_unknown_keys(j.at("e3"), "e3", {"n_examples"});
      if (j.at("e3").contains("n_examples")) m.e3_n_examples = j.at("e3").at("n_examples").get<int>();
    }
    if (j.contains("e4")) {
      reject_unknown_keys(j.at("e4"), "e4", {"n_joints", "n_inst", "n_inp", "n_res"});
      const json& e = j.at("e4");
      if (e.contains("n_joints")) m.e4_n_joints = e.at("n_joints").get<int>();
      if (e.contains("n_inst")) m.e4_n_inst = e.at("n_inst").get<int>();
      if (e.contains("n_inp")) m.e4_n_inp = e.at("n_inp").get<int>();
      if (e.contains("n_res")) m.e4_n_res = e.at("n_res").get<int>();
    }
    if (j.contains("output_dir")) m.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  }

  m.model.vocab_size = 12 + 2 * m.data.alphabet_size;
  m.validate();
  return m;
}

std::string ExperimentManifest::to_json_string() const {
  json j;
  j["version"] = version;
  j["name"] = name;
  j["kind"] = kind_name(kind);
  json modes_j = json::array();
  for (data::FormatMode mode : modes) modes_j.push_back(data::mode_name(mode));
  j["modes"] = std::move(modes_j);
  j["seeds"] = seeds;
  json tasks_j = json::array();
  for (const data::TaskSpec& t : tasks) tasks_j.push_back(task_to_json(t));
  j["tasks"] = std::move(tasks_j);
  j["data"] = json{{"alphabet_size", data.alphabet_size}, {"n_train", data.n_train},
                   {"n_test", data.n_test},               {"train_lo", data.train_lo},
                   {"train_hi", data.train_hi},           {"long_lo", data.long_lo},
                   {"long_hi", data.long_hi},             {"seed", data.seed}};
  j["model"] = json{{"n_layers", model.n_layers}, {"n_heads", model.n_heads},
                    {"d_model", model.d_model},   {"d_ff", model.d_ff},
                    {"max_seq_len", model.max_seq_len}, {"positional", model.positional}};
  j["train"] = json{{"steps", train.steps},
                    {"batch_size", train.batch_size},
                    {"lr", train.lr},
                    {"beta1", train.beta1},
                    {"beta2", train.beta2},
                    {"adam_eps", train.adam_eps},
                    {"warmup_steps", train.warmup_steps},
                    {"grad_clip_norm", train.grad_clip_norm},
                    {"checkpoint_every", train.checkpoint_every},
                    {"pad_side", engine::pad_side_name(train.pad_side)}};
  j["eval"] = json{{"beam", eval.beam}, {"length_alpha", eval.length_alpha},
                   {"temperature", eval.temperature}};
  if (kind == ExperimentKind::E1) j["e1"] = json{{"n_buckets", e1_n_buckets}};
  if (kind == ExperimentKind::E2) {
    json holdout = json::array();
    for (const data::TaskSpec& t : e2_holdout) holdout.push_back(task_to_json(t));
    j["e2"] = json{{"holdout", std::move(holdout)}};
  }
  if (kind == ExperimentKind::E3) j["e3"] = json{{"n_examples", e3_n_examples}};
  if (kind == ExperimentKind::E4)
    j["e4"] = json{{"n_joints", e4_n_joints}, {"n_inst", e4_n_inst}, {"n_inp", e4_n_inp},
                   {"n_res", e4_n_res}};
  if (!output_dir.empty()) j["output_dir"] = output_dir;
  return j.dump(2) + "\n";
}

void ExperimentManifest::validate() const {
  if (name.empty()) throw ManifestError("manifest: name must be nonempty");
  if (modes.empty()) throw ManifestError("manifest: modes must be nonempty");
  if (seeds.empty()) throw ManifestError("manifest: seeds must be nonempty");
  if (tasks.empty() && kind != ExperimentKind::E4) throw ManifestError("manifest: tasks must be nonempty");
  if (data.alphabet_size < 2) throw ManifestError("manifest: alphabet_size must be >= 2");
  for (const data::TaskSpec& t : tasks)
    if (t.has_param() && (t.param < 0 || t.param >= data.alphabet_size))
      throw ManifestError("manifest: task param out of alphabet range");
  if (kind == ExperimentKind::E1 && e1_n_buckets < 2)
    throw ManifestError("manifest: E1 requires n_buckets >= 2");
  if (kind == ExperimentKind::E2 && e2_holdout.empty())
    throw ManifestError("manifest: E2 requires a nonempty holdout set");
  if (kind == ExperimentKind::E3 && e3_n_examples < 1)
    throw ManifestError("manifest: E3 requires n_examples >= 1");
  if (kind == ExperimentKind::E4 && (e4_n_joints < 1 || e4_n_inst < 1 || e4_n_inp < 1 || e4_n_res < 1))
    throw ManifestError("manifest: E4 joint sizes must be >= 1");
  model.validate();
  train.validate();
  if (eval.beam < 1) throw ManifestError("manifest: eval.beam must be >= 1");
  if (eval.temperature <= 0) throw ManifestError("manifest: eval.temperature must be positive");
}

std::string resolve_output_dir(const ExperimentManifest& manifest, const std::string& override_dir) {
  if (!override_dir.empty()) return override_dir;
  if (!manifest.output_dir.empty()) return manifest.output_dir;
  if (const char* env = std::getenv("IPL_RESULTS_DIR"); env && *env)
    return std::string(env) + "/" + manifest.name;
  return "results/" + manifest.name;
}

CorpusStats corpus_stats(const std::vector<data::Example>& examples) {
  CorpusStats stats;
  stats.count = static_cast<int>(examples.size());
  std::map<int, int> hist;
  for (const data::Example& ex : examples) {
    stats.input_tokens += static_cast<std::int64_t>(ex.inp.size());
    ++hist[static_cast<int>(ex.inp.size())];
  }
  stats.length_histogram.assign(hist.begin(), hist.end());
  return stats;
}

namespace {

// Per-seed scalar results for one mode, keyed by metric name.
using SeedValues = std::map<std::string, std::vector<double>>;

struct RunContext {
  const ExperimentManifest& m;
  fs::path out;
  data::Vocab vocab;
  std::map<std::string, SeedValues> per_mode;  // mode name -> metric -> per-seed values

  explicit RunContext(const ExperimentManifest& manifest, const fs::path& out_dir)
      : m(manifest), out(out_dir), vocab(data::Vocab::synthetic(manifest.data.alphabet_size)) {}

  void record(data::FormatMode mode, const std::string& metric, double value) {
    per_mode[data::mode_name(mode)][metric].push_back(value);
  }
};

model::ModelConfig model_for_seed(const ExperimentManifest& m, std::uint64_t seed) {
  model::ModelConfig cfg = m.model;
  cfg.seed = seed;
  return cfg;
}

engine::TrainConfig train_for_seed(const ExperimentManifest& m, std::uint64_t seed) {
  engine::TrainConfig cfg = m.train;
  cfg.seed = derive_seed(seed, 0x7261696eULL);  // "rain"
  return cfg;
}

std::vector<data::FormattedSequence> format_all(const std::vector<data::Example>& examples,
                                                data::FormatMode mode, const data::Vocab& vocab,
                                                int max_seq_len) {
  std::vector<data::FormattedSequence> out;
  out.reserve(examples.size());
  for (const data::Example& ex : examples)
    out.push_back(data::format_example(ex, mode, vocab, max_seq_len));
  return out;
}

model::ModelParams train_pooled(const ExperimentManifest& m, const data::Vocab& vocab,
                                const std::vector<data::Example>& corpus, data::FormatMode mode,
                                std::uint64_t seed) {
  const model::ModelConfig mc = model_for_seed(m, seed);
  const engine::TrainConfig tc = train_for_seed(m, seed);
  const auto formatted = format_all(corpus, mode, vocab, mc.max_seq_len);
  const model::ModelParams init = model::init_params(mc);
  engine::TrainResult result = engine::train(mc, init, formatted, tc);
  if (result.diverged)
    throw TrainingDiverged("training diverged (mode " + std::string(data::mode_name(mode)) +
                           ", seed " + std::to_string(seed) + ", last good step " +
                           std::to_string(result.steps_completed) + ")");
  return std::move(result.params);
}

metrics::MetricReport eval_examples(const model::ModelParams& params,
                                    const std::vector<data::Example>& tests, data::FormatMode mode,
                                    const data::Vocab& vocab,
                                    const std::vector<data::TaskSpec>& trained_specs, int beam,
                                    const std::string& cell) {
  std::vector<std::vector<int>> outputs;
  outputs.reserve(tests.size());
  for (const data::Example& ex : tests) {
    const data::FormattedSequence seq = data::format_example(ex, mode, vocab, params.config.max_seq_len);
    outputs.push_back(analysis::decode_response(params, seq, beam, vocab));
  }
  metrics::MetricReport report = metrics::evaluate_outputs(tests, outputs, trained_specs, vocab);
  report.format = data::mode_name(mode);
  report.task = "all";
  report.cell = cell;
  return report;
}

void run_e1(RunContext& ctx) {
  const ExperimentManifest& m = ctx.m;
  const std::vector<data::Example> train_corpus =
      data::generate(m.tasks, m.data.n_train, m.data.train_lo, m.data.train_hi, m.data.seed,
                     ctx.vocab, m.model.max_seq_len);
  const std::vector<data::Example> test_corpus =
      data::generate(m.tasks, m.data.n_test, m.data.train_lo, m.data.train_hi,
                     derive_seed(m.data.seed, 1), ctx.vocab, m.model.max_seq_len);
  const bool has_long = m.data.long_lo > 0 && m.data.long_hi >= m.data.long_lo;
  std::vector<data::Example> long_corpus;
  if (has_long)
    long_corpus = data::generate(m.tasks, m.data.n_test, m.data.long_lo, m.data.long_hi,
                                 derive_seed(m.data.seed, 2), ctx.vocab, m.model.max_seq_len);

  const std::vector<data::Bucket> buckets = data::bucket_by_length(train_corpus, m.e1_n_buckets);
  std::vector<std::vector<data::Example>> train_buckets, test_buckets;
  for (const data::Bucket& b : buckets) {
    train_buckets.push_back(b.examples);
    std::vector<data::Example> tests;
    for (const data::Example& ex : test_corpus) {
      const int len = static_cast<int>(ex.inp.size());
      if (len >= b.min_len && len <= b.max_len) tests.push_back(ex);
    }
    if (tests.empty()) throw TooFewExamples("E1: a test bucket is empty; raise data.n_test");
    test_buckets.push_back(std::move(tests));
  }

  for (std::uint64_t seed : m.seeds) {
    const fs::path seed_dir = ctx.out / ("seed" + std::to_string(seed));
    fs::create_directories(seed_dir);
    for (data::FormatMode mode : m.modes) {
      const analysis::BucketMatrix matrix = analysis::cross_bucket_eval(
          train_buckets, test_buckets, model_for_seed(m, seed), train_for_seed(m, seed), mode,
          ctx.vocab, m.tasks, m.eval.beam);
      analysis::write_bucket_matrix(
          matrix, (seed_dir / ("bucket_matrix_" + std::string(data::mode_name(mode)) + ".csv")).string());

      double diag = 0.0;
      int diag_n = 0;
      for (int b = 0; b < matrix.n; ++b) {
        const analysis::BucketCell& cell =
            matrix.cells[static_cast<std::size_t>(b)][static_cast<std::size_t>(b)];
        if (!cell.failed) {
          diag += cell.report.exact_match;
          ++diag_n;
        }
      }
      ctx.record(mode, "diag_exact_match", diag_n ? diag / diag_n : 0.0);

      if (has_long) {
        const model::ModelParams pooled = train_pooled(m, ctx.vocab, train_corpus, mode, seed);
        const metrics::MetricReport report =
            eval_examples(pooled, long_corpus, mode, ctx.vocab, m.tasks, m.eval.beam, "long");
        metrics::write_reports_csv(
            {report},
            (seed_dir / ("long_eval_" + std::string(data::mode_name(mode)) + ".csv")).string());
        const double n = report.n_examples;
        ctx.record(mode, "long_exact_match", report.exact_match);
        ctx.record(mode, "long_faithful_rate", report.faithful / n);
        ctx.record(mode, "long_hallucination_rate", report.hallucination / n);
        ctx.record(mode, "long_wrong_task_rate", report.wrong_task / n);
      }
    }
  }
}

void run_e2(RunContext& ctx) {
  const ExperimentManifest& m = ctx.m;
  const auto [train_specs, test_specs] = data::make_zero_shot_split(m.tasks, m.e2_holdout);
  const std::vector<data::Example> train_corpus =
      data::generate(train_specs, m.data.n_train, m.data.train_lo, m.data.train_hi, m.data.seed,
                     ctx.vocab, m.model.max_seq_len);
  const std::vector<data::Example> test_corpus =
      data::generate(test_specs, m.data.n_test, m.data.train_lo, m.data.train_hi,
                     derive_seed(m.data.seed, 1), ctx.vocab, m.model.max_seq_len);

  std::vector<std::vector<int>> candidates;
  for (const data::TaskSpec& spec : m.tasks) candidates.push_back(spec.instruction_phrase(ctx.vocab));

  for (std::uint64_t seed : m.seeds) {
    const fs::path seed_dir = ctx.out / ("seed" + std::to_string(seed));
    fs::create_directories(seed_dir);
    for (data::FormatMode mode : m.modes) {
      const model::ModelParams params = train_pooled(m, ctx.vocab, train_corpus, mode, seed);
      const metrics::MetricReport report =
          eval_examples(params, test_corpus, mode, ctx.vocab, train_specs, m.eval.beam, "zero_shot");
      metrics::write_reports_csv(
          {report},
          (seed_dir / ("zero_shot_" + std::string(data::mode_name(mode)) + ".csv")).string());

      std::vector<analysis::IdentifiabilityRow> rows;
      double rank_sum = 0.0;
      int top1 = 0;
      for (std::size_t i = 0; i < test_corpus.size(); ++i) {
        const int rank =
            analysis::instruction_identifiability(params, test_corpus[i], candidates, mode, ctx.vocab);
        rows.push_back({static_cast<int>(i),
                        std::string(data::family_name(test_corpus[i].task.family)), rank,
                        static_cast<int>(candidates.size())});
        rank_sum += rank;
        if (rank == 1) ++top1;
      }
      analysis::write_identifiability(
          rows,
          (seed_dir / ("identifiability_" + std::string(data::mode_name(mode)) + ".csv")).string());

      const double n = test_corpus.size();
      ctx.record(mode, "zero_shot_exact_match", report.exact_match);
      ctx.record(mode, "zero_shot_faithful_rate", report.faithful / n);
      ctx.record(mode, "zero_shot_hallucination_rate", report.hallucination / n);
      ctx.record(mode, "zero_shot_wrong_task_rate", report.wrong_task / n);
      ctx.record(mode, "identifiability_mean_rank", rank_sum / n);
      ctx.record(mode, "identifiability_top1_rate", top1 / n);
    }
  }
}

void run_e3(RunContext& ctx) {
  const ExperimentManifest& m = ctx.m;
  const std::vector<data::Example> train_corpus =
      data::generate(m.tasks, m.data.n_train, m.data.train_lo, m.data.train_hi, m.data.seed,
                     ctx.vocab, m.model.max_seq_len);
  const std::vector<data::Example> trace_corpus =
      data::generate(m.tasks, m.e3_n_examples, m.data.train_lo, m.data.train_hi,
                     derive_seed(m.data.seed, 1), ctx.vocab, m.model.max_seq_len);

  for (std::uint64_t seed : m.seeds) {
    const fs::path seed_dir = ctx.out / ("seed" + std::to_string(seed));
    fs::create_directories(seed_dir);
    for (data::FormatMode mode : m.modes) {
      const model::ModelParams params = train_pooled(m, ctx.vocab, train_corpus, mode, seed);
      std::vector<std::pair<std::string, analysis::RegionMassTable>> tables;
      double inst_mass = 0.0, input_mass = 0.0, resp_mass = 0.0, tmpl_mass = 0.0;
      for (int i = 0; i < m.e3_n_examples; ++i) {
        const data::FormattedSequence seq = data::format_example(
            trace_corpus[static_cast<std::size_t>(i)], mode, ctx.vocab, params.config.max_seq_len);
        model::AttentionTrace trace;
        model::forward(params, seq.ids, &trace);
        const nn::Tensor avg = analysis::aggregate_attention(trace);
        const std::string base =
            (seed_dir / ("attention_" + std::string(data::mode_name(mode)) + "_" + std::to_string(i)))
                .string();
        analysis::export_heatmap(avg, seq.spans, base);
        analysis::RegionMassTable table = analysis::region_mass(avg, seq.spans);
        inst_mass += table.mean_instruction;
        input_mass += table.mean_input;
        resp_mass += table.mean_response_prefix;
        tmpl_mass += table.mean_template;
        tables.emplace_back("ex" + std::to_string(i), std::move(table));
      }
      analysis::write_region_mass(
          tables, (seed_dir / ("region_mass_" + std::string(data::mode_name(mode)) + ".csv")).string());
      const double n = m.e3_n_examples;
      ctx.record(mode, "response_to_instruction_mass", inst_mass / n);
      ctx.record(mode, "response_to_input_mass", input_mass / n);
      ctx.record(mode, "response_to_response_mass", resp_mass / n);
      ctx.record(mode, "response_to_template_mass", tmpl_mass / n);
    }
  }
}

void run_e4(RunContext& ctx) {
  const ExperimentManifest& m = ctx.m;
  std::vector<analysis::BayesIdentityRow> rows;
  for (std::uint64_t seed : m.seeds) {
    double worst = 0.0;
    for (int i = 0; i < m.e4_n_joints; ++i) {
      const std::uint64_t joint_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
      const analysis::JointDistribution joint =
          analysis::JointDistribution::random(m.e4_n_inst, m.e4_n_inp, m.e4_n_res, joint_seed);
      const analysis::BayesCheck check = analysis::verify_trinomial_bayes(joint);
      rows.push_back({i, joint_seed, check.max_error, check.checked, check.skipped});
      worst = std::max(worst, check.max_error);
    }
    // The identity is format-independent; both modes carry the same value so
    // every summary cell is populated.
    for (data::FormatMode mode : m.modes) ctx.record(mode, "bayes_max_identity_error", worst);
  }
  analysis::write_bayes_identity(rows, (ctx.out / "bayes_identity.csv").string());
}

json summary_json(const RunContext& ctx) {
  json summary;
  summary["name"] = ctx.m.name;
  summary["kind"] = kind_name(ctx.m.kind);
  json modes_j = json::array();
  for (data::FormatMode mode : ctx.m.modes) modes_j.push_back(data::mode_name(mode));
  summary["modes"] = std::move(modes_j);
  summary["seeds"] = ctx.m.seeds;

  // metric -> mode -> {per_seed, mean}
  std::set<std::string> metric_names;
  for (const auto& mode_entry : ctx.per_mode)
    for (const auto& metric_entry : mode_entry.second) metric_names.insert(metric_entry.first);

  json metrics_j;
  for (const std::string& metric : metric_names) {
    json per_mode;
    for (data::FormatMode mode : ctx.m.modes) {
      const std::string mode_key = data::mode_name(mode);
      auto mode_it = ctx.per_mode.find(mode_key);
      if (mode_it == ctx.per_mode.end()) continue;
      auto it = mode_it->second.find(metric);
      if (it == mode_it->second.end()) continue;
      double mean = 0.0;
      for (double v : it->second) mean += v;
      if (!it->second.empty()) mean /= static_cast<double>(it->second.size());
      per_mode[mode_key] = json{{"per_seed", it->second}, {"mean", mean}};
    }
    metrics_j[metric] = std::move(per_mode);
  }
  summary["metrics"] = std::move(metrics_j);
  return summary;
}

}  // namespace

void run_manifest(const ExperimentManifest& manifest, const std::string& out_dir) {
  manifest.validate();
  const fs::path out(out_dir);
  fs::create_directories(out);
  {
    std::ofstream f(out / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoFailure("run_manifest: cannot write manifest copy");
    f << manifest.to_json_string();
  }
  const fs::path failed = out / "FAILED";
  std::error_code ec;
  fs::remove(failed, ec);

  try {
    RunContext ctx(manifest, out);
    switch (manifest.kind) {
      case ExperimentKind::E1: run_e1(ctx); break;
      case ExperimentKind::E2: run_e2(ctx); break;
      case ExperimentKind::E3: run_e3(ctx); break;
      case ExperimentKind::E4: run_e4(ctx); break;
    }
    std::ofstream f(out / "summary.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoFailure("run_manifest: cannot write summary.json");
    f << summary_json(ctx).dump(2) << '\n';
  } catch (const std::exception& e) {
    std::ofstream f(failed, std::ios::binary | std::ios::trunc);
    f << e.what() << '\n';
    throw;
  }
}

}  // namespace ipl::experiments
