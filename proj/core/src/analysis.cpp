#include "ipl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ipl/rng.hpp"

namespace ipl::analysis {

double& JointDistribution::at(int inst, int inp, int res) {
  return p[static_cast<std::size_t>((inst * n_inp + inp) * n_res + res)];
}

double JointDistribution::at(int inst, int inp, int res) const {
  return p[static_cast<std::size_t>((inst * n_inp + inp) * n_res + res)];
}

void JointDistribution::validate() const {
  if (n_inst < 1 || n_inp < 1 || n_res < 1 ||
      p.size() != static_cast<std::size_t>(n_inst) * static_cast<std::size_t>(n_inp) *
                      static_cast<std::size_t>(n_res))
    throw ShapeMismatch("JointDistribution: table size does not match set sizes");
  double mass = 0.0;
  for (double x : p) {
    if (x < 0) throw ZeroMassConditioning("JointDistribution: negative probability");
    mass += x;
  }
  if (std::abs(mass - 1.0) > 1e-12)
    throw ZeroMassConditioning("JointDistribution: total mass deviates from 1 by more than 1e-12");
}

double JointDistribution::p_inst(int inst) const {
  double s = 0.0;
  for (int j = 0; j < n_inp; ++j)
    for (int k = 0; k < n_res; ++k) s += at(inst, j, k);
  return s;
}

double JointDistribution::p_inp(int inp) const {
  double s = 0.0;
  for (int i = 0; i < n_inst; ++i)
    for (int k = 0; k < n_res; ++k) s += at(i, inp, k);
  return s;
}

double JointDistribution::p_res(int res) const {
  double s = 0.0;
  for (int i = 0; i < n_inst; ++i)
    for (int j = 0; j < n_inp; ++j) s += at(i, j, res);
  return s;
}

double JointDistribution::p_inst_inp(int inst, int inp) const {
  double s = 0.0;
  for (int k = 0; k < n_res; ++k) s += at(inst, inp, k);
  return s;
}

double JointDistribution::p_inp_res(int inp, int res) const {
  double s = 0.0;
  for (int i = 0; i < n_inst; ++i) s += at(i, inp, res);
  return s;
}

double JointDistribution::p_inst_res(int inst, int res) const {
  double s = 0.0;
  for (int j = 0; j < n_inp; ++j) s += at(inst, j, res);
  return s;
}

JointDistribution JointDistribution::random(int n_inst, int n_inp, int n_res, std::uint64_t seed) {
  JointDistribution j;
  j.n_inst = n_inst;
  j.n_inp = n_inp;
  j.n_res = n_res;
  j.p.resize(static_cast<std::size_t>(n_inst) * static_cast<std::size_t>(n_inp) *
             static_cast<std::size_t>(n_res));
  Rng rng(seed);
  double mass = 0.0;
  for (double& x : j.p) {
    x = -std::log(1.0 - rng.uniform());  // Exp(1)
    mass += x;
  }
  for (double& x : j.p) x /= mass;
  // One pass of exact renormalization drift repair: force the sum to 1 by
  // folding the residual into the largest cell.
  double s = 0.0;
  for (double x : j.p) s += x;
  auto it = std::max_element(j.p.begin(), j.p.end());
  *it += 1.0 - s;
  j.validate();
  return j;
}

JointDistribution JointDistribution::uniform(int n_inst, int n_inp, int n_res) {
  JointDistribution j;
  j.n_inst = n_inst;
  j.n_inp = n_inp;
  j.n_res = n_res;
  const std::size_t n = static_cast<std::size_t>(n_inst) * static_cast<std::size_t>(n_inp) *
                        static_cast<std::size_t>(n_res);
  j.p.assign(n, 1.0 / static_cast<double>(n));
  double s = 0.0;
  for (double x : j.p) s += x;
  auto it = std::max_element(j.p.begin(), j.p.end());
  *it += 1.0 - s;
  j.validate();
  return j;
}

BayesCheck verify_trinomial_bayes(const JointDistribution& joint) {
  joint.validate();
  BayesCheck out;
  for (int i = 0; i < joint.n_inst; ++i) {
    for (int j = 0; j < joint.n_inp; ++j) {
      for (int k = 0; k < joint.n_res; ++k) {
        const double pij = joint.p_inst_inp(i, j);
        const double pr = joint.p_res(k);
        const double pjr = joint.p_inp_res(j, k);
        const double pj = joint.p_inp(j);
        if (pij <= 0 || pr <= 0 || pjr <= 0 || pj <= 0) {
          ++out.skipped;
          continue;
        }
        const double lhs = joint.at(i, j, k) / pij;
        const double inverse = pjr / pr;
        const double instruct = joint.at(i, j, k) / pjr;
        const double inst_given_inp = pij / pj;
        const double rhs = pr * inverse * instruct / (pj * inst_given_inp);
        out.max_error = std::max(out.max_error, std::abs(lhs - rhs));
        ++out.checked;
      }
    }
  }
  return out;
}

BayesDecomposition decompose(const JointDistribution& joint, int inst, int inp, int res) {
  joint.validate();
  if (inst < 0 || inst >= joint.n_inst || inp < 0 || inp >= joint.n_inp || res < 0 ||
      res >= joint.n_res)
    throw ShapeMismatch("decompose: cell index out of range");
  const double pij = joint.p_inst_inp(inst, inp);
  const double pr = joint.p_res(res);
  const double pjr = joint.p_inp_res(inp, res);
  const double pir = joint.p_inst_res(inst, res);
  const double pj = joint.p_inp(inp);
  const double pi = joint.p_inst(inst);
  if (pij <= 0 || pr <= 0 || pjr <= 0 || pir <= 0 || pj <= 0 || pi <= 0)
    throw ZeroMassConditioning("decompose: a conditioning event has zero mass");

  BayesDecomposition d;
  d.lhs = joint.at(inst, inp, res) / pij;
  d.fluency = pr;
  d.inverse = pjr / pr;
  d.instruct = joint.at(inst, inp, res) / pjr;
  d.denom_inp = pj;
  d.denom_inst_inp = pij / pj;
  d.preins_coverage = joint.at(inst, inp, res) / pir;
  d.preins_denominator = pij / pi;
  d.independence_gap = std::abs(std::log(d.inverse) - std::log(d.denom_inp));
  return d;
}

nn::Tensor aggregate_attention(const model::AttentionTrace& trace) {
  if (trace.layers.empty() || trace.seq_len < 1)
    throw SpanMismatch("aggregate_attention: empty trace");
  const Index t = trace.seq_len;
  nn::Tensor avg({t, t});
  int count = 0;
  for (const auto& layer : trace.layers) {
    for (const auto& head : layer) {
      if (static_cast<Index>(head.size()) != t * t)
        throw ShapeMismatch("aggregate_attention: head matrix size mismatch");
      for (Index i = 0; i < t * t; ++i) avg[i] += static_cast<double>(head[static_cast<std::size_t>(i)]);
      ++count;
    }
  }
  if (count == 0) throw SpanMismatch("aggregate_attention: trace has no heads");
  const double inv = 1.0 / count;
  for (Index i = 0; i < t * t; ++i) avg[i] *= inv;
  return avg;
}

RegionMassTable region_mass(const nn::Tensor& avg, const std::vector<data::Span>& spans) {
  const Index t = avg.rows();
  if (avg.cols() != t) throw ShapeMismatch("region_mass: matrix must be square");
  int covered = 0;
  for (const data::Span& s : spans) {
    if (s.begin != covered) throw SpanMismatch("region_mass: spans must tile [0, T) in order");
    covered = s.end;
  }
  if (covered != static_cast<int>(t))
    throw SpanMismatch("region_mass: spans cover " + std::to_string(covered) + " of " +
                       std::to_string(t) + " positions");

  const data::Span* response = nullptr;
  for (const data::Span& s : spans)
    if (s.region == data::Region::Response) response = &s;
  if (!response) throw SpanMismatch("region_mass: no response span");

  RegionMassTable table;
  for (int i = response->begin; i < response->end; ++i) {
    RegionMassRow row{i, 0.0, 0.0, 0.0, 0.0};
    for (const data::Span& s : spans) {
      const int hi = std::min(s.end, i + 1);  // visible prefix is [0, i]
      if (s.begin >= hi) continue;
      double mass = 0.0;
      for (int j = s.begin; j < hi; ++j) mass += avg(i, j);
      switch (s.region) {
        case data::Region::Template: row.on_template += mass; break;
        case data::Region::Instruction: row.on_instruction += mass; break;
        case data::Region::Input: row.on_input += mass; break;
        case data::Region::Response: row.on_response_prefix += mass; break;
      }
    }
    table.rows.push_back(row);
  }
  if (!table.rows.empty()) {
    for (const RegionMassRow& r : table.rows) {
      table.mean_template += r.on_template;
      table.mean_instruction += r.on_instruction;
      table.mean_input += r.on_input;
      table.mean_response_prefix += r.on_response_prefix;
    }
    const double inv = 1.0 / static_cast<double>(table.rows.size());
    table.mean_template *= inv;
    table.mean_instruction *= inv;
    table.mean_input *= inv;
    table.mean_response_prefix *= inv;
  }
  return table;
}

std::vector<int> decode_response(const model::ModelParams& params,
                                 const data::FormattedSequence& seq, int beam,
                                 const data::Vocab& vocab) {
  const std::vector<int> prompt = seq.prompt();
  const data::Span& res = seq.span_of(data::Region::Response);
  int max_new = (res.end - res.begin) + 2;  // oracle length + EOS + one spare
  max_new = std::min(max_new, params.config.max_seq_len - static_cast<int>(prompt.size()));
  if (max_new < 1) throw SequenceTooLong("decode_response: prompt leaves no room to generate");
  std::vector<int> out;
  if (beam <= 1)
    out = engine::greedy_decode(params, prompt, max_new, vocab.eos());
  else
    out = engine::beam_search(params, prompt, beam, max_new, 0.0, vocab.eos()).ids;
  if (!out.empty() && out.back() == vocab.eos()) out.pop_back();
  return out;
}

BucketMatrix cross_bucket_eval(const std::vector<std::vector<data::Example>>& train_buckets,
                               const std::vector<std::vector<data::Example>>& test_buckets,
                               const model::ModelConfig& model_config,
                               const engine::TrainConfig& train_config, data::FormatMode mode,
                               const data::Vocab& vocab,
                               const std::vector<data::TaskSpec>& trained_specs, int beam) {
  if (train_buckets.size() < 2 || train_buckets.size() != test_buckets.size())
    throw TooFewExamples("cross_bucket_eval: need >= 2 aligned train/test buckets");

  BucketMatrix matrix;
  matrix.mode = mode;
  matrix.n = static_cast<int>(train_buckets.size());
  matrix.cells.assign(static_cast<std::size_t>(matrix.n),
                      std::vector<BucketCell>(static_cast<std::size_t>(matrix.n)));

  for (int tb = 0; tb < matrix.n; ++tb) {
    std::vector<data::FormattedSequence> corpus;
    corpus.reserve(train_buckets[static_cast<std::size_t>(tb)].size());
    for (const data::Example& ex : train_buckets[static_cast<std::size_t>(tb)])
      corpus.push_back(data::format_example(ex, mode, vocab, model_config.max_seq_len));

    const model::ModelParams init = model::init_params(model_config);
    const engine::TrainResult trained = engine::train(model_config, init, corpus, train_config);

    for (int eb = 0; eb < matrix.n; ++eb) {
      BucketCell& cell = matrix.cells[static_cast<std::size_t>(tb)][static_cast<std::size_t>(eb)];
      cell.report.format = data::mode_name(mode);
      cell.report.task = "all";
      cell.report.cell = "train_b" + std::to_string(tb) + "_test_b" + std::to_string(eb);
      if (trained.diverged) {
        cell.failed = true;
        continue;
      }
      const auto& tests = test_buckets[static_cast<std::size_t>(eb)];
      std::vector<std::vector<int>> outputs;
      outputs.reserve(tests.size());
      for (const data::Example& ex : tests) {
        const data::FormattedSequence seq =
            data::format_example(ex, mode, vocab, model_config.max_seq_len);
        outputs.push_back(decode_response(trained.params, seq, beam, vocab));
      }
      metrics::MetricReport report = metrics::evaluate_outputs(tests, outputs, trained_specs, vocab);
      report.format = cell.report.format;
      report.task = cell.report.task;
      report.cell = cell.report.cell;
      cell.report = report;
    }
  }
  return matrix;
}

int instruction_identifiability(const model::ModelParams& params, const data::Example& example,
                                const std::vector<std::vector<int>>& candidate_insts,
                                data::FormatMode mode, const data::Vocab& vocab) {
  if (candidate_insts.empty())
    throw ManifestError("instruction_identifiability: no candidate instructions");
  bool has_true = false;
  for (const auto& cand : candidate_insts)
    if (cand == example.inst) has_true = true;
  if (!has_true)
    throw ManifestError("instruction_identifiability: candidates must include the true instruction");

  double true_score = 0.0;
  std::vector<double> scores;
  scores.reserve(candidate_insts.size());
  for (const auto& cand : candidate_insts) {
    data::Example swapped = example;
    swapped.inst = cand;
    const data::FormattedSequence seq =
        data::format_example(swapped, mode, vocab, params.config.max_seq_len);
    const double score = model::logprob_of_continuation(params, seq.prompt(), example.res);
    scores.push_back(score);
    if (cand == example.inst) true_score = score;
  }
  int rank = 1;
  for (double s : scores)
    if (s > true_score) ++rank;
  return rank;
}

namespace {

std::string fmt17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

void export_heatmap(const nn::Tensor& matrix, const std::vector<data::Span>& spans,
                    const std::string& path_base) {
  const Index t = matrix.rows();
  if (matrix.cols() != t) throw ShapeMismatch("export_heatmap: matrix must be square");

  {
    std::ofstream csv(path_base + ".csv", std::ios::binary | std::ios::trunc);
    if (!csv) throw IoFailure("export_heatmap: cannot open " + path_base + ".csv");
    for (Index i = 0; i < t; ++i) {
      for (Index j = 0; j < t; ++j) {
        if (j) csv << ',';
        csv << fmt17(matrix(i, j));
      }
      csv << '\n';
    }
    if (!csv) throw IoFailure("export_heatmap: write failed for " + path_base + ".csv");
  }

  double vmax = 0.0;
  for (Index i = 0; i < t * t; ++i) vmax = std::max(vmax, matrix[i]);

  std::ofstream svg(path_base + ".svg", std::ios::binary | std::ios::trunc);
  if (!svg) throw IoFailure("export_heatmap: cannot open " + path_base + ".svg");
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << t << ' ' << t
      << "\" shape-rendering=\"crispEdges\">\n";
  for (Index i = 0; i < t; ++i) {
    for (Index j = 0; j < t; ++j) {
      const double v = matrix(i, j);
      const int shade =
          vmax > 0 ? 255 - static_cast<int>(std::lround(255.0 * v / vmax)) : 255;
      svg << "<rect x=\"" << j << "\" y=\"" << i << "\" width=\"1\" height=\"1\" fill=\"rgb("
          << shade << ',' << shade << ',' << shade << ")\"/>\n";
    }
  }
  for (const data::Span& s : spans) {
    if (s.begin == 0) continue;
    svg << "<line x1=\"" << s.begin << "\" y1=\"0\" x2=\"" << s.begin << "\" y2=\"" << t
        << "\" stroke=\"#c03\" stroke-width=\"0.08\"/>\n";
    svg << "<line x1=\"0\" y1=\"" << s.begin << "\" x2=\"" << t << "\" y2=\"" << s.begin
        << "\" stroke=\"#c03\" stroke-width=\"0.08\"/>\n";
  }
  svg << "</svg>\n";
  if (!svg) throw IoFailure("export_heatmap: write failed for " + path_base + ".svg");
}

nn::Tensor read_heatmap_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("read_heatmap_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream in(line);
    std::string cell;
    while (std::getline(in, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoFailure("read_heatmap_csv: empty file " + path);
  const Index t = static_cast<Index>(rows.size());
  nn::Tensor m({t, t});
  for (Index i = 0; i < t; ++i) {
    if (static_cast<Index>(rows[static_cast<std::size_t>(i)].size()) != t)
      throw IoFailure("read_heatmap_csv: ragged row in " + path);
    for (Index j = 0; j < t; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

void write_bucket_matrix(const BucketMatrix& matrix, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_bucket_matrix: cannot open " + path);
  f << "mode,train_bucket,test_bucket,status,n_examples,exact_match,bleu,rouge1,rouge2,rougeL,"
       "faithful,wrong_task,hallucination\n";
  for (int tb = 0; tb < matrix.n; ++tb) {
    for (int eb = 0; eb < matrix.n; ++eb) {
      const BucketCell& c = matrix.cells[static_cast<std::size_t>(tb)][static_cast<std::size_t>(eb)];
      f << data::mode_name(matrix.mode) << ',' << tb << ',' << eb << ','
        << (c.failed ? "failed" : "ok") << ',' << c.report.n_examples << ','
        << fmt6(c.report.exact_match) << ',' << fmt6(c.report.bleu) << ',' << fmt6(c.report.rouge1)
        << ',' << fmt6(c.report.rouge2) << ',' << fmt6(c.report.rougeL) << ',' << c.report.faithful
        << ',' << c.report.wrong_task << ',' << c.report.hallucination << '\n';
    }
  }
  if (!f) throw IoFailure("write_bucket_matrix: write failed for " + path);
}

void write_region_mass(const std::vector<std::pair<std::string, RegionMassTable>>& tables,
                       const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_region_mass: cannot open " + path);
  f << "example,row,on_template,on_instruction,on_input,on_response_prefix\n";
  for (const auto& [name, table] : tables) {
    for (const RegionMassRow& r : table.rows)
      f << name << ',' << r.row << ',' << fmt6(r.on_template) << ',' << fmt6(r.on_instruction)
        << ',' << fmt6(r.on_input) << ',' << fmt6(r.on_response_prefix) << '\n';
    f << name << ",mean," << fmt6(table.mean_template) << ',' << fmt6(table.mean_instruction)
      << ',' << fmt6(table.mean_input) << ',' << fmt6(table.mean_response_prefix) << '\n';
  }
  if (!f) throw IoFailure("write_region_mass: write failed for " + path);
}

void write_bayes_identity(const std::vector<BayesIdentityRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_bayes_identity: cannot open " + path);
  f << "joint_id,seed,max_error,checked,skipped\n";
  for (const BayesIdentityRow& r : rows)
    f << r.joint_id << ',' << r.seed << ',' << fmt17(r.max_error) << ',' << r.checked << ','
      << r.skipped << '\n';
  if (!f) throw IoFailure("write_bayes_identity: write failed for " + path);
}

void write_identifiability(const std::vector<IdentifiabilityRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_identifiability: cannot open " + path);
  f << "example_id,task,rank,n_candidates\n";
  for (const IdentifiabilityRow& r : rows)
    f << r.example_id << ',' << r.task << ',' << r.rank << ',' << r.n_candidates << '\n';
  if (!f) throw IoFailure("write_identifiability: write failed for " + path);
}

}  // namespace ipl::analysis
