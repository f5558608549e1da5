#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipl/data.hpp"
#include "ipl/engine.hpp"
#include "ipl/metrics.hpp"
#include "ipl/model.hpp"
#include "ipl/tensor.hpp"

namespace ipl::analysis {

using nn::Index;

// Probability table over Inst x Inp x Res, row-major, mass 1 within 1e-12.
struct JointDistribution {
  int n_inst = 0;
  int n_inp = 0;
  int n_res = 0;
  std::vector<double> p;

  double& at(int inst, int inp, int res);
  double at(int inst, int inp, int res) const;
  void validate() const;

  double p_inst(int inst) const;
  double p_inp(int inp) const;
  double p_res(int res) const;
  double p_inst_inp(int inst, int inp) const;
  double p_inp_res(int inp, int res) const;
  double p_inst_res(int inst, int res) const;

  // Dirichlet(1)-style: exponential draws per cell, normalized.
  static JointDistribution random(int n_inst, int n_inp, int n_res, std::uint64_t seed);
  static JointDistribution uniform(int n_inst, int n_inp, int n_res);
};

struct BayesCheck {
  double max_error = 0.0;
  int checked = 0;
  int skipped = 0;  // cells whose conditioning events have zero mass
};

// Exact check of the trinomial Bayes identity
//   p(res|inp,inst) = p(res) p(inp|res) p(inst|res,inp) / (p(inp) p(inst|inp))
// over every cell of the joint, both sides by marginalization.
BayesCheck verify_trinomial_bayes(const JointDistribution& joint);

struct BayesDecomposition {
  double lhs;                 // p(res|inp,inst)
  double fluency;             // p(res)
  double inverse;             // p(inp|res)
  double instruct;            // p(inst|res,inp)
  double denom_inp;           // p(inp)
  double denom_inst_inp;      // p(inst|inp)
  double preins_coverage;     // p(inp|res,inst)
  double preins_denominator;  // p(inp|inst)
  double independence_gap;    // |log p(inp|res) - log p(inp)|
};

BayesDecomposition decompose(const JointDistribution& joint, int inst, int inp, int res);

// Unweighted mean of the trace over all (layer, head) pairs, at 64-bit.
// Causal zeros are preserved exactly.
nn::Tensor aggregate_attention(const model::AttentionTrace& trace);

struct RegionMassRow {
  int row;  // absolute position within the sequence
  double on_template;
  double on_instruction;
  double on_input;
  double on_response_prefix;
};

struct RegionMassTable {
  std::vector<RegionMassRow> rows;  // one per response position
  double mean_template = 0.0;
  double mean_instruction = 0.0;
  double mean_input = 0.0;
  double mean_response_prefix = 0.0;
};

// For each response row i, sums the averaged attention over each region's
// span intersected with the visible prefix [0, i]. The four masses per row
// partition the row total.
RegionMassTable region_mass(const nn::Tensor& avg, const std::vector<data::Span>& spans);

struct BucketCell {
  bool failed = false;  // training diverged
  metrics::MetricReport report;
};

struct BucketMatrix {
  data::FormatMode mode = data::FormatMode::PreIns;
  int n = 0;
  std::vector<std::vector<BucketCell>> cells;  // [train_bucket][test_bucket]
};

// Trains one model per training bucket (same config and seed) and evaluates
// it on every test bucket at batch size 1 with the given beam.
BucketMatrix cross_bucket_eval(const std::vector<std::vector<data::Example>>& train_buckets,
                               const std::vector<std::vector<data::Example>>& test_buckets,
                               const model::ModelConfig& model_config,
                               const engine::TrainConfig& train_config, data::FormatMode mode,
                               const data::Vocab& vocab,
                               const std::vector<data::TaskSpec>& trained_specs, int beam);

// Decodes the response for one formatted example (batch size 1) and strips
// the terminating EOS; beam == 1 is plain greedy.
std::vector<int> decode_response(const model::ModelParams& params,
                                 const data::FormattedSequence& seq, int beam,
                                 const data::Vocab& vocab);

// Rank (1 = best) of the true instruction among candidates by
// logprob_of_continuation of the response; invariant to candidate order.
int instruction_identifiability(const model::ModelParams& params, const data::Example& example,
                                const std::vector<std::vector<int>>& candidate_insts,
                                data::FormatMode mode, const data::Vocab& vocab);

// Writes path+".csv" (raw values, round-trippable) and path+".svg" (grayscale
// cell grid, span boundaries marked). Byte-deterministic given inputs.
void export_heatmap(const nn::Tensor& matrix, const std::vector<data::Span>& spans,
                    const std::string& path_base);

nn::Tensor read_heatmap_csv(const std::string& path);

void write_bucket_matrix(const BucketMatrix& matrix, const std::string& path);
void write_region_mass(const std::vector<std::pair<std::string, RegionMassTable>>& tables,
                       const std::string& path);

struct BayesIdentityRow {
  int joint_id;
  std::uint64_t seed;
  double max_error;
  int checked;
  int skipped;
};

void write_bayes_identity(const std::vector<BayesIdentityRow>& rows, const std::string& path);

struct IdentifiabilityRow {
  int example_id;
  std::string task;
  int rank;
  int n_candidates;
};

void write_identifiability(const std::vector<IdentifiabilityRow>& rows, const std::string& path);

}  // namespace ipl::analysis
