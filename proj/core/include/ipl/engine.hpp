#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ipl/data.hpp"
#include "ipl/model.hpp"

namespace ipl::engine {

using nn::Index;

enum class PadSide { Left, Right };

const char* pad_side_name(PadSide side);
PadSide pad_side_from_name(const std::string& name);

struct TrainConfig {
  int steps = 1000;
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 100;
  double grad_clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  PadSide pad_side = PadSide::Right;
  std::string checkpoint_dir;  // empty: in-memory snapshots only

  void validate() const;
};

// Warmup-then-constant schedule; t is the 1-based step number.
double lr_at(const TrainConfig& config, int t);

// One packed training batch. Rows are laid out example-major; positions hold
// each token's offset within its example so padding side cannot leak into
// the position table.
struct Batch {
  Index batch = 0;
  Index seq_len = 0;
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<std::uint8_t> row_valid;
  std::vector<int> targets;    // next token per row; pad_id where unsupervised
  std::vector<float> weights;  // 1 on supervised rows, else 0 (per-token objective)
};

Batch make_batch(const std::vector<const data::FormattedSequence*>& seqs, PadSide pad_side,
                 int pad_id);

// Adam first/second moments kept at 64-bit, one entry per named tensor.
struct AdamState {
  std::vector<std::vector<double>> m, v;
};

// Bias-corrected Adam with the config's warmup schedule applied at step t
// (1-based). grads follow params.named() order.
void adam_step(model::ModelParams& params, const std::vector<std::vector<float>*>& grads,
               AdamState& state, int t, const TrainConfig& config);

struct TrainResult {
  model::ModelParams params;
  std::vector<double> loss_curve;  // per-step batch loss / batch size
  bool diverged = false;
  int steps_completed = 0;
  std::vector<std::string> checkpoint_paths;
};

// Teacher-forced training on formatted sequences. The batch objective is the
// sum over examples of the masked mean cross entropy, so a batch decomposes
// exactly into its B=1 parts. On a NaN loss the last good snapshot is
// restored and the result is flagged diverged.
TrainResult train(const model::ModelConfig& model_config, const model::ModelParams& init,
                  const std::vector<data::FormattedSequence>& corpus, const TrainConfig& config);

void write_loss_curve(const std::vector<double>& curve, const std::string& path);

// Next-token scorer: full token prefix in, logits for the last position out.
// Decoders are written against this so hand-built toy models can drive them.
using StepFn = std::function<std::vector<double>(const std::vector<int>&)>;

StepFn model_step(const model::ModelParams& params);

// Argmax decoding, lowest id on ties; stops at eos_id or max_new tokens.
// Returns generated ids including the terminating EOS when emitted.
std::vector<int> greedy_decode(const StepFn& step, const std::vector<int>& prompt, int max_new,
                               int eos_id, int max_total);
std::vector<int> greedy_decode(const model::ModelParams& params, const std::vector<int>& prompt,
                               int max_new, int eos_id);

struct BeamHypothesis {
  std::vector<int> ids;  // generated tokens only
  double logprob = 0.0;
  double score = 0.0;  // logprob / len^alpha
  bool finished = false;
};

struct BeamResult {
  std::vector<int> ids;
  double logprob = 0.0;
  double score = 0.0;
  std::vector<BeamHypothesis> beam;  // final pool, best first
};

// Beam search with length-normalized scores logprob / len^length_alpha.
// Finished hypotheses retire to a pool; the search stops once the best live
// hypothesis cannot beat the best finished one. Score ties break
// lexicographically by token ids. beam == 1 reproduces greedy_decode.
BeamResult beam_search(const StepFn& step, const std::vector<int>& prompt, int beam, int max_new,
                       double length_alpha, int eos_id, int max_total);
BeamResult beam_search(const model::ModelParams& params, const std::vector<int>& prompt, int beam,
                       int max_new, double length_alpha, int eos_id);

// Temperature sampling over softmax(logits / temperature), seeded.
std::vector<int> sample_decode(const StepFn& step, const std::vector<int>& prompt,
                               double temperature, std::uint64_t seed, int max_new, int eos_id,
                               int max_total);
std::vector<int> sample_decode(const model::ModelParams& params, const std::vector<int>& prompt,
                               double temperature, std::uint64_t seed, int max_new, int eos_id);

}  // namespace ipl::engine
