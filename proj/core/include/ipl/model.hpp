#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipl/ops.hpp"
#include "ipl/tensor.hpp"

namespace ipl::model {

using nn::Index;
using nn::Tape32;
using nn::Tensor32;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 0;
  int max_seq_len = 512;
  std::string positional = "learned-absolute";
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Post-softmax attention matrices for one forward pass: layers[l][h] is a
// row-major seq_len x seq_len matrix. Entries at column j > row i are 0.
struct AttentionTrace {
  Index seq_len = 0;
  std::vector<std::vector<std::vector<float>>> layers;
};

struct LayerParams {
  Tensor32 ln1_gain, ln1_bias;
  Tensor32 w_qkv, b_qkv;  // [d x 3d], [3d]
  Tensor32 w_out, b_out;  // [d x d], [d]
  Tensor32 ln2_gain, ln2_bias;
  Tensor32 w_ff1, b_ff1;  // [d x d_ff], [d_ff]
  Tensor32 w_ff2, b_ff2;  // [d_ff x d], [d]
};

struct NamedTensor {
  std::string name;
  Tensor32* tensor;
};

// Pre-norm decoder-only transformer with learned absolute positions and the
// output projection tied to the embedding table.
struct ModelParams {
  ModelConfig config;
  Tensor32 tok_emb;  // [vocab_size x d_model], also the output projection
  Tensor32 pos_emb;  // [max_seq_len x d_model]
  std::vector<LayerParams> layers;
  Tensor32 final_gain, final_bias;

  // Fixed iteration order; serialization, Adam state and gradient clipping
  // all key off this order.
  std::vector<NamedTensor> named();
  std::vector<NamedTensor> named() const;  // pointers into const storage

  ModelParams deep_clone() const;
};

ModelParams init_params(const ModelConfig& config);

// Logits for a packed batch laid out as batch*seq_len rows. positions give
// the position-table row per token (offset within the example, not the padded
// row index); row_valid marks non-PAD tokens, empty means all valid. Tracked
// params record the graph on their tape; trace capture requires batch == 1.
Tensor32 forward_packed(const ModelParams& params, const std::vector<int>& ids,
                        const std::vector<int>& positions, Index batch, Index seq_len,
                        const std::vector<std::uint8_t>& row_valid, AttentionTrace* trace = nullptr);

// Single unpadded sequence; positions 0..T-1.
Tensor32 forward(const ModelParams& params, const std::vector<int>& tokens,
                 AttentionTrace* trace = nullptr);

// Sum over continuation tokens of log softmax(logits)[token], accumulated at
// 64-bit. Empty continuation gives exactly 0.
double logprob_of_continuation(const ModelParams& params, const std::vector<int>& prefix,
                               const std::vector<int>& continuation);

// Params with every tensor watched on the tape (storage shared with *this),
// so a forward pass through the result records gradients for all weights.
ModelParams tracked_params(const ModelParams& params, Tape32& tape);

// Checkpoint file: one header line "IPLCKPT1 <manifest-bytes>", a JSON
// manifest (config + tensor name/shape/offset table + format version), then
// a blob of little-endian 32-bit floats in manifest order.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace ipl::model
