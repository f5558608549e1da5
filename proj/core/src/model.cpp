#include "ipl/model.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ipl/errors.hpp"
#include "ipl/rng.hpp"

namespace ipl::model {

using nn::AttentionCapture;
using json = nlohmann::ordered_json;

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1)
    throw ShapeMismatch("ModelConfig: all counts must be >= 1");
  if (max_seq_len < 2) throw ShapeMismatch("ModelConfig: max_seq_len must be >= 2");
  if (d_model % n_heads != 0) throw ShapeMismatch("ModelConfig: d_model not divisible by n_heads");
  if (positional != "learned-absolute")
    throw ShapeMismatch("ModelConfig: unsupported positional scheme '" + positional + "'");
}

std::vector<NamedTensor> ModelParams::named() {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", &tok_emb});
  out.push_back({"pos_emb", &pos_emb});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams& lp = layers[l];
    out.push_back({p + "ln1.gain", &lp.ln1_gain});
    out.push_back({p + "ln1.bias", &lp.ln1_bias});
    out.push_back({p + "attn.w_qkv", &lp.w_qkv});
    out.push_back({p + "attn.b_qkv", &lp.b_qkv});
    out.push_back({p + "attn.w_out", &lp.w_out});
    out.push_back({p + "attn.b_out", &lp.b_out});
    out.push_back({p + "ln2.gain", &lp.ln2_gain});
    out.push_back({p + "ln2.bias", &lp.ln2_bias});
    out.push_back({p + "ffn.w1", &lp.w_ff1});
    out.push_back({p + "ffn.b1", &lp.b_ff1});
    out.push_back({p + "ffn.w2", &lp.w_ff2});
    out.push_back({p + "ffn.b2", &lp.b_ff2});
  }
  out.push_back({"final_norm.gain", &final_gain});
  out.push_back({"final_norm.bias", &final_bias});
  return out;
}

std::vector<NamedTensor> ModelParams::named() const {
  return const_cast<ModelParams*>(this)->named();
}

ModelParams ModelParams::deep_clone() const {
  ModelParams copy = *this;
  for (auto& nt : copy.named()) *nt.tensor = nt.tensor->clone();
  return copy;
}

namespace {

void fill_normal(Tensor32& t, Rng& rng, double std) {
  const Index n = t.numel();
  for (Index i = 0; i < n; ++i) t[i] = static_cast<float>(rng.normal() * std);
}

}  // namespace

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  const Index d = config.d_model;
  const Index dff = config.d_ff;

  ModelParams p;
  p.config = config;
  p.tok_emb = Tensor32({config.vocab_size, d});
  p.pos_emb = Tensor32({config.max_seq_len, d});
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& lp : p.layers) {
    lp.ln1_gain = Tensor32::full({d}, 1.0f);
    lp.ln1_bias = Tensor32({d});
    lp.w_qkv = Tensor32({d, 3 * d});
    lp.b_qkv = Tensor32({3 * d});
    lp.w_out = Tensor32({d, d});
    lp.b_out = Tensor32({d});
    lp.ln2_gain = Tensor32::full({d}, 1.0f);
    lp.ln2_bias = Tensor32({d});
    lp.w_ff1 = Tensor32({d, dff});
    lp.b_ff1 = Tensor32({dff});
    lp.w_ff2 = Tensor32({dff, d});
    lp.b_ff2 = Tensor32({d});
  }
  p.final_gain = Tensor32::full({d}, 1.0f);
  p.final_bias = Tensor32({d});

  // std 0.02 everywhere, residual projections scaled by 1/sqrt(2*n_layers);
  // biases and norm parameters keep their zero/one init.
  Rng rng(config.seed);
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * config.n_layers);
  fill_normal(p.tok_emb, rng, base_std);
  fill_normal(p.pos_emb, rng, base_std);
  for (auto& lp : p.layers) {
    fill_normal(lp.w_qkv, rng, base_std);
    fill_normal(lp.w_out, rng, resid_std);
    fill_normal(lp.w_ff1, rng, base_std);
    fill_normal(lp.w_ff2, rng, resid_std);
  }
  return p;
}

ModelParams tracked_params(const ModelParams& params, Tape32& tape) {
  ModelParams t = params;
  for (auto& nt : t.named()) *nt.tensor = tape.watch(*nt.tensor);
  return t;
}

Tensor32 forward_packed(const ModelParams& params, const std::vector<int>& ids,
                        const std::vector<int>& positions, Index batch, Index seq_len,
                        const std::vector<std::uint8_t>& row_valid, AttentionTrace* trace) {
  const ModelConfig& cfg = params.config;
  if (seq_len > cfg.max_seq_len)
    throw SequenceTooLong("forward: sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
  if (static_cast<Index>(ids.size()) != batch * seq_len || ids.size() != positions.size())
    throw ShapeMismatch("forward: ids/positions must have batch*seq_len entries");
  for (int pos : positions)
    if (pos < 0 || pos >= cfg.max_seq_len) throw SequenceTooLong("forward: position index out of range");
  if (trace && batch != 1) throw ShapeMismatch("forward: trace capture requires batch == 1");

  const float eps = 1e-5f;
  Tensor32 x = nn::add(nn::embedding_lookup(params.tok_emb, ids),
                       nn::embedding_lookup(params.pos_emb, positions));
  if (trace) {
    trace->seq_len = seq_len;
    trace->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& lp = params.layers[l];
    AttentionCapture<float> capture;
    Tensor32 h = nn::layer_norm(x, lp.ln1_gain, lp.ln1_bias, eps);
    Tensor32 qkv = nn::add_rowwise(nn::matmul(h, lp.w_qkv), lp.b_qkv);
    Tensor32 att = nn::causal_attention(qkv, cfg.n_heads, batch, seq_len, row_valid,
                                        trace ? &capture : nullptr);
    x = nn::add(x, nn::add_rowwise(nn::matmul(att, lp.w_out), lp.b_out));
    Tensor32 f = nn::layer_norm(x, lp.ln2_gain, lp.ln2_bias, eps);
    f = nn::add_rowwise(nn::matmul(f, lp.w_ff1), lp.b_ff1);
    f = nn::gelu(f);
    x = nn::add(x, nn::add_rowwise(nn::matmul(f, lp.w_ff2), lp.b_ff2));
    if (trace) trace->layers[l] = std::move(capture.heads);
  }
  x = nn::layer_norm(x, params.final_gain, params.final_bias, eps);
  return nn::matmul_nt(x, params.tok_emb);
}

Tensor32 forward(const ModelParams& params, const std::vector<int>& tokens, AttentionTrace* trace) {
  if (tokens.empty()) throw SequenceTooLong("forward: empty token sequence");
  for (int id : tokens)
    if (id < 0 || id >= params.config.vocab_size)
      throw TokenOutOfRange("forward: token " + std::to_string(id) + " out of range");
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
  return forward_packed(params, tokens, positions, 1, static_cast<Index>(tokens.size()), {}, trace);
}

double logprob_of_continuation(const ModelParams& params, const std::vector<int>& prefix,
                               const std::vector<int>& continuation) {
  if (prefix.empty()) throw SequenceTooLong("logprob_of_continuation: prefix must be nonempty");
  if (continuation.empty()) return 0.0;
  std::vector<int> tokens = prefix;
  tokens.insert(tokens.end(), continuation.begin(), continuation.end());
  if (static_cast<Index>(tokens.size()) > params.config.max_seq_len)
    throw SequenceTooLong("logprob_of_continuation: combined length exceeds max_seq_len");
  const Tensor32 logits = forward(params, tokens);
  const Index v = logits.cols();
  double total = 0.0;
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    const Index row = static_cast<Index>(prefix.size() + t) - 1;
    const float* r = logits.data() + row * v;
    double mx = r[0];
    for (Index c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(r[c]));
    double denom = 0.0;
    for (Index c = 0; c < v; ++c) denom += std::exp(static_cast<double>(r[c]) - mx);
    total += static_cast<double>(r[continuation[t]]) - mx - std::log(denom);
  }
  return total;
}

namespace {

constexpr const char* kMagic = "IPLCKPT1";
constexpr int kFormatVersion = 1;

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
              {"d_model", c.d_model},     {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"positional", c.positional}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.positional = j.at("positional").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw IncompatibleCheckpoint(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

void write_f32_le(std::string& out, const float* data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(data[i]);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
  }
}

void read_f32_le(const char* in, float* data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(in + 4 * i);
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    data[i] = std::bit_cast<float>(bits);
  }
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = config_to_json(params.config);
  json tensors = json::array();
  Index offset = 0;
  const auto named = params.named();
  std::string blob;
  for (const auto& nt : named) {
    tensors.push_back(json{{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset},
                           {"count", nt.tensor->numel()}});
    write_f32_le(blob, nt.tensor->data(), static_cast<std::size_t>(nt.tensor->numel()));
    offset += nt.tensor->numel();
  }
  manifest["tensors"] = std::move(tensors);
  manifest["total_count"] = offset;
  const std::string text = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("save_checkpoint: cannot open " + path);
  f << kMagic << ' ' << text.size() << '\n' << text;
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw IoFailure("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("load_checkpoint: cannot open " + path);
  std::string magic;
  std::size_t manifest_bytes = 0;
  f >> magic >> manifest_bytes;
  if (magic != kMagic) throw IncompatibleCheckpoint("load_checkpoint: bad magic '" + magic + "'");
  f.get();  // newline
  std::string text(manifest_bytes, '\0');
  f.read(text.data(), static_cast<std::streamsize>(manifest_bytes));
  if (!f) throw IncompatibleCheckpoint("load_checkpoint: truncated manifest");

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw IncompatibleCheckpoint(std::string("load_checkpoint: manifest parse: ") + e.what());
  }
  if (manifest.value("format_version", -1) != kFormatVersion)
    throw IncompatibleCheckpoint("load_checkpoint: unsupported format version");

  ModelParams p = init_params(config_from_json(manifest.at("config")));
  const Index total = manifest.at("total_count").get<Index>();
  std::string blob(static_cast<std::size_t>(total) * 4, '\0');
  f.read(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw IncompatibleCheckpoint("load_checkpoint: truncated blob");

  auto named = p.named();
  const json& tensors = manifest.at("tensors");
  if (tensors.size() != named.size())
    throw IncompatibleCheckpoint("load_checkpoint: tensor table size mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const json& t = tensors[i];
    if (t.at("name").get<std::string>() != named[i].name)
      throw IncompatibleCheckpoint("load_checkpoint: tensor name mismatch at index " + std::to_string(i));
    if (t.at("shape").get<nn::Shape>() != named[i].tensor->shape())
      throw IncompatibleCheckpoint("load_checkpoint: shape mismatch for " + named[i].name);
    const Index offset = t.at("offset").get<Index>();
    const Index count = t.at("count").get<Index>();
    if (count != named[i].tensor->numel() || offset + count > total)
      throw IncompatibleCheckpoint("load_checkpoint: bad offsets for " + named[i].name);
    read_f32_le(blob.data() + offset * 4, named[i].tensor->data(), static_cast<std::size_t>(count));
  }
  return p;
}

}  // namespace ipl::model
