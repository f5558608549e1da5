#include "ipl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ipl/ops.hpp"
#include "ipl/rng.hpp"

namespace ipl::engine {

const char* pad_side_name(PadSide side) { return side == PadSide::Left ? "left" : "right"; }

PadSide pad_side_from_name(const std::string& name) {
  if (name == "left") return PadSide::Left;
  if (name == "right") return PadSide::Right;
  throw ManifestError("pad_side_from_name: expected 'left' or 'right', got '" + name + "'");
}

void TrainConfig::validate() const {
  if (steps < 1) throw ManifestError("TrainConfig: steps must be >= 1");
  if (batch_size < 1) throw ManifestError("TrainConfig: batch_size must be >= 1");
  if (lr < 0) throw ManifestError("TrainConfig: lr must be >= 0");
  if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
    throw ManifestError("TrainConfig: betas must lie in (0, 1)");
  if (adam_eps <= 0) throw ManifestError("TrainConfig: adam_eps must be positive");
  if (warmup_steps < 0) throw ManifestError("TrainConfig: warmup_steps must be >= 0");
  if (grad_clip_norm < 0) throw ManifestError("TrainConfig: grad_clip_norm must be >= 0");
  if (checkpoint_every < 1) throw ManifestError("TrainConfig: checkpoint_every must be >= 1");
}

double lr_at(const TrainConfig& config, int t) {
  if (config.warmup_steps > 0 && t < config.warmup_steps)
    return config.lr * static_cast<double>(t) / config.warmup_steps;
  return config.lr;
}

Batch make_batch(const std::vector<const data::FormattedSequence*>& seqs, PadSide pad_side,
                 int pad_id) {
  if (seqs.empty()) throw TooFewExamples("make_batch: empty batch");
  Index seq_len = 0;
  for (const auto* s : seqs) seq_len = std::max(seq_len, static_cast<Index>(s->ids.size()));

  Batch b;
  b.batch = static_cast<Index>(seqs.size());
  b.seq_len = seq_len;
  const std::size_t n = static_cast<std::size_t>(b.batch * seq_len);
  b.ids.assign(n, pad_id);
  b.positions.assign(n, 0);
  b.row_valid.assign(n, 0);
  b.targets.assign(n, pad_id);
  b.weights.assign(n, 0.0f);

  for (Index e = 0; e < b.batch; ++e) {
    const data::FormattedSequence& s = *seqs[static_cast<std::size_t>(e)];
    const Index len = static_cast<Index>(s.ids.size());
    const Index offset = pad_side == PadSide::Right ? 0 : seq_len - len;
    Index supervised = 0;
    for (Index i = 1; i < len; ++i)
      if (s.loss_mask[static_cast<std::size_t>(i)]) ++supervised;
    if (supervised == 0) throw EmptyMask("make_batch: sequence with no supervised positions");
    // Every supervised token weighs 1: the objective is the per-token mean,
    // so long responses get gradient in proportion to their length.
    const float w = 1.0f;
    for (Index i = 0; i < len; ++i) {
      const std::size_t row = static_cast<std::size_t>(e * seq_len + offset + i);
      b.ids[row] = s.ids[static_cast<std::size_t>(i)];
      b.positions[row] = static_cast<int>(i);
      b.row_valid[row] = 1;
      if (i + 1 < len) {
        b.targets[row] = s.ids[static_cast<std::size_t>(i + 1)];
        if (s.loss_mask[static_cast<std::size_t>(i + 1)]) b.weights[row] = w;
      }
    }
  }
  return b;
}

void adam_step(model::ModelParams& params, const std::vector<std::vector<float>*>& grads,
               AdamState& state, int t, const TrainConfig& config) {
  auto named = params.named();
  if (grads.size() != named.size())
    throw ShapeMismatch("adam_step: gradient list does not match parameter list");
  if (state.m.empty()) {
    state.m.resize(named.size());
    state.v.resize(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
      state.m[i].assign(static_cast<std::size_t>(named[i].tensor->numel()), 0.0);
      state.v[i].assign(static_cast<std::size_t>(named[i].tensor->numel()), 0.0);
    }
  }
  const double lr = lr_at(config, t);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < named.size(); ++i) {
    nn::Tensor32& p = *named[i].tensor;
    const std::vector<float>& g = *grads[i];
    if (static_cast<Index>(g.size()) != p.numel())
      throw ShapeMismatch("adam_step: gradient shape mismatch for " + named[i].name);
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double gj = g[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[static_cast<Index>(j)] =
          static_cast<float>(p[static_cast<Index>(j)] - lr * mh / (std::sqrt(vh) + config.adam_eps));
    }
  }
}

namespace {

// Deterministic epoch order: shuffle, group by length to limit padding,
// then shuffle the batch order.
std::vector<std::vector<int>> epoch_batches(std::size_t n_examples,
                                            const std::vector<data::FormattedSequence>& corpus,
                                            int batch_size, std::uint64_t epoch_seed) {
  std::vector<int> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = static_cast<int>(i);
  Rng rng(epoch_seed);
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return corpus[static_cast<std::size_t>(a)].ids.size() < corpus[static_cast<std::size_t>(b)].ids.size();
  });
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  rng.shuffle(batches);
  return batches;
}

}  // namespace

TrainResult train(const model::ModelConfig& model_config, const model::ModelParams& init,
                  const std::vector<data::FormattedSequence>& corpus, const TrainConfig& config) {
  config.validate();
  if (corpus.empty()) throw TooFewExamples("train: empty corpus");
  for (const auto& s : corpus)
    if (static_cast<int>(s.ids.size()) > model_config.max_seq_len)
      throw SequenceTooLong("train: corpus sequence exceeds max_seq_len");

  TrainResult result;
  result.params = init.deep_clone();
  result.loss_curve.reserve(static_cast<std::size_t>(config.steps));

  model::ModelParams snapshot = result.params.deep_clone();
  int snapshot_step = 0;
  AdamState state;
  AdamState snapshot_state;

  std::vector<std::vector<int>> batches;
  std::size_t next_batch = 0;
  std::uint64_t epoch = 0;

  for (int t = 1; t <= config.steps; ++t) {
    if (next_batch >= batches.size()) {
      batches = epoch_batches(corpus.size(), corpus, config.batch_size, derive_seed(config.seed, epoch));
      next_batch = 0;
      ++epoch;
    }
    std::vector<const data::FormattedSequence*> seqs;
    for (int idx : batches[next_batch]) seqs.push_back(&corpus[static_cast<std::size_t>(idx)]);
    ++next_batch;
    Batch batch = make_batch(seqs, config.pad_side, 0);

    nn::Tape32 tape;
    model::ModelParams tracked = model::tracked_params(result.params, tape);
    nn::Tensor32 logits = model::forward_packed(tracked, batch.ids, batch.positions, batch.batch,
                                                batch.seq_len, batch.row_valid);
    nn::Tensor32 loss = nn::weighted_cross_entropy(logits, batch.targets, batch.weights);
    const double loss_value = static_cast<double>(loss.scalar_value());
    double weight_total = 0.0;
    for (float w : batch.weights) weight_total += static_cast<double>(w);
    result.loss_curve.push_back(loss_value / weight_total);

    if (!std::isfinite(loss_value)) {
      result.params = snapshot.deep_clone();
      state = snapshot_state;
      result.diverged = true;
      result.steps_completed = snapshot_step;
      return result;
    }

    tape.backward(loss);
    auto named = tracked.named();
    std::vector<std::vector<float>*> grads;
    grads.reserve(named.size());
    for (auto& nt : named) grads.push_back(&tape.grad_buffer(nt.tensor->node()));

    if (config.grad_clip_norm > 0) {
      double sq = 0.0;
      for (const auto* g : grads)
        for (float x : *g) sq += static_cast<double>(x) * static_cast<double>(x);
      const double norm = std::sqrt(sq);
      if (norm > config.grad_clip_norm) {
        const float scale = static_cast<float>(config.grad_clip_norm / norm);
        for (auto* g : grads)
          for (float& x : *g) x *= scale;
      }
    }

    adam_step(result.params, grads, state, t, config);
    result.steps_completed = t;

    if (t % config.checkpoint_every == 0 || t == config.steps) {
      snapshot = result.params.deep_clone();
      snapshot_state = state;
      snapshot_step = t;
      if (!config.checkpoint_dir.empty()) {
        const std::string path = config.checkpoint_dir + "/ckpt_step" + std::to_string(t) + ".ipl";
        model::save_checkpoint(result.params, path);
        result.checkpoint_paths.push_back(path);
      }
    }
  }
  return result;
}

void write_loss_curve(const std::vector<double>& curve, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_loss_curve: cannot open " + path);
  f << "step,loss\n";
  std::ostringstream line;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    line.str("");
    line.precision(17);
    line << (i + 1) << ',' << curve[i] << '\n';
    f << line.str();
  }
  if (!f) throw IoFailure("write_loss_curve: write failed for " + path);
}

StepFn model_step(const model::ModelParams& params) {
  const model::ModelParams* p = &params;
  return [p](const std::vector<int>& tokens) {
    const nn::Tensor32 logits = model::forward(*p, tokens);
    const Index v = logits.cols();
    const Index last = logits.rows() - 1;
    std::vector<double> out(static_cast<std::size_t>(v));
    for (Index c = 0; c < v; ++c) out[static_cast<std::size_t>(c)] = logits(last, c);
    return out;
  };
}

namespace {

void check_decode_args(const std::vector<int>& prompt, int max_new, int max_total) {
  if (prompt.empty()) throw SequenceTooLong("decode: prompt must be nonempty");
  if (max_new < 0) throw SequenceTooLong("decode: max_new must be >= 0");
  if (static_cast<int>(prompt.size()) + max_new > max_total)
    throw SequenceTooLong("decode: prompt length + max_new exceeds the sequence limit");
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double denom = 0.0;
  for (double x : logits) denom += std::exp(x - mx);
  const double lse = mx + std::log(denom);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

}  // namespace

std::vector<int> greedy_decode(const StepFn& step, const std::vector<int>& prompt, int max_new,
                               int eos_id, int max_total) {
  check_decode_args(prompt, max_new, max_total);
  std::vector<int> tokens = prompt;
  std::vector<int> generated;
  for (int n = 0; n < max_new; ++n) {
    const std::vector<double> logits = step(tokens);
    int best = 0;
    for (int c = 1; c < static_cast<int>(logits.size()); ++c)
      if (logits[static_cast<std::size_t>(c)] > logits[static_cast<std::size_t>(best)]) best = c;
    generated.push_back(best);
    tokens.push_back(best);
    if (best == eos_id) break;
  }
  return generated;
}

std::vector<int> greedy_decode(const model::ModelParams& params, const std::vector<int>& prompt,
                               int max_new, int eos_id) {
  return greedy_decode(model_step(params), prompt, max_new, eos_id, params.config.max_seq_len);
}

namespace {

double length_normalized(double logprob, std::size_t len, double alpha) {
  if (alpha == 0.0 || len == 0) return logprob;
  return logprob / std::pow(static_cast<double>(len), alpha);
}

bool hyp_better(double score_a, const std::vector<int>& a, double score_b,
                const std::vector<int>& b) {
  if (score_a != score_b) return score_a > score_b;
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

BeamResult beam_search(const StepFn& step, const std::vector<int>& prompt, int beam, int max_new,
                       double length_alpha, int eos_id, int max_total) {
  if (beam < 1) throw SequenceTooLong("beam_search: beam must be >= 1");
  if (length_alpha < 0) throw SequenceTooLong("beam_search: length_alpha must be >= 0");
  check_decode_args(prompt, max_new, max_total);

  struct Hyp {
    std::vector<int> ids;
    double logprob = 0.0;
  };
  std::vector<Hyp> live{{{}, 0.0}};
  std::vector<BeamHypothesis> finished;

  auto finished_score = [&](const Hyp& h) { return length_normalized(h.logprob, h.ids.size(), length_alpha); };

  for (int n = 0; n < max_new && !live.empty(); ++n) {
    struct Cand {
      std::vector<int> ids;
      double logprob;
      double score;
    };
    std::vector<Cand> cands;
    for (const Hyp& h : live) {
      std::vector<int> tokens = prompt;
      tokens.insert(tokens.end(), h.ids.begin(), h.ids.end());
      const std::vector<double> lp = log_softmax(step(tokens));
      cands.reserve(cands.size() + lp.size());
      for (int c = 0; c < static_cast<int>(lp.size()); ++c) {
        Cand cand;
        cand.ids = h.ids;
        cand.ids.push_back(c);
        cand.logprob = h.logprob + lp[static_cast<std::size_t>(c)];
        cand.score = length_normalized(cand.logprob, cand.ids.size(), length_alpha);
        cands.push_back(std::move(cand));
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::lexicographical_compare(a.ids.begin(), a.ids.end(), b.ids.begin(), b.ids.end());
    });

    live.clear();
    for (const Cand& cand : cands) {
      if (static_cast<int>(live.size()) >= beam) break;
      if (cand.ids.back() == eos_id)
        finished.push_back({cand.ids, cand.logprob, cand.score, true});
      else
        live.push_back({cand.ids, cand.logprob});
    }
    // Keep at most `beam` retired hypotheses, best first.
    std::sort(finished.begin(), finished.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
      return hyp_better(a.score, a.ids, b.score, b.ids);
    });
    if (static_cast<int>(finished.size()) > beam) finished.resize(static_cast<std::size_t>(beam));

    if (!finished.empty() && !live.empty()) {
      // Optimistic bound: the best score any extension of a live hypothesis
      // could reach (logprob never increases; normalization uses the most
      // favorable admissible length).
      double best_live = -std::numeric_limits<double>::infinity();
      for (const Hyp& h : live) {
        double optimistic = h.logprob;
        if (length_alpha > 0) {
          const std::size_t best_len =
              h.logprob < 0 ? std::max(h.ids.size(), static_cast<std::size_t>(max_new))
                            : std::max<std::size_t>(h.ids.size(), 1);
          optimistic = length_normalized(h.logprob, best_len, length_alpha);
        }
        best_live = std::max(best_live, optimistic);
      }
      if (best_live <= finished.front().score) break;
    }
  }

  // Final selection over finished plus whatever is still live (covers
  // max_new exhaustion with nothing finished, and max_new == 0).
  std::vector<BeamHypothesis> pool = finished;
  for (const Hyp& h : live)
    pool.push_back({h.ids, h.logprob, finished_score(h), false});
  std::sort(pool.begin(), pool.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    return hyp_better(a.score, a.ids, b.score, b.ids);
  });
  if (static_cast<int>(pool.size()) > beam) pool.resize(static_cast<std::size_t>(beam));

  BeamResult result;
  result.ids = pool.front().ids;
  result.logprob = pool.front().logprob;
  result.score = pool.front().score;
  result.beam = std::move(pool);
  return result;
}

BeamResult beam_search(const model::ModelParams& params, const std::vector<int>& prompt, int beam,
                       int max_new, double length_alpha, int eos_id) {
  return beam_search(model_step(params), prompt, beam, max_new, length_alpha, eos_id,
                     params.config.max_seq_len);
}

std::vector<int> sample_decode(const StepFn& step, const std::vector<int>& prompt,
                               double temperature, std::uint64_t seed, int max_new, int eos_id,
                               int max_total) {
  if (temperature <= 0) throw SequenceTooLong("sample_decode: temperature must be positive");
  check_decode_args(prompt, max_new, max_total);
  Rng rng(seed);
  std::vector<int> tokens = prompt;
  std::vector<int> generated;
  for (int n = 0; n < max_new; ++n) {
    std::vector<double> logits = step(tokens);
    for (double& x : logits) x /= temperature;
    const std::vector<double> lp = log_softmax(logits);
    const double u = rng.uniform();
    double cdf = 0.0;
    int pick = static_cast<int>(lp.size()) - 1;
    for (std::size_t c = 0; c < lp.size(); ++c) {
      cdf += std::exp(lp[c]);
      if (u < cdf) {
        pick = static_cast<int>(c);
        break;
      }
    }
    generated.push_back(pick);
    tokens.push_back(pick);
    if (pick == eos_id) break;
  }
  return generated;
}

std::vector<int> sample_decode(const model::ModelParams& params, const std::vector<int>& prompt,
                               double temperature, std::uint64_t seed, int max_new, int eos_id) {
  return sample_decode(model_step(params), prompt, temperature, seed, max_new, eos_id,
                       params.config.max_seq_len);
}

}  // namespace ipl::engine
