#include <benchmark/benchmark.h>

#include <vector>

#include "ipl/data.hpp"
#include "ipl/engine.hpp"
#include "ipl/model.hpp"
#include "ipl/ops.hpp"
#include "ipl/rng.hpp"

namespace {

ipl::nn::Tensor32 random_matrix(ipl::nn::Index rows, ipl::nn::Index cols, std::uint64_t seed) {
  ipl::nn::Tensor32 t({rows, cols});
  ipl::Rng rng(seed);
  for (ipl::nn::Index i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal());
  return t;
}

void bm_matmul(benchmark::State& state) {
  const ipl::nn::Index n = state.range(0);
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  for (auto _ : state) {
    auto c = ipl::nn::matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(128)->Arg(256)->Arg(512);

void bm_causal_attention(benchmark::State& state) {
  const ipl::nn::Index seq_len = state.range(0);
  const ipl::nn::Index d = 128;
  const auto qkv = random_matrix(seq_len, 3 * d, 3);
  for (auto _ : state) {
    auto out = ipl::nn::causal_attention(qkv, 4, 1, seq_len, {});
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * seq_len);
}
BENCHMARK(bm_causal_attention)->Arg(64)->Arg(128)->Arg(256);

void bm_forward(benchmark::State& state) {
  const int seq_len = static_cast<int>(state.range(0));
  ipl::model::ModelConfig cfg;
  cfg.vocab_size = 52;
  cfg.seed = 7;
  const auto params = ipl::model::init_params(cfg);
  std::vector<int> tokens(static_cast<std::size_t>(seq_len));
  ipl::Rng rng(11);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1));
  for (auto _ : state) {
    auto logits = ipl::model::forward(params, tokens);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(state.iterations() * seq_len);
}
BENCHMARK(bm_forward)->Arg(64)->Arg(128)->Arg(256);

void bm_train_step(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  ipl::model::ModelConfig cfg;
  cfg.vocab_size = 52;
  cfg.seed = 7;
  auto params = ipl::model::init_params(cfg);

  const auto vocab = ipl::data::Vocab::synthetic(20);
  std::vector<ipl::data::TaskSpec> specs{{ipl::data::TaskFamily::Copy, 0, 20},
                                         {ipl::data::TaskFamily::Reverse, 0, 20}};
  const auto corpus = ipl::data::generate(specs, batch, 32, 32, 5, vocab, cfg.max_seq_len);
  std::vector<const ipl::data::FormattedSequence*> seqs;
  std::vector<ipl::data::FormattedSequence> owned;
  owned.reserve(corpus.size());
  for (const auto& ex : corpus)
    owned.push_back(ipl::data::format_example(ex, ipl::data::FormatMode::PostIns, vocab, cfg.max_seq_len));
  for (const auto& s : owned) seqs.push_back(&s);
  const auto b = ipl::engine::make_batch(seqs, ipl::engine::PadSide::Right, vocab.pad());

  ipl::engine::TrainConfig tc;
  tc.steps = 1;
  ipl::engine::AdamState state_adam;
  int t = 0;
  for (auto _ : state) {
    ipl::nn::Tape32 tape;
    auto tracked = ipl::model::tracked_params(params, tape);
    auto logits = ipl::model::forward_packed(tracked, b.ids, b.positions, b.batch, b.seq_len, b.row_valid);
    auto loss = ipl::nn::weighted_cross_entropy(logits, b.targets, b.weights);
    tape.backward(loss);
    auto named = tracked.named();
    std::vector<std::vector<float>*> grads;
    grads.reserve(named.size());
    for (auto& nt : named) grads.push_back(&tape.grad_buffer(nt.tensor->node()));
    ipl::engine::adam_step(params, grads, state_adam, ++t, tc);
    benchmark::DoNotOptimize(params.tok_emb.data());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(bm_train_step)->Arg(8)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
