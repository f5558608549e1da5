#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "ipl/model.hpp"
#include "ipl/ops.hpp"
#include "ipl/rng.hpp"
#include "test_support.hpp"

using namespace ipl;
using nn::Index;
using nn::Tensor32;
using testing::bitwise_equal;
using testing::tiny_model_config;

namespace {

model::ModelConfig small_config() {
  auto c = tiny_model_config(20);
  c.seed = 5;
  return c;
}

std::vector<int> ramp_tokens(int n, int vocab) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = (i * 7 + 3) % vocab;
  return t;
}

}  // namespace

TEST_CASE("init_params is bitwise deterministic in the seed") {
  auto a = model::init_params(small_config());
  auto b = model::init_params(small_config());
  auto na = a.named(), nb = b.named();
  REQUIRE(na.size() == nb.size());
  for (std::size_t i = 0; i < na.size(); ++i)
    CHECK(bitwise_equal(na[i].tensor->vec(), nb[i].tensor->vec()));

  auto cfg = small_config();
  cfg.seed = 6;
  auto c = model::init_params(cfg);
  CHECK_FALSE(bitwise_equal(a.tok_emb.vec(), c.tok_emb.vec()));
}

TEST_CASE("named parameter audit: count, order, shapes") {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.vocab_size = 52;
  auto params = model::init_params(cfg);
  auto named = params.named();
  CHECK(named.size() == 2 + 12 * 2 + 2);
  CHECK(named[0].name == "tok_emb");
  CHECK(named[1].name == "pos_emb");
  CHECK(named[2].name == "layer0.ln1.gain");
  CHECK(named.back().name == "final_norm.bias");
  CHECK(named[0].tensor->rows() == 52);
  CHECK(named[0].tensor->cols() == 128);
  CHECK(named[1].tensor->rows() == 512);

  // Residual projections are initialized tighter than the base std.
  auto stddev = [](const Tensor32& t) {
    double mean = 0;
    for (Index i = 0; i < t.numel(); ++i) mean += t[i];
    mean /= static_cast<double>(t.numel());
    double var = 0;
    for (Index i = 0; i < t.numel(); ++i) var += (t[i] - mean) * (t[i] - mean);
    return std::sqrt(var / static_cast<double>(t.numel()));
  };
  CHECK(stddev(params.tok_emb) == doctest::Approx(0.02).epsilon(0.1));
  CHECK(stddev(params.layers[0].w_out) == doctest::Approx(0.02 / std::sqrt(4.0)).epsilon(0.1));
  CHECK(stddev(params.layers[0].w_ff2) == doctest::Approx(0.02 / std::sqrt(4.0)).epsilon(0.1));
}

TEST_CASE("config validation rejects bad head splits and schemes") {
  auto cfg = small_config();
  cfg.n_heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), ShapeMismatch);
  cfg = small_config();
  cfg.positional = "rotary";
  CHECK_THROWS_AS(cfg.validate(), ShapeMismatch);
  cfg = small_config();
  cfg.vocab_size = 0;
  CHECK_THROWS_AS(model::init_params(cfg), ShapeMismatch);
}

TEST_CASE("forward is causal: future perturbations leave earlier logits bit-identical") {
  auto params = model::init_params(small_config());
  auto tokens = ramp_tokens(8, 20);
  auto base = model::forward(params, tokens);

  auto poked = tokens;
  poked[5] = (poked[5] + 9) % 20;
  auto out = model::forward(params, poked);

  REQUIRE(base.rows() == out.rows());
  const Index v = base.cols();
  for (Index r = 0; r < 5; ++r)
    CHECK(std::memcmp(base.data() + r * v, out.data() + r * v, static_cast<std::size_t>(v) * sizeof(float)) == 0);
  // And the perturbed position itself must change.
  CHECK(std::memcmp(base.data() + 5 * v, out.data() + 5 * v, static_cast<std::size_t>(v) * sizeof(float)) != 0);
}

TEST_CASE("forward handles a single token and rejects bad inputs") {
  auto params = model::init_params(small_config());
  auto one = model::forward(params, {3});
  CHECK(one.rows() == 1);
  CHECK(one.cols() == 20);

  CHECK_THROWS_AS(model::forward(params, {}), SequenceTooLong);
  CHECK_THROWS_AS(model::forward(params, {20}), TokenOutOfRange);
  std::vector<int> too_long(65, 1);
  CHECK_THROWS_AS(model::forward(params, too_long), SequenceTooLong);
}

TEST_CASE("attention trace matches config shape and rows sum to one") {
  auto params = model::init_params(small_config());
  auto tokens = ramp_tokens(6, 20);
  model::AttentionTrace trace;
  model::forward(params, tokens, &trace);
  REQUIRE(trace.layers.size() == 1);
  REQUIRE(trace.layers[0].size() == 2);
  CHECK(trace.seq_len == 6);
  for (const auto& head : trace.layers[0]) {
    REQUIRE(head.size() == 36);
    for (int r = 0; r < 6; ++r) {
      double total = 0;
      for (int c = 0; c < 6; ++c) {
        if (c > r) CHECK(head[static_cast<std::size_t>(r * 6 + c)] == 0.0f);
        total += head[static_cast<std::size_t>(r * 6 + c)];
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("packed forward with per-example positions matches the unpadded pass") {
  auto params = model::init_params(small_config());
  auto tokens = ramp_tokens(5, 20);
  auto plain = model::forward(params, tokens);

  // Same sequence right-padded to length 8 inside a batch of one.
  const Index seq = 8;
  std::vector<int> ids(static_cast<std::size_t>(seq), 0);
  std::vector<int> positions(static_cast<std::size_t>(seq), 0);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(seq), 0);
  for (int i = 0; i < 5; ++i) {
    ids[static_cast<std::size_t>(i)] = tokens[static_cast<std::size_t>(i)];
    positions[static_cast<std::size_t>(i)] = i;
    valid[static_cast<std::size_t>(i)] = 1;
  }
  auto padded = model::forward_packed(params, ids, positions, 1, seq, valid);
  const Index v = plain.cols();
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < v; ++c)
      CHECK(plain(r, c) == doctest::Approx(padded(r, c)).epsilon(2e-5));

  CHECK_THROWS_AS(
      model::forward_packed(params, ids, std::vector<int>(8, 64), 1, seq, valid),
      SequenceTooLong);  // position beyond the table
}

TEST_CASE("logprob_of_continuation equals a manual log-softmax walk") {
  auto params = model::init_params(small_config());
  std::vector<int> prefix{1, 4, 9};
  std::vector<int> cont{2, 7};

  std::vector<int> full = prefix;
  full.insert(full.end(), cont.begin(), cont.end());
  auto logits = model::forward(params, full);
  double expected = 0;
  for (std::size_t i = 0; i < cont.size(); ++i) {
    const Index row = static_cast<Index>(prefix.size() + i) - 1;
    double mx = -1e300;
    for (Index c = 0; c < logits.cols(); ++c) mx = std::max(mx, static_cast<double>(logits(row, c)));
    double z = 0;
    for (Index c = 0; c < logits.cols(); ++c) z += std::exp(static_cast<double>(logits(row, c)) - mx);
    expected += static_cast<double>(logits(row, cont[i])) - mx - std::log(z);
  }
  CHECK(model::logprob_of_continuation(params, prefix, cont) ==
        doctest::Approx(expected).epsilon(1e-9));
  CHECK(model::logprob_of_continuation(params, prefix, {}) == 0.0);
}

TEST_CASE("tracked_params records gradients for every tensor") {
  auto params = model::init_params(small_config());
  nn::Tape32 tape;
  auto tracked = model::tracked_params(params, tape);
  auto tokens = ramp_tokens(6, 20);
  std::vector<int> positions{0, 1, 2, 3, 4, 5};
  auto logits = model::forward_packed(tracked, tokens, positions, 1, 6, {});
  std::vector<int> targets(6, 2);
  std::vector<std::uint8_t> mask(6, 1);
  auto loss = nn::cross_entropy_masked(logits, targets, mask);
  tape.backward(loss);

  auto named = tracked.named();
  int live = 0;
  for (auto& nt : named) {
    const auto& g = tape.grad(*nt.tensor);
    double norm = 0;
    for (float x : g) norm += static_cast<double>(x) * x;
    if (norm > 0) ++live;
  }
  // pos_emb rows beyond position 5 never fire, but every tensor must get some signal.
  CHECK(live == static_cast<int>(named.size()));
}

TEST_CASE("checkpoints round-trip bitwise and reject tampering") {
  testing::TempDir tmp("ckpt");
  auto params = model::init_params(small_config());
  const std::string path = tmp.str("model.ipl");
  model::save_checkpoint(params, path);
  auto loaded = model::load_checkpoint(path);
  CHECK(loaded.config == params.config);
  auto na = params.named(), nb = loaded.named();
  REQUIRE(na.size() == nb.size());
  for (std::size_t i = 0; i < na.size(); ++i)
    CHECK(bitwise_equal(na[i].tensor->vec(), nb[i].tensor->vec()));

  auto bytes = testing::read_file_bytes(path);
  bytes[0] = 'J';
  {
    std::ofstream out(tmp.str("bad.ipl"), std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(model::load_checkpoint(tmp.str("bad.ipl")), IncompatibleCheckpoint);

  auto truncated = testing::read_file_bytes(path).substr(0, bytes.size() - 64);
  {
    std::ofstream out(tmp.str("short.ipl"), std::ios::binary);
    out << truncated;
  }
  CHECK_THROWS_AS(model::load_checkpoint(tmp.str("short.ipl")), IncompatibleCheckpoint);
  CHECK_THROWS_AS(model::load_checkpoint(tmp.str("missing.ipl")), IoFailure);
}

TEST_CASE("deep_clone detaches storage") {
  auto params = model::init_params(small_config());
  auto copy = params.deep_clone();
  copy.tok_emb[0] += 1.0f;
  CHECK(params.tok_emb[0] != copy.tok_emb[0]);
}
