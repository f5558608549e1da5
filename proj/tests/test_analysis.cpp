#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"
#include "ipl/analysis.hpp"
#include "ipl/data.hpp"
#include "ipl/engine.hpp"
#include "ipl/errors.hpp"
#include "ipl/metrics.hpp"
#include "ipl/model.hpp"
#include "ipl/rng.hpp"
#include "test_support.hpp"

using namespace ipl;
using ipl::testing::TempDir;
using ipl::testing::read_file_bytes;

namespace {

analysis::JointDistribution hand_joint_2x2x2(const std::vector<double>& p) {
  analysis::JointDistribution j;
  j.n_inst = 2;
  j.n_inp = 2;
  j.n_res = 2;
  j.p = p;
  return j;
}

}  // namespace

TEST_CASE("joint distribution: indexing, uniform marginals, validation") {
  auto u = analysis::JointDistribution::uniform(3, 4, 5);
  CHECK(u.p.size() == 60);
  CHECK(u.at(0, 0, 0) == doctest::Approx(1.0 / 60.0).epsilon(1e-14));
  // Row-major layout: at(i,j,k) = p[(i*n_inp + j)*n_res + k].
  u.at(2, 3, 4) = u.p[59];
  CHECK(&u.at(2, 3, 4) == &u.p[59]);
  CHECK(&u.at(0, 1, 0) == &u.p[5]);

  for (int i = 0; i < 3; ++i) CHECK(u.p_inst(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-13));
  for (int j = 0; j < 4; ++j) CHECK(u.p_inp(j) == doctest::Approx(1.0 / 4.0).epsilon(1e-13));
  for (int k = 0; k < 5; ++k) CHECK(u.p_res(k) == doctest::Approx(1.0 / 5.0).epsilon(1e-13));
  CHECK(u.p_inst_inp(1, 2) == doctest::Approx(1.0 / 12.0).epsilon(1e-13));
  CHECK(u.p_inp_res(3, 4) == doctest::Approx(1.0 / 20.0).epsilon(1e-13));
  CHECK(u.p_inst_res(0, 0) == doctest::Approx(1.0 / 15.0).epsilon(1e-13));

  auto bad_size = hand_joint_2x2x2({0.5, 0.5});  // 2 cells instead of 8
  CHECK_THROWS_AS(bad_size.validate(), ShapeMismatch);
  auto negative = hand_joint_2x2x2({0.5, 0.7, -0.2, 0.2,  0.2, 0.2, 0.2, 0.2});
  CHECK_THROWS_AS(negative.validate(), ZeroMassConditioning);
  auto off_mass = hand_joint_2x2x2({0.25, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0});
  CHECK_THROWS_AS(off_mass.validate(), ZeroMassConditioning);
}

TEST_CASE("joint distribution: seeded draws are deterministic and exactly normalized") {
  const auto a = analysis::JointDistribution::random(3, 5, 5, 99);
  const auto b = analysis::JointDistribution::random(3, 5, 5, 99);
  const auto c = analysis::JointDistribution::random(3, 5, 5, 100);
  CHECK(ipl::testing::bitwise_equal(a.p, b.p));
  CHECK_FALSE(ipl::testing::bitwise_equal(a.p, c.p));

  double mass = 0.0;
  double lo = 1.0;
  for (double x : a.p) {
    mass += x;
    lo = std::min(lo, x);
  }
  CHECK(std::abs(mass - 1.0) <= 1e-12);
  CHECK(lo > 0.0);  // Exp(1) draws are almost surely strictly positive
}

TEST_CASE("trinomial Bayes identity holds cell-exactly on random joints") {
  double worst = 0.0;
  for (int id = 0; id < 100; ++id) {
    const auto joint = analysis::JointDistribution::random(3, 5, 5, derive_seed(2024, static_cast<std::uint64_t>(id)));
    const analysis::BayesCheck check = analysis::verify_trinomial_bayes(joint);
    CHECK(check.checked == 75);
    CHECK(check.skipped == 0);
    worst = std::max(worst, check.max_error);
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("trinomial Bayes check skips zero-mass conditioning cells") {
  // All mass on inp == 0; the inp == 1 slice is unreachable.
  analysis::JointDistribution j;
  j.n_inst = 1;
  j.n_inp = 2;
  j.n_res = 2;
  j.p = {0.5, 0.5, 0.0, 0.0};
  const analysis::BayesCheck check = analysis::verify_trinomial_bayes(j);
  CHECK(check.checked == 2);
  CHECK(check.skipped == 2);
  CHECK(check.max_error < 1e-15);
}

TEST_CASE("decompose: factors reconstruct the conditional and match marginals") {
  const auto joint = analysis::JointDistribution::random(3, 4, 2, 7);
  for (int i = 0; i < joint.n_inst; ++i) {
    for (int j = 0; j < joint.n_inp; ++j) {
      for (int k = 0; k < joint.n_res; ++k) {
        const analysis::BayesDecomposition d = analysis::decompose(joint, i, j, k);
        const double rhs = d.fluency * d.inverse * d.instruct / (d.denom_inp * d.denom_inst_inp);
        CHECK(std::abs(d.lhs - rhs) < 1e-12);
        CHECK(d.lhs == doctest::Approx(joint.at(i, j, k) / joint.p_inst_inp(i, j)).epsilon(1e-13));
        CHECK(d.fluency == joint.p_res(k));
        CHECK(d.inverse == doctest::Approx(joint.p_inp_res(j, k) / joint.p_res(k)).epsilon(1e-13));
        CHECK(d.preins_coverage ==
              doctest::Approx(joint.at(i, j, k) / joint.p_inst_res(i, k)).epsilon(1e-13));
        CHECK(d.preins_denominator ==
              doctest::Approx(joint.p_inst_inp(i, j) / joint.p_inst(i)).epsilon(1e-13));
        CHECK(d.independence_gap ==
              doctest::Approx(std::abs(std::log(d.inverse) - std::log(d.denom_inp))).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("decompose: independence gap vanishes on a product joint") {
  // p(i,j,k) = a_i b_j c_k  =>  p(inp|res) == p(inp).
  const std::vector<double> a = {0.25, 0.75};
  const std::vector<double> b = {0.125, 0.375, 0.5};
  const std::vector<double> c = {0.5, 0.5};
  analysis::JointDistribution j;
  j.n_inst = 2;
  j.n_inp = 3;
  j.n_res = 2;
  for (double ai : a)
    for (double bj : b)
      for (double ck : c) j.p.push_back(ai * bj * ck);
  j.validate();
  for (int jj = 0; jj < 3; ++jj) {
    const analysis::BayesDecomposition d = analysis::decompose(j, 1, jj, 0);
    CHECK(d.independence_gap < 1e-12);
  }
}

TEST_CASE("decompose: zero-mass conditioning and bad indices throw") {
  // res == 1 never occurs.
  auto j = hand_joint_2x2x2({0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0});
  j.validate();
  CHECK_THROWS_AS(analysis::decompose(j, 0, 0, 1), ZeroMassConditioning);
  CHECK_NOTHROW(analysis::decompose(j, 0, 0, 0));
  CHECK_THROWS_AS(analysis::decompose(j, 2, 0, 0), ShapeMismatch);
  CHECK_THROWS_AS(analysis::decompose(j, 0, -1, 0), ShapeMismatch);
  CHECK_THROWS_AS(analysis::decompose(j, 0, 0, 2), ShapeMismatch);
}

TEST_CASE("aggregate_attention: unweighted mean over layers and heads at 64-bit") {
  model::AttentionTrace trace;
  trace.seq_len = 2;
  trace.layers = {{{1.0f, 0.0f, 0.25f, 0.75f}, {1.0f, 0.0f, 0.5f, 0.5f}}};
  const nn::Tensor avg = analysis::aggregate_attention(trace);
  CHECK(avg.rows() == 2);
  CHECK(avg.cols() == 2);
  CHECK(avg(0, 0) == 1.0);
  CHECK(avg(0, 1) == 0.0);  // causal zero preserved exactly
  CHECK(avg(1, 0) == 0.375);
  CHECK(avg(1, 1) == 0.625);

  model::AttentionTrace two_layers;
  two_layers.seq_len = 2;
  two_layers.layers = {{{1.0f, 0.0f, 0.5f, 0.5f}}, {{1.0f, 0.0f, 0.0f, 1.0f}}};
  const nn::Tensor avg2 = analysis::aggregate_attention(two_layers);
  CHECK(avg2(1, 0) == 0.25);
  CHECK(avg2(1, 1) == 0.75);
}

TEST_CASE("aggregate_attention: malformed traces throw") {
  model::AttentionTrace empty;
  CHECK_THROWS_AS(analysis::aggregate_attention(empty), SpanMismatch);

  model::AttentionTrace zero_len;
  zero_len.seq_len = 0;
  zero_len.layers = {{{1.0f}}};
  CHECK_THROWS_AS(analysis::aggregate_attention(zero_len), SpanMismatch);

  model::AttentionTrace no_heads;
  no_heads.seq_len = 2;
  no_heads.layers = {{}};
  CHECK_THROWS_AS(analysis::aggregate_attention(no_heads), SpanMismatch);

  model::AttentionTrace ragged;
  ragged.seq_len = 2;
  ragged.layers = {{{1.0f, 0.0f, 0.5f}}};  // 3 != 2*2
  CHECK_THROWS_AS(analysis::aggregate_attention(ragged), ShapeMismatch);
}

TEST_CASE("region_mass: hand-computed masses over the visible prefix") {
  const std::vector<data::Span> spans = {{data::Region::Template, 0, 2},
                                         {data::Region::Instruction, 2, 3},
                                         {data::Region::Input, 3, 4},
                                         {data::Region::Response, 4, 6}};
  nn::Tensor avg({6, 6});
  for (nn::Index i = 0; i < 36; ++i) avg[i] = 0.0;
  const double row4[6] = {0.125, 0.25, 0.0625, 0.25, 0.3125, 777.0};
  const double row5[6] = {0.0625, 0.0625, 0.125, 0.25, 0.25, 0.25};
  for (nn::Index j = 0; j < 6; ++j) {
    avg(4, j) = row4[j];
    avg(5, j) = row5[j];
  }

  const analysis::RegionMassTable table = analysis::region_mass(avg, spans);
  REQUIRE(table.rows.size() == 2);
  CHECK(table.rows[0].row == 4);
  CHECK(table.rows[1].row == 5);

  // Row 4 sees positions [0,4]; the sentinel at (4,5) must not leak in.
  CHECK(table.rows[0].on_template == 0.375);
  CHECK(table.rows[0].on_instruction == 0.0625);
  CHECK(table.rows[0].on_input == 0.25);
  CHECK(table.rows[0].on_response_prefix == 0.3125);

  // Row 5 sees the whole sequence, including its own position.
  CHECK(table.rows[1].on_template == 0.125);
  CHECK(table.rows[1].on_instruction == 0.125);
  CHECK(table.rows[1].on_input == 0.25);
  CHECK(table.rows[1].on_response_prefix == 0.5);

  CHECK(table.mean_template == 0.25);
  CHECK(table.mean_instruction == 0.09375);
  CHECK(table.mean_input == 0.25);
  CHECK(table.mean_response_prefix == 0.40625);
}

TEST_CASE("region_mass: the four masses partition each causal row total") {
  const std::vector<data::Span> spans = {{data::Region::Template, 0, 1},
                                         {data::Region::Instruction, 1, 3},
                                         {data::Region::Input, 3, 5},
                                         {data::Region::Response, 5, 7}};
  nn::Tensor avg({7, 7});
  Rng rng(31);
  for (nn::Index i = 0; i < 7; ++i) {
    double total = 0.0;
    for (nn::Index j = 0; j < 7; ++j) {
      avg(i, j) = j <= i ? 0.05 + rng.uniform() : 0.0;
      total += avg(i, j);
    }
    for (nn::Index j = 0; j <= i; ++j) avg(i, j) /= total;
  }
  const analysis::RegionMassTable table = analysis::region_mass(avg, spans);
  REQUIRE(table.rows.size() == 2);
  for (const analysis::RegionMassRow& r : table.rows) {
    const double total = r.on_template + r.on_instruction + r.on_input + r.on_response_prefix;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  const double mean_total = table.mean_template + table.mean_instruction + table.mean_input +
                            table.mean_response_prefix;
  CHECK(std::abs(mean_total - 1.0) < 1e-12);
}

TEST_CASE("region_mass: rejects non-square, non-tiling, and response-free spans") {
  nn::Tensor rect({2, 3});
  for (nn::Index i = 0; i < 6; ++i) rect[i] = 0.0;
  CHECK_THROWS_AS(analysis::region_mass(rect, {{data::Region::Response, 0, 2}}), ShapeMismatch);

  nn::Tensor sq({4, 4});
  for (nn::Index i = 0; i < 16; ++i) sq[i] = 0.0625;
  CHECK_THROWS_AS(analysis::region_mass(sq, {{data::Region::Template, 0, 1},
                                             {data::Region::Response, 2, 4}}),
                  SpanMismatch);  // hole at position 1
  CHECK_THROWS_AS(analysis::region_mass(sq, {{data::Region::Template, 0, 1},
                                             {data::Region::Response, 1, 3}}),
                  SpanMismatch);  // covers 3 of 4
  CHECK_THROWS_AS(analysis::region_mass(sq, {{data::Region::Template, 0, 2},
                                             {data::Region::Input, 2, 4}}),
                  SpanMismatch);  // no response span
}

TEST_CASE("decode_response: reproduces memorized responses and strips EOS") {
  const auto vocab = data::Vocab::synthetic(6);
  const data::TaskSpec copy{data::TaskFamily::Copy, 0, 6};
  const auto examples = data::generate({copy}, 8, 2, 3, 555, vocab, 64);

  auto config = ipl::testing::tiny_model_config(vocab.size());
  config.seed = 11;
  auto tc = ipl::testing::tiny_train_config(400, 8);
  tc.lr = 3e-3;
  tc.seed = 77;
  const auto corpus = ipl::testing::format_all(examples, data::FormatMode::PostIns, vocab, 64);
  const auto trained = engine::train(config, model::init_params(config), corpus, tc);
  REQUIRE_FALSE(trained.diverged);

  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto greedy_out = analysis::decode_response(trained.params, corpus[i], 1, vocab);
    CHECK(greedy_out == examples[i].res);  // EOS stripped, content exact
    const auto beam_out = analysis::decode_response(trained.params, corpus[i], 2, vocab);
    CHECK(beam_out == examples[i].res);
  }
}

TEST_CASE("decode_response: prompt filling the context window throws") {
  const auto vocab = data::Vocab::synthetic(6);
  const data::TaskSpec copy{data::TaskFamily::Copy, 0, 6};
  const auto examples = data::generate({copy}, 1, 2, 2, 9, vocab, 64);
  const auto seq = data::format_example(examples[0], data::FormatMode::PostIns, vocab, 64);

  auto config = ipl::testing::tiny_model_config(vocab.size());
  config.max_seq_len = static_cast<int>(seq.prompt().size());
  const auto params = model::init_params(config);
  CHECK_THROWS_AS(analysis::decode_response(params, seq, 1, vocab), SequenceTooLong);
}

TEST_CASE("instruction_identifiability: rank semantics and candidate-order invariance") {
  const auto vocab = data::Vocab::synthetic(6);
  const data::TaskSpec copy{data::TaskFamily::Copy, 0, 6};
  const data::TaskSpec rev{data::TaskFamily::Reverse, 0, 6};
  const data::TaskSpec shift2{data::TaskFamily::Shift, 2, 6};
  const auto examples = data::generate({copy}, 1, 3, 3, 21, vocab, 64);
  const data::Example& ex = examples[0];

  auto config = ipl::testing::tiny_model_config(vocab.size());
  config.seed = 5;
  const auto params = model::init_params(config);

  const std::vector<int> true_inst = ex.inst;
  const std::vector<int> rev_inst = rev.instruction_phrase(vocab);
  const std::vector<int> shift_inst = shift2.instruction_phrase(vocab);

  const int rank = analysis::instruction_identifiability(
      params, ex, {true_inst, rev_inst, shift_inst}, data::FormatMode::PostIns, vocab);
  CHECK(rank >= 1);
  CHECK(rank <= 3);

  const int permuted = analysis::instruction_identifiability(
      params, ex, {shift_inst, true_inst, rev_inst}, data::FormatMode::PostIns, vocab);
  CHECK(permuted == rank);

  // A duplicate of the true instruction scores equally and must not bump the rank.
  const int with_dup = analysis::instruction_identifiability(
      params, ex, {true_inst, rev_inst, shift_inst, true_inst}, data::FormatMode::PostIns, vocab);
  CHECK(with_dup == rank);

  CHECK_THROWS_AS(
      analysis::instruction_identifiability(params, ex, {}, data::FormatMode::PostIns, vocab),
      ManifestError);
  CHECK_THROWS_AS(analysis::instruction_identifiability(params, ex, {rev_inst, shift_inst},
                                                        data::FormatMode::PostIns, vocab),
                  ManifestError);
}

TEST_CASE("instruction_identifiability: trained model ranks the true instruction first") {
  const auto vocab = data::Vocab::synthetic(6);
  const data::TaskSpec copy{data::TaskFamily::Copy, 0, 6};
  const data::TaskSpec rev{data::TaskFamily::Reverse, 0, 6};
  const auto examples = data::generate({copy, rev}, 8, 2, 3, 313, vocab, 64);

  auto config = ipl::testing::tiny_model_config(vocab.size());
  config.seed = 3;
  auto tc = ipl::testing::tiny_train_config(400, 8);
  tc.lr = 3e-3;
  tc.seed = 19;
  const auto corpus = ipl::testing::format_all(examples, data::FormatMode::PostIns, vocab, 64);
  const auto trained = engine::train(config, model::init_params(config), corpus, tc);
  REQUIRE_FALSE(trained.diverged);

  const std::vector<std::vector<int>> cands = {copy.instruction_phrase(vocab),
                                               rev.instruction_phrase(vocab)};
  int top_ranked = 0;
  for (const auto& ex : examples) {
    // Skip palindromic inputs where copy and reverse coincide.
    if (ex.task.family == data::TaskFamily::Reverse && ex.inp == ex.res) continue;
    if (analysis::instruction_identifiability(trained.params, ex, cands,
                                              data::FormatMode::PostIns, vocab) == 1)
      ++top_ranked;
  }
  CHECK(top_ranked >= 6);
}

TEST_CASE("export_heatmap: CSV round-trips bitwise and outputs are byte-stable") {
  TempDir dir("heatmap");
  nn::Tensor m({4, 4});
  Rng rng(88);
  for (nn::Index i = 0; i < 16; ++i) m[i] = rng.uniform();
  m(0, 3) = 0.0;
  const std::vector<data::Span> spans = {{data::Region::Template, 0, 2},
                                         {data::Region::Response, 2, 4}};

  analysis::export_heatmap(m, spans, dir.str("h"));
  const nn::Tensor back = analysis::read_heatmap_csv(dir.str("h.csv"));
  REQUIRE(back.rows() == 4);
  REQUIRE(back.cols() == 4);
  for (nn::Index i = 0; i < 16; ++i) CHECK(back[i] == m[i]);

  const std::string csv1 = read_file_bytes(dir.str("h.csv"));
  const std::string svg1 = read_file_bytes(dir.str("h.svg"));
  analysis::export_heatmap(m, spans, dir.str("h"));
  CHECK(read_file_bytes(dir.str("h.csv")) == csv1);
  CHECK(read_file_bytes(dir.str("h.svg")) == svg1);

  CHECK(svg1.rfind("<svg", 0) == 0);
  CHECK(svg1.find("</svg>") != std::string::npos);
  CHECK(svg1.find("x1=\"2\"") != std::string::npos);   // span boundary at 2 marked
  CHECK(svg1.find("x2=\"0\"") == std::string::npos);   // no vertical line at begin 0
}

TEST_CASE("export_heatmap and read_heatmap_csv: failure modes") {
  TempDir dir("heatmap_err");
  nn::Tensor rect({2, 3});
  for (nn::Index i = 0; i < 6; ++i) rect[i] = 0.0;
  CHECK_THROWS_AS(analysis::export_heatmap(rect, {}, dir.str("r")), ShapeMismatch);

  nn::Tensor sq({2, 2});
  for (nn::Index i = 0; i < 4; ++i) sq[i] = 0.25;
  CHECK_THROWS_AS(analysis::export_heatmap(sq, {}, dir.str("no_such_dir/x")), IoFailure);

  CHECK_THROWS_AS(analysis::read_heatmap_csv(dir.str("missing.csv")), IoFailure);

  { std::ofstream f(dir.str("empty.csv"), std::ios::binary); }
  CHECK_THROWS_AS(analysis::read_heatmap_csv(dir.str("empty.csv")), IoFailure);

  {
    std::ofstream f(dir.str("ragged.csv"), std::ios::binary);
    f << "1.0,2.0\n3.0\n";
  }
  CHECK_THROWS_AS(analysis::read_heatmap_csv(dir.str("ragged.csv")), IoFailure);

  {
    std::ofstream f(dir.str("wide.csv"), std::ios::binary);
    f << "1.0,2.0\n";  // one row, two columns: not square
  }
  CHECK_THROWS_AS(analysis::read_heatmap_csv(dir.str("wide.csv")), IoFailure);
}

TEST_CASE("cross_bucket_eval: trains per bucket, labels cells, and is reproducible") {
  const auto vocab = data::Vocab::synthetic(5);
  const data::TaskSpec copy{data::TaskFamily::Copy, 0, 5};
  const std::vector<std::vector<data::Example>> train_buckets = {
      data::generate({copy}, 6, 2, 3, 41, vocab, 64),
      data::generate({copy}, 6, 4, 5, 42, vocab, 64)};
  const std::vector<std::vector<data::Example>> test_buckets = {
      data::generate({copy}, 3, 2, 3, 43, vocab, 64),
      data::generate({copy}, 3, 4, 5, 44, vocab, 64)};

  auto config = ipl::testing::tiny_model_config(vocab.size());
  config.seed = 17;
  auto tc = ipl::testing::tiny_train_config(25, 4);
  tc.seed = 23;

  const analysis::BucketMatrix matrix = analysis::cross_bucket_eval(
      train_buckets, test_buckets, config, tc, data::FormatMode::PostIns, vocab, {copy}, 1);
  REQUIRE(matrix.n == 2);
  CHECK(matrix.mode == data::FormatMode::PostIns);
  for (int tb = 0; tb < 2; ++tb) {
    for (int eb = 0; eb < 2; ++eb) {
      const analysis::BucketCell& cell = matrix.cells[tb][eb];
      CHECK_FALSE(cell.failed);
      CHECK(cell.report.format == "post");
      CHECK(cell.report.task == "all");
      CHECK(cell.report.cell ==
            "train_b" + std::to_string(tb) + "_test_b" + std::to_string(eb));
      CHECK(cell.report.n_examples == 3);
    }
  }

  TempDir dir("bucket");
  analysis::write_bucket_matrix(matrix, dir.str("m1.csv"));
  const analysis::BucketMatrix again = analysis::cross_bucket_eval(
      train_buckets, test_buckets, config, tc, data::FormatMode::PostIns, vocab, {copy}, 1);
  analysis::write_bucket_matrix(again, dir.str("m2.csv"));
  CHECK(read_file_bytes(dir.str("m1.csv")) == read_file_bytes(dir.str("m2.csv")));
}

TEST_CASE("cross_bucket_eval: bucket count misuse throws") {
  const auto vocab = data::Vocab::synthetic(5);
  const data::TaskSpec copy{data::TaskFamily::Copy, 0, 5};
  const auto some = data::generate({copy}, 2, 2, 3, 1, vocab, 64);
  const auto config = ipl::testing::tiny_model_config(vocab.size());
  const auto tc = ipl::testing::tiny_train_config(2, 2);

  CHECK_THROWS_AS(analysis::cross_bucket_eval({some}, {some}, config, tc,
                                              data::FormatMode::PreIns, vocab, {copy}, 1),
                  TooFewExamples);
  CHECK_THROWS_AS(analysis::cross_bucket_eval({some, some}, {some}, config, tc,
                                              data::FormatMode::PreIns, vocab, {copy}, 1),
                  TooFewExamples);
}

TEST_CASE("write_bucket_matrix: exact row format including failed cells") {
  analysis::BucketMatrix m;
  m.mode = data::FormatMode::PostIns;
  m.n = 1;
  m.cells.assign(1, std::vector<analysis::BucketCell>(1));
  analysis::BucketCell& c = m.cells[0][0];
  c.report.n_examples = 4;
  c.report.exact_match = 0.25;
  c.report.bleu = 59.46;
  c.report.rouge1 = 0.5;
  c.report.rouge2 = 0.25;
  c.report.rougeL = 0.75;
  c.report.faithful = 3;
  c.report.wrong_task = 1;
  c.report.hallucination = 0;

  TempDir dir("bm");
  analysis::write_bucket_matrix(m, dir.str("m.csv"));
  CHECK(read_file_bytes(dir.str("m.csv")) ==
        "mode,train_bucket,test_bucket,status,n_examples,exact_match,bleu,rouge1,rouge2,rougeL,"
        "faithful,wrong_task,hallucination\n"
        "post,0,0,ok,4,0.250000,59.460000,0.500000,0.250000,0.750000,3,1,0\n");

  m.mode = data::FormatMode::PreIns;
  m.cells[0][0] = analysis::BucketCell{};
  m.cells[0][0].failed = true;
  analysis::write_bucket_matrix(m, dir.str("f.csv"));
  CHECK(read_file_bytes(dir.str("f.csv")) ==
        "mode,train_bucket,test_bucket,status,n_examples,exact_match,bleu,rouge1,rouge2,rougeL,"
        "faithful,wrong_task,hallucination\n"
        "pre,0,0,failed,0,0.000000,0.000000,0.000000,0.000000,0.000000,0,0,0\n");

  CHECK_THROWS_AS(analysis::write_bucket_matrix(m, dir.str("no_such_dir/m.csv")), IoFailure);
}

TEST_CASE("write_region_mass: per-row lines then a mean line per table") {
  analysis::RegionMassTable t;
  t.rows = {{4, 0.125, 0.25, 0.5, 0.125}};
  t.mean_template = 0.125;
  t.mean_instruction = 0.25;
  t.mean_input = 0.5;
  t.mean_response_prefix = 0.125;

  TempDir dir("rm");
  analysis::write_region_mass({{"ex0", t}}, dir.str("r.csv"));
  CHECK(read_file_bytes(dir.str("r.csv")) ==
        "example,row,on_template,on_instruction,on_input,on_response_prefix\n"
        "ex0,4,0.125000,0.250000,0.500000,0.125000\n"
        "ex0,mean,0.125000,0.250000,0.500000,0.125000\n");
  CHECK_THROWS_AS(analysis::write_region_mass({{"x", t}}, dir.str("no_such_dir/r.csv")),
                  IoFailure);
}

TEST_CASE("write_bayes_identity and write_identifiability: exact formats") {
  TempDir dir("rows");
  analysis::write_bayes_identity({{3, 42, 0.5, 75, 0}}, dir.str("b.csv"));
  CHECK(read_file_bytes(dir.str("b.csv")) ==
        "joint_id,seed,max_error,checked,skipped\n"
        "3,42,0.5,75,0\n");

  analysis::write_identifiability({{7, "shift", 2, 12}}, dir.str("i.csv"));
  CHECK(read_file_bytes(dir.str("i.csv")) ==
        "example_id,task,rank,n_candidates\n"
        "7,shift,2,12\n");

  CHECK_THROWS_AS(analysis::write_bayes_identity({}, dir.str("no_such_dir/b.csv")), IoFailure);
  CHECK_THROWS_AS(analysis::write_identifiability({}, dir.str("no_such_dir/i.csv")), IoFailure);
}
