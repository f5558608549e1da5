#include "ipl/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

namespace ipl::metrics {

using json = nlohmann::ordered_json;

namespace {

using NgramCounts = std::map<std::vector<int>, std::int64_t>;

NgramCounts count_ngrams(const std::vector<int>& tokens, int n) {
  NgramCounts counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i)
    ++counts[std::vector<int>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                              tokens.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return counts;
}

std::int64_t clipped_matches(const NgramCounts& hyp, const NgramCounts& ref) {
  std::int64_t matches = 0;
  for (const auto& [gram, count] : hyp) {
    auto it = ref.find(gram);
    if (it != ref.end()) matches += std::min(count, it->second);
  }
  return matches;
}

}  // namespace

double bleu(const std::vector<std::vector<int>>& hypotheses,
            const std::vector<std::vector<int>>& references, int max_n) {
  if (hypotheses.empty() || hypotheses.size() != references.size())
    throw EmptyCorpus("bleu: need equally many hypotheses and references, at least one pair");
  if (max_n < 1) throw EmptyCorpus("bleu: max_n must be >= 1");
  for (const auto& ref : references)
    if (ref.empty()) throw EmptyCorpus("bleu: empty reference");

  std::int64_t hyp_len = 0, ref_len = 0;
  std::vector<std::int64_t> matches(static_cast<std::size_t>(max_n), 0);
  std::vector<std::int64_t> totals(static_cast<std::size_t>(max_n), 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hyp_len += static_cast<std::int64_t>(hypotheses[i].size());
    ref_len += static_cast<std::int64_t>(references[i].size());
    for (int n = 1; n <= max_n; ++n) {
      const NgramCounts h = count_ngrams(hypotheses[i], n);
      const NgramCounts r = count_ngrams(references[i], n);
      for (const auto& [gram, count] : h) totals[static_cast<std::size_t>(n - 1)] += count;
      matches[static_cast<std::size_t>(n - 1)] += clipped_matches(h, r);
    }
  }

  if (hyp_len == 0) return 0.0;  // BP -> 0 limit
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const std::int64_t total = totals[static_cast<std::size_t>(n - 1)];
    const std::int64_t match = matches[static_cast<std::size_t>(n - 1)];
    if (total == 0) return 0.0;  // no candidate n-grams of this order at all
    const double p = match > 0 ? static_cast<double>(match) / static_cast<double>(total)
                               : 1.0 / (2.0 * static_cast<double>(total));
    log_sum += std::log(p);
  }
  const double bp = hyp_len > ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum / max_n);
}

PrecisionRecall rouge_n(const std::vector<int>& hyp, const std::vector<int>& ref, int n) {
  if (n < 1) throw EmptyCorpus("rouge_n: n must be >= 1");
  const NgramCounts h = count_ngrams(hyp, n);
  const NgramCounts r = count_ngrams(ref, n);
  std::int64_t h_total = 0, r_total = 0;
  for (const auto& [gram, count] : h) h_total += count;
  for (const auto& [gram, count] : r) r_total += count;
  const std::int64_t match = clipped_matches(h, r);

  PrecisionRecall out;
  out.precision = h_total > 0 ? static_cast<double>(match) / static_cast<double>(h_total) : 0.0;
  out.recall = r_total > 0 ? static_cast<double>(match) / static_cast<double>(r_total) : 0.0;
  const double pr = out.precision + out.recall;
  out.f1 = pr > 0 ? 2.0 * out.precision * out.recall / pr : 0.0;
  return out;
}

PrecisionRecall rouge_l(const std::vector<int>& hyp, const std::vector<int>& ref) {
  PrecisionRecall out;
  if (hyp.empty() || ref.empty()) return out;
  const std::size_t m = hyp.size(), n = ref.size();
  std::vector<std::int64_t> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      if (hyp[i - 1] == ref[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[n]);
  out.precision = lcs / static_cast<double>(m);
  out.recall = lcs / static_cast<double>(n);
  const double pr = out.precision + out.recall;
  out.f1 = pr > 0 ? 2.0 * out.precision * out.recall / pr : 0.0;
  return out;
}

const char* faith_label_name(FaithLabel label) {
  switch (label) {
    case FaithLabel::Faithful: return "faithful";
    case FaithLabel::WrongTask: return "wrong_task";
    case FaithLabel::Hallucination: return "hallucination";
  }
  throw EmptyCorpus("faith_label_name: bad label");
}

FaithLabel faithfulness(const data::Example& example, const std::vector<int>& output,
                        const std::vector<data::TaskSpec>& trained_specs, const data::Vocab& vocab) {
  if (output == data::apply_task(example.task, example.inp, vocab)) return FaithLabel::Faithful;
  for (const data::TaskSpec& spec : trained_specs) {
    if (spec == example.task) continue;
    if (output == data::apply_task(spec, example.inp, vocab)) return FaithLabel::WrongTask;
  }
  return FaithLabel::Hallucination;
}

MetricReport evaluate_outputs(const std::vector<data::Example>& examples,
                              const std::vector<std::vector<int>>& outputs,
                              const std::vector<data::TaskSpec>& trained_specs,
                              const data::Vocab& vocab) {
  if (examples.empty() || examples.size() != outputs.size())
    throw EmptyCorpus("evaluate_outputs: need equally many examples and outputs, at least one");
  MetricReport report;
  report.n_examples = static_cast<int>(examples.size());

  std::vector<std::vector<int>> refs;
  refs.reserve(examples.size());
  int exact = 0;
  double r1 = 0, r2 = 0, rl = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    refs.push_back(examples[i].res);
    if (outputs[i] == examples[i].res) ++exact;
    r1 += rouge_n(outputs[i], examples[i].res, 1).f1;
    r2 += rouge_n(outputs[i], examples[i].res, 2).f1;
    rl += rouge_l(outputs[i], examples[i].res).f1;
    switch (faithfulness(examples[i], outputs[i], trained_specs, vocab)) {
      case FaithLabel::Faithful: ++report.faithful; break;
      case FaithLabel::WrongTask: ++report.wrong_task; break;
      case FaithLabel::Hallucination: ++report.hallucination; break;
    }
  }
  report.bleu = bleu(outputs, refs);
  report.rouge1 = r1 / report.n_examples;
  report.rouge2 = r2 / report.n_examples;
  report.rougeL = rl / report.n_examples;
  report.exact_match = static_cast<double>(exact) / report.n_examples;
  return report;
}

namespace {

std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

void write_reports_csv(const std::vector<MetricReport>& reports, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_reports_csv: cannot open " + path);
  f << "format,task,cell,n_examples,bleu,rouge1,rouge2,rougeL,exact_match,faithful,wrong_task,"
       "hallucination\n";
  for (const MetricReport& r : reports) {
    f << r.format << ',' << r.task << ',' << r.cell << ',' << r.n_examples << ',' << fmt6(r.bleu)
      << ',' << fmt6(r.rouge1) << ',' << fmt6(r.rouge2) << ',' << fmt6(r.rougeL) << ','
      << fmt6(r.exact_match) << ',' << r.faithful << ',' << r.wrong_task << ',' << r.hallucination
      << '\n';
  }
  if (!f) throw IoFailure("write_reports_csv: write failed for " + path);
}

void write_reports_json(const std::vector<MetricReport>& reports, const std::string& path) {
  json arr = json::array();
  for (const MetricReport& r : reports) {
    arr.push_back(json{{"format", r.format},
                       {"task", r.task},
                       {"cell", r.cell},
                       {"n_examples", r.n_examples},
                       {"bleu", fmt6(r.bleu)},
                       {"rouge1", fmt6(r.rouge1)},
                       {"rouge2", fmt6(r.rouge2)},
                       {"rougeL", fmt6(r.rougeL)},
                       {"exact_match", fmt6(r.exact_match)},
                       {"faithful", r.faithful},
                       {"wrong_task", r.wrong_task},
                       {"hallucination", r.hallucination}});
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_reports_json: cannot open " + path);
  f << arr.dump(2) << '\n';
  if (!f) throw IoFailure("write_reports_json: write failed for " + path);
}

}  // namespace ipl::metrics
