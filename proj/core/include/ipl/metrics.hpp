#pragma once

#include <string>
#include <vector>

#include "ipl/data.hpp"

namespace ipl::metrics {

// Corpus-level BLEU in [0,100]: clipped n-gram matches pooled over the
// corpus, any zero precision smoothed to 1/(2 * candidate n-gram count),
// BP = 1 if c > r else exp(1 - r/c). All hypotheses empty scores 0.
double bleu(const std::vector<std::vector<int>>& hypotheses,
            const std::vector<std::vector<int>>& references, int max_n = 4);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

PrecisionRecall rouge_n(const std::vector<int>& hyp, const std::vector<int>& ref, int n);
PrecisionRecall rouge_l(const std::vector<int>& hyp, const std::vector<int>& ref);

enum class FaithLabel { Faithful, WrongTask, Hallucination };

const char* faith_label_name(FaithLabel label);

// Oracle classifier standing in for human judgment: faithful when the output
// is the commanded task's answer, wrong_task when it is some other trained
// task's answer for the same input, hallucination otherwise.
FaithLabel faithfulness(const data::Example& example, const std::vector<int>& output,
                        const std::vector<data::TaskSpec>& trained_specs, const data::Vocab& vocab);

// One experiment cell: (format, task, bucket-or-split) keyed scores.
struct MetricReport {
  std::string format;
  std::string task;
  std::string cell;
  int n_examples = 0;
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double exact_match = 0.0;
  int faithful = 0;
  int wrong_task = 0;
  int hallucination = 0;
};

// Aggregates outputs against their examples' oracle responses.
MetricReport evaluate_outputs(const std::vector<data::Example>& examples,
                              const std::vector<std::vector<int>>& outputs,
                              const std::vector<data::TaskSpec>& trained_specs,
                              const data::Vocab& vocab);

void write_reports_csv(const std::vector<MetricReport>& reports, const std::string& path);
void write_reports_json(const std::vector<MetricReport>& reports, const std::string& path);

}  // namespace ipl::metrics
