#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ipl/errors.hpp"

namespace ipl::data {

// Token-id layout: PAD, BOS, EOS, five template words, four family words,
// A parameter symbols k0..k{A-1}, then the content alphabet a0..a{A-1}.
class Vocab {
 public:
  static Vocab synthetic(int alphabet_size);

  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }
  int alphabet_size() const { return alphabet_size_; }
  int size() const { return static_cast<int>(id_to_symbol_.size()); }

  int param_id(int k) const;    // "k{k}"
  int content_id(int a) const;  // "a{a}"
  int content_base() const { return content_base_; }
  bool is_content(int id) const { return id >= content_base_ && id < size(); }

  const std::vector<int>& inst_header() const { return inst_header_; }
  const std::vector<int>& input_header() const { return input_header_; }
  const std::vector<int>& response_header() const { return response_header_; }

  int id_of(const std::string& symbol) const;
  const std::string& symbol_of(int id) const;

  std::string detokenize(const std::vector<int>& ids) const;  // space-joined
  std::vector<int> tokenize(const std::string& text) const;

 private:
  Vocab() = default;
  int alphabet_size_ = 0;
  int param_base_ = 0;
  int content_base_ = 0;
  std::vector<std::string> id_to_symbol_;
  std::vector<std::pair<std::string, int>> symbol_to_id_;  // sorted by symbol
  std::vector<int> inst_header_, input_header_, response_header_;
};

enum class TaskFamily { Copy, Reverse, Shift, Swap };

const char* family_name(TaskFamily family);
TaskFamily family_from_name(const std::string& name);

// A (family, parameter) pair over a shared mod-A alphabet. shift(k) maps
// x -> (x+k) mod A; swap(p) is the reflection x -> (p-x) mod A.
struct TaskSpec {
  TaskFamily family = TaskFamily::Copy;
  int param = 0;  // used by Shift and Swap only
  int alphabet_size = 0;

  bool has_param() const { return family == TaskFamily::Shift || family == TaskFamily::Swap; }
  std::vector<int> instruction_phrase(const Vocab& vocab) const;
  bool operator==(const TaskSpec&) const = default;
};

struct Example {
  std::vector<int> inst;  // instruction phrase ids
  std::vector<int> inp;   // content ids
  std::vector<int> res;   // content ids, == apply_task(task, inp)
  TaskSpec task;
};

enum class FormatMode { PreIns, PostIns };

const char* mode_name(FormatMode mode);          // "pre" / "post"
FormatMode mode_from_name(const std::string&);

enum class Region { Template, Instruction, Input, Response };

const char* region_name(Region region);

struct Span {
  Region region;
  int begin;  // half-open [begin, end)
  int end;
};

struct FormattedSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<Span> spans;  // ordered, disjoint, covering [0, ids.size())
  FormatMode mode = FormatMode::PreIns;

  // First span of the given region; Instruction/Input/Response appear once.
  const Span& span_of(Region region) const;
  // Ids before the response span: the decode-time prompt.
  std::vector<int> prompt() const;
};

std::vector<int> apply_task(const TaskSpec& task, const std::vector<int>& inp, const Vocab& vocab);

// Formatted length of an example with input length n under either mode
// (both modes give the same length).
int formatted_length(const TaskSpec& task, int input_length, const Vocab& vocab);

std::vector<Example> generate(const std::vector<TaskSpec>& specs, int n, int lo, int hi,
                              std::uint64_t seed, const Vocab& vocab, int max_seq_len = 512);

FormattedSequence format_example(const Example& ex, FormatMode mode, const Vocab& vocab,
                                 int max_seq_len = 512);

// Inverse of format_example: rebuilds (inst, inp, res) from spans and ids.
Example parse_formatted(const FormattedSequence& seq, const Vocab& vocab);

struct Bucket {
  int min_len = 0;  // inclusive input-length range
  int max_len = 0;
  std::vector<Example> examples;
  std::int64_t input_tokens = 0;
};

std::vector<Bucket> bucket_by_length(const std::vector<Example>& examples, int n_buckets);

// Compositional zero-shot split: held-out (family, param) pairs leave both
// their family and their parameter represented in training.
std::pair<std::vector<TaskSpec>, std::vector<TaskSpec>> make_zero_shot_split(
    const std::vector<TaskSpec>& specs, const std::vector<TaskSpec>& holdout);

void write_corpus(const std::vector<Example>& examples, const Vocab& vocab, const std::string& path);
std::vector<Example> read_corpus(const std::string& path, const Vocab& vocab);

void write_formatted(const std::vector<FormattedSequence>& seqs, const std::string& path);
std::vector<FormattedSequence> read_formatted(const std::string& path);

}  // namespace ipl::data
