#include "ipl/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ipl/rng.hpp"

namespace ipl::data {

using json = nlohmann::ordered_json;

Vocab Vocab::synthetic(int alphabet_size) {
  if (alphabet_size < 2) throw AlphabetViolation("Vocab: alphabet size must be >= 2");
  Vocab v;
  v.alphabet_size_ = alphabet_size;
  v.id_to_symbol_ = {"<pad>", "<bos>", "<eos>", "@", ":", "instruction", "input", "response",
                     "copy", "reverse", "shift", "swap"};
  v.param_base_ = static_cast<int>(v.id_to_symbol_.size());
  for (int k = 0; k < alphabet_size; ++k) v.id_to_symbol_.push_back("k" + std::to_string(k));
  v.content_base_ = static_cast<int>(v.id_to_symbol_.size());
  for (int a = 0; a < alphabet_size; ++a) v.id_to_symbol_.push_back("a" + std::to_string(a));

  for (int i = 0; i < static_cast<int>(v.id_to_symbol_.size()); ++i)
    v.symbol_to_id_.emplace_back(v.id_to_symbol_[static_cast<std::size_t>(i)], i);
  std::sort(v.symbol_to_id_.begin(), v.symbol_to_id_.end());

  const int at = v.id_of("@"), colon = v.id_of(":");
  v.inst_header_ = {at, v.id_of("instruction"), colon};
  v.input_header_ = {at, v.id_of("input"), colon};
  v.response_header_ = {at, v.id_of("response"), colon};
  return v;
}

int Vocab::param_id(int k) const {
  if (k < 0 || k >= alphabet_size_) throw AlphabetViolation("param_id: parameter out of range");
  return param_base_ + k;
}

int Vocab::content_id(int a) const {
  if (a < 0 || a >= alphabet_size_) throw AlphabetViolation("content_id: symbol out of range");
  return content_base_ + a;
}

int Vocab::id_of(const std::string& symbol) const {
  auto it = std::lower_bound(symbol_to_id_.begin(), symbol_to_id_.end(),
                             std::make_pair(symbol, 0),
                             [](const auto& a, const auto& b) { return a.first < b.first; });
  if (it == symbol_to_id_.end() || it->first != symbol)
    throw AlphabetViolation("Vocab: unknown symbol '" + symbol + "'");
  return it->second;
}

const std::string& Vocab::symbol_of(int id) const {
  if (id < 0 || id >= size()) throw AlphabetViolation("Vocab: id out of range");
  return id_to_symbol_[static_cast<std::size_t>(id)];
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += symbol_of(ids[i]);
  }
  return out;
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) ids.push_back(id_of(word));
  return ids;
}

const char* family_name(TaskFamily family) {
  switch (family) {
    case TaskFamily::Copy: return "copy";
    case TaskFamily::Reverse: return "reverse";
    case TaskFamily::Shift: return "shift";
    case TaskFamily::Swap: return "swap";
  }
  throw AlphabetViolation("family_name: bad family");
}

TaskFamily family_from_name(const std::string& name) {
  if (name == "copy") return TaskFamily::Copy;
  if (name == "reverse") return TaskFamily::Reverse;
  if (name == "shift") return TaskFamily::Shift;
  if (name == "swap") return TaskFamily::Swap;
  throw AlphabetViolation("family_from_name: unknown family '" + name + "'");
}

const char* mode_name(FormatMode mode) { return mode == FormatMode::PreIns ? "pre" : "post"; }

FormatMode mode_from_name(const std::string& name) {
  if (name == "pre") return FormatMode::PreIns;
  if (name == "post") return FormatMode::PostIns;
  throw ManifestError("mode_from_name: expected 'pre' or 'post', got '" + name + "'");
}

const char* region_name(Region region) {
  switch (region) {
    case Region::Template: return "template";
    case Region::Instruction: return "instruction";
    case Region::Input: return "input";
    case Region::Response: return "response";
  }
  throw SpanMismatch("region_name: bad region");
}

std::vector<int> TaskSpec::instruction_phrase(const Vocab& vocab) const {
  std::vector<int> phrase{vocab.id_of(family_name(family))};
  if (has_param()) phrase.push_back(vocab.param_id(param));
  return phrase;
}

const Span& FormattedSequence::span_of(Region region) const {
  for (const Span& s : spans)
    if (s.region == region) return s;
  throw SpanMismatch(std::string("span_of: no span for region ") + region_name(region));
}

std::vector<int> FormattedSequence::prompt() const {
  const Span& res = span_of(Region::Response);
  return std::vector<int>(ids.begin(), ids.begin() + res.begin);
}

std::vector<int> apply_task(const TaskSpec& task, const std::vector<int>& inp, const Vocab& vocab) {
  if (task.alphabet_size != vocab.alphabet_size())
    throw AlphabetViolation("apply_task: task alphabet does not match vocab");
  const int a = vocab.alphabet_size();
  if (task.has_param() && (task.param < 0 || task.param >= a))
    throw AlphabetViolation("apply_task: parameter out of range");
  std::vector<int> sym(inp.size());
  for (std::size_t i = 0; i < inp.size(); ++i) {
    if (!vocab.is_content(inp[i]))
      throw AlphabetViolation("apply_task: token " + std::to_string(inp[i]) + " not in content alphabet");
    sym[i] = inp[i] - vocab.content_base();
  }
  std::vector<int> out(sym.size());
  switch (task.family) {
    case TaskFamily::Copy:
      out = sym;
      break;
    case TaskFamily::Reverse:
      for (std::size_t i = 0; i < sym.size(); ++i) out[i] = sym[sym.size() - 1 - i];
      break;
    case TaskFamily::Shift:
      for (std::size_t i = 0; i < sym.size(); ++i) out[i] = (sym[i] + task.param) % a;
      break;
    case TaskFamily::Swap:
      for (std::size_t i = 0; i < sym.size(); ++i) out[i] = ((task.param - sym[i]) % a + a) % a;
      break;
  }
  for (auto& x : out) x += vocab.content_base();
  return out;
}

int formatted_length(const TaskSpec& task, int input_length, const Vocab& vocab) {
  // BOS + three 3-token headers + inst + inp + res + EOS; res matches inp.
  const int phrase = static_cast<int>(task.instruction_phrase(vocab).size());
  return 1 + 9 + phrase + 2 * input_length + 1;
}

std::vector<Example> generate(const std::vector<TaskSpec>& specs, int n, int lo, int hi,
                              std::uint64_t seed, const Vocab& vocab, int max_seq_len) {
  if (specs.empty()) throw TooFewExamples("generate: no task specs");
  if (n < 1) throw TooFewExamples("generate: n must be >= 1");
  if (lo < 1 || hi < lo) throw LengthOverflow("generate: need 1 <= lo <= hi");
  for (const TaskSpec& spec : specs)
    if (formatted_length(spec, hi, vocab) > max_seq_len)
      throw LengthOverflow("generate: inputs of length " + std::to_string(hi) +
                           " exceed max_seq_len " + std::to_string(max_seq_len) + " after formatting");

  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const TaskSpec& spec = specs[static_cast<std::size_t>(i) % specs.size()];
    const int len = static_cast<int>(rng.uniform_int(lo, hi));
    Example ex;
    ex.task = spec;
    ex.inst = spec.instruction_phrase(vocab);
    ex.inp.resize(static_cast<std::size_t>(len));
    for (auto& t : ex.inp) t = vocab.content_id(static_cast<int>(rng.uniform_int(0, vocab.alphabet_size() - 1)));
    ex.res = apply_task(spec, ex.inp, vocab);
    out.push_back(std::move(ex));
  }
  return out;
}

FormattedSequence format_example(const Example& ex, FormatMode mode, const Vocab& vocab,
                                 int max_seq_len) {
  FormattedSequence seq;
  seq.mode = mode;
  auto put = [&seq](const std::vector<int>& ids, Region region) {
    const int begin = static_cast<int>(seq.ids.size());
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
    const int end = static_cast<int>(seq.ids.size());
    if (begin == end) return;
    if (!seq.spans.empty() && seq.spans.back().region == region && seq.spans.back().end == begin)
      seq.spans.back().end = end;
    else
      seq.spans.push_back({region, begin, end});
  };

  put({vocab.bos()}, Region::Template);
  if (mode == FormatMode::PreIns) {
    put(vocab.inst_header(), Region::Template);
    put(ex.inst, Region::Instruction);
    put(vocab.input_header(), Region::Template);
    put(ex.inp, Region::Input);
  } else {
    put(vocab.input_header(), Region::Template);
    put(ex.inp, Region::Input);
    put(vocab.inst_header(), Region::Template);
    put(ex.inst, Region::Instruction);
  }
  put(vocab.response_header(), Region::Template);
  put(ex.res, Region::Response);
  put({vocab.eos()}, Region::Template);

  if (static_cast<int>(seq.ids.size()) > max_seq_len)
    throw SequenceTooLong("format_example: formatted length " + std::to_string(seq.ids.size()) +
                          " exceeds max_seq_len " + std::to_string(max_seq_len));

  const Span& res = seq.span_of(Region::Response);
  seq.loss_mask.assign(seq.ids.size(), 0);
  for (int i = res.begin; i <= res.end && i < static_cast<int>(seq.ids.size()); ++i)
    seq.loss_mask[static_cast<std::size_t>(i)] = 1;  // response plus terminating EOS
  return seq;
}

Example parse_formatted(const FormattedSequence& seq, const Vocab& vocab) {
  Example ex;
  for (const Span& s : seq.spans) {
    std::vector<int>* dst = nullptr;
    if (s.region == Region::Instruction) dst = &ex.inst;
    else if (s.region == Region::Input) dst = &ex.inp;
    else if (s.region == Region::Response) dst = &ex.res;
    if (dst) dst->insert(dst->end(), seq.ids.begin() + s.begin, seq.ids.begin() + s.end);
  }
  if (ex.inst.empty() || ex.inp.empty() || ex.res.empty())
    throw SpanMismatch("parse_formatted: missing instruction/input/response span");
  ex.task.alphabet_size = vocab.alphabet_size();
  ex.task.family = family_from_name(vocab.symbol_of(ex.inst[0]));
  if (ex.inst.size() > 1) ex.task.param = ex.inst[1] - vocab.param_id(0);
  return ex;
}

std::vector<Bucket> bucket_by_length(const std::vector<Example>& examples, int n_buckets) {
  if (n_buckets < 2) throw TooFewExamples("bucket_by_length: need n_buckets >= 2");
  if (examples.empty()) throw TooFewExamples("bucket_by_length: empty corpus");

  // Token count per distinct input length; buckets are contiguous length
  // ranges, so boundaries can only fall between length groups.
  std::map<int, std::int64_t> tokens_by_len;
  for (const Example& ex : examples)
    tokens_by_len[static_cast<int>(ex.inp.size())] += static_cast<std::int64_t>(ex.inp.size());
  if (static_cast<int>(tokens_by_len.size()) < n_buckets)
    throw TooFewExamples("bucket_by_length: fewer distinct lengths than buckets");

  std::int64_t total = 0;
  for (const auto& [len, tok] : tokens_by_len) total += tok;

  // Greedy: close each bucket at the group boundary nearest its ideal
  // cumulative share, keeping enough groups for the remaining buckets.
  std::vector<std::pair<int, std::int64_t>> groups(tokens_by_len.begin(), tokens_by_len.end());
  const int n_groups = static_cast<int>(groups.size());
  std::vector<int> bounds;  // end index (exclusive, in groups) of each bucket
  int g = 0;
  std::int64_t cum = 0;
  for (int b = 0; b < n_buckets - 1; ++b) {
    const double ideal = static_cast<double>(total) * (b + 1) / n_buckets;
    const int max_end = n_groups - (n_buckets - 1 - b);  // leave one group per later bucket
    std::int64_t best_cum = cum;
    int end = g;
    double best_gap = -1;
    std::int64_t c = cum;
    for (int e = g + 1; e <= max_end; ++e) {
      c += groups[static_cast<std::size_t>(e - 1)].second;
      const double gap = std::abs(static_cast<double>(c) - ideal);
      if (best_gap < 0 || gap < best_gap) {
        best_gap = gap;
        end = e;
        best_cum = c;
      } else if (c > static_cast<std::int64_t>(ideal)) {
        break;  // gaps only grow past the ideal
      }
    }
    bounds.push_back(end);
    g = end;
    cum = best_cum;
  }
  bounds.push_back(n_groups);

  std::vector<Bucket> buckets;
  int begin = 0;
  for (int end : bounds) {
    if (end <= begin) throw TooFewExamples("bucket_by_length: a bucket would be empty");
    Bucket bucket;
    bucket.min_len = groups[static_cast<std::size_t>(begin)].first;
    bucket.max_len = groups[static_cast<std::size_t>(end - 1)].first;
    buckets.push_back(std::move(bucket));
    begin = end;
  }
  for (const Example& ex : examples) {
    const int len = static_cast<int>(ex.inp.size());
    for (Bucket& bucket : buckets) {
      if (len >= bucket.min_len && len <= bucket.max_len) {
        bucket.examples.push_back(ex);
        bucket.input_tokens += len;
        break;
      }
    }
  }
  return buckets;
}

std::pair<std::vector<TaskSpec>, std::vector<TaskSpec>> make_zero_shot_split(
    const std::vector<TaskSpec>& specs, const std::vector<TaskSpec>& holdout) {
  auto held = [&](const TaskSpec& s) {
    return std::find(holdout.begin(), holdout.end(), s) != holdout.end();
  };
  std::vector<TaskSpec> train, test;
  for (const TaskSpec& s : specs) (held(s) ? test : train).push_back(s);

  for (const TaskSpec& h : holdout) {
    if (std::find(specs.begin(), specs.end(), h) == specs.end())
      throw NotCompositional("make_zero_shot_split: held-out pair not among specs");
    bool family_covered = false, param_covered = !h.has_param();
    for (const TaskSpec& t : train) {
      if (t.family == h.family) family_covered = true;
      if (h.has_param() && t.has_param() && t.family != h.family && t.param == h.param)
        param_covered = true;
    }
    if (!family_covered)
      throw NotCompositional(std::string("make_zero_shot_split: family '") + family_name(h.family) +
                             "' absent from training");
    if (!param_covered)
      throw NotCompositional("make_zero_shot_split: parameter k" + std::to_string(h.param) +
                             " appears in training under no other family");
  }
  return {train, test};
}

void write_corpus(const std::vector<Example>& examples, const Vocab& vocab, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_corpus: cannot open " + path);
  for (const Example& ex : examples) {
    json line{{"task_family", family_name(ex.task.family)},
              {"task_param", ex.task.has_param() ? vocab.symbol_of(vocab.param_id(ex.task.param)) : ""},
              {"inst", vocab.detokenize(ex.inst)},
              {"inp", vocab.detokenize(ex.inp)},
              {"res", vocab.detokenize(ex.res)}};
    f << line.dump() << '\n';
  }
  if (!f) throw IoFailure("write_corpus: write failed for " + path);
}

std::vector<Example> read_corpus(const std::string& path, const Vocab& vocab) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("read_corpus: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoFailure("read_corpus: bad JSONL line " + std::to_string(out.size() + 1) + ": " + e.what());
    }
    Example ex;
    ex.task.family = family_from_name(j.at("task_family").get<std::string>());
    ex.task.alphabet_size = vocab.alphabet_size();
    const std::string param = j.at("task_param").get<std::string>();
    if (!param.empty()) ex.task.param = vocab.id_of(param) - vocab.param_id(0);
    ex.inst = vocab.tokenize(j.at("inst").get<std::string>());
    ex.inp = vocab.tokenize(j.at("inp").get<std::string>());
    ex.res = vocab.tokenize(j.at("res").get<std::string>());
    out.push_back(std::move(ex));
  }
  return out;
}

void write_formatted(const std::vector<FormattedSequence>& seqs, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("write_formatted: cannot open " + path);
  for (const FormattedSequence& s : seqs) {
    json spans = json::array();
    for (const Span& sp : s.spans)
      spans.push_back(json{{"region", region_name(sp.region)}, {"begin", sp.begin}, {"end", sp.end}});
    json line{{"ids", s.ids},
              {"loss_mask", std::vector<int>(s.loss_mask.begin(), s.loss_mask.end())},
              {"spans", std::move(spans)},
              {"mode", mode_name(s.mode)}};
    f << line.dump() << '\n';
  }
  if (!f) throw IoFailure("write_formatted: write failed for " + path);
}

std::vector<FormattedSequence> read_formatted(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("read_formatted: cannot open " + path);
  std::vector<FormattedSequence> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    FormattedSequence s;
    s.ids = j.at("ids").get<std::vector<int>>();
    for (int m : j.at("loss_mask").get<std::vector<int>>()) s.loss_mask.push_back(static_cast<std::uint8_t>(m));
    for (const json& sp : j.at("spans")) {
      Region region;
      const std::string name = sp.at("region").get<std::string>();
      if (name == "template") region = Region::Template;
      else if (name == "instruction") region = Region::Instruction;
      else if (name == "input") region = Region::Input;
      else if (name == "response") region = Region::Response;
      else throw SpanMismatch("read_formatted: unknown region '" + name + "'");
      s.spans.push_back({region, sp.at("begin").get<int>(), sp.at("end").get<int>()});
    }
    s.mode = mode_from_name(j.at("mode").get<std::string>());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ipl::data
