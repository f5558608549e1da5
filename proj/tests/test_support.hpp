#pragma once

#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ipl/data.hpp"
#include "ipl/engine.hpp"
#include "ipl/errors.hpp"
#include "ipl/model.hpp"

namespace ipl::testing {

// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ipl_test_" + tag + "_" + std::to_string(++counter) + "_" +
             std::to_string(static_cast<unsigned>(::getpid())));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str(const std::string& rel = "") const {
    return rel.empty() ? path_.string() : (path_ / rel).string();
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("read_file_bytes: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline model::ModelConfig tiny_model_config(int vocab_size) {
  model::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = vocab_size;
  c.max_seq_len = 64;
  return c;
}

inline engine::TrainConfig tiny_train_config(int steps, int batch_size) {
  engine::TrainConfig c;
  c.steps = steps;
  c.batch_size = batch_size;
  c.lr = 2e-3;
  c.warmup_steps = std::min(10, steps);
  c.grad_clip_norm = 1.0;
  c.checkpoint_every = steps + 1;  // no mid-run checkpoints
  return c;
}

inline std::vector<data::FormattedSequence> format_all(const std::vector<data::Example>& examples,
                                                       data::FormatMode mode,
                                                       const data::Vocab& vocab,
                                                       int max_seq_len = 512) {
  std::vector<data::FormattedSequence> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(data::format_example(ex, mode, vocab, max_seq_len));
  return out;
}

template <class S>
bool bitwise_equal(const std::vector<S>& a, const std::vector<S>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(S)) != 0) return false;
  return true;
}

}  // namespace ipl::testing
