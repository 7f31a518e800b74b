#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mp/tensor.hpp"

namespace mp {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token inventory. Reserved ids are fixed; content tokens start at id 6.
// The vocabulary file stores one content token per line, line number = id - 6.
class Vocab {
 public:
  static constexpr int PAD = 0;
  static constexpr int UNK = 1;
  static constexpr int MASK = 2;
  static constexpr int LENGTH = 3;
  static constexpr int BOS = 4;
  static constexpr int EOS = 5;
  static constexpr int reserved_count = 6;

  Vocab();

  // Builds content ids from token frequency (descending), ties lexicographic.
  static Vocab build(const std::vector<std::vector<std::string>>& sentences);

  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return reserved_count + static_cast<int>(content_.size()); }
  int content_size() const { return static_cast<int>(content_.size()); }

  int id_of(const std::string& token) const;  // UNK for out-of-vocabulary
  const std::string& token_of(int id) const;
  bool is_reserved(int id) const { return id >= 0 && id < reserved_count; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  // Registers a token if new; returns its id. Used by generators.
  int add(const std::string& token);

 private:
  std::vector<std::string> content_;                // index 0 <-> id reserved_count
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> reserved_names_;
};

std::vector<std::string> split_tokens(const std::string& line);
std::string join_tokens(const std::vector<std::string>& tokens);

}  // namespace mp
