#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mp/vocab.hpp"

namespace mp {

enum class ToyTaskKind { copy, reverse, dict_swap, synonym_registers };

ToyTaskKind toy_task_kind_from_string(const std::string& s);
const char* to_string(ToyTaskKind k);

struct ToyTaskSpec {
  ToyTaskKind kind = ToyTaskKind::copy;
  int vocab_size = 64;  // content-token budget
  int min_len = 3;
  int max_len = 20;
  int n_train = 8000;
  int n_valid = 500;
  int n_test = 500;
  std::uint64_t seed = 1;
};

struct RawPair {
  std::vector<std::string> src, tgt;
};

// Splits are disjoint by source sentence. For synonym_registers every test
// sentence carries its two valid targets in test_references.
struct ToyTask {
  ToyTaskSpec spec;
  std::vector<RawPair> train, valid, test;
  std::vector<std::vector<std::vector<std::string>>> test_references;  // per test sentence
};

ToyTask gen_toy_task(const ToyTaskSpec& spec);

// Writes train.tsv / valid.tsv / test.tsv / vocab.txt (and test.refs.tsv when
// the task is multi-reference) into `dir`.
void write_toy_task(const ToyTask& task, const std::string& dir);

}  // namespace mp
