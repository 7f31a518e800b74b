#include "mp/toy_tasks.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "mp/corpus.hpp"
#include "mp/rng.hpp"

namespace mp {

namespace {

std::vector<std::string> make_symbols(const std::string& prefix, int n) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

// Distinct source sentences; `no_adjacent_repeat` keeps neighboring tokens
// different so gold targets carry no adjacent duplicates.
std::vector<std::vector<int>> sample_sources(int count, int n_symbols, int min_len, int max_len,
                                             bool no_adjacent_repeat, Rng& rng) {
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(count));
  long attempts = 0;
  const long attempt_cap = 200L * count + 10000;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > attempt_cap)
      throw DataError("cannot sample enough distinct source sentences; enlarge the vocabulary "
                      "or length range");
    const int len = rng.uniform_int(min_len, max_len);
    std::vector<int> s(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
      int tok = rng.uniform_int(0, n_symbols - 1);
      if (no_adjacent_repeat && i > 0 && tok == s[static_cast<std::size_t>(i - 1)]) {
        tok = (tok + 1 + rng.uniform_int(0, n_symbols - 2)) % n_symbols;
      }
      s[static_cast<std::size_t>(i)] = tok;
    }
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> map_tokens(const std::vector<int>& ids,
                                    const std::vector<std::string>& symbols) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(symbols[static_cast<std::size_t>(id)]);
  return out;
}

}  // namespace

ToyTaskKind toy_task_kind_from_string(const std::string& s) {
  if (s == "copy") return ToyTaskKind::copy;
  if (s == "reverse") return ToyTaskKind::reverse;
  if (s == "dict_swap") return ToyTaskKind::dict_swap;
  if (s == "synonym_registers") return ToyTaskKind::synonym_registers;
  throw DataError("unknown toy task: " + s);
}

const char* to_string(ToyTaskKind k) {
  switch (k) {
    case ToyTaskKind::copy: return "copy";
    case ToyTaskKind::reverse: return "reverse";
    case ToyTaskKind::dict_swap: return "dict_swap";
    case ToyTaskKind::synonym_registers: return "synonym_registers";
  }
  return "?";
}

ToyTask gen_toy_task(const ToyTaskSpec& spec) {
  if (spec.min_len < 1 || spec.max_len < spec.min_len)
    throw DataError("invalid length range for toy task");
  if (spec.n_train < 1 || spec.n_valid < 0 || spec.n_test < 0)
    throw DataError("invalid corpus sizes for toy task");

  Rng rng(spec.seed);
  ToyTask task;
  task.spec = spec;

  const bool synonym = spec.kind == ToyTaskKind::synonym_registers;
  const int total = spec.n_train + spec.n_valid + spec.n_test;

  int n_src_symbols;
  std::vector<std::string> src_symbols;
  std::vector<std::string> reg_a, reg_b;  // synonym registers
  std::vector<int> bijection;             // dict_swap token map

  if (synonym) {
    n_src_symbols = spec.vocab_size / 3;
    if (n_src_symbols < 2)
      throw DataError("synonym_registers needs vocab_size >= 6 (three tokens per source symbol)");
    src_symbols = make_symbols("s", n_src_symbols);
    reg_a = make_symbols("a", n_src_symbols);
    reg_b = make_symbols("b", n_src_symbols);
  } else {
    n_src_symbols = spec.vocab_size;
    if (n_src_symbols < 2) throw DataError("toy task needs vocab_size >= 2");
    src_symbols = make_symbols("w", n_src_symbols);
    if (spec.kind == ToyTaskKind::dict_swap) {
      bijection.resize(static_cast<std::size_t>(n_src_symbols));
      std::iota(bijection.begin(), bijection.end(), 0);
      rng.shuffle(bijection);
    }
  }

  auto sources = sample_sources(total, n_src_symbols, spec.min_len, spec.max_len, synonym, rng);

  auto target_of = [&](const std::vector<int>& src, bool register_b) {
    std::vector<int> t = src;
    switch (spec.kind) {
      case ToyTaskKind::copy:
        break;
      case ToyTaskKind::reverse:
        std::reverse(t.begin(), t.end());
        break;
      case ToyTaskKind::dict_swap: {
        for (int& id : t) id = bijection[static_cast<std::size_t>(id)];
        for (std::size_t i = 0; i + 1 < t.size(); i += 2) std::swap(t[i], t[i + 1]);
        break;
      }
      case ToyTaskKind::synonym_registers:
        break;  // handled by the register mapping below
    }
    if (synonym) return map_tokens(t, register_b ? reg_b : reg_a);
    return map_tokens(t, src_symbols);
  };

  auto emit = [&](const std::vector<int>& src, std::vector<RawPair>& bucket) {
    RawPair p;
    p.src = map_tokens(src, src_symbols);
    p.tgt = target_of(src, synonym && rng.uniform_int(0, 1) == 1);
    bucket.push_back(std::move(p));
  };

  for (int i = 0; i < spec.n_train; ++i) emit(sources[static_cast<std::size_t>(i)], task.train);
  for (int i = 0; i < spec.n_valid; ++i)
    emit(sources[static_cast<std::size_t>(spec.n_train + i)], task.valid);
  for (int i = 0; i < spec.n_test; ++i) {
    const auto& src = sources[static_cast<std::size_t>(spec.n_train + spec.n_valid + i)];
    emit(src, task.test);
    if (synonym)
      task.test_references.push_back({target_of(src, false), target_of(src, true)});
    else
      task.test_references.push_back({task.test.back().tgt});
  }
  return task;
}

void write_toy_task(const ToyTask& task, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto write_split = [&](const std::string& name, const std::vector<RawPair>& pairs) {
    std::vector<std::pair<std::string, std::string>> lines;
    lines.reserve(pairs.size());
    for (const auto& p : pairs) lines.emplace_back(join_tokens(p.src), join_tokens(p.tgt));
    save_corpus_text(dir + "/" + name, lines);
  };
  write_split("train.tsv", task.train);
  write_split("valid.tsv", task.valid);
  write_split("test.tsv", task.test);

  std::vector<std::vector<std::string>> all;
  for (const auto& p : task.train) {
    all.push_back(p.src);
    all.push_back(p.tgt);
  }
  Vocab::build(all).save(dir + "/vocab.txt");

  if (task.spec.kind == ToyTaskKind::synonym_registers) {
    std::ofstream os(dir + "/test.refs.tsv");
    if (!os) throw DataError("cannot write reference file in " + dir);
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      os << join_tokens(task.test[static_cast<std::size_t>(i)].src);
      for (const auto& ref : task.test_references[i]) os << '\t' << join_tokens(ref);
      os << '\n';
    }
  }
}

}  // namespace mp
