#include "mp/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace mp {

Corpus load_corpus(const std::string& path, const Vocab* vocab) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open corpus file: " + path);

  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> raw;
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path + ":" + std::to_string(line_no) + ": missing tab separator");
    raw.emplace_back(split_tokens(line.substr(0, tab)), split_tokens(line.substr(tab + 1)));
  }

  Corpus corpus;
  if (vocab) {
    corpus.vocab = *vocab;
  } else {
    std::vector<std::vector<std::string>> all;
    all.reserve(raw.size() * 2);
    for (const auto& [s, t] : raw) {
      all.push_back(s);
      all.push_back(t);
    }
    corpus.vocab = Vocab::build(all);
  }
  corpus.pairs.reserve(raw.size());
  for (const auto& [s, t] : raw)
    corpus.pairs.push_back({corpus.vocab.encode(s), corpus.vocab.encode(t)});
  return corpus;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write corpus file: " + path);
  for (const auto& p : corpus.pairs) {
    os << join_tokens(corpus.vocab.decode(p.src)) << '\t'
       << join_tokens(corpus.vocab.decode(p.tgt)) << '\n';
  }
}

void save_corpus_text(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& lines) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write corpus file: " + path);
  for (const auto& [s, t] : lines) os << s << '\t' << t << '\n';
}

std::vector<std::vector<int>> make_batches(const std::vector<SentencePair>& pairs, int max_tokens,
                                           Rng& rng) {
  if (max_tokens < 1) throw DataError("max_tokens must be positive");
  for (const auto& p : pairs) {
    if (static_cast<int>(p.tgt.size()) > max_tokens)
      throw DataError("sentence of target length " + std::to_string(p.tgt.size()) +
                      " exceeds the max_tokens budget of " + std::to_string(max_tokens));
  }

  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pairs[static_cast<std::size_t>(a)].tgt.size() <
           pairs[static_cast<std::size_t>(b)].tgt.size();
  });

  std::vector<std::vector<int>> batches;
  std::vector<int> current;
  std::size_t max_tgt = 0;
  for (int idx : order) {
    const std::size_t tgt_len = pairs[static_cast<std::size_t>(idx)].tgt.size();
    const std::size_t new_max = std::max(max_tgt, tgt_len);
    if (!current.empty() &&
        (current.size() + 1) * new_max > static_cast<std::size_t>(max_tokens)) {
      batches.push_back(std::move(current));
      current.clear();
      max_tgt = 0;
    }
    max_tgt = std::max(max_tgt, tgt_len);
    current.push_back(idx);
  }
  if (!current.empty()) batches.push_back(std::move(current));

  rng.shuffle(batches);
  return batches;
}

}  // namespace mp
