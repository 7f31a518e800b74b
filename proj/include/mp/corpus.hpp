#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mp/rng.hpp"
#include "mp/vocab.hpp"

namespace mp {

struct SentencePair {
  std::vector<int> src, tgt;
};

struct Corpus {
  std::vector<SentencePair> pairs;
  Vocab vocab;
};

// TSV corpus: one "source<TAB>target" pair per line, tokens space-separated.
// If `vocab` is null, one is built from the file's own pairs (both sides).
Corpus load_corpus(const std::string& path, const Vocab* vocab = nullptr);
void save_corpus(const std::string& path, const Corpus& corpus);
void save_corpus_text(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& lines);

// Token-count batching: pairs stable-sorted by target length and grouped so
// sentences * max padded target length <= max_tokens. Every pair appears in
// exactly one batch; batch order is shuffled with the supplied RNG. Returned
// batches hold indices into `pairs`.
std::vector<std::vector<int>> make_batches(const std::vector<SentencePair>& pairs, int max_tokens,
                                           Rng& rng);

}  // namespace mp
