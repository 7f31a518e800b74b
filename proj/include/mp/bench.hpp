#pragma once

#include <string>
#include <vector>

#include "mp/corpus.hpp"
#include "mp/decoding.hpp"
#include "mp/metrics.hpp"

namespace mp {

struct BenchResult {
  std::string config;     // e.g. "cmlm T=4 l=2" or "ar b=5"
  double seconds = 0.0;   // median wall time over repeats
  double sentences_per_second = 0.0;
  double bleu = 0.0;
  double speedup = 0.0;   // baseline_seconds / seconds
  int threads = 1;        // declared parallelism of the timed region
};

// Decodes the corpus in sentence batches and reports the median wall time
// over `repeats` runs (one untimed warmup first). The timer covers decoding
// only; the model and data are already loaded.
BenchResult time_decode(const Model& model, const Corpus& corpus,
                        const std::vector<std::vector<TokenSeq>>& references,
                        const DecodeConfig& cfg, int repeats = 5);

// Cross product of CMLM (T x ell) configurations plus AR baselines; speedups
// are relative to the b=5 cached baseline row.
std::vector<BenchResult> bench_sweep(const Model& cmlm, const Model& ar, const Corpus& corpus,
                                     const std::vector<std::vector<TokenSeq>>& references,
                                     const std::vector<int>& t_values,
                                     const std::vector<int>& ell_values,
                                     const std::vector<int>& b_values, int batch_size, int repeats,
                                     bool ar_no_cache = false);

std::string bench_table_tsv(const std::vector<BenchResult>& rows);

// Shared by bench and the CLI decode path: mask-predict in sentence batches
// with per-batch encoder-cache reset.
std::vector<std::vector<int>> decode_corpus_cmlm(const Model& model,
                                                 const std::vector<std::vector<int>>& srcs,
                                                 const DecodeConfig& cfg,
                                                 const std::vector<int>* gold_lengths = nullptr);

}  // namespace mp
