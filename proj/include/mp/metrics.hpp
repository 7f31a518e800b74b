#pragma once

#include <map>
#include <string>
#include <vector>

#include "mp/tensor.hpp"

namespace mp {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TokenSeq = std::vector<std::string>;

// Corpus-level BLEU-4: clipped n-gram precision (multi-reference clipping by
// the max reference count), geometric mean over n=1..4, brevity penalty from
// per-sentence closest reference length (ties toward the shorter reference).
// No smoothing; scaled to [0,100].
double bleu(const std::vector<TokenSeq>& hypotheses,
            const std::vector<std::vector<TokenSeq>>& reference_sets);

// Diagnostic pieces of the same computation, exposed for the oracle fixture.
struct BleuDetail {
  double precisions[4];  // clipped precisions
  long matched[4];
  long total[4];
  long hyp_len = 0;
  long ref_len = 0;
  double brevity_penalty = 1.0;
  double score = 0.0;
};
BleuDetail bleu_detail(const std::vector<TokenSeq>& hypotheses,
                       const std::vector<std::vector<TokenSeq>>& reference_sets);

// Fraction of tokens equal to their immediate predecessor, pooled over the
// corpus.
double repetition_rate(const std::vector<TokenSeq>& sentences);

// BLEU per reference-length bucket with the fixed edges
// [1,10) [10,20) [20,30) [30,40) [40,inf).
struct BucketResult {
  std::string label;
  int lo = 0, hi = 0;  // hi == 0 means unbounded
  long count = 0;
  double bleu = 0.0;
};
std::vector<BucketResult> bucket_by_length(const std::vector<TokenSeq>& hypotheses,
                                           const std::vector<std::vector<TokenSeq>>& reference_sets);

// Fraction of examples whose candidate list contains the gold length.
double length_precision(const std::vector<std::vector<int>>& candidate_lists,
                        const std::vector<int>& gold_lengths);

struct MetricsReport {
  double bleu = 0.0;
  double repetition_rate = 0.0;
  std::vector<BucketResult> bucket_bleu;
  double length_precision = -1.0;  // negative: no candidate lists supplied
  long n_sentences = 0;
};

MetricsReport evaluate_corpus(const std::vector<TokenSeq>& hypotheses,
                              const std::vector<std::vector<TokenSeq>>& reference_sets,
                              const std::vector<std::vector<int>>* length_candidates = nullptr);

std::string report_to_json(const MetricsReport& report);

}  // namespace mp
