#include "mp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include <json.hpp>

namespace mp {

namespace {

constexpr int kMaxOrder = 4;

// n-grams joined with an unlikely separator byte
std::unordered_map<std::string, long> ngram_counts(const TokenSeq& tokens, int n) {
  std::unordered_map<std::string, long> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key += '\x1f';
      key += tokens[i + static_cast<std::size_t>(j)];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace

BleuDetail bleu_detail(const std::vector<TokenSeq>& hypotheses,
                       const std::vector<std::vector<TokenSeq>>& reference_sets) {
  if (hypotheses.empty()) throw EvalError("bleu over an empty corpus");
  if (hypotheses.size() != reference_sets.size())
    throw EvalError("hypotheses and reference sets are not aligned");

  BleuDetail d{};
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const TokenSeq& hyp = hypotheses[s];
    const auto& refs = reference_sets[s];
    if (refs.empty()) throw EvalError("sentence without references");

    d.hyp_len += static_cast<long>(hyp.size());
    // closest reference length, ties toward the shorter reference
    long best_ref = static_cast<long>(refs[0].size());
    for (const auto& r : refs) {
      const long rl = static_cast<long>(r.size());
      const long cur = std::abs(rl - static_cast<long>(hyp.size()));
      const long best = std::abs(best_ref - static_cast<long>(hyp.size()));
      if (cur < best || (cur == best && rl < best_ref)) best_ref = rl;
    }
    d.ref_len += best_ref;

    for (int n = 1; n <= kMaxOrder; ++n) {
      const auto hyp_counts = ngram_counts(hyp, n);
      std::unordered_map<std::string, long> max_ref;
      for (const auto& r : refs)
        for (const auto& [k, c] : ngram_counts(r, n))
          max_ref[k] = std::max(max_ref[k], c);
      long matched = 0, total = 0;
      for (const auto& [k, c] : hyp_counts) {
        total += c;
        auto it = max_ref.find(k);
        if (it != max_ref.end()) matched += std::min(c, it->second);
      }
      d.matched[n - 1] += matched;
      d.total[n - 1] += total;
    }
  }

  double log_prec = 0.0;
  bool zero = false;
  for (int n = 0; n < kMaxOrder; ++n) {
    d.precisions[n] = d.total[n] > 0 ? static_cast<double>(d.matched[n]) / d.total[n] : 0.0;
    if (d.matched[n] == 0) zero = true;
    if (!zero) log_prec += std::log(d.precisions[n]);
  }
  d.brevity_penalty =
      d.hyp_len < d.ref_len && d.hyp_len > 0
          ? std::exp(1.0 - static_cast<double>(d.ref_len) / static_cast<double>(d.hyp_len))
          : (d.hyp_len == 0 ? 0.0 : 1.0);
  d.score = zero || d.hyp_len == 0
                ? 0.0
                : 100.0 * d.brevity_penalty * std::exp(log_prec / kMaxOrder);
  return d;
}

double bleu(const std::vector<TokenSeq>& hypotheses,
            const std::vector<std::vector<TokenSeq>>& reference_sets) {
  return bleu_detail(hypotheses, reference_sets).score;
}

double repetition_rate(const std::vector<TokenSeq>& sentences) {
  long repeats = 0, tokens = 0;
  for (const auto& s : sentences) {
    tokens += static_cast<long>(s.size());
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] == s[i - 1]) ++repeats;
  }
  return tokens == 0 ? 0.0 : static_cast<double>(repeats) / static_cast<double>(tokens);
}

std::vector<BucketResult> bucket_by_length(
    const std::vector<TokenSeq>& hypotheses,
    const std::vector<std::vector<TokenSeq>>& reference_sets) {
  if (hypotheses.size() != reference_sets.size())
    throw EvalError("hypotheses and reference sets are not aligned");
  const int edges[] = {1, 10, 20, 30, 40};
  std::vector<BucketResult> buckets;
  for (int i = 0; i < 5; ++i) {
    BucketResult b;
    b.lo = edges[i];
    b.hi = i + 1 < 5 ? edges[i + 1] : 0;
    b.label = b.hi ? std::to_string(b.lo) + "<=N<" + std::to_string(b.hi)
                   : std::to_string(b.lo) + "<=N";
    buckets.push_back(b);
  }

  std::vector<std::vector<TokenSeq>> hyp_by_bucket(5);
  std::vector<std::vector<std::vector<TokenSeq>>> ref_by_bucket(5);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const long n = static_cast<long>(reference_sets[s].front().size());
    int bucket = 4;
    for (int i = 0; i < 4; ++i) {
      if (n >= buckets[static_cast<std::size_t>(i)].lo &&
          n < buckets[static_cast<std::size_t>(i)].hi) {
        bucket = i;
        break;
      }
    }
    if (n < buckets[0].lo) bucket = 0;  // zero-length references land in the first bucket
    hyp_by_bucket[static_cast<std::size_t>(bucket)].push_back(hypotheses[s]);
    ref_by_bucket[static_cast<std::size_t>(bucket)].push_back(reference_sets[s]);
  }
  for (int i = 0; i < 5; ++i) {
    buckets[static_cast<std::size_t>(i)].count =
        static_cast<long>(hyp_by_bucket[static_cast<std::size_t>(i)].size());
    if (buckets[static_cast<std::size_t>(i)].count > 0)
      buckets[static_cast<std::size_t>(i)].bleu = bleu(hyp_by_bucket[static_cast<std::size_t>(i)],
                                                       ref_by_bucket[static_cast<std::size_t>(i)]);
  }
  return buckets;
}

double length_precision(const std::vector<std::vector<int>>& candidate_lists,
                        const std::vector<int>& gold_lengths) {
  if (candidate_lists.size() != gold_lengths.size())
    throw EvalError("candidate lists and gold lengths are not aligned");
  if (candidate_lists.empty()) return 0.0;
  long hits = 0;
  for (std::size_t i = 0; i < candidate_lists.size(); ++i) {
    const auto& c = candidate_lists[i];
    if (std::find(c.begin(), c.end(), gold_lengths[i]) != c.end()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(candidate_lists.size());
}

MetricsReport evaluate_corpus(const std::vector<TokenSeq>& hypotheses,
                              const std::vector<std::vector<TokenSeq>>& reference_sets,
                              const std::vector<std::vector<int>>* length_candidates) {
  MetricsReport r;
  r.n_sentences = static_cast<long>(hypotheses.size());
  r.bleu = bleu(hypotheses, reference_sets);
  r.repetition_rate = repetition_rate(hypotheses);
  r.bucket_bleu = bucket_by_length(hypotheses, reference_sets);
  std::vector<int> gold;
  gold.reserve(reference_sets.size());
  for (const auto& refs : reference_sets) gold.push_back(static_cast<int>(refs.front().size()));
  if (length_candidates) {
    r.length_precision = length_precision(*length_candidates, gold);
  } else {
    // singleton candidates: the hypothesis length itself
    std::vector<std::vector<int>> own;
    own.reserve(hypotheses.size());
    for (const auto& h : hypotheses) own.push_back({static_cast<int>(h.size())});
    r.length_precision = length_precision(own, gold);
  }
  return r;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["bleu"] = report.bleu;
  j["repetition_rate"] = report.repetition_rate;
  nlohmann::json buckets = nlohmann::json::object();
  for (const auto& b : report.bucket_bleu) {
    buckets[b.label] = {{"bleu", b.bleu}, {"count", b.count}};
  }
  j["bucket_bleu"] = buckets;
  j["length_precision"] = report.length_precision;
  j["n_sentences"] = report.n_sentences;
  return j.dump(2);
}

}  // namespace mp
