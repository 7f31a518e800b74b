#pragma once

#include <map>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mp/model.hpp"

namespace mp {

// Number of tokens to mask at iteration t of T for a length-N target:
// everything at t=0, then floor(N*(T-t)/T). May reach 0 for short
// sequences; such iterations are skipped by the caller.
int mask_schedule(int N, int T, int t);

// Positions of the n smallest probabilities; ties toward the lowest index.
std::vector<int> select_mask_set(std::span<const float> p, int n);

struct DecodeConfig {
  int iterations = 4;        // T
  int length_candidates = 1; // ell
  int beam = 5;              // AR beam size b
  bool use_gold_length = false;
  bool length_norm = true;   // AR: score finished hypotheses by mean log-prob
  bool use_cache = true;     // AR: incremental decoding
  int batch_size = 10;
};

// One parallel forward pass scoring a batch of (source, partial-target)
// items; out[i] holds row-major [len(tgt_partials[i]) x vocab] probabilities.
class CmlmScorer {
 public:
  virtual ~CmlmScorer() = default;
  virtual int vocab_size() const = 0;
  virtual std::vector<std::vector<float>> score_batch(
      const std::vector<const std::vector<int>*>& srcs,
      const std::vector<const std::vector<int>*>& tgt_partials) = 0;
};

class LengthPredictor {
 public:
  virtual ~LengthPredictor() = default;
  virtual std::vector<std::vector<std::pair<int, float>>> predict(
      const std::vector<const std::vector<int>*>& srcs, int ell) = 0;
  virtual int max_length() const = 0;
};

// Target sequence and per-token probability scores evolved by mask-predict.
struct DecodeState {
  std::vector<int> y;
  std::vector<float> p;
  double avg_log_prob() const;
};

// Mask-predict at a fixed target length N: iterate t = 0..T-1, mask the
// lowest-confidence n(t) tokens, re-predict them in one parallel pass.
DecodeState mask_predict_single(const std::vector<int>& src, int N, CmlmScorer& scorer, int T);

// Full decode: top-ell length candidates (or the gold length), decoded in
// parallel; returns the candidate with the highest average log-probability
// (ties toward the shorter length).
std::vector<int> mask_predict(const std::vector<int>& src, CmlmScorer& scorer,
                              LengthPredictor& lengths, const DecodeConfig& cfg,
                              int gold_length = 0);

// Batched corpus decode; sentence results are independent of batching.
std::vector<std::vector<int>> mask_predict_corpus(const std::vector<std::vector<int>>& srcs,
                                                  CmlmScorer& scorer, LengthPredictor& lengths,
                                                  const DecodeConfig& cfg,
                                                  const std::vector<int>* gold_lengths = nullptr);

// Left-to-right conditional scorer. start() conditions on BOS and yields
// log-probabilities for the first token; advance() feeds one token and
// yields the next distribution. States are immutable snapshots.
class ArScorer {
 public:
  virtual ~ArScorer() = default;
  struct State {
    virtual ~State() = default;
  };
  using StatePtr = std::shared_ptr<const State>;

  virtual int vocab_size() const = 0;
  virtual int eos_id() const = 0;
  virtual StatePtr start(const std::vector<int>& src, std::vector<float>& log_probs) = 0;
  virtual StatePtr advance(const State& state, int token, std::vector<float>& log_probs) = 0;
};

struct ArHypothesis {
  std::vector<int> tokens;  // content only, EOS not included
  double sum_log_prob = 0.0;
  bool finished = false;    // EOS was produced within max_len
};

ArHypothesis greedy_decode(const std::vector<int>& src, ArScorer& scorer, int max_len);
ArHypothesis beam_decode(const std::vector<int>& src, ArScorer& scorer, int beam, int max_len,
                         bool length_norm = true);

// ---- model-backed scorer adapters ----

// CMLM adapter; caches encoder outputs per distinct source between
// iterations (reset per sentence batch). Reserved ids other than real
// content never win the argmax: their probabilities are zeroed.
class ModelCmlmScorer : public CmlmScorer, public LengthPredictor {
 public:
  explicit ModelCmlmScorer(const Model& model);
  int vocab_size() const override;
  std::vector<std::vector<float>> score_batch(
      const std::vector<const std::vector<int>*>& srcs,
      const std::vector<const std::vector<int>*>& tgt_partials) override;
  std::vector<std::vector<std::pair<int, float>>> predict(
      const std::vector<const std::vector<int>*>& srcs, int ell) override;
  int max_length() const override;
  void reset_cache();
  long forward_passes() const { return forward_passes_; }
  long items_scored() const { return items_scored_; }

 private:
  const Model& model_;
  std::map<std::vector<int>, Tensor> enc_cache_;  // src -> [len(src)+1, d]
  long forward_passes_ = 0;
  long items_scored_ = 0;
};

// AR adapter over the incremental cache; a --no-cache variant re-runs the
// full decoder per step for the uncached baseline comparison.
class ModelArScorer : public ArScorer {
 public:
  ModelArScorer(const Model& model, bool use_cache = true);
  int vocab_size() const override;
  int eos_id() const override;
  StatePtr start(const std::vector<int>& src, std::vector<float>& log_probs) override;
  StatePtr advance(const State& state, int token, std::vector<float>& log_probs) override;

 private:
  const Model& model_;
  bool use_cache_;
};

// Per-sentence AR decode over a corpus (greedy when cfg.beam == 1).
std::vector<std::vector<int>> ar_decode_corpus(const std::vector<std::vector<int>>& srcs,
                                               const Model& model, const DecodeConfig& cfg);

}  // namespace mp
