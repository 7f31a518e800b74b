#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mp/adam.hpp"
#include "mp/corpus.hpp"
#include "mp/model.hpp"

namespace mp {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Uniformly masked training sample: k ~ Uniform{1..N} positions replaced by
// MASK, the rest observed.
struct MaskSample {
  std::vector<int> tgt_input;
  std::vector<int> mask_set;  // ascending positions
  std::vector<int> obs_set;
  std::vector<int> gold;
};

MaskSample sample_mask(const std::vector<int>& gold, Rng& rng);

struct CmlmLossStats {
  float total = 0;
  float token_loss = 0;
  float length_loss = 0;
  long masked_positions = 0;
};

// Loss = mean smoothed CE over masked token positions (pooled across the
// batch) + length_loss_weight * smoothed CE of the length head. Observed and
// PAD positions contribute nothing.
std::pair<Tensor, CmlmLossStats> cmlm_loss_with_masks(const std::vector<SentencePair>& batch,
                                                      const std::vector<MaskSample>& masks,
                                                      const Model& model, Mode mode,
                                                      Rng* dropout_rng = nullptr,
                                                      float label_smoothing = 0.1f);
std::pair<Tensor, CmlmLossStats> cmlm_loss(const std::vector<SentencePair>& batch,
                                           const Model& model, Rng& mask_rng, Mode mode,
                                           Rng* dropout_rng = nullptr,
                                           float label_smoothing = 0.1f);

// Teacher-forced shifted cross entropy over all non-PAD target positions,
// EOS included.
Tensor ar_loss(const std::vector<SentencePair>& batch, const Model& model, Mode mode,
               Rng* dropout_rng = nullptr, float label_smoothing = 0.1f);

// Linear warmup to `peak`, then inverse square-root decay; continuous at the
// joint.
float lr_schedule(long step, float peak = 5e-4f, long warmup = 10000);

struct TrainOptions {
  int max_steps = 2000;
  int max_tokens_per_batch = 4096;
  float peak_lr = 5e-4f;
  int warmup_steps = 0;  // 0: 5% of max_steps
  float clip_norm = 1.0f;
  float label_smoothing = 0.1f;
  std::uint64_t seed = 1;
  int keep_best = 5;
  int min_steps_between_validations = 50;
  std::string run_dir;  // checkpoints and train.log land here
  AdamConfig adam;
  bool quiet = false;  // suppress per-step stdout echo
};

struct TrainResult {
  Model model;  // element-wise mean of the best checkpoints
  std::vector<std::pair<float, std::string>> best_checkpoints;  // valid loss ascending
  long steps = 0;
  float best_valid_loss = 0;
  long dropped_long_sentences = 0;
};

TrainResult train(const Corpus& train_corpus, const Corpus& valid_corpus, ModelKind kind,
                  ModelConfig config, const TrainOptions& options);

// Pooled validation loss in eval mode; CMLM masks are drawn from a fixed
// stream so successive validations are comparable.
float validation_loss(const std::vector<SentencePair>& pairs, const Model& model, int max_tokens,
                      std::uint64_t seed, float label_smoothing = 0.1f);

struct DistillStats {
  long fallbacks = 0;  // teacher emitted nothing; gold kept
};

// Replaces every training target by the teacher's beam output; sources and
// order unchanged.
Corpus distill_corpus(const Model& teacher, const Corpus& corpus, int beam,
                      DistillStats* stats = nullptr);

}  // namespace mp
