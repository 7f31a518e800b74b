#include "mp/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mp/decoding.hpp"

namespace mp {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace

MaskSample sample_mask(const std::vector<int>& gold, Rng& rng) {
  const int n = static_cast<int>(gold.size());
  check(n >= 1, "sample_mask needs a nonempty target");
  const int k = rng.uniform_int(1, n);

  // partial Fisher-Yates: first k entries are a uniform k-subset
  std::vector<int> positions(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const int j = rng.uniform_int(i, n - 1);
    std::swap(positions[static_cast<std::size_t>(i)], positions[static_cast<std::size_t>(j)]);
  }

  MaskSample s;
  s.gold = gold;
  s.mask_set.assign(positions.begin(), positions.begin() + k);
  std::sort(s.mask_set.begin(), s.mask_set.end());
  s.obs_set.assign(positions.begin() + k, positions.end());
  std::sort(s.obs_set.begin(), s.obs_set.end());
  s.tgt_input = gold;
  for (int pos : s.mask_set) s.tgt_input[static_cast<std::size_t>(pos)] = Vocab::MASK;
  return s;
}

std::pair<Tensor, CmlmLossStats> cmlm_loss_with_masks(const std::vector<SentencePair>& batch,
                                                      const std::vector<MaskSample>& masks,
                                                      const Model& model, Mode mode,
                                                      Rng* dropout_rng, float label_smoothing) {
  check(!batch.empty(), "empty batch");
  check(batch.size() == masks.size(), "one mask sample per sentence required");
  const int B = static_cast<int>(batch.size());
  const int V = model.config.vocab_size;
  const int max_len = model.config.max_len;

  std::vector<std::vector<int>> src_rows, tgt_rows;
  src_rows.reserve(batch.size());
  tgt_rows.reserve(batch.size());
  for (int b = 0; b < B; ++b) {
    check(static_cast<int>(batch[static_cast<std::size_t>(b)].tgt.size()) <= max_len,
          "target longer than max_len in cmlm_loss");
    src_rows.push_back(batch[static_cast<std::size_t>(b)].src);
    tgt_rows.push_back(masks[static_cast<std::size_t>(b)].tgt_input);
  }
  const TokenBatch src = TokenBatch::from_rows(src_rows);
  const TokenBatch tgt = TokenBatch::from_rows(tgt_rows);

  ScorerOutput out = cmlm_forward_batch(src, tgt, model, mode, dropout_rng);

  // token loss over masked positions only
  std::vector<int> targets(static_cast<std::size_t>(B) * tgt.len, 0);
  std::vector<float> weights(targets.size(), 0.0f);
  long masked = 0;
  for (int b = 0; b < B; ++b) {
    const auto& gold = batch[static_cast<std::size_t>(b)].tgt;
    for (std::size_t i = 0; i < gold.size(); ++i)
      targets[static_cast<std::size_t>(b) * tgt.len + i] = gold[i];
    for (int pos : masks[static_cast<std::size_t>(b)].mask_set) {
      weights[static_cast<std::size_t>(b) * tgt.len + pos] = 1.0f;
      ++masked;
    }
  }
  Tensor token_loss = smoothed_cross_entropy(reshape(out.token_logits, {B * tgt.len, V}), targets,
                                             label_smoothing, weights);

  // length loss; gold length <= max_len is guaranteed by the caller
  std::vector<int> len_targets(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b)
    len_targets[static_cast<std::size_t>(b)] =
        static_cast<int>(batch[static_cast<std::size_t>(b)].tgt.size());
  Tensor length_loss =
      smoothed_cross_entropy(out.length_logits, len_targets, label_smoothing);

  Tensor total = add(token_loss, scale(length_loss, model.config.length_loss_weight));

  CmlmLossStats stats;
  stats.token_loss = token_loss.item();
  stats.length_loss = length_loss.item();
  stats.total = total.item();
  stats.masked_positions = masked;
  return {total, stats};
}

std::pair<Tensor, CmlmLossStats> cmlm_loss(const std::vector<SentencePair>& batch,
                                           const Model& model, Rng& mask_rng, Mode mode,
                                           Rng* dropout_rng, float label_smoothing) {
  std::vector<MaskSample> masks;
  masks.reserve(batch.size());
  for (const auto& p : batch) masks.push_back(sample_mask(p.tgt, mask_rng));
  return cmlm_loss_with_masks(batch, masks, model, mode, dropout_rng, label_smoothing);
}

Tensor ar_loss(const std::vector<SentencePair>& batch, const Model& model, Mode mode,
               Rng* dropout_rng, float label_smoothing) {
  check(!batch.empty(), "empty batch");
  const int V = model.config.vocab_size;
  std::vector<std::vector<int>> src_rows, prefix_rows;
  for (const auto& p : batch) {
    check(!p.tgt.empty(), "zero-length target in ar_loss");
    check(static_cast<int>(p.tgt.size()) + 1 <= model.config.max_len,
          "target plus BOS longer than max_len in ar_loss");
    src_rows.push_back(p.src);
    std::vector<int> prefix{Vocab::BOS};
    prefix.insert(prefix.end(), p.tgt.begin(), p.tgt.end());
    prefix_rows.push_back(std::move(prefix));
  }
  const TokenBatch src = TokenBatch::from_rows(src_rows);
  const TokenBatch prefix = TokenBatch::from_rows(prefix_rows);
  Tensor logits = ar_forward_batch(src, prefix, model, mode, dropout_rng);

  const int B = prefix.batch;
  std::vector<int> targets(static_cast<std::size_t>(B) * prefix.len, 0);
  std::vector<float> weights(targets.size(), 0.0f);
  for (int b = 0; b < B; ++b) {
    const auto& gold = batch[static_cast<std::size_t>(b)].tgt;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      targets[static_cast<std::size_t>(b) * prefix.len + i] = gold[i];
      weights[static_cast<std::size_t>(b) * prefix.len + i] = 1.0f;
    }
    targets[static_cast<std::size_t>(b) * prefix.len + gold.size()] = Vocab::EOS;
    weights[static_cast<std::size_t>(b) * prefix.len + gold.size()] = 1.0f;
  }
  return smoothed_cross_entropy(reshape(logits, {B * prefix.len, V}), targets, label_smoothing,
                                weights);
}

float lr_schedule(long step, float peak, long warmup) {
  check(step >= 1, "lr_schedule needs step >= 1");
  check(warmup >= 1, "lr_schedule needs warmup >= 1");
  if (step <= warmup) return peak * static_cast<float>(step) / static_cast<float>(warmup);
  return peak * std::sqrt(static_cast<float>(warmup) / static_cast<float>(step));
}

float validation_loss(const std::vector<SentencePair>& pairs, const Model& model, int max_tokens,
                      std::uint64_t seed, float label_smoothing) {
  check(!pairs.empty(), "validation corpus is empty");
  Rng order_rng(seed);
  Rng mask_rng(seed ^ 0x6d61736bULL);
  const auto batches = make_batches(pairs, max_tokens, order_rng);

  NoGradGuard ng;
  if (model.kind == ModelKind::cmlm) {
    double token_acc = 0.0, len_acc = 0.0;
    long masked_total = 0, sentences = 0;
    for (const auto& batch_idx : batches) {
      std::vector<SentencePair> batch;
      for (int i : batch_idx) batch.push_back(pairs[static_cast<std::size_t>(i)]);
      auto [loss, stats] =
          cmlm_loss(batch, model, mask_rng, Mode::eval, nullptr, label_smoothing);
      token_acc += static_cast<double>(stats.token_loss) * stats.masked_positions;
      len_acc += static_cast<double>(stats.length_loss) * static_cast<double>(batch.size());
      masked_total += stats.masked_positions;
      sentences += static_cast<long>(batch.size());
    }
    return static_cast<float>(token_acc / std::max<long>(masked_total, 1) +
                              model.config.length_loss_weight * len_acc /
                                  std::max<long>(sentences, 1));
  }

  double acc = 0.0;
  long positions = 0;
  for (const auto& batch_idx : batches) {
    std::vector<SentencePair> batch;
    long batch_positions = 0;
    for (int i : batch_idx) {
      batch.push_back(pairs[static_cast<std::size_t>(i)]);
      batch_positions += static_cast<long>(batch.back().tgt.size()) + 1;  // + EOS
    }
    Tensor loss = ar_loss(batch, model, Mode::eval, nullptr, label_smoothing);
    acc += static_cast<double>(loss.item()) * static_cast<double>(batch_positions);
    positions += batch_positions;
  }
  return static_cast<float>(acc / std::max<long>(positions, 1));
}

TrainResult train(const Corpus& train_corpus, const Corpus& valid_corpus, ModelKind kind,
                  ModelConfig config, const TrainOptions& options) {
  check(!options.run_dir.empty(), "train needs a run directory for checkpoints");
  std::filesystem::create_directories(options.run_dir);

  // Targets too long for the position budget are dropped, not clamped.
  TrainResult result;
  std::vector<SentencePair> train_pairs;
  const int tgt_budget =
      kind == ModelKind::ar ? config.max_len - 1 : config.max_len;  // AR spends one slot on BOS
  for (const auto& p : train_corpus.pairs) {
    if (p.tgt.empty() || p.src.empty()) {
      ++result.dropped_long_sentences;
      continue;
    }
    if (static_cast<int>(p.tgt.size()) > tgt_budget ||
        static_cast<int>(p.src.size()) + 1 > config.max_len) {
      ++result.dropped_long_sentences;
      continue;
    }
    train_pairs.push_back(p);
  }
  check(!train_pairs.empty(), "no usable training sentences after length filtering");
  std::vector<SentencePair> valid_pairs;
  for (const auto& p : valid_corpus.pairs) {
    if (p.tgt.empty() || p.src.empty()) continue;
    if (static_cast<int>(p.tgt.size()) > tgt_budget ||
        static_cast<int>(p.src.size()) + 1 > config.max_len)
      continue;
    valid_pairs.push_back(p);
  }
  check(!valid_pairs.empty(), "no usable validation sentences after length filtering");

  Model model = make_model(kind, config, options.seed);
  AdamOptimizer optimizer(options.adam);
  Rng root(options.seed);
  Rng batch_rng = root.fork(0xba7c4);
  Rng mask_rng = root.fork(0x6d61);
  Rng dropout_rng = root.fork(0xd409);
  const long warmup = options.warmup_steps > 0
                          ? options.warmup_steps
                          : std::max(1L, static_cast<long>(options.max_steps) / 20);

  std::ofstream log(options.run_dir + "/train.log");
  if (!log) throw TrainingError("cannot open training log in " + options.run_dir);
  log << "seed=" << options.seed << " max_steps=" << options.max_steps
      << " max_tokens=" << options.max_tokens_per_batch << " warmup=" << warmup
      << " peak_lr=" << format_float(options.peak_lr)
      << " dropped_long=" << result.dropped_long_sentences << "\n";

  // best-k registry: (valid loss, checkpoint path), ascending loss
  std::vector<std::pair<float, std::string>> registry;
  auto run_validation = [&](long step) {
    const float vloss = validation_loss(valid_pairs, model, options.max_tokens_per_batch,
                                        options.seed ^ 0x76a1ULL, options.label_smoothing);
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_step%06ld.bin", step);
    const std::string path = options.run_dir + "/" + name;
    save_checkpoint(model, path);
    registry.emplace_back(vloss, path);
    std::stable_sort(registry.begin(), registry.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    while (static_cast<int>(registry.size()) > options.keep_best) {
      std::error_code ec;
      std::filesystem::remove(registry.back().second, ec);
      registry.pop_back();
    }
    log << "valid step=" << step << " loss=" << format_float(vloss) << "\n";
    log.flush();
    if (!options.quiet)
      std::cout << "[train] step " << step << " valid_loss " << vloss << std::endl;
    return vloss;
  };

  long step = 0;
  long last_valid_step = 0;
  bool done = false;
  while (!done) {
    const auto batches = make_batches(train_pairs, options.max_tokens_per_batch, batch_rng);
    for (const auto& batch_idx : batches) {
      ++step;
      std::vector<SentencePair> batch;
      batch.reserve(batch_idx.size());
      for (int i : batch_idx) batch.push_back(train_pairs[static_cast<std::size_t>(i)]);

      Tensor loss;
      CmlmLossStats stats;
      if (kind == ModelKind::cmlm) {
        auto [l, s] =
            cmlm_loss(batch, model, mask_rng, Mode::train, &dropout_rng, options.label_smoothing);
        loss = l;
        stats = s;
      } else {
        loss = ar_loss(batch, model, Mode::train, &dropout_rng, options.label_smoothing);
        stats.total = loss.item();
        stats.token_loss = stats.total;
      }
      if (!std::isfinite(stats.total))
        throw TrainingError("training diverged: non-finite loss at step " + std::to_string(step));

      model.params.zero_grads();
      loss.backward();
      if (options.clip_norm > 0.0f) clip_global_norm(model.params, options.clip_norm);
      const float lr = lr_schedule(step, options.peak_lr, warmup);
      optimizer.update(model.params, lr);

      log << "step=" << step << " lr=" << format_float(lr)
          << " loss=" << format_float(stats.total)
          << " token_loss=" << format_float(stats.token_loss)
          << " length_loss=" << format_float(stats.length_loss) << "\n";
      if (step % 100 == 0) log.flush();

      if (step >= options.max_steps) {
        done = true;
        break;
      }
    }
    // validation at each epoch end, rate-limited for tiny corpora
    if (done || step - last_valid_step >= options.min_steps_between_validations) {
      run_validation(step);
      last_valid_step = step;
    }
  }
  if (registry.empty()) run_validation(step);

  std::vector<std::string> best_paths;
  for (const auto& [loss_v, path] : registry) best_paths.push_back(path);
  result.model = average_checkpoints(best_paths);
  result.best_checkpoints = registry;
  result.steps = step;
  result.best_valid_loss = registry.front().first;
  save_checkpoint(result.model, options.run_dir + "/final.ckpt");
  log << "final best_valid=" << format_float(result.best_valid_loss)
      << " averaged=" << registry.size() << "\n";
  return result;
}

Corpus distill_corpus(const Model& teacher, const Corpus& corpus, int beam, DistillStats* stats) {
  check(teacher.kind == ModelKind::ar, "distillation teacher must be an AR model");
  Corpus out;
  out.vocab = corpus.vocab;
  out.pairs.reserve(corpus.pairs.size());
  DistillStats local;
  ModelArScorer scorer(teacher, /*use_cache=*/true);
  const int max_len = teacher.config.max_len - 1;
  for (const auto& p : corpus.pairs) {
    const ArHypothesis hyp = beam == 1 ? greedy_decode(p.src, scorer, max_len)
                                       : beam_decode(p.src, scorer, beam, max_len, true);
    SentencePair np;
    np.src = p.src;
    if (hyp.tokens.empty()) {
      np.tgt = p.tgt;  // teacher produced nothing; keep the gold target
      ++local.fallbacks;
    } else {
      np.tgt = hyp.tokens;
    }
    out.pairs.push_back(std::move(np));
  }
  if (local.fallbacks > 0)
    std::cerr << "[distill] kept gold target for " << local.fallbacks
              << " empty teacher translations\n";
  if (stats) *stats = local;
  return out;
}

}  // namespace mp
