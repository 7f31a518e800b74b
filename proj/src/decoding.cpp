#include "mp/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mp {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

int argmax_first(std::span<const float> row) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(row.size()); ++i)
    if (row[static_cast<std::size_t>(i)] > row[static_cast<std::size_t>(best)]) best = i;
  return best;
}

constexpr float kBanned = -1e30f;

}  // namespace

int mask_schedule(int N, int T, int t) {
  check(N >= 1 && T >= 1, "mask_schedule needs N >= 1 and T >= 1");
  check(t >= 0 && t < T, "mask_schedule iteration out of range: t=" + std::to_string(t) +
                             " T=" + std::to_string(T));
  if (t == 0) return N;
  return static_cast<int>(static_cast<long>(N) * (T - t) / T);
}

std::vector<int> select_mask_set(std::span<const float> p, int n) {
  check(n >= 0 && n <= static_cast<int>(p.size()),
        "select_mask_set: n exceeds the number of positions");
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return p[static_cast<std::size_t>(a)] < p[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(n));
  return order;
}

double DecodeState::avg_log_prob() const {
  if (p.empty()) return -std::numeric_limits<double>::infinity();
  double acc = 0.0;
  for (float v : p) acc += std::log(std::max(static_cast<double>(v), 1e-300));
  return acc / static_cast<double>(p.size());
}

namespace {

struct Candidate {
  int sentence;
  int length;
  DecodeState state;
};

// Shared engine: runs mask-predict over all candidates, batching every
// active candidate of an iteration into one scorer call.
void run_mask_predict(std::vector<Candidate>& cands, const std::vector<std::vector<int>>& srcs,
                      CmlmScorer& scorer, int T) {
  check(T >= 1, "mask-predict needs at least one iteration");
  for (auto& c : cands) {
    c.state.y.assign(static_cast<std::size_t>(c.length), Vocab::MASK);
    c.state.p.assign(static_cast<std::size_t>(c.length), 0.0f);
  }
  const int V = scorer.vocab_size();

  for (int t = 0; t < T; ++t) {
    std::vector<int> active;
    std::vector<std::vector<int>> mask_sets;
    std::vector<std::vector<int>> partials;
    for (int ci = 0; ci < static_cast<int>(cands.size()); ++ci) {
      Candidate& c = cands[static_cast<std::size_t>(ci)];
      const int n = mask_schedule(c.length, T, t);
      if (n == 0) continue;  // nothing to re-predict this round
      std::vector<int> mask_set;
      if (t == 0) {
        mask_set.resize(static_cast<std::size_t>(c.length));
        std::iota(mask_set.begin(), mask_set.end(), 0);
      } else {
        mask_set = select_mask_set(c.state.p, n);
      }
      std::vector<int> partial = c.state.y;
      for (int pos : mask_set) partial[static_cast<std::size_t>(pos)] = Vocab::MASK;
      active.push_back(ci);
      mask_sets.push_back(std::move(mask_set));
      partials.push_back(std::move(partial));
    }
    if (active.empty()) continue;

    std::vector<const std::vector<int>*> src_ptrs, tgt_ptrs;
    src_ptrs.reserve(active.size());
    tgt_ptrs.reserve(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) {
      src_ptrs.push_back(
          &srcs[static_cast<std::size_t>(cands[static_cast<std::size_t>(active[i])].sentence)]);
      tgt_ptrs.push_back(&partials[i]);
    }
    const auto probs = scorer.score_batch(src_ptrs, tgt_ptrs);
    check(probs.size() == active.size(), "scorer returned the wrong number of items");

    for (std::size_t i = 0; i < active.size(); ++i) {
      Candidate& c = cands[static_cast<std::size_t>(active[i])];
      const auto& rows = probs[i];
      check(static_cast<int>(rows.size()) == c.length * V,
            "scorer row size mismatch for a candidate");
      for (int pos : mask_sets[i]) {
        std::span<const float> row(rows.data() + static_cast<std::size_t>(pos) * V,
                                   static_cast<std::size_t>(V));
        const int w = argmax_first(row);
        c.state.y[static_cast<std::size_t>(pos)] = w;
        c.state.p[static_cast<std::size_t>(pos)] = row[static_cast<std::size_t>(w)];
      }
    }
  }
}

const Candidate& pick_best(const std::vector<Candidate>& cands, int sentence) {
  const Candidate* best = nullptr;
  double best_score = 0.0;
  for (const auto& c : cands) {
    if (c.sentence != sentence) continue;
    const double score = c.state.avg_log_prob();
    if (!best || score > best_score || (score == best_score && c.length < best->length)) {
      best = &c;
      best_score = score;
    }
  }
  check(best != nullptr, "no decode candidate for sentence");
  return *best;
}

}  // namespace

DecodeState mask_predict_single(const std::vector<int>& src, int N, CmlmScorer& scorer, int T) {
  check(N >= 1, "target length must be >= 1");
  std::vector<std::vector<int>> srcs{src};
  std::vector<Candidate> cands{{0, N, {}}};
  run_mask_predict(cands, srcs, scorer, T);
  return cands[0].state;
}

std::vector<std::vector<int>> mask_predict_corpus(const std::vector<std::vector<int>>& srcs,
                                                  CmlmScorer& scorer, LengthPredictor& lengths,
                                                  const DecodeConfig& cfg,
                                                  const std::vector<int>* gold_lengths) {
  const int max_len = lengths.max_length();
  std::vector<Candidate> cands;
  if (cfg.use_gold_length) {
    check(gold_lengths && gold_lengths->size() == srcs.size(),
          "gold lengths required for gold-length decoding");
    for (int s = 0; s < static_cast<int>(srcs.size()); ++s) {
      const int N = std::clamp((*gold_lengths)[static_cast<std::size_t>(s)], 1, max_len);
      cands.push_back({s, N, {}});
    }
  } else {
    check(cfg.length_candidates >= 1, "need at least one length candidate");
    std::vector<const std::vector<int>*> ptrs;
    ptrs.reserve(srcs.size());
    for (const auto& s : srcs) ptrs.push_back(&s);
    const auto per_sentence = lengths.predict(ptrs, cfg.length_candidates);
    for (int s = 0; s < static_cast<int>(srcs.size()); ++s) {
      for (const auto& [len, lp] : per_sentence[static_cast<std::size_t>(s)]) {
        cands.push_back({s, std::clamp(len, 1, max_len), {}});
      }
    }
  }

  run_mask_predict(cands, srcs, scorer, cfg.iterations);

  std::vector<std::vector<int>> out;
  out.reserve(srcs.size());
  for (int s = 0; s < static_cast<int>(srcs.size()); ++s)
    out.push_back(pick_best(cands, s).state.y);
  return out;
}

std::vector<int> mask_predict(const std::vector<int>& src, CmlmScorer& scorer,
                              LengthPredictor& lengths, const DecodeConfig& cfg, int gold_length) {
  std::vector<int> gold{gold_length};
  return mask_predict_corpus({src}, scorer, lengths, cfg,
                             cfg.use_gold_length ? &gold : nullptr)[0];
}

// ---------------------------------------------------------------------------
// AR decoding

ArHypothesis greedy_decode(const std::vector<int>& src, ArScorer& scorer, int max_len) {
  std::vector<float> lp;
  auto state = scorer.start(src, lp);
  ArHypothesis hyp;
  for (int step = 0; step < max_len; ++step) {
    const int w = argmax_first(lp);
    hyp.sum_log_prob += lp[static_cast<std::size_t>(w)];
    if (w == scorer.eos_id()) {
      hyp.finished = true;
      break;
    }
    hyp.tokens.push_back(w);
    state = scorer.advance(*state, w, lp);
  }
  return hyp;
}

ArHypothesis beam_decode(const std::vector<int>& src, ArScorer& scorer, int beam, int max_len,
                         bool length_norm) {
  check(beam >= 1, "beam size must be >= 1");
  const int V = scorer.vocab_size();
  const int eos = scorer.eos_id();

  struct Live {
    std::vector<int> tokens;
    ArScorer::StatePtr state;
    std::vector<float> lp;
    double sum_lp = 0.0;
  };
  auto final_score = [&](double sum_lp, std::size_t content_len) {
    // EOS counts as a scored token
    return length_norm ? sum_lp / static_cast<double>(content_len + 1) : sum_lp;
  };

  std::vector<Live> live(1);
  live[0].state = scorer.start(src, live[0].lp);

  std::vector<ArHypothesis> done;
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Expansion {
      double score;
      int hyp;
      int token;
    };
    std::vector<Expansion> exps;
    exps.reserve(live.size() * static_cast<std::size_t>(V));
    for (int h = 0; h < static_cast<int>(live.size()); ++h) {
      const auto& lp = live[static_cast<std::size_t>(h)].lp;
      for (int w = 0; w < V; ++w)
        exps.push_back(
            {live[static_cast<std::size_t>(h)].sum_lp + lp[static_cast<std::size_t>(w)], h, w});
    }
    std::stable_sort(exps.begin(), exps.end(), [](const Expansion& a, const Expansion& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });

    // Top `beam` expansions per step; an EOS expansion retires its
    // hypothesis and consumes the slot.
    std::vector<Live> next;
    int taken = 0;
    for (const auto& e : exps) {
      if (taken >= beam) break;
      const Live& parent = live[static_cast<std::size_t>(e.hyp)];
      ++taken;
      if (e.token == eos) {
        ArHypothesis h;
        h.tokens = parent.tokens;
        h.sum_log_prob = e.score;
        h.finished = true;
        done.push_back(std::move(h));
        continue;
      }
      Live child;
      child.tokens = parent.tokens;
      child.tokens.push_back(e.token);
      child.sum_lp = e.score;
      child.state = scorer.advance(*parent.state, e.token, child.lp);
      next.push_back(std::move(child));
    }
    live = std::move(next);
  }

  const ArHypothesis* best = nullptr;
  double best_score = 0.0;
  for (const auto& h : done) {
    const double s = final_score(h.sum_log_prob, h.tokens.size());
    if (!best || s > best_score || (s == best_score && h.tokens.size() < best->tokens.size())) {
      best = &h;
      best_score = s;
    }
  }
  if (best) return *best;

  // No hypothesis finished within max_len: return the best live one, flagged.
  check(!live.empty(), "beam search ended with no hypotheses");
  ArHypothesis fallback;
  double fb_score = 0.0;
  bool have = false;
  for (const auto& h : live) {
    const double s = length_norm && !h.tokens.empty()
                         ? h.sum_lp / static_cast<double>(h.tokens.size())
                         : h.sum_lp;
    if (!have || s > fb_score) {
      fallback.tokens = h.tokens;
      fallback.sum_log_prob = h.sum_lp;
      fallback.finished = false;
      fb_score = s;
      have = true;
    }
  }
  return fallback;
}

// ---------------------------------------------------------------------------
// model-backed adapters

ModelCmlmScorer::ModelCmlmScorer(const Model& model) : model_(model) {
  check(model.kind == ModelKind::cmlm, "ModelCmlmScorer needs a CMLM");
}

int ModelCmlmScorer::vocab_size() const { return model_.config.vocab_size; }
int ModelCmlmScorer::max_length() const { return model_.config.max_len; }
void ModelCmlmScorer::reset_cache() { enc_cache_.clear(); }

std::vector<std::vector<float>> ModelCmlmScorer::score_batch(
    const std::vector<const std::vector<int>*>& srcs,
    const std::vector<const std::vector<int>*>& tgt_partials) {
  check(srcs.size() == tgt_partials.size(), "scorer item lists disagree");
  check(!srcs.empty(), "empty scorer batch");
  NoGradGuard ng;
  const int d = model_.config.d_model;
  const int V = model_.config.vocab_size;

  // Encode each distinct source once per batch of iterations.
  std::vector<std::vector<int>> to_encode;
  for (const auto* src : srcs)
    if (enc_cache_.find(*src) == enc_cache_.end()) to_encode.push_back(*src);
  std::sort(to_encode.begin(), to_encode.end());
  to_encode.erase(std::unique(to_encode.begin(), to_encode.end()), to_encode.end());
  if (!to_encode.empty()) {
    const TokenBatch enc_in = with_length_token(TokenBatch::from_rows(to_encode));
    Tensor enc_out = encoder_forward(enc_in, model_.params, model_.config, Mode::eval, nullptr);
    ++forward_passes_;
    for (int b = 0; b < static_cast<int>(to_encode.size()); ++b) {
      const int rows = static_cast<int>(to_encode[static_cast<std::size_t>(b)].size()) + 1;
      std::vector<float> buf(static_cast<std::size_t>(rows) * d);
      const float* base = enc_out.data().data() +
                          static_cast<std::size_t>(b) * enc_in.len * static_cast<std::size_t>(d);
      std::copy(base, base + static_cast<std::size_t>(rows) * d, buf.begin());
      enc_cache_.emplace(to_encode[static_cast<std::size_t>(b)],
                         Tensor::from_data({rows, d}, std::move(buf)));
    }
  }

  // Replicate per-item encoder rows into one padded decode batch.
  int max_enc = 0;
  std::vector<std::vector<int>> enc_rows;
  enc_rows.reserve(srcs.size());
  for (const auto* src : srcs) {
    std::vector<int> row{Vocab::LENGTH};
    row.insert(row.end(), src->begin(), src->end());
    max_enc = std::max(max_enc, static_cast<int>(row.size()));
    enc_rows.push_back(std::move(row));
  }
  const TokenBatch enc_items = TokenBatch::from_rows(enc_rows);
  std::vector<float> enc_buf(srcs.size() * static_cast<std::size_t>(max_enc) * d, 0.0f);
  for (std::size_t i = 0; i < srcs.size(); ++i) {
    const Tensor& enc = enc_cache_.at(*srcs[i]);
    std::copy(enc.data().begin(), enc.data().end(),
              enc_buf.begin() + i * static_cast<std::size_t>(max_enc) * d);
  }
  Tensor enc_tensor =
      Tensor::from_data({static_cast<int>(srcs.size()), max_enc, d}, std::move(enc_buf));

  std::vector<std::vector<int>> tgt_rows;
  tgt_rows.reserve(tgt_partials.size());
  for (const auto* t : tgt_partials) tgt_rows.push_back(*t);
  const TokenBatch tgt = TokenBatch::from_rows(tgt_rows);

  Tensor logits = decoder_forward(tgt, enc_tensor, enc_items, model_.params, model_.config,
                                  Mode::eval, nullptr);
  Tensor probs = softmax(logits, -1);
  ++forward_passes_;
  items_scored_ += static_cast<long>(srcs.size());

  std::vector<std::vector<float>> out;
  out.reserve(srcs.size());
  for (std::size_t i = 0; i < srcs.size(); ++i) {
    const int n = static_cast<int>(tgt_partials[i]->size());
    std::vector<float> rows(static_cast<std::size_t>(n) * V);
    const float* base = probs.data().data() + i * static_cast<std::size_t>(tgt.len) * V;
    std::copy(base, base + static_cast<std::size_t>(n) * V, rows.begin());
    // reserved ids never win the argmax over a CMLM target slot
    for (int pos = 0; pos < n; ++pos)
      for (int r = 0; r < Vocab::reserved_count; ++r)
        rows[static_cast<std::size_t>(pos) * V + r] = 0.0f;
    out.push_back(std::move(rows));
  }
  return out;
}

std::vector<std::vector<std::pair<int, float>>> ModelCmlmScorer::predict(
    const std::vector<const std::vector<int>*>& srcs, int ell) {
  std::vector<std::vector<int>> rows;
  rows.reserve(srcs.size());
  for (const auto* s : srcs) rows.push_back(*s);
  return predict_length_batch(rows, model_, ell);
}

namespace {

struct CachedArState : ArScorer::State {
  Tensor enc_out;  // [len(src), d], shared across copies
  DecoderCache cache;
};

struct UncachedArState : ArScorer::State {
  Tensor enc_out;
  std::vector<int> src;
  std::vector<int> prefix;  // starts with BOS
};

std::vector<float> to_log_probs(std::span<const float> logits, bool ban_reserved) {
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double denom = 0.0;
  for (float v : logits) denom += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(denom);
  std::vector<float> lp(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    lp[i] = static_cast<float>(static_cast<double>(logits[i]) - lse);
  if (ban_reserved) {
    for (int r : {Vocab::PAD, Vocab::UNK, Vocab::MASK, Vocab::LENGTH, Vocab::BOS})
      lp[static_cast<std::size_t>(r)] = kBanned;
  }
  return lp;
}

}  // namespace

ModelArScorer::ModelArScorer(const Model& model, bool use_cache)
    : model_(model), use_cache_(use_cache) {
  check(model.kind == ModelKind::ar, "ModelArScorer needs an AR model");
}

int ModelArScorer::vocab_size() const { return model_.config.vocab_size; }
int ModelArScorer::eos_id() const { return Vocab::EOS; }

ArScorer::StatePtr ModelArScorer::start(const std::vector<int>& src,
                                        std::vector<float>& log_probs) {
  NoGradGuard ng;
  Tensor enc = encoder_forward(src, model_.params, model_.config, Mode::eval);
  if (use_cache_) {
    auto st = std::make_shared<CachedArState>();
    st->enc_out = enc;
    st->cache = make_decoder_cache(enc, model_.params, model_.config);
    const auto logits =
        incremental_decoder_forward(Vocab::BOS, st->cache, enc, model_.params, model_.config);
    log_probs = to_log_probs(logits, true);
    return st;
  }
  auto st = std::make_shared<UncachedArState>();
  st->enc_out = enc;
  st->src = src;
  st->prefix = {Vocab::BOS};
  Tensor logits = decoder_forward(st->prefix, enc, src, model_.params, model_.config, Mode::eval);
  const int V = model_.config.vocab_size;
  std::span<const float> last(logits.data().data() + (logits.dim(0) - 1) * V,
                              static_cast<std::size_t>(V));
  log_probs = to_log_probs(last, true);
  return st;
}

ArScorer::StatePtr ModelArScorer::advance(const State& state, int token,
                                          std::vector<float>& log_probs) {
  NoGradGuard ng;
  if (use_cache_) {
    const auto& cur = dynamic_cast<const CachedArState&>(state);
    auto st = std::make_shared<CachedArState>();
    st->enc_out = cur.enc_out;
    st->cache = cur.cache;  // value copy; cross tensors shared
    const auto logits =
        incremental_decoder_forward(token, st->cache, st->enc_out, model_.params, model_.config);
    log_probs = to_log_probs(logits, true);
    return st;
  }
  const auto& cur = dynamic_cast<const UncachedArState&>(state);
  auto st = std::make_shared<UncachedArState>();
  st->enc_out = cur.enc_out;
  st->src = cur.src;
  st->prefix = cur.prefix;
  st->prefix.push_back(token);
  Tensor logits =
      decoder_forward(st->prefix, st->enc_out, st->src, model_.params, model_.config, Mode::eval);
  const int V = model_.config.vocab_size;
  std::span<const float> last(logits.data().data() + (logits.dim(0) - 1) * V,
                              static_cast<std::size_t>(V));
  log_probs = to_log_probs(last, true);
  return st;
}

std::vector<std::vector<int>> ar_decode_corpus(const std::vector<std::vector<int>>& srcs,
                                               const Model& model, const DecodeConfig& cfg) {
  ModelArScorer scorer(model, cfg.use_cache);
  const int max_len = model.config.max_len - 1;  // the BOS slot comes off the budget
  std::vector<std::vector<int>> out;
  out.reserve(srcs.size());
  for (const auto& src : srcs) {
    const ArHypothesis hyp = cfg.beam == 1
                                 ? greedy_decode(src, scorer, max_len)
                                 : beam_decode(src, scorer, cfg.beam, max_len, cfg.length_norm);
    out.push_back(hyp.tokens);
  }
  return out;
}

}  // namespace mp
