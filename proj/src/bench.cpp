#include "mp/bench.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace mp {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::vector<int>> corpus_sources(const Corpus& corpus) {
  std::vector<std::vector<int>> srcs;
  srcs.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) srcs.push_back(p.src);
  return srcs;
}

std::vector<TokenSeq> to_tokens(const std::vector<std::vector<int>>& ids, const Vocab& vocab) {
  std::vector<TokenSeq> out;
  out.reserve(ids.size());
  for (const auto& row : ids) out.push_back(vocab.decode(row));
  return out;
}

}  // namespace

std::vector<std::vector<int>> decode_corpus_cmlm(const Model& model,
                                                 const std::vector<std::vector<int>>& srcs,
                                                 const DecodeConfig& cfg,
                                                 const std::vector<int>* gold_lengths) {
  ModelCmlmScorer scorer(model);
  std::vector<std::vector<int>> out;
  out.reserve(srcs.size());
  const int bs = std::max(1, cfg.batch_size);
  for (std::size_t begin = 0; begin < srcs.size(); begin += static_cast<std::size_t>(bs)) {
    const std::size_t end = std::min(srcs.size(), begin + static_cast<std::size_t>(bs));
    std::vector<std::vector<int>> chunk(srcs.begin() + static_cast<long>(begin),
                                        srcs.begin() + static_cast<long>(end));
    std::vector<int> gold_chunk;
    const std::vector<int>* gold = nullptr;
    if (gold_lengths) {
      gold_chunk.assign(gold_lengths->begin() + static_cast<long>(begin),
                        gold_lengths->begin() + static_cast<long>(end));
      gold = &gold_chunk;
    }
    scorer.reset_cache();
    auto decoded = mask_predict_corpus(chunk, scorer, scorer, cfg, gold);
    for (auto& d : decoded) out.push_back(std::move(d));
  }
  return out;
}

BenchResult time_decode(const Model& model, const Corpus& corpus,
                        const std::vector<std::vector<TokenSeq>>& references,
                        const DecodeConfig& cfg, int repeats) {
  if (repeats < 1) repeats = 1;
  const auto srcs = corpus_sources(corpus);

  auto run = [&]() {
    if (model.kind == ModelKind::cmlm) return decode_corpus_cmlm(model, srcs, cfg);
    return ar_decode_corpus(srcs, model, cfg);
  };

  auto outputs = run();  // warmup, also the scored outputs (decode is deterministic)
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(repeats));
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    auto decoded = run();
    const auto t1 = Clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const double median = times[times.size() / 2];

  BenchResult res;
  std::ostringstream cfg_name;
  if (model.kind == ModelKind::cmlm)
    cfg_name << "cmlm T=" << cfg.iterations << " l=" << cfg.length_candidates;
  else
    cfg_name << "ar b=" << cfg.beam << (cfg.use_cache ? "" : " nocache");
  res.config = cfg_name.str();
  res.seconds = median;
  res.sentences_per_second = median > 0 ? static_cast<double>(srcs.size()) / median : 0.0;
  res.bleu = bleu(to_tokens(outputs, corpus.vocab), references);
  return res;
}

std::vector<BenchResult> bench_sweep(const Model& cmlm, const Model& ar, const Corpus& corpus,
                                     const std::vector<std::vector<TokenSeq>>& references,
                                     const std::vector<int>& t_values,
                                     const std::vector<int>& ell_values,
                                     const std::vector<int>& b_values, int batch_size, int repeats,
                                     bool ar_no_cache) {
  std::vector<BenchResult> rows;

  double baseline_seconds = 0.0;
  for (int b : b_values) {
    DecodeConfig cfg;
    cfg.beam = b;
    cfg.use_cache = !ar_no_cache;
    cfg.batch_size = batch_size;
    BenchResult r = time_decode(ar, corpus, references, cfg, repeats);
    if (b == 5) baseline_seconds = r.seconds;
    rows.push_back(std::move(r));
  }
  if (baseline_seconds == 0.0 && !rows.empty()) baseline_seconds = rows.front().seconds;

  for (int t : t_values) {
    for (int ell : ell_values) {
      DecodeConfig cfg;
      cfg.iterations = t;
      cfg.length_candidates = ell;
      cfg.batch_size = batch_size;
      rows.push_back(time_decode(cmlm, corpus, references, cfg, repeats));
    }
  }

  for (auto& r : rows) r.speedup = r.seconds > 0 ? baseline_seconds / r.seconds : 0.0;
  return rows;
}

std::string bench_table_tsv(const std::vector<BenchResult>& rows) {
  std::ostringstream os;
  os << "config\tseconds\tsent_per_sec\tbleu\tspeedup\n";
  for (const auto& r : rows) {
    os << r.config << '\t' << r.seconds << '\t' << r.sentences_per_second << '\t' << r.bleu << '\t'
       << r.speedup << '\n';
  }
  return os.str();
}

}  // namespace mp
