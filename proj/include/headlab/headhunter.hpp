#pragma once

// Greedy, objective-driven selection of attention heads to perturb. Each round
// scores every remaining head joined with the heads already selected, then
// adds the k best.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "headlab/attention.hpp"
#include "headlab/dit.hpp"
#include "headlab/error.hpp"
#include "headlab/objectives.hpp"
#include "headlab/parallel.hpp"
#include "headlab/sampler.hpp"

namespace headlab {

/// A conditioning label and the sampling seed used with it.
struct PromptSeedPair {
  ClassLabel cond;
  std::uint64_t seed = 0;

  friend bool operator==(const PromptSeedPair&, const PromptSeedPair&) = default;
};

/// One pair per class, seeds 0..3.
inline std::vector<PromptSeedPair> default_pairs(std::size_t class_count = kSynthClassCount) {
  std::vector<PromptSeedPair> pairs;
  for (std::size_t c = 0; c < class_count; ++c) pairs.push_back({ClassLabel{c}, c});
  return pairs;
}

struct SearchConfig {
  std::size_t k = 3;
  std::size_t rounds = 5;
  std::vector<PromptSeedPair> pairs = default_pairs();
  GuidanceConfig guidance;  // cond and seed are replaced by each pair
  PerturbMethod method = PerturbMethod::pag;
  double u = 1.0;
  double tau = 1.0;
  ObjectiveId objective;
  std::size_t jobs = 1;

  void validate() const {
    if (k == 0) throw DomainError("k must be >= 1");
    if (rounds == 0) throw DomainError("rounds must be >= 1");
    if (pairs.empty()) throw DomainError("at least one prompt-seed pair is required");
    if (method == PerturbMethod::none) throw DomainError("candidate evaluation needs a perturbation method");
    guidance.validate();
    spec_for({}).validate();
  }

  PerturbSpec spec_for(std::vector<HeadId> heads) const { return PerturbSpec::of(std::move(heads), method, u, tau); }
};

struct LedgerEntry {
  HeadId head;
  double score = 0.0;
};

struct RoundLedger {
  std::size_t round = 0;              // 1-based
  std::vector<HeadId> prefix;         // selection before this round
  std::vector<LedgerEntry> ranking;   // every candidate, best first
  std::vector<HeadId> winners;        // heads appended this round, in rank order
  std::vector<HeadId> failed;         // candidates whose evaluation threw
};

struct SearchState {
  std::vector<HeadId> selected;
  std::vector<HeadId> pool;
  std::vector<RoundLedger> ledger;

  std::size_t completed_rounds() const { return ledger.size(); }
};

inline SearchState initial_state(const DitConfig& cfg) {
  SearchState s;
  s.pool = all_heads(cfg);
  return s;
}

/// Scores a full perturbation set (selected prefix plus one candidate).
using SetScorer = std::function<double(const std::vector<HeadId>& target)>;

/// Descending score; equal scores in lexicographic (layer, head) order.
inline void sort_ranking(std::vector<LedgerEntry>& ranking) {
  std::stable_sort(ranking.begin(), ranking.end(), [](const LedgerEntry& a, const LedgerEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.head < b.head;
  });
}

/// Scores `candidates`, each joined with `prefix`, on up to `jobs` threads.
/// Results are stored by candidate index, so the output is independent of
/// scheduling. A throwing evaluation scores -inf.
inline std::vector<LedgerEntry> score_candidates(const std::vector<HeadId>& prefix,
                                                 const std::vector<HeadId>& candidates, const SetScorer& scorer,
                                                 std::size_t jobs, std::vector<HeadId>* failed = nullptr) {
  std::vector<LedgerEntry> out(candidates.size());
  std::vector<char> bad(candidates.size(), 0);
  parallel_for(candidates.size(), jobs, [&](std::size_t i) {
    std::vector<HeadId> target = prefix;
    target.push_back(candidates[i]);
    double s;
    try {
      s = scorer(target);
      if (std::isnan(s)) throw NumericError("objective returned NaN");
    } catch (const std::exception& e) {
      std::clog << "candidate " + to_string(candidates[i]) + " failed: " + e.what() + "\n";
      s = -std::numeric_limits<double>::infinity();
      bad[i] = 1;
    }
    out[i] = {candidates[i], s};
  });
  if (failed)
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (bad[i]) failed->push_back(candidates[i]);
  return out;
}

/// One expansion step: rank the pool, move the top k (or all, if fewer remain) into the selection.
inline SearchState run_round(SearchState state, const SetScorer& scorer, std::size_t k, std::size_t jobs = 1) {
  if (k == 0) throw DomainError("k must be >= 1");
  if (state.pool.empty()) throw DomainError("head pool is exhausted");
  RoundLedger row;
  row.round = state.completed_rounds() + 1;
  row.prefix = state.selected;
  row.ranking = score_candidates(state.selected, state.pool, scorer, jobs, &row.failed);
  sort_ranking(row.ranking);
  const std::size_t take = std::min(k, row.ranking.size());
  for (std::size_t i = 0; i < take; ++i) {
    const HeadId h = row.ranking[i].head;
    row.winners.push_back(h);
    state.selected.push_back(h);
    state.pool.erase(std::find(state.pool.begin(), state.pool.end(), h));
  }
  state.ledger.push_back(std::move(row));
  return state;
}

/// Runs up to `rounds` rounds, stopping early once the pool is used up.
inline SearchState headhunter(SearchState state, const SetScorer& scorer, std::size_t k, std::size_t rounds,
                              std::size_t jobs = 1) {
  if (rounds == 0) throw DomainError("rounds must be >= 1");
  for (std::size_t r = 0; r < rounds && !state.pool.empty(); ++r) state = run_round(std::move(state), scorer, k, jobs);
  return state;
}

/// Every head scored on its own, best first.
inline std::vector<LedgerEntry> exhaustive_single_head(const std::vector<HeadId>& heads, const SetScorer& scorer,
                                                       std::size_t jobs = 1) {
  auto ranking = score_candidates({}, heads, scorer, jobs);
  sort_ranking(ranking);
  return ranking;
}

// ---------------------------------------------------------------------------
// Model-backed scoring: sample each prompt-seed pair under guidance on the
// target set and average the objective.

inline std::vector<double> pair_scores(const DitWeights& w, const std::vector<HeadId>& target,
                                       const SearchConfig& cfg) {
  const PerturbSpec spec = cfg.spec_for(target);
  std::vector<double> scores;
  scores.reserve(cfg.pairs.size());
  for (const PromptSeedPair& pair : cfg.pairs) {
    GuidanceConfig g = cfg.guidance;
    g.cond = pair.cond;
    g.seed = pair.seed;
    scores.push_back(score(cfg.objective, sample(w, g, spec).image, pair.cond));
  }
  return scores;
}

inline double mean_score(const std::vector<double>& scores) {
  double s = 0.0;
  for (double v : scores) s += v;
  return s / static_cast<double>(scores.size());
}

inline SetScorer sampling_scorer(const DitWeights& w, const SearchConfig& cfg) {
  return [&w, cfg](const std::vector<HeadId>& target) { return mean_score(pair_scores(w, target, cfg)); };
}

/// Score of `cand` joined with the current selection. Does not modify `state`.
inline double evaluate_candidate(const DitWeights& w, const SearchState& state, HeadId cand, const SearchConfig& cfg) {
  if (std::find(state.pool.begin(), state.pool.end(), cand) == state.pool.end())
    throw DomainError("candidate " + to_string(cand) + " is not in the remaining pool");
  std::vector<HeadId> target = state.selected;
  target.push_back(cand);
  return sampling_scorer(w, cfg)(target);
}

inline SearchState run_round(const DitWeights& w, SearchState state, const SearchConfig& cfg) {
  cfg.validate();
  return run_round(std::move(state), sampling_scorer(w, cfg), cfg.k, cfg.jobs);
}

inline SearchState headhunter(const DitWeights& w, const SearchConfig& cfg) {
  cfg.validate();
  return headhunter(initial_state(w.config), sampling_scorer(w, cfg), cfg.k, cfg.rounds, cfg.jobs);
}

inline std::vector<LedgerEntry> exhaustive_single_head(const DitWeights& w, const SearchConfig& cfg) {
  cfg.validate();
  return exhaustive_single_head(all_heads(w.config), sampling_scorer(w, cfg), cfg.jobs);
}

/// Samples and scores of the pairs under the selection after each round.
/// Round 0 is the baseline with no perturbed heads.
struct RoundEvaluation {
  std::size_t round = 0;
  std::vector<HeadId> heads;
  std::vector<Tensor> images;
  std::vector<double> scores;
  double mean_score = 0.0;
};

inline std::vector<RoundEvaluation> evaluate_rounds(const DitWeights& w, const SearchState& state,
                                                    const SearchConfig& cfg) {
  std::vector<RoundEvaluation> out;
  std::vector<HeadId> prefix;
  for (std::size_t r = 0; r <= state.ledger.size(); ++r) {
    if (r > 0) prefix.insert(prefix.end(), state.ledger[r - 1].winners.begin(), state.ledger[r - 1].winners.end());
    RoundEvaluation ev;
    ev.round = r;
    ev.heads = prefix;
    const PerturbSpec spec = cfg.spec_for(prefix);
    for (const PromptSeedPair& pair : cfg.pairs) {
      GuidanceConfig g = cfg.guidance;
      g.cond = pair.cond;
      g.seed = pair.seed;
      ev.images.push_back(sample(w, g, spec).image);
      ev.scores.push_back(score(cfg.objective, ev.images.back(), pair.cond));
    }
    ev.mean_score = mean_score(ev.scores);
    out.push_back(std::move(ev));
  }
  return out;
}

}  // namespace headlab
