#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "test_util.hpp"

namespace headlab {
namespace {

using testing::noisy_weights;
using testing::small_config;

const DitConfig kToy{};

// Deterministic pseudo-random score per head set, for search bookkeeping tests.
double hashed_score(const std::vector<HeadId>& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (HeadId id : s) {
    h ^= id.layer * 31 + id.head + 1;
    h *= 1099511628211ull;
  }
  return static_cast<double>(h % 1000) / 1000.0;
}

TEST(Search, RoundBookkeeping) {
  const SearchState s = run_round(initial_state(kToy), hashed_score, 3);
  EXPECT_EQ(s.selected.size(), 3u);
  EXPECT_EQ(s.pool.size(), 13u);
  ASSERT_EQ(s.ledger.size(), 1u);
  EXPECT_EQ(s.ledger[0].round, 1u);
  EXPECT_EQ(s.ledger[0].ranking.size(), 16u);
  EXPECT_EQ(s.ledger[0].winners, s.selected);
  for (HeadId h : s.selected) EXPECT_EQ(std::count(s.pool.begin(), s.pool.end(), h), 0);
}

TEST(Search, ForcedOrderingPicksLayerZeroByHeadIndex) {
  const SetScorer by_layer = [](const std::vector<HeadId>& s) { return -static_cast<double>(s.back().layer); };
  const SearchState s = run_round(initial_state(kToy), by_layer, 3);
  EXPECT_EQ(s.selected, (std::vector<HeadId>{{0, 0}, {0, 1}, {0, 2}}));
}

TEST(Search, ConstantObjectiveRanksLexicographically) {
  const SetScorer zero = [](const std::vector<HeadId>&) { return 0.0; };
  const auto ranking = exhaustive_single_head(all_heads(kToy), zero);
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    EXPECT_EQ(ranking[i].head, all_heads(kToy)[i]);
    EXPECT_EQ(ranking[i].score, 0.0);
  }
}

TEST(Search, RoundOneEqualsExhaustiveTopK) {
  const auto oracle = exhaustive_single_head(all_heads(kToy), hashed_score);
  for (std::size_t k : {1, 3, 5, 16}) {
    const SearchState s = run_round(initial_state(kToy), hashed_score, k);
    ASSERT_EQ(s.selected.size(), k);
    for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(s.selected[i], oracle[i].head);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(s.ledger[0].ranking[i].head, oracle[i].head);
  }
}

TEST(Search, ExhaustiveIsInvariantToPoolOrder) {
  auto heads = all_heads(kToy);
  const auto a = exhaustive_single_head(heads, hashed_score);
  std::reverse(heads.begin(), heads.end());
  const auto b = exhaustive_single_head(heads, hashed_score);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].head, b[i].head);
    EXPECT_EQ(a[i].score, b[i].score);
  }
}

TEST(Search, DisjointGrowthAcrossRounds) {
  const SearchState s = headhunter(initial_state(kToy), hashed_score, 3, 5);
  EXPECT_EQ(s.completed_rounds(), 5u);
  EXPECT_EQ(s.selected.size(), 15u);
  EXPECT_EQ(std::set<HeadId>(s.selected.begin(), s.selected.end()).size(), 15u);
  std::size_t offset = 0;
  for (const RoundLedger& r : s.ledger) {
    EXPECT_EQ(r.prefix.size(), offset);
    for (std::size_t i = 0; i < r.winners.size(); ++i) EXPECT_EQ(r.winners[i], s.selected[offset + i]);
    offset += r.winners.size();
  }
}

TEST(Search, PoolExhaustionStopsEarly) {
  const SearchState a = headhunter(initial_state(kToy), hashed_score, 24, 1);
  EXPECT_EQ(a.selected.size(), 16u);
  EXPECT_TRUE(a.pool.empty());
  const SearchState b = headhunter(initial_state(kToy), hashed_score, 16, 1);
  EXPECT_EQ(std::set<HeadId>(b.selected.begin(), b.selected.end()).size(), 16u);
  const SearchState c = headhunter(initial_state(kToy), hashed_score, 7, 4);
  EXPECT_EQ(c.completed_rounds(), 3u);
  EXPECT_EQ(c.ledger.back().winners.size(), 2u);
}

TEST(Search, WeakSingleHeadCanWinLater) {
  // Head 3:3 is worst alone but best once 0:0 is selected.
  const SetScorer scorer = [](const std::vector<HeadId>& s) {
    const HeadId last = s.back();
    if (s.size() == 1) return last == HeadId{0, 0} ? 10.0 : (last == HeadId{3, 3} ? -10.0 : 0.0);
    return last == HeadId{3, 3} ? 10.0 : 0.0;
  };
  const SearchState s = headhunter(initial_state(kToy), scorer, 1, 2);
  EXPECT_EQ(s.ledger[0].ranking.back().head, (HeadId{3, 3}));
  EXPECT_EQ(s.selected, (std::vector<HeadId>{{0, 0}, {3, 3}}));
}

TEST(Search, FailedCandidatesScoreNegativeInfinity) {
  const SetScorer flaky = [](const std::vector<HeadId>& s) {
    if (s.back() == HeadId{1, 2}) throw NumericError("boom");
    if (s.back() == HeadId{2, 0}) return std::nan("");
    return 1.0;
  };
  const SearchState s = run_round(initial_state(kToy), flaky, 2);
  const auto& r = s.ledger[0];
  EXPECT_EQ(r.failed, (std::vector<HeadId>{{1, 2}, {2, 0}}));
  EXPECT_EQ(r.ranking[14].score, -std::numeric_limits<double>::infinity());
  EXPECT_EQ(r.ranking[15].head, (HeadId{2, 0}));
}

TEST(Search, ThreadCountDoesNotChangeResult) {
  const SearchState a = headhunter(initial_state(kToy), hashed_score, 2, 3, 1);
  const SearchState b = headhunter(initial_state(kToy), hashed_score, 2, 3, 4);
  EXPECT_EQ(a.selected, b.selected);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t i = 0; i < a.ledger[r].ranking.size(); ++i)
      EXPECT_EQ(a.ledger[r].ranking[i].score, b.ledger[r].ranking[i].score);
}

TEST(Search, ConfigValidation) {
  SearchConfig c;
  EXPECT_EQ(c.pairs.size(), 4u);
  c.validate();
  c.k = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c.k = 1;
  c.rounds = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c.rounds = 1;
  c.pairs.clear();
  EXPECT_THROW(c.validate(), DomainError);
  EXPECT_THROW(headhunter(initial_state(kToy), hashed_score, 1, 0), DomainError);
}

class ModelSearch : public ::testing::Test {
 protected:
  DitWeights w = noisy_weights(small_config(), 30, 0.1);
  SearchConfig cfg = [] {
    SearchConfig c;
    c.k = 1;
    c.rounds = 2;
    c.pairs = {{ClassLabel{0}, 3}, {ClassLabel{2}, 4}};
    c.guidance.steps = 3;
    c.guidance.w_cfg = 1.0;
    c.guidance.w_pert = 2.0;
    return c;
  }();
};

TEST_F(ModelSearch, ScoreIsMeanOfIndependentPerPairScores) {
  const SearchState s = initial_state(w.config);
  const double got = evaluate_candidate(w, s, {1, 0}, cfg);
  double expect = 0.0;
  for (const PromptSeedPair& p : cfg.pairs) {
    GuidanceConfig g = cfg.guidance;
    g.cond = p.cond;
    g.seed = p.seed;
    expect += mean(sample(w, g, PerturbSpec::of({{1, 0}}, PerturbMethod::pag)).image);
  }
  EXPECT_EQ(got, expect / 2.0);
}

TEST_F(ModelSearch, ConstantObjectiveScoresZero) {
  SearchConfig c = cfg;
  c.pairs = {{ClassLabel{1}, 0}};
  const SetScorer zero = [&](const std::vector<HeadId>& target) {
    (void)pair_scores(w, target, c);
    return 0.0;
  };
  for (const LedgerEntry& e : exhaustive_single_head(all_heads(w.config), zero)) EXPECT_EQ(e.score, 0.0);
}

TEST_F(ModelSearch, LedgerEntriesReproduceBitExactly) {
  const SearchState s = headhunter(w, cfg);
  ASSERT_EQ(s.completed_rounds(), 2u);
  for (const RoundLedger& r : s.ledger)
    for (const LedgerEntry& e : r.ranking) {
      std::vector<HeadId> target = r.prefix;
      target.push_back(e.head);
      EXPECT_EQ(sampling_scorer(w, cfg)(target), e.score);
    }
}

TEST_F(ModelSearch, RoundOneMatchesExhaustiveOracle) {
  const auto oracle = exhaustive_single_head(w, cfg);
  const SearchState s = run_round(w, initial_state(w.config), cfg);
  EXPECT_EQ(s.ledger[0].ranking.front().head, oracle.front().head);
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_EQ(s.ledger[0].ranking[i].score, oracle[i].score);
}

TEST_F(ModelSearch, RoundCurveReplaysTheLedger) {
  const SearchState s = headhunter(w, cfg);
  const auto curve = evaluate_rounds(w, s, cfg);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_TRUE(curve[0].heads.empty());
  double base = 0.0;
  for (const PromptSeedPair& p : cfg.pairs) {
    GuidanceConfig g = cfg.guidance;
    g.cond = p.cond;
    g.seed = p.seed;
    base += mean(sample(w, g, PerturbSpec::none()).image);
  }
  EXPECT_EQ(curve[0].mean_score, base / 2.0);
  for (std::size_t r = 1; r < curve.size(); ++r) {
    EXPECT_EQ(curve[r].heads.size(), r);
    EXPECT_EQ(curve[r].mean_score, s.ledger[r - 1].ranking.front().score);
    EXPECT_EQ(curve[r].images.size(), cfg.pairs.size());
  }
  EXPECT_EQ(curve.back().heads, s.selected);
}

TEST_F(ModelSearch, CandidateOutsidePoolThrows) {
  SearchState s = run_round(w, initial_state(w.config), cfg);
  EXPECT_THROW(evaluate_candidate(w, s, s.selected[0], cfg), DomainError);
}

}  // namespace
}  // namespace headlab
