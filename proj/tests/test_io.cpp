#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

namespace headlab {
namespace {

namespace fs = std::filesystem;
using testing::noisy_weights;
using testing::small_config;

class TempDir : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("headlab_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
};

using Checkpoint = TempDir;

TEST_F(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const DitWeights w = noisy_weights(DitConfig{}, 1);
  save_checkpoint(w, dir / "a.ckpt");
  const DitWeights back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back, w);
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
}

TEST_F(Checkpoint, LayoutStartsWithMagicAndHeaderLength) {
  const std::string bytes = checkpoint_bytes(init_weights(small_config(), 2));
  EXPECT_EQ(bytes.substr(0, 8), "DITCKPT1");
  const auto len = detail::get_u32_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  const auto header = nlohmann::json::parse(bytes.substr(12, len));
  EXPECT_EQ(header["config"]["model_dim"], 16);
  EXPECT_EQ(header["params"][0]["name"], "patch_w");
  EXPECT_EQ(bytes.size(), 12 + len + 8 * init_weights(small_config(), 2).parameter_count());
}

TEST_F(Checkpoint, DistinctErrors) {
  const std::string good = checkpoint_bytes(init_weights(small_config(), 3));
  auto as_bytes = [](const std::string& s) { return Bytes(s.begin(), s.end()); };

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(as_bytes(bad_magic)), MagicMismatchError);

  EXPECT_THROW(parse_checkpoint(as_bytes(good.substr(0, good.size() - 8))), TruncatedError);
  EXPECT_THROW(parse_checkpoint(as_bytes(good + "extra")), TruncatedError);
  EXPECT_THROW(parse_checkpoint(as_bytes(good.substr(0, 10))), TruncatedError);

  // Same element count, different shape.
  const auto len = detail::get_u32_le(reinterpret_cast<const unsigned char*>(good.data()) + 8);
  auto header = nlohmann::ordered_json::parse(good.substr(12, len));
  auto shape = header["params"][0]["shape"];
  header["params"][0]["shape"] = {shape[1], shape[0]};
  std::string text = header.dump();
  std::string reshaped = "DITCKPT1";
  detail::put_u32_le(reshaped, static_cast<std::uint32_t>(text.size()));
  reshaped += text + good.substr(12 + len);
  EXPECT_THROW(parse_checkpoint(as_bytes(reshaped)), ShapeMismatchError);

  std::string junk = "DITCKPT1";
  detail::put_u32_le(junk, 3);
  junk += "{{{";
  EXPECT_THROW(parse_checkpoint(as_bytes(junk)), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Pgm, LevelsFollowDisplayRange) {
  EXPECT_EQ(pgm_level(-3.0), 0);
  EXPECT_EQ(pgm_level(-10.0), 0);
  EXPECT_EQ(pgm_level(3.0), 255);
  EXPECT_EQ(pgm_level(0.0), 128);
  const std::string bytes = pgm_bytes(Tensor::matrix(16, 16, -3.0));
  const std::string head = "P5\n16 16\n255\n";
  EXPECT_EQ(bytes.substr(0, head.size()), head);
  ASSERT_EQ(bytes.size(), head.size() + 256);
  for (std::size_t i = head.size(); i < bytes.size(); ++i) ASSERT_EQ(bytes[i], 0);
  for (char c : pgm_bytes(Tensor::matrix(16, 16, 3.0)).substr(head.size())) ASSERT_EQ(static_cast<unsigned char>(c), 255);
  EXPECT_THROW(pgm_bytes(Tensor::matrix(2, 2, std::nan(""))), NumericError);
}

TEST(Pgm, TileImagesLaysOutGrid) {
  const Tensor g = tile_images({Tensor::matrix(2, 2, 1), Tensor::matrix(2, 2, 2), Tensor::matrix(2, 2, 3)}, 2, 1);
  EXPECT_EQ(g.shape(), (Shape{5, 5}));
  EXPECT_EQ(g(0, 3), 2.0);
  EXPECT_EQ(g(3, 0), 3.0);
  EXPECT_EQ(g(3, 3), -3.0);
}

TEST(Csv, NumbersRoundTripAndUseLf) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
  EXPECT_EQ(loss_csv({{0, 1.5}, {50, 0.25}}), "step,loss\n0,1.5\n50,0.25\n");
  RoundLedger r;
  r.round = 2;
  r.ranking = {{{1, 3}, 0.5}, {{0, 0}, -std::numeric_limits<double>::infinity()}};
  EXPECT_EQ(ledger_csv({r}), "round,layer,head,score,rank\n2,1,3,0.5,1\n2,0,0,-inf,2\n");
  EXPECT_EQ(trajectory_csv({{1, 0.5, 0.1, 1, 0}}), "step,t,mean,std,l2_to_unguided\n1,0.5,0.1,1,0\n");
}

TEST(Csv, SweepTables) {
  SweepResult r;
  r.w_grid = {0, 2};
  r.u_grid = {0, 0.5};
  r.matrix = {{1, 1}, {1, 1.25}};
  r.cells = {{0, 0, 0, ClassLabel{1}, 5, 1}};
  EXPECT_EQ(sweep_matrix_csv(r), "w,u=0,u=0.5\n0,1,1\n2,1,1.25\n");
  EXPECT_EQ(sweep_csv(r), "w,u,pair,cond,seed,score\n0,0,0,1,5,1\n");
}

using Selection = TempDir;

SearchState fake_search() {
  const SetScorer s = [](const std::vector<HeadId>& t) { return static_cast<double>(t.back().head) - t.back().layer; };
  return headhunter(initial_state(DitConfig{}), s, 2, 3);
}

TEST_F(Selection, RoundTripKeepsHeadOrderAndSpec) {
  SearchConfig cfg;
  cfg.k = 2;
  cfg.rounds = 3;
  cfg.method = PerturbMethod::soft_pag;
  cfg.u = 0.5;
  const SearchState s = fake_search();
  save_selection(s, cfg, dir / "sel.json");
  const SelectionDoc doc = load_selection(dir / "sel.json");
  EXPECT_EQ(doc.heads, s.selected);
  EXPECT_EQ(doc.spec().method, PerturbMethod::soft_pag);
  EXPECT_EQ(doc.spec().u, 0.5);
  EXPECT_EQ(doc.k, 2u);
  const auto j = selection_json(s, cfg);
  EXPECT_EQ(j["rounds"].size(), 3u);
  EXPECT_EQ(j["rounds"][0]["ledger_fnv1a"].get<std::string>().size(), 16u);
  EXPECT_EQ(selection_json(s, cfg).dump(), j.dump());
}

TEST_F(Selection, ExhaustingRecipeListsEveryHead) {
  SearchConfig cfg;
  cfg.k = 24;
  cfg.rounds = 1;
  const SetScorer zero = [](const std::vector<HeadId>&) { return 0.0; };
  const SearchState s = headhunter(initial_state(DitConfig{}), zero, cfg.k, cfg.rounds);
  EXPECT_EQ(parse_selection(selection_json(s, cfg).dump()).heads.size(), 16u);
}

TEST_F(Selection, EmptySearchAndMalformedDocuments) {
  EXPECT_THROW(selection_json(initial_state(DitConfig{}), SearchConfig{}), DomainError);
  EXPECT_THROW(parse_selection("{}"), FormatError);
  EXPECT_THROW(parse_selection("not json"), FormatError);
  auto j = selection_json(fake_search(), SearchConfig{});
  j["selected"].push_back(j["selected"][0]);
  EXPECT_THROW(parse_selection(j.dump()), FormatError);
}

TEST_F(Selection, LedgerSummaryRoundTrips) {
  const SearchState s = fake_search();
  const SelectionDoc doc = parse_selection(selection_json(s, SearchConfig{}).dump());
  ASSERT_EQ(doc.ledger.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(doc.ledger[r].round, r + 1);
    EXPECT_EQ(doc.ledger[r].winners, s.ledger[r].winners);
    EXPECT_EQ(doc.ledger[r].candidates, 16 - 2 * r);
    EXPECT_EQ(doc.ledger[r].best_score, format_double(s.ledger[r].ranking.front().score));
  }
}

TEST(Inspect, HistogramAndOverlap) {
  const DitConfig cfg;
  EXPECT_EQ(layer_histogram({{0, 0}, {0, 1}, {0, 2}, {0, 3}}, cfg), (std::vector<std::size_t>{4, 0, 0, 0}));
  const std::vector<HeadId> heads{{3, 1}, {1, 0}, {3, 0}};
  const auto hist = layer_histogram(heads, cfg);
  EXPECT_EQ(hist, (std::vector<std::size_t>{0, 1, 0, 2}));
  EXPECT_THROW(layer_histogram({{4, 0}}, cfg), DomainError);
  EXPECT_EQ(overlap_percent({{0, 0}}, {{1, 1}}), 0.0);
  EXPECT_EQ(overlap_percent({}, {}), 0.0);
  EXPECT_EQ(overlap_percent(heads, heads), 100.0);
  EXPECT_EQ(overlap_percent({{0, 0}, {0, 1}}, {{0, 1}, {0, 2}}), 100.0 / 3.0);
}

TEST(CommandLine, HeadLists) {
  const DitConfig cfg;
  EXPECT_TRUE(parse_head_list("", cfg).empty());
  EXPECT_EQ(parse_head_list("0:1, 2:3", cfg), (std::vector<HeadId>{{0, 1}, {2, 3}}));
  EXPECT_EQ(parse_head_list("all", cfg), all_heads(cfg));
  EXPECT_EQ(parse_head_list("L3:*", cfg), (std::vector<HeadId>{{3, 0}, {3, 1}, {3, 2}, {3, 3}}));
  EXPECT_EQ(parse_head_list("1:*", cfg).size(), 4u);
  EXPECT_EQ(parse_head_list("1:2,L1:*", cfg).front(), (HeadId{1, 2}));
  EXPECT_EQ(parse_head_list("1:2,L1:*", cfg).size(), 4u);
  for (const char* bad : {"x", "1", "1:", ":1", "1:-1", "a:b", "4:0", "0:4", "L4:*", "1:2,,"})
    EXPECT_THROW(parse_head_list(bad, cfg), DomainError) << bad;
}

TEST(CommandLine, GridsAndLabels) {
  EXPECT_EQ(parse_grid("0,1,2.5"), (std::vector<double>{0, 1, 2.5}));
  EXPECT_EQ(parse_grid(" 0.25 "), (std::vector<double>{0.25}));
  for (const char* bad : {"", " ", "1,,2", "a", "1,inf", "nan"}) EXPECT_THROW(parse_grid(bad), DomainError) << bad;
  EXPECT_EQ(parse_class_label("3"), ClassLabel{3});
  EXPECT_EQ(parse_class_label("null"), ClassLabel{});
  EXPECT_THROW(parse_class_label("-1"), DomainError);
}

TEST(CommandLine, PairsFiles) {
  const auto pairs = parse_pairs_csv("cond,seed\n0,5\nnull,7\n\n");
  EXPECT_EQ(pairs, (std::vector<PromptSeedPair>{{ClassLabel{0}, 5}, {ClassLabel{}, 7}}));
  EXPECT_EQ(parse_pairs_csv(pairs_csv(pairs)), pairs);
  EXPECT_EQ(pairs_csv(default_pairs()), "cond,seed\n0,0\n1,1\n2,2\n3,3\n");
  EXPECT_THROW(parse_pairs_csv("cond,seed\n"), FormatError);
  EXPECT_THROW(parse_pairs_csv("seed,cond\n0,1\n"), FormatError);
  EXPECT_THROW(parse_pairs_csv("cond,seed\n0\n"), FormatError);
  EXPECT_THROW(parse_pairs_csv("cond,seed\nx,1\n"), FormatError);
}

TEST(Csv, RoundCurve) {
  RoundEvaluation a, b;
  a.mean_score = 0.5;
  b.round = 1;
  b.heads = {{0, 1}, {2, 3}};
  b.mean_score = -0.25;
  EXPECT_EQ(round_curve_csv({a, b}), "round,heads,mean_score\n0,,0.5\n1,0:1 2:3,-0.25\n");
}

TEST(Fnv, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
}

const char* kConfig = R"({
  "model": {"image_size": 16, "channels": 1, "patch": 2, "layers": 4, "heads_per_layer": 4,
            "model_dim": 64, "head_dim": 16, "mlp_ratio": 4, "class_count": 4},
  "train": {"batch": 32, "steps": 3000, "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
            "cfg_dropout": 0.1, "seed": 0, "log_every": 50, "divergence_loss": 1000, "init_seed": 0},
  "data": {"size": 512, "seed": 1000, "jitter": true, "noise_stddev": 0.0}
})";

TEST(RunConfig, ParsesEveryKey) {
  const RunConfig rc = parse_run_config(kConfig);
  EXPECT_EQ(rc.model, DitConfig{});
  EXPECT_EQ(rc.train.steps, 3000u);
  EXPECT_EQ(rc.dataset_size, 512u);
  EXPECT_TRUE(rc.synth.jitter);
}

TEST(RunConfig, MissingKeyIsNamed) {
  auto j = nlohmann::json::parse(kConfig);
  j["train"].erase("lr");
  try {
    parse_run_config(j.dump());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "train.lr");
    EXPECT_NE(std::string(e.what()).find("train.lr"), std::string::npos);
  }
  j = nlohmann::json::parse(kConfig);
  j.erase("data");
  EXPECT_THROW(parse_run_config(j.dump()), ConfigError);
  j = nlohmann::json::parse(kConfig);
  j["model"]["layers"] = "four";
  EXPECT_THROW(parse_run_config(j.dump()), ConfigError);
}

using Dump = TempDir;

TEST_F(Dump, DatasetDirectoryHasManifest) {
  dump_dataset(dir / "data", 5, 10);
  const Bytes m = read_file(dir / "data" / "manifest.csv");
  EXPECT_EQ(std::string(m.begin(), m.end()), "index,class,seed\n0,0,10\n1,1,11\n2,2,12\n3,3,13\n4,0,14\n");
  EXPECT_TRUE(fs::exists(dir / "data" / "00004.pgm"));
}

}  // namespace
}  // namespace headlab
