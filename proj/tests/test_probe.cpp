#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bytelm/checkpoint.hpp"
#include "bytelm/probe.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace bytelm;
using fixtures::kind_of;

TEST(Extraction, CatByteLayout) {
  EXPECT_EQ(probe_input_bytes("cat"), (ByteSequence{99, 97, 116, 32}));
  const auto p = fixtures::jittered<float>(fixtures::tiny_config(), 1);
  for (std::size_t l = 1; l <= 2; ++l) {
    const auto rep = extract_word_representation(p, "cat", l);
    const auto trace = hidden_activation(p, ByteSequence{99, 97, 116, 32}, l);
    const auto row = trace.vectors.row(3);
    EXPECT_EQ(rep, std::vector<float>(row.begin(), row.end()));
  }
}

TEST(Extraction, CafeByteLayout) {
  EXPECT_EQ(probe_input_bytes("caf\xc3\xa9"), (ByteSequence{99, 97, 102, 195, 169, 32}));
  const auto p = fixtures::jittered<float>(fixtures::tiny_config(), 1);
  const auto rep = extract_word_representation(p, "caf\xc3\xa9", 2);
  const auto trace = hidden_activation(p, ByteSequence{99, 97, 102, 195, 169, 32}, 2);
  const auto row = trace.vectors.row(5);
  EXPECT_EQ(rep, std::vector<float>(row.begin(), row.end()));
}

TEST(Extraction, SameWordTwiceIsBitIdentical) {
  const auto p = fixtures::jittered<float>(fixtures::tiny_config(), 2);
  EXPECT_EQ(extract_word_representation(p, "dog", 1), extract_word_representation(p, "dog", 1));
}

TEST(Extraction, MatchesReferenceTap) {
  const auto p = fixtures::jittered<double>(fixtures::tiny_config(), 3);
  std::vector<std::vector<oracle::Vec>> taps;
  oracle::logits(p, probe_input_bytes("word"), &taps);
  const auto rep = extract_word_representation(p, "word", 2);
  for (std::size_t j = 0; j < rep.size(); ++j) EXPECT_NEAR(rep[j], taps[1][4][j], 1e-10);
}

TEST(Extraction, Errors) {
  ModelConfig cfg = fixtures::tiny_config();
  cfg.context_len = 5;
  const auto p = init_parameters<float>(cfg, 1);
  EXPECT_EQ(kind_of([&] { extract_word_representation(p, "", 1); }), ErrorKind::argument);
  EXPECT_EQ(kind_of([&] { extract_word_representation(p, "abcde", 1); }), ErrorKind::length);
  EXPECT_EQ(extract_word_representation(p, "abcd", 1).size(), cfg.hidden_size);
  EXPECT_EQ(kind_of([&] { extract_word_representation(p, "abc", 3); }), ErrorKind::index);
}

TEST(Cosine, Examples) {
  const std::vector<double> v{0.3, -2.0, 5.0};
  EXPECT_NEAR(cosine_similarity(v, v), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 2}, std::vector<double>{2, 1}), 4.0 / (std::sqrt(5.0) * std::sqrt(5.0)), 1e-15);
  EXPECT_EQ(kind_of([] { cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 1}); }),
            ErrorKind::degenerate);
}

TEST(Cosine, ScaleInvariance) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + uniform_below(rng, 64);
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = standard_normal(rng);
    for (auto& x : b) x = standard_normal(rng);
    const double k = std::exp(8 * (uniform01(rng) - 0.5));
    std::vector<double> kb(b);
    for (auto& x : kb) x *= k;
    const double c = cosine_similarity(a, b);
    ASSERT_NEAR(cosine_similarity(a, kb), c, 1e-9);
    ASSERT_GE(c, -1.0);
    ASSERT_LE(c, 1.0);
  }
}

TEST(Spearman, Goldens) {
  EXPECT_NEAR(spearman_rho({1, 2, 3}, {10, 20, 30}), 1.0, 1e-12);
  EXPECT_NEAR(spearman_rho({1, 2, 3}, {3, 2, 1}), -1.0, 1e-12);
  EXPECT_NEAR(spearman_rho({1, 2, 3}, {1, 3, 2}), 0.5, 1e-12);
  EXPECT_NEAR(oracle::spearman_tie_free({1, 2, 3}, {1, 3, 2}), 0.5, 1e-12);
}

TEST(Spearman, TieFreeMatchesClosedForm) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + uniform_below(rng, 40);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = standard_normal(rng);
    for (auto& v : y) v = standard_normal(rng);
    ASSERT_NEAR(spearman_rho(x, y), oracle::spearman_tie_free(x, y), 1e-12);
  }
}

TEST(Spearman, TiesUseAverageRanks) {
  const std::vector<double> x{1, 2, 2, 3};
  EXPECT_EQ(fractional_ranks(x), (std::vector<double>{1, 2.5, 2.5, 4}));
  // Pearson of ranks [1,2.5,2.5,4] and [1,2,3,4] is 0.9486832980505138
  EXPECT_NEAR(spearman_rho(x, {1, 2, 3, 4}), 3.0 / std::sqrt(10.0), 1e-12);
}

TEST(Spearman, SymmetricBoundedAndRankInvariant) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + uniform_below(rng, 30);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = static_cast<double>(uniform_below(rng, 10));
    for (auto& v : y) v = standard_normal(rng);
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
    const double r = spearman_rho(x, y);
    ASSERT_EQ(r, spearman_rho(y, x));
    ASSERT_GE(r, -1.0);
    ASSERT_LE(r, 1.0);
    std::vector<double> fx(x), fy(y);
    for (auto& v : fx) v = std::exp(v / 3) + v * v * v;
    for (auto& v : fy) v = std::atan(v) * 5 - 2;
    ASSERT_NEAR(spearman_rho(fx, fy), r, 1e-12);
  }
}

TEST(Spearman, Errors) {
  EXPECT_EQ(kind_of([] { spearman_rho({1, 1, 1}, {1, 2, 3}); }), ErrorKind::degenerate);
  EXPECT_EQ(kind_of([] { spearman_rho({1}, {1}); }), ErrorKind::degenerate);
  EXPECT_EQ(kind_of([] { spearman_rho({1, 2}, {1, 2, 3}); }), ErrorKind::argument);
}

TEST(WordPairs, ParsesTabsCommasHeaderAndComments) {
  const auto ds = parse_word_pairs("Word1,Word2,Score\ncat,dog,7.35\n# note\n\nTiger\tcat\t7.0\n", "demo");
  EXPECT_EQ(ds.name, "demo");
  ASSERT_EQ(ds.pairs.size(), 2u);
  EXPECT_EQ(ds.pairs[0].word_a, "cat");
  EXPECT_EQ(ds.pairs[0].word_b, "dog");
  EXPECT_EQ(ds.pairs[0].human_score, 7.35);
  EXPECT_EQ(ds.pairs[1].word_a, "Tiger");
}

TEST(WordPairs, Errors) {
  EXPECT_EQ(kind_of([] { parse_word_pairs("cat\tdog\t7.35\n", "one"); }), ErrorKind::dataset);
  try {
    parse_word_pairs("a\tb\t1\nc\td\n", "bad");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_EQ(kind_of([] { load_word_pairs("/nonexistent/pairs.tsv"); }), ErrorKind::io);
}

TEST(Evaluate, PerfectAndReversedAgreement) {
  const auto p = fixtures::jittered<double>(fixtures::tiny_config(), 5);
  WordSimDataset ds{"synthetic", {{"cat", "dog", 0}, {"sun", "moon", 0}, {"red", "blue", 0}, {"tree", "leaf", 0}}};
  for (auto& pr : ds.pairs)
    pr.human_score = cosine_similarity(extract_word_representation(p, pr.word_a, 1),
                                       extract_word_representation(p, pr.word_b, 1));
  const auto same = evaluate_dataset(p, ds, 1);
  EXPECT_NEAR(same.rho, 1.0, 1e-12);
  EXPECT_EQ(same.pairs_used, ds.pairs.size());
  for (auto& pr : ds.pairs) pr.human_score = -pr.human_score;
  EXPECT_NEAR(evaluate_dataset(p, ds, 1).rho, -1.0, 1e-12);
}

TEST(Evaluate, FrozenCheckpointGolden) {
  const auto ckpt = load_checkpoint(BYTELM_TEST_DATA "/tiny_probe.ckpt");
  const auto ds = load_word_pairs(BYTELM_TEST_DATA "/wordsim_tiny.tsv");
  ASSERT_EQ(ds.pairs.size(), 10u);
  EXPECT_EQ(ds.name, "wordsim_tiny");
  const auto l1 = evaluate_dataset(ckpt.params, ds, 1);
  EXPECT_EQ(l1.pairs_used, 10u);
  EXPECT_NEAR(l1.rho, 0.085106776115209032, 1e-12);
  EXPECT_NEAR(evaluate_dataset(ckpt.params, ds, 2).rho, 0.12766016417281356, 1e-12);
}

TEST(Sweep, AllLayersTwoDatasetsSingleExtraction) {
  ModelConfig cfg = fixtures::tiny_config();
  cfg.num_layers = 4;
  const auto p = fixtures::jittered<float>(cfg, 6);
  WordSimDataset a{"b_set", {{"cat", "dog", 1}, {"cat", "mat", 3}, {"sun", "dog", 2}}};
  WordSimDataset b{"a_set", {{"sun", "moon", 5}, {"cat", "moon", 1}}};
  const auto table = layer_sweep(p, {a, b}, "all");
  ASSERT_EQ(table.rows.size(), 8u);
  EXPECT_EQ(table.extractions, 5u);  // cat dog mat sun moon
  EXPECT_EQ(table.rows[0].layer, 1u);
  EXPECT_EQ(table.rows[0].dataset, "a_set");
  for (const auto& r : table.rows) {
    EXPECT_GE(r.rho, -1.0);
    EXPECT_LE(r.rho, 1.0);
    const auto& ds = r.dataset == "a_set" ? b : a;
    EXPECT_EQ(r.rho, evaluate_dataset(p, ds, r.layer).rho) << r.layer << " " << r.dataset;
  }
  const std::string csv = format_sweep_csv(table);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,dataset,rho");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

TEST(Sweep, LayerSpecParsing) {
  EXPECT_EQ(parse_layers("all", 3), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(parse_layers("3,1", 3), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(kind_of([] { parse_layers("0", 3); }), ErrorKind::index);
  EXPECT_EQ(kind_of([] { parse_layers("4", 3); }), ErrorKind::index);
  EXPECT_EQ(kind_of([] { parse_layers("x", 3); }), ErrorKind::config);
}

TEST(Sweep, DegeneratePairIsNamed) {
  auto p = init_parameters<float>(fixtures::tiny_config(), 1);
  for (auto& t : p.tensors()) t.data.assign(t.size(), 0.0f);
  WordSimDataset ds{"z", {{"aa", "bb", 1}, {"cc", "dd", 2}}};
  try {
    layer_sweep(p, {ds}, "1");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate);
    EXPECT_NE(std::string(e.what()).find("'aa'"), std::string::npos) << e.what();
  }
}
