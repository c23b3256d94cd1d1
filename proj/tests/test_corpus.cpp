#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "bytelm/corpus.hpp"
#include "bytelm/random.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace bytelm;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no bytelm::Error raised";
  return ErrorKind::usage;
}

}  // namespace

TEST(LoadCorpus, ReadsBytesVerbatim) {
  TempDir dir;
  const auto path = dir.write("a.txt", std::string("ab\n"));
  const RawCorpus c = load_corpus({path});
  EXPECT_EQ(c.total_bytes(), 3u);
  ASSERT_EQ(c.shards().size(), 1u);
  const ByteView bytes = c.shard_bytes(0);
  EXPECT_EQ(ByteSequence(bytes.begin(), bytes.end()), to_bytes("ab\n"));
}

TEST(LoadCorpus, KeepsShardOrderAndJoinsWithNewline) {
  TempDir dir;
  const auto a = dir.write("a.txt", std::string("a\n"));
  const auto b = dir.write("b.txt", std::string("b\n"));
  const RawCorpus c = load_corpus({b, a});
  EXPECT_EQ(c.total_bytes(), 4u);
  EXPECT_EQ(c.shards()[0].id, b.string());
  EXPECT_EQ(c.shards()[1].id, a.string());
  const ByteView s = c.stream();
  EXPECT_EQ(ByteSequence(s.begin(), s.end()), to_bytes("b\n\na\n"));
}

TEST(LoadCorpus, BinaryContentUntouched) {
  TempDir dir;
  std::string raw;
  for (int i = 0; i < 256; ++i) raw.push_back(static_cast<char>(i));
  raw += "\r\n\xef\xbb\xbf";
  const auto p = dir.write("bin", raw);
  const RawCorpus c = load_corpus({p});
  const ByteView bytes = c.shard_bytes(0);
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), raw);
}

TEST(LoadCorpus, Errors) {
  EXPECT_EQ(kind_of([] { load_corpus({}); }), ErrorKind::argument);
  try {
    load_corpus({"/nonexistent/shard-1"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/shard-1"), std::string::npos);
  }
}

TEST(CorpusStats, HelloWorld) {
  const CorpusStats s = corpus_stats(ByteView(to_bytes("hello world\n")));
  EXPECT_EQ(s, (CorpusStats{1, 3, 12}));
}

TEST(CorpusStats, Examples) {
  EXPECT_EQ(corpus_stats(ByteView(to_bytes("a b\nc\n"))), (CorpusStats{2, 5, 6}));
  EXPECT_EQ(corpus_stats(ByteView(to_bytes(""))), (CorpusStats{0, 0, 0}));
  EXPECT_EQ(corpus_stats(ByteView(to_bytes("\n"))), (CorpusStats{1, 1, 1}));
  EXPECT_EQ(corpus_stats(ByteView(to_bytes("  x\t\ty  \n"))), (CorpusStats{1, 3, 9}));
  EXPECT_EQ(corpus_stats(ByteView(to_bytes("no newline"))), (CorpusStats{1, 3, 10}));
}

TEST(CorpusStats, MatchesOracleOnRandomText) {
  std::mt19937_64 rng(7);
  const std::string alphabet = "ab c\t\n\xc3\xa9";
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const auto len = uniform_below(rng, 300);
    for (std::uint64_t i = 0; i < len; ++i) text += alphabet[uniform_below(rng, alphabet.size())];
    const auto want = oracle::text_stats(text);
    const auto got = corpus_stats(ByteView(to_bytes(text)));
    EXPECT_EQ(got.sentence_count, want.sentences) << text;
    EXPECT_EQ(got.word_count, want.words) << text;
    EXPECT_EQ(got.byte_count, want.bytes) << text;
  }
}

TEST(CorpusStats, AdditiveOverLineAlignedSplits) {
  std::mt19937_64 rng(11);
  const std::string alphabet = "xy z\t";
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> lines(1 + uniform_below(rng, 20));
    std::string whole;
    for (auto& l : lines) {
      for (std::uint64_t i = uniform_below(rng, 15); i > 0; --i) l += alphabet[uniform_below(rng, alphabet.size())];
      l += '\n';
      whole += l;
    }
    const std::size_t cut = uniform_below(rng, lines.size() + 1);
    std::string first, second;
    for (std::size_t i = 0; i < lines.size(); ++i) (i < cut ? first : second) += lines[i];
    EXPECT_EQ(corpus_stats(ByteView(to_bytes(first))) + corpus_stats(ByteView(to_bytes(second))),
              corpus_stats(ByteView(to_bytes(whole))));
    RawCorpus rc;
    rc.append("one", to_bytes(first));
    rc.append("two", to_bytes(second));
    EXPECT_EQ(corpus_stats(rc), corpus_stats(ByteView(to_bytes(whole))));
  }
}

TEST(CorpusStats, Invariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::string text;
    for (std::uint64_t i = uniform_below(rng, 200); i > 0; --i) text += " a\n"[uniform_below(rng, 3)];
    const auto s = corpus_stats(ByteView(to_bytes(text)));
    EXPECT_GE(s.word_count, s.sentence_count);
    EXPECT_GE(s.byte_count, s.sentence_count);
  }
}

TEST(SampleWindows, ShapesAndOffsets) {
  const ByteSequence text = to_bytes("0123456789abcdefghij");
  const WindowBatch b = sample_windows(ByteView(text), 5, 100, 42);
  ASSERT_EQ(b.windows.size(), 100u);
  ASSERT_EQ(b.source_offsets.size(), 100u);
  EXPECT_EQ(b.seed, 42u);
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < b.windows.size(); ++i) {
    EXPECT_EQ(b.windows[i].size(), 5u);
    ASSERT_LE(b.source_offsets[i], text.size() - 5);
    EXPECT_TRUE(std::equal(b.windows[i].begin(), b.windows[i].end(), text.begin() + b.source_offsets[i]));
    seen.insert(b.source_offsets[i]);
  }
  EXPECT_EQ(seen.size(), 16u);  // all 16 offsets hit in 100 draws
}

TEST(SampleWindows, ExactFitAndReproducibility) {
  const ByteSequence text = to_bytes("abcdef");
  const WindowBatch b = sample_windows(ByteView(text), 6, 3, 1);
  for (auto o : b.source_offsets) EXPECT_EQ(o, 0u);
  const WindowBatch x = sample_windows(ByteView(text), 2, 50, 9);
  const WindowBatch y = sample_windows(ByteView(text), 2, 50, 9);
  EXPECT_EQ(x.source_offsets, y.source_offsets);
  EXPECT_EQ(x.windows, y.windows);
}

TEST(SampleWindows, TooShortCorpus) {
  const ByteSequence text(511, 'a');
  try {
    sample_windows(ByteView(text), 512, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::size);
    EXPECT_NE(std::string(e.what()).find("511"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("512"), std::string::npos);
  }
}

TEST(SelectSplit, LmLayout) {
  RawCorpus c;
  c.append("training/news.en-00001-of-00100", to_bytes("t1\n"));
  c.append("training/news.en-00002-of-00100", to_bytes("t2\n"));
  c.append("heldout/news.en.heldout-00000-of-00050", to_bytes("h0\n"));
  c.append("heldout/news.en.heldout-00001-of-00050", to_bytes("h1\n"));
  c.append("heldout/news.en.heldout-00002-of-00050", to_bytes("h2\n"));
  const RawCorpus train = select_split(c, Split::train);
  ASSERT_EQ(train.shards().size(), 2u);
  EXPECT_EQ(train.total_bytes(), 6u);
  const RawCorpus test = select_split(c, Split::test);
  ASSERT_EQ(test.shards().size(), 1u);
  EXPECT_EQ(test.shards()[0].id, "heldout/news.en.heldout-00000-of-00050");
  const RawCorpus dev = select_split(c, Split::dev);
  ASSERT_EQ(dev.shards().size(), 1u);
  EXPECT_EQ(dev.shards()[0].id, "heldout/news.en.heldout-00001-of-00050");
}

TEST(SelectSplit, MissingHoldoutNamesAvailableShards) {
  RawCorpus c;
  c.append("news.en-00001-of-00100", to_bytes("x\n"));
  try {
    select_split(c, Split::test);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::structure);
    EXPECT_NE(std::string(e.what()).find("news.en-00001-of-00100"), std::string::npos);
  }
}

// Real lm1b counts, only when the corpus is available locally.
TEST(CorpusStats, Lm1bTestShardIfPresent) {
  const char* root = std::getenv("BYTELM_LM1B_DIR");
  if (!root) GTEST_SKIP() << "set BYTELM_LM1B_DIR to check lm1b counts";
  const auto path = std::filesystem::path(root) /
                    "heldout-monolingual.tokenized.shuffled/news.en.heldout-00000-of-00050";
  const auto s = corpus_stats(load_corpus({path}));
  EXPECT_EQ(s.byte_count, 826189u);
  EXPECT_EQ(s.word_count, 159658u);
}
