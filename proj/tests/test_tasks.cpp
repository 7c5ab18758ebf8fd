#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "tspeft/errors.hpp"
#include "tspeft/tasks.hpp"

using namespace tspeft;

namespace {

TaskParams params(std::uint64_t seed, int n) {
  TaskParams p;
  p.seed = seed;
  p.n_examples = n;
  return p;
}

// Label recomputed from the signal positions alone: the most frequent value
// among the marked tokens.
int oracle_label(const Example& ex, int num_classes) {
  std::map<int, int> counts;
  for (int pos : ex.signal_positions) counts[ex.tokens[static_cast<std::size_t>(pos)] - 1]++;
  int best = -1, best_count = 0;
  bool tie = false;
  for (const auto& [v, c] : counts) {
    if (c > best_count) {
      best = v;
      best_count = c;
      tie = false;
    } else if (c == best_count) {
      tie = true;
    }
  }
  EXPECT_FALSE(tie);
  EXPECT_LT(best, num_classes);
  return best;
}

}  // namespace

TEST(SparseSignalTask, LabelsMatchIndependentOracle) {
  const Dataset d = gen_sparse_signal_task(params(3, 500));
  ASSERT_EQ(d.size(), 500u);
  for (const auto& ex : d.examples) {
    ASSERT_EQ(ex.signal_positions.size(), 4u);
    EXPECT_EQ(ex.label, oracle_label(ex, d.num_classes));
  }
}

TEST(SparseSignalTask, MarkersIdentifySignalPositionsExactly) {
  const Dataset d = gen_sparse_signal_task(params(4, 200));
  for (const auto& ex : d.examples) {
    std::vector<int> marked;
    for (int i = 0; i < d.seq_len; ++i) {
      const int t = ex.tokens[static_cast<std::size_t>(i)];
      if (t >= 1 && t <= d.num_classes) marked.push_back(i);
    }
    EXPECT_EQ(marked, ex.signal_positions);
  }
}

TEST(SparseSignalTask, InvariantsHold) {
  const Dataset d = gen_sparse_signal_task(params(5, 300));
  EXPECT_TRUE(valid_dataset(d));
  for (const auto& ex : d.examples) {
    for (int t : ex.tokens) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, d.vocab_size);
    }
    EXPECT_GE(ex.label, 0);
    EXPECT_LT(ex.label, d.num_classes);
    for (int p : ex.signal_positions) {
      EXPECT_GE(p, 0);
      EXPECT_LT(p, d.seq_len);
    }
  }
}

TEST(SparseSignalTask, SameSeedIsByteIdentical) {
  EXPECT_EQ(export_text(gen_sparse_signal_task(params(9, 100))), export_text(gen_sparse_signal_task(params(9, 100))));
  EXPECT_NE(export_text(gen_sparse_signal_task(params(9, 100))), export_text(gen_sparse_signal_task(params(10, 100))));
}

TEST(SparseSignalTask, DenseControlWhenEveryPositionIsSignal) {
  TaskParams p = params(2, 50);
  p.seq_len = 6;
  p.min_len = 6;
  p.k_signal = 6;
  const Dataset d = gen_sparse_signal_task(p);
  for (const auto& ex : d.examples) {
    EXPECT_EQ(ex.signal_positions, (std::vector<int>{0, 1, 2, 3, 4, 5}));
    EXPECT_EQ(ex.label, oracle_label(ex, p.num_classes));
  }
}

TEST(SparseSignalTask, ClassBalanceWithinTenPercent) {
  const Dataset d = gen_sparse_signal_task(params(21, 4000));
  const auto h = label_histogram(d);
  for (int c : h) {
    EXPECT_GE(c, 0.9 * 1000);
    EXPECT_LE(c, 1.1 * 1000);
  }
}

TEST(SparseSignalTask, MajorityPredictorIsNearChance) {
  TaskParams p = params(22, 5120);
  const auto s = gen_task_splits(p, 4096, 1024);
  const auto train_hist = label_histogram(s.train);
  const int majority = static_cast<int>(std::max_element(train_hist.begin(), train_hist.end()) - train_hist.begin());
  const auto val_hist = label_histogram(s.val);
  EXPECT_LE(static_cast<double>(val_hist[static_cast<std::size_t>(majority)]) / 1024.0, 0.25 + 0.05);
}

TEST(SparseSignalTask, PaddingKeepsSignalsInsideValidPrefix) {
  TaskParams p = params(8, 200);
  p.min_len = 10;
  const Dataset d = gen_sparse_signal_task(p);
  bool saw_padding = false;
  for (const auto& ex : d.examples) {
    const auto first_pad = std::find(ex.tokens.begin(), ex.tokens.end(), kPadToken);
    saw_padding |= first_pad != ex.tokens.end();
    EXPECT_TRUE(std::all_of(first_pad, ex.tokens.end(), [](int t) { return t == kPadToken; }));
    for (int pos : ex.signal_positions) EXPECT_LT(pos, first_pad - ex.tokens.begin());
  }
  EXPECT_TRUE(saw_padding);
}

TEST(SparseSignalTask, ParameterViolationsAreConfigErrors) {
  TaskParams p = params(1, 10);
  p.k_signal = 0;
  EXPECT_THROW(gen_sparse_signal_task(p), ConfigError);
  p = params(1, 10);
  p.k_signal = 33;
  EXPECT_THROW(gen_sparse_signal_task(p), ConfigError);
  p = params(1, 10);
  p.vocab_size = p.num_classes + 1;
  EXPECT_THROW(gen_sparse_signal_task(p), ConfigError);
}

TEST(Splits, DisjointAndDeterministic) {
  const auto a = gen_task_splits(params(30, 0), 300, 100);
  const auto b = gen_task_splits(params(30, 0), 300, 100);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  std::set<std::vector<int>> train;
  for (const auto& ex : a.train.examples) train.insert(ex.tokens);
  for (const auto& ex : a.val.examples) EXPECT_EQ(train.count(ex.tokens), 0u);
}

TEST(ShiftedTask, IdentityEqualsRegeneration) {
  const Dataset base = gen_sparse_signal_task(params(40, 100));
  EXPECT_EQ(gen_shifted_task(base, 77, ShiftRule::identity), gen_sparse_signal_task(params(40, 100)));
}

TEST(ShiftedTask, PermutedHistogramIsAPermutationOfBase) {
  const Dataset base = gen_sparse_signal_task(params(41, 1000));
  const Dataset shifted = gen_shifted_task(base, 5, ShiftRule::permute_classes);
  auto hb = label_histogram(base), hs = label_histogram(shifted);
  EXPECT_NE(hb, hs);  // non-identity permutation of an uneven histogram
  std::sort(hb.begin(), hb.end());
  std::sort(hs.begin(), hs.end());
  EXPECT_EQ(hb, hs);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base.examples[i].tokens, shifted.examples[i].tokens);
}

TEST(ShiftedTask, PermutationIsConsistentAcrossExamples) {
  const Dataset base = gen_sparse_signal_task(params(42, 400));
  const Dataset shifted = gen_shifted_task(base, 6, ShiftRule::permute_classes);
  std::map<int, int> mapping;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto [it, fresh] = mapping.emplace(base.examples[i].label, shifted.examples[i].label);
    EXPECT_EQ(it->second, shifted.examples[i].label);
  }
  bool moved = false;
  for (const auto& [from, to] : mapping) moved |= from != to;
  EXPECT_TRUE(moved);
}

TEST(ShiftedTask, MovedSignalsDifferOnEveryExample) {
  const Dataset base = gen_sparse_signal_task(params(43, 300));
  const Dataset shifted = gen_shifted_task(base, 7, ShiftRule::move_signals);
  ASSERT_EQ(shifted.size(), base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto& a = base.examples[i];
    const auto& b = shifted.examples[i];
    EXPECT_NE(a.signal_positions, b.signal_positions);
    EXPECT_EQ(b.label, oracle_label(b, base.num_classes));
  }
  EXPECT_TRUE(valid_dataset(shifted));
}

TEST(ShiftedTask, UnknownRuleIsConfigError) { EXPECT_THROW(parse_shift_rule("reverse"), ConfigError); }

TEST(TextFormat, RoundTripIsExact) {
  TaskParams p = params(50, 64);
  p.min_len = 20;
  const Dataset d = gen_sparse_signal_task(p);
  const std::string text = export_text(d);
  const Dataset back = import_text(text, d.vocab_size, d.num_classes);
  EXPECT_EQ(back, d);
  EXPECT_EQ(export_text(back), text);

  const auto path = std::filesystem::temp_directory_path() / "tspeft_tasks_roundtrip.txt";
  write_text(d, path);
  EXPECT_EQ(read_text(path, d.vocab_size, d.num_classes), d);
  std::filesystem::remove(path);
}

TEST(TextFormat, LineLayout) {
  Dataset d;
  d.vocab_size = 8;
  d.seq_len = 3;
  d.num_classes = 2;
  d.examples.push_back({{1, 4, 1}, 0, {0, 2}});
  EXPECT_EQ(export_text(d), "1 4 1\t0\n");
}
