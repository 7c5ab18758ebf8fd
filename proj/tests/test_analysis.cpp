#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "tspeft/analysis.hpp"

using namespace tspeft;

namespace {

SparsityRow row(int layer, Site site, double sparsity, double mean_r = 0.0, double delta = 0.0) {
  return {AttachmentPoint{layer, site}, sparsity, mean_r, delta, 100};
}

SparsityTable table(std::vector<SparsityRow> rows) {
  SparsityTable t;
  t.rows = std::move(rows);
  return t;
}

SparsityTable ten_modules() {
  return table({row(0, Site::q_proj, 0.60, 0.01, 0.5), row(0, Site::k_proj, 0.55, 0.02, 0.4),
                row(0, Site::v_proj, 0.40, 0.03, 0.3), row(0, Site::ffn_up, 0.10, 0.09, 0.9),
                row(0, Site::ffn_down, 0.20, 0.08, 1.0), row(1, Site::q_proj, 0.70, 0.01, 0.2),
                row(1, Site::k_proj, 0.65, 0.02, 0.1), row(1, Site::v_proj, 0.30, 0.05, 0.6),
                row(1, Site::ffn_up, 0.15, 0.07, 0.8), row(1, Site::ffn_down, 0.25, 0.06, 0.7)});
}

}  // namespace

TEST(SparsityTable, MeanAndPopulationStd) {
  EvalResult ev;
  ev.modules = {ModuleEval{{0, Site::q_proj}, 2, 10}, ModuleEval{{1, Site::v_proj}, 6, 10}};
  const auto t = sparsity_table(ev);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(t.rows[0].sparsity, 0.8);
  EXPECT_DOUBLE_EQ(t.rows[1].sparsity, 0.4);
  EXPECT_DOUBLE_EQ(t.mean, 0.6);
  EXPECT_NEAR(t.std, 0.2, 1e-15);
}

TEST(SparsityTable, CsvLayout) {
  auto t = table({row(0, Site::q_proj, 0.25, 0.125), row(1, Site::ffn_up, 0.75, 0.5)});
  t.mean = 0.5;
  t.std = 0.25;
  EXPECT_EQ(to_csv(t),
            "layer,site,sparsity_pct,mean_r,tokens\n"
            "0,q_proj,25.0000,0.125,100\n"
            "1,ffn_up,75.0000,0.5,100\n"
            "mean,,50.0000,,\n"
            "std,,25.0000,,\n");
}

TEST(SparsityTable, UngatedCheckpointIsContractError) {
  Checkpoint ck;
  EXPECT_THROW(module_sparsity_table(ck, Dataset{}, 8), ContractError);
}

TEST(SelectionCount, RoundsAndClamps) {
  EXPECT_EQ(selection_count(0.5, 10), 5u);
  EXPECT_EQ(selection_count(0.2, 10), 2u);
  EXPECT_EQ(selection_count(0.01, 10), 1u);
  EXPECT_EQ(selection_count(1.0, 10), 10u);
  EXPECT_EQ(selection_count(0.25, 10), 3u);  // 2.5 rounds away from zero
  EXPECT_THROW(selection_count(0.0, 10), SelectionError);
  EXPECT_THROW(selection_count(1.5, 10), SelectionError);
}

TEST(RankModules, TwoModulesLowestSparsityFirst) {
  const auto t = table({row(0, Site::q_proj, 0.8), row(0, Site::v_proj, 0.2)});
  const auto r = rank_modules(t, {SelectionKind::s_low, 0.5, 0});
  ASSERT_EQ(r.selected.size(), 1u);
  EXPECT_EQ(to_string(r.selected[0]), "L0.v_proj");
  const auto h = rank_modules(t, {SelectionKind::s_high, 0.5, 0});
  EXPECT_EQ(to_string(h.selected[0]), "L0.q_proj");
}

TEST(RankModules, FullPercentKeepsEverything) {
  const auto t = ten_modules();
  for (auto kind : {SelectionKind::s_low, SelectionKind::s_high, SelectionKind::norm_relative,
                    SelectionKind::norm_abs, SelectionKind::random}) {
    const auto r = rank_modules(t, {kind, 1.0, 3});
    EXPECT_EQ(std::set<AttachmentPoint>(r.selected.begin(), r.selected.end()).size(), 10u);
  }
}

TEST(RankModules, OrdersFollowTheirKeys) {
  const auto t = ten_modules();
  auto lookup = [&](const AttachmentPoint& p) {
    return *std::find_if(t.rows.begin(), t.rows.end(), [&](const SparsityRow& r) { return r.point == p; });
  };
  const auto low = rank_modules(t, {SelectionKind::s_low, 0.5, 0});
  for (std::size_t i = 1; i < low.order.size(); ++i)
    EXPECT_LE(lookup(low.order[i - 1]).sparsity, lookup(low.order[i]).sparsity);
  const auto rel = rank_modules(t, {SelectionKind::norm_relative, 0.5, 0});
  for (std::size_t i = 1; i < rel.order.size(); ++i)
    EXPECT_GE(lookup(rel.order[i - 1]).mean_r, lookup(rel.order[i]).mean_r);
  const auto abs = rank_modules(t, {SelectionKind::norm_abs, 0.5, 0});
  for (std::size_t i = 1; i < abs.order.size(); ++i)
    EXPECT_GE(lookup(abs.order[i - 1]).mean_delta_norm, lookup(abs.order[i]).mean_delta_norm);
  EXPECT_EQ(to_string(low.selected.front()), "L0.ffn_up");
}

TEST(RankModules, TiesBreakOnLayerThenSite) {
  const auto t = table({row(1, Site::v_proj, 0.5), row(0, Site::ffn_up, 0.5), row(0, Site::q_proj, 0.5)});
  const auto r = rank_modules(t, {SelectionKind::s_low, 1.0, 0});
  EXPECT_EQ(to_string(r.order[0]), "L0.q_proj");
  EXPECT_EQ(to_string(r.order[1]), "L0.ffn_up");
  EXPECT_EQ(to_string(r.order[2]), "L1.v_proj");
}

TEST(RankModules, SelectionsArePrefixesAcrossPercentages) {
  const auto t = ten_modules();
  for (auto kind : {SelectionKind::s_low, SelectionKind::s_high, SelectionKind::random}) {
    std::vector<AttachmentPoint> prev;
    for (double p : {0.2, 0.5, 0.8, 1.0}) {
      const auto r = rank_modules(t, {kind, p, 7});
      ASSERT_GE(r.selected.size(), prev.size());
      EXPECT_TRUE(std::equal(prev.begin(), prev.end(), r.selected.begin()));
      prev = r.selected;
    }
  }
}

TEST(RankModules, RandomIsDeterministicPerSeed) {
  const auto t = ten_modules();
  EXPECT_EQ(rank_modules(t, {SelectionKind::random, 0.5, 4}).order, rank_modules(t, {SelectionKind::random, 0.5, 4}).order);
  EXPECT_NE(rank_modules(t, {SelectionKind::random, 0.5, 4}).order, rank_modules(t, {SelectionKind::random, 0.5, 5}).order);
}

TEST(RankModules, HalfRankNeedsFullPercent) {
  const auto t = ten_modules();
  EXPECT_THROW(rank_modules(t, {SelectionKind::half_rank, 0.5, 0}), SelectionError);
  const auto r = rank_modules(t, {SelectionKind::half_rank, 1.0, 0});
  EXPECT_TRUE(r.halve_rank);
  EXPECT_EQ(r.selected.size(), 10u);
}

TEST(RankModules, SingleModuleIsSelectionError) {
  EXPECT_THROW(rank_modules(table({row(0, Site::q_proj, 0.1)}), {}), SelectionError);
}

TEST(Retrain, HalfRankHalvesTrainableParameters) {
  const RunConfig c = load_config(std::filesystem::path(TSPEFT_CONFIG_DIR) / "small.json");
  const RunData d = make_run_data(c);
  RunConfig quick = c;
  quick.optimizer.epochs = 1;
  const BackboneWeights w = init_backbone(c.backbone_shape(), 0);
  const auto t = ten_modules();

  const auto full = select_and_retrain(quick, w, d.train, d.val, rank_modules(t, {SelectionKind::s_low, 1.0, 0}));
  const auto half = select_and_retrain(quick, w, d.train, d.val, rank_modules(t, {SelectionKind::half_rank, 1.0, 0}));
  EXPECT_EQ(half.rank, c.peft.rank / 2);
  EXPECT_EQ(2 * half.run.trainable_params, full.run.trainable_params);
  EXPECT_FALSE(half.run.final_state.gating_enabled);

  const auto five = select_and_retrain(quick, w, d.train, d.val, rank_modules(t, {SelectionKind::s_low, 0.5, 0}));
  EXPECT_EQ(five.attached.size(), 5u);
  EXPECT_TRUE(std::is_sorted(five.attached.begin(), five.attached.end()));
}

TEST(Sweep, RowsPerPercentAndSeed) {
  const RunConfig c = load_config(std::filesystem::path(TSPEFT_CONFIG_DIR) / "small.json");
  const RunData d = make_run_data(c);
  RunConfig quick = c;
  quick.optimizer.epochs = 1;
  const BackboneWeights w = init_backbone(c.backbone_shape(), 0);
  const auto ranking = rank_modules(ten_modules(), {SelectionKind::s_low, 0.5, 0});
  const auto rows = sweep_percentages(quick, w, d.train, d.val, ranking, {1.0, 0.2}, {0, 1});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].percent, 0.2);
  EXPECT_EQ(rows[3].percent, 1.0);
  EXPECT_LT(rows[0].trainable_params, rows[3].trainable_params);
  const std::string csv = sweep_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "percent,seed,val_metric,trainable_params");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_THROW(sweep_percentages(quick, w, d.train, d.val, rank_modules(ten_modules(), {SelectionKind::s_high, 0.5, 0}),
                                 {0.5}, {0}),
               SelectionError);
}
