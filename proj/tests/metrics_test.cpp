#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "sparse_detr/metrics.hpp"

using namespace sdetr;
using namespace sdetr::testing;

namespace {

/// AP with interpolated precision taken as the maximum precision at any rank
/// whose recall reaches r, for each of the 101 recall points.
double reference_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts, std::uint32_t cls,
                    double thr) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> all;  // score, image, index
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (auto l : gts[i].labels) n_gt += l == cls;
    for (std::size_t k = 0; k < dets[i].size(); ++k)
      if (dets[i][k].label == cls) all.emplace_back(dets[i][k].score, i, k);
  }
  std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return std::get<0>(a) > std::get<0>(b); });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<std::pair<double, double>> pr;  // recall, precision
  std::size_t tp = 0;
  for (std::size_t r = 0; r < all.size(); ++r) {
    auto [s, img, k] = all[r];
    int best = -1;
    double best_iou = -1;
    for (std::size_t j = 0; j < gts[img].size(); ++j) {
      if (gts[img].labels[j] != cls || used[img][j]) continue;
      const double v = box_iou(dets[img][k].box, gts[img].boxes[j]);
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) {
      used[img][best] = true;
      ++tp;
    }
    pr.emplace_back(double(tp) / n_gt, double(tp) / (r + 1));
  }
  double total = 0;
  for (int k = 0; k <= 100; ++k) {
    double p = 0;
    for (auto [rec, prec] : pr)
      if (rec >= k / 100.0 - 1e-12) p = std::max(p, prec);
    total += p;
  }
  return total / 101;
}

BoxCxCyWH jitter(const BoxCxCyWH& b, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  return {b.cx + u(rng), b.cy + u(rng), std::max(0.02, b.w + u(rng)), std::max(0.02, b.h + u(rng))};
}

}  // namespace

TEST(AveragePrecision, PerfectDetectionsScoreOne) {
  std::vector<Targets> gts = {{{{0.3, 0.3, 0.2, 0.2}, {0.7, 0.7, 0.2, 0.2}}, {0, 1}}};
  std::vector<std::vector<Detection>> dets = {{{{0.3, 0.3, 0.2, 0.2}, 0, 0.9}, {{0.7, 0.7, 0.2, 0.2}, 1, 0.8}}};
  auto r = average_precision(dets, gts, 3);
  EXPECT_DOUBLE_EQ(r.ap_mean, 1.0);
  EXPECT_DOUBLE_EQ(r.ap50, 1.0);
  EXPECT_EQ(r.ap.size(), 10u);
}

TEST(AveragePrecision, HigherScoredFalsePositiveHalvesPrecision) {
  std::vector<Targets> gts = {{{{0.3, 0.3, 0.2, 0.2}}, {0}}};
  std::vector<std::vector<Detection>> dets = {{{{0.8, 0.8, 0.1, 0.1}, 0, 0.9}, {{0.3, 0.3, 0.2, 0.2}, 0, 0.5}}};
  EXPECT_NEAR(average_precision(dets, gts, 1).ap_mean, 0.5, 1e-12);
}

TEST(AveragePrecision, IoUThresholdsCountedIndividually) {
  // IoU = 0.62: a true positive at thresholds 0.5, 0.55 and 0.6 only
  std::vector<Targets> gts = {{{{0.5, 0.5, 0.4, 0.4}}, {0}}};
  BoxCxCyWH det{0.5, 0.5, 0.4, 0.4 * 0.62};
  ASSERT_NEAR(box_iou(det, gts[0].boxes[0]), 0.62, 1e-12);
  std::vector<std::vector<Detection>> dets = {{{det, 0, 0.9}}};
  auto r = average_precision(dets, gts, 1);
  EXPECT_NEAR(r.ap_mean, 0.3, 1e-12);
  EXPECT_DOUBLE_EQ(r.ap50, 1.0);
  EXPECT_DOUBLE_EQ(r.ap75, 0.0);
}

TEST(AveragePrecision, ClassesWithoutGroundTruthExcluded) {
  std::vector<Targets> gts = {{{{0.3, 0.3, 0.2, 0.2}}, {0}}};
  std::vector<std::vector<Detection>> dets = {{{{0.3, 0.3, 0.2, 0.2}, 0, 0.9}, {{0.6, 0.6, 0.2, 0.2}, 2, 0.95}}};
  EXPECT_DOUBLE_EQ(average_precision(dets, gts, 3).ap_mean, 1.0);
  EXPECT_EQ(class_average_precision(dets, gts, 2, 0.5), -1.0);
}

TEST(AveragePrecision, MatchesReferenceOnRandomInstances) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1), pos(0.2, 0.8), size(0.1, 0.3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Targets> gts(4);
    std::vector<std::vector<Detection>> dets(4);
    for (std::size_t i = 0; i < 4; ++i) {
      const int n = 1 + rng() % 4;
      for (int k = 0; k < n; ++k) {
        BoxCxCyWH b{pos(rng), pos(rng), size(rng), size(rng)};
        gts[i].boxes.push_back(b);
        gts[i].labels.push_back(rng() % 3);
        // near-duplicates, wrong-class and background detections
        dets[i].push_back({jitter(b, rng, 0.05), gts[i].labels.back(), u(rng)});
        dets[i].push_back({jitter(b, rng, 0.03), static_cast<std::uint32_t>(rng() % 3), u(rng)});
        dets[i].push_back({{pos(rng), pos(rng), size(rng), size(rng)}, static_cast<std::uint32_t>(rng() % 3), u(rng)});
      }
    }
    auto rep = average_precision(dets, gts, 3);
    for (std::size_t t = 0; t < rep.thresholds.size(); ++t) {
      double sum = 0;
      int n = 0;
      for (std::uint32_t c = 0; c < 3; ++c) {
        bool has = false;
        for (auto& g : gts)
          for (auto l : g.labels) has = has || l == c;
        if (!has) continue;
        sum += reference_ap(dets, gts, c, rep.thresholds[t]);
        ++n;
      }
      EXPECT_NEAR(rep.ap[t], sum / n, 1e-12);
      EXPECT_GE(rep.ap[t], 0.0);
      EXPECT_LE(rep.ap[t], 1.0);
    }
  }
}

TEST(AveragePrecision, MismatchedImageCountIsDimensionError) {
  EXPECT_THROW(average_precision({{}}, {}, 3), DimensionError);
}

TEST(Detections, TopScoredClampedAndCapped) {
  std::mt19937_64 rng(2);
  DetectionSet<double> set{random_tensor({50, 3}, rng, -3, 3, false), random_tensor({50, 4}, rng, 0.1, 0.9, false)};
  set.boxes.mutable_data()[0] = 0.05;  // cx near the border; w up to 0.9 extends past 0
  auto d = detections_from_set(set);
  ASSERT_EQ(d.size(), 100u);
  for (std::size_t i = 1; i < d.size(); ++i) EXPECT_GE(d[i - 1].score, d[i].score);
  for (auto& x : d) {
    EXPECT_GE(x.box.x1(), -1e-12);
    EXPECT_LE(x.box.x2(), 1 + 1e-12);
  }
  EXPECT_EQ(detections_from_set(set, 1000).size(), 150u);
}

TEST(Corr, HandValues) {
  DamMap dam{{0.5, 0.0, 0.25, 0.25, 1.0}};
  auto mask = mask_from_indices(0.4, 5, {0, 4});
  auto r = corr_metric(dam, mask);
  EXPECT_NEAR(r.corr, 1.5 / 2.0, 1e-15);
  EXPECT_EQ(r.omega_d, 4u);
  EXPECT_EQ(r.s, 2u);
  // reference support restricts the denominator
  DamMap ref{{1.0, 0.0, 0.0, 0.0, 1.0}};
  EXPECT_DOUBLE_EQ(corr_metric(dam, ref, mask).corr, 1.0);
  EXPECT_DOUBLE_EQ(corr_metric(DamMap{{0, 0, 0, 0, 0}}, mask).corr, 1.0);
  EXPECT_THROW(corr_metric(DamMap{{1.0}}, mask), DimensionError);
}

TEST(Corr, PropertyBoundedAndMonotoneInSelection) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 200; ++t) {
    DamMap dam;
    for (int i = 0; i < 40; ++i) dam.values.push_back(u(rng) < 0.4 ? 0.0 : u(rng));
    std::vector<double> scores(40);
    for (auto& s : scores) s = u(rng);
    double prev = -1;
    for (double rho = 0.0; rho <= 1.0 + 1e-9; rho += 0.1) {
      auto c = corr_metric(dam, select_top_rho(scores, std::min(rho, 1.0), {})).corr;
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
      EXPECT_GE(c, prev - 1e-12);
      prev = c;
    }
    EXPECT_NEAR(prev, 1.0, 1e-12);
    // selecting by the DAM itself is optimal among masks of equal size
    auto best = corr_metric(dam, select_top_rho(dam.values, 0.3, {})).corr;
    EXPECT_GE(best + 1e-12, corr_metric(dam, select_top_rho(scores, 0.3, {})).corr);
  }
}

TEST(DamNonzeroRatio, HandValue) {
  DamMap dam{{0.0, 1.0, 2.0, 0.0}};
  std::vector<std::uint8_t> pad = {0, 0, 1, 0};
  EXPECT_DOUBLE_EQ(dam_nonzero_ratio(dam, pad), 1.0 / 3.0);
}

TEST(FlopCount, DefaultConfigHandValues) {
  ModelConfig cfg;  // 8x8 + 4x4 tokens, H*L*K = 32
  auto r = attention_flop_count(cfg, 0.2);
  EXPECT_EQ(r.tokens, 80u);
  EXPECT_EQ(r.selected, 16u);
  EXPECT_EQ(r.dense_pairs_per_layer, 6400u);
  EXPECT_EQ(r.deformable_slots_per_layer, 2560u);
  EXPECT_EQ(r.sparse_slots_per_layer, 512u);
  EXPECT_EQ(r.encoder_sparse_slots, 1536u);
  EXPECT_EQ(r.decoder_cross_slots, 3u * 16 * 32);
  EXPECT_EQ(r.decoder_self_pairs, 3u * 16 * 16);
  EXPECT_EQ(attention_flop_count(cfg, 0.0).encoder_linear_macs, 0u);
}

TEST(FlopCount, PropertySparseCostLinearInSelection) {
  ModelConfig cfg;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    const double rho = u(rng);
    auto r = attention_flop_count(cfg, rho);
    EXPECT_EQ(r.sparse_slots_per_layer * r.tokens, r.deformable_slots_per_layer * r.selected);
    EXPECT_LE(r.encoder_sparse_slots, r.encoder_deformable_slots);
  }
}

TEST(FlopCount, MatchesRuntimeCounters) {
  ModelConfig cfg;
  cfg.criterion = Criterion::random;
  cfg.use_encoder_aux = false;
  auto params = ModelParams<float>::init(cfg, 5);
  std::mt19937_64 rng(6);
  std::vector<float> px(3 * 64 * 64);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : px) v = u(rng);
  Tensor<float> img({3, 64, 64}, px);
  for (double rho : {0.0, 0.1, 0.2, 0.5, 1.0}) {
    auto want = attention_flop_count(cfg, rho);
    OpCounter total;
    {
      CounterScope cs(total);
      model_forward(img, params, cfg, {rho, 1});
    }
    EXPECT_EQ(total.sampling_slots, want.runtime_sampling_slots()) << rho;
    EXPECT_EQ(total.dense_pairs, want.runtime_dense_pairs()) << rho;

    auto feat = backbone_stub(params.backbone, img, cfg);
    OpCounter enc;
    {
      CounterScope cs(enc);
      encoder_forward(feat, rho, params, cfg, 1);
    }
    EXPECT_EQ(enc.sampling_slots, want.encoder_sparse_slots) << rho;
    EXPECT_EQ(enc.linear_macs, want.encoder_linear_macs) << rho;
  }
}

TEST(GradNorm, LayerwiseL2) {
  TensorD a({2}, {1, 1}, true), b({1}, {1}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 0;
  b.mutable_grad()[0] = 4;
  std::vector<std::pair<std::string, std::vector<TensorD>>> groups = {{"X", {a, b}}, {"Y", {TensorD({1}, {0.0})}}};
  auto n = layerwise_grad_norm(groups);
  EXPECT_EQ(n[0].first, "X");
  EXPECT_DOUBLE_EQ(n[0].second, 5.0);
  EXPECT_DOUBLE_EQ(n[1].second, 0.0);
  a.zero_grad();
  b.zero_grad();
  EXPECT_THROW(layerwise_grad_norm(groups), ContractError);
}
