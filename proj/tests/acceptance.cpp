// Acceptance gate: one PASS/FAIL line per criterion. Criteria 1-6 run in
// process; 7-11 train through the sdetr command line into --workdir.

#include <sys/resource.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "sparse_detr/checkpoint.hpp"
#include "sparse_detr/config.hpp"
#include "sparse_detr/report.hpp"
#include "sparse_detr/train.hpp"

using namespace sdetr;
using namespace sdetr::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kRhoOneTol = 1e-5;
constexpr double kDamMassTol = 1e-4;
constexpr double kApPointTol = 0.02;  // 2 AP points on the [0, 1] scale
constexpr double kTrainLogTol = 1e-6;
constexpr double kGradSuiteCpuSeconds = 120.0;
constexpr double kTrainingCpuMinutes = 60.0;

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s criterion %2d %-28s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string f(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double children_cpu_seconds() {
  rusage u{};
  getrusage(RUSAGE_CHILDREN, &u);
  return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
         static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec) * 1e-6;
}

// ---------------------------------------------------------------- csv

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ContractError("csv: no column " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
  double num(std::size_t row, const std::string& name) const { return std::stod(rows[row][col(name)]); }
  const std::string& str(std::size_t row, const std::string& name) const { return rows[row][col(name)]; }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string c;
  while (std::getline(ss, c, ',')) out.push_back(c);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Csv read_csv(const fs::path& p) {
  Csv c;
  std::stringstream ss(slurp(p));
  std::string line;
  if (std::getline(ss, line)) c.header = split(line);
  while (std::getline(ss, line))
    if (!line.empty()) c.rows.push_back(split(line));
  return c;
}

// ---------------------------------------------------------------- cli

struct Cli {
  std::string exe;
  fs::path log;

  int operator()(const std::string& args) const {
    const std::string cmd = exe + " " + args + " >> " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }
};

// ---------------------------------------------------------------- helpers

double grid_distance(double p) { return std::abs(p - std::round(p)); }

DeformAttnParams<double> random_attn_params(const DeformAttnConfig& cfg, std::uint64_t seed, double offset_scale) {
  Rng rng(seed);
  auto p = DeformAttnParams<double>::init(cfg, rng);
  std::uniform_real_distribution<double> u(-offset_scale, offset_scale);
  for (auto& v : p.offset.weight.mutable_data()) v = u(rng);
  for (auto& v : p.offset.bias.mutable_data()) v = u(rng);
  return p;
}

bool any_sample_near_grid_line(const AttentionRecord& rec, const TokenLayout& layout) {
  for (std::size_t q = 0; q < rec.num_queries(); ++q)
    for (std::size_t h = 0; h < rec.heads; ++h)
      for (std::size_t l = 0; l < rec.levels; ++l)
        for (std::size_t k = 0; k < rec.points; ++k) {
          const auto loc = rec.location(q, h, l, k);
          const auto [lh, lw] = layout.levels[l];
          if (grid_distance(to_pixel(loc.x, lw)) < 1e-3 || grid_distance(to_pixel(loc.y, lh)) < 1e-3) return true;
        }
  return false;
}

/// All four bilinear taps of every sample lie on the grid.
bool all_samples_in_bounds(const AttentionRecord& rec, const TokenLayout& layout) {
  for (std::size_t q = 0; q < rec.num_queries(); ++q)
    for (std::size_t h = 0; h < rec.heads; ++h)
      for (std::size_t l = 0; l < rec.levels; ++l)
        for (std::size_t k = 0; k < rec.points; ++k) {
          const auto loc = rec.location(q, h, l, k);
          const auto [lh, lw] = layout.levels[l];
          const double px = to_pixel(loc.x, lw), py = to_pixel(loc.y, lh);
          if (px < 0.0 || py < 0.0 || px > static_cast<double>(lw - 1) || py > static_cast<double>(lh - 1)) return false;
        }
  return true;
}

BoxCxCyWH random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.5);
  return {c(rng), c(rng), s(rng), s(rng)};
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.levels = 2;
  cfg.points = 2;
  cfg.ffn_dim = 32;
  cfg.num_queries = cfg.topk_queries = 4;
  cfg.encoder_layers = 2;
  cfg.decoder_layers = 2;
  cfg.image_size = 32;
  return cfg;
}

template <typename T>
Tensor<T> random_image(std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<T> v(3 * size * size);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>({3, size, size}, std::move(v));
}

// ---------------------------------------------------------------- 1

void gradient_suite() {
  const double t0 = cpu_seconds();
  std::mt19937_64 rng(1);
  std::map<std::string, std::pair<int, double>> worst;  // name -> (instances, worst rel error)
  auto record = [&](const std::string& name, const GradCheck& r) {
    auto& [n, w] = worst[name];
    ++n;
    w = std::max(w, r.rel_error);
  };
  constexpr int kInstances = 100;
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t rows = 1 + rng() % 4, din = 1 + rng() % 6, dout = 1 + rng() % 6;
    auto x = random_tensor({rows, din}, rng), W = random_tensor({din, dout}, rng), b = random_tensor({dout}, rng);
    record("linear", grad_check([&] { return projected(linear(x, W, b)); }, {x, W, b}));

    const std::size_t cols = 2 + rng() % 6;
    auto xl = random_tensor({rows, cols}, rng, -2, 2), gm = random_tensor({cols}, rng), bt = random_tensor({cols}, rng);
    record("layer_norm", grad_check([&] { return projected(layer_norm(xl, gm, bt)); }, {xl, gm, bt}));

    auto xg = random_tensor({12}, rng, -4, 4);
    record("gelu", grad_check([&] { return projected(gelu(xg)); }, {xg}));

    auto xs = random_tensor({rows, cols}, rng, -3, 3);
    const std::size_t axis = rng() % 2;
    record("softmax", grad_check([&] { return projected(softmax(xs, axis)); }, {xs}));

    auto tgt = std::vector<int>(6);
    for (auto& t : tgt) t = static_cast<int>(rng() % 4) - 1;
    auto logits = random_tensor({6, 3}, rng, -4, 4);
    record("focal", grad_check([&] { return sigmoid_focal_loss_sum(logits, tgt); }, {logits}));

    std::vector<BoxCxCyWH> gt_boxes = {random_box(rng), random_box(rng), random_box(rng)};
    std::vector<double> pv;
    for (int k = 0; k < 5; ++k) {
      auto bx = random_box(rng);
      pv.insert(pv.end(), {bx.cx, bx.cy, bx.w, bx.h});
    }
    DetectionSet<double> preds{random_tensor({5, 3}, rng), TensorD({5, 4}, pv, true)};
    Targets gts{gt_boxes, {0, 1, 2}};
    auto assignment = match(build_cost_matrix(preds, gts));
    record("l1", grad_check([&] { return hungarian_loss(preds, gts, assignment).box; }, {preds.boxes}));

    auto pg = random_tensor({3, 4}, rng, 0.0, 1.0);
    for (std::size_t k = 0; k < 3; ++k) {
      auto bx = random_box(rng);
      auto d = pg.mutable_data();
      d[4 * k] = bx.cx, d[4 * k + 1] = bx.cy, d[4 * k + 2] = bx.w, d[4 * k + 3] = bx.h;
    }
    record("giou", grad_check([&] { return giou_loss_sum(pg, gt_boxes); }, {pg}));

    const std::size_t n = 6 + rng() % 10;
    DamMap dam;
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t k = 0; k < n; ++k) dam.values.push_back(u(rng) < 0.2 ? 0.0 : u(rng));
    std::vector<std::uint8_t> pad(n, 0);
    pad[rng() % n] = 1;
    auto bin = binarize_dam(dam, u(rng), pad);
    for (auto kind : {SaliencyLossKind::bce, SaliencyLossKind::smooth_l1, SaliencyLossKind::ranking}) {
      auto sl = random_tensor({n}, rng, -2, 2);
      const auto seed = static_cast<std::uint64_t>(i);
      if (kind == SaliencyLossKind::ranking) {
        // keep every sampled pair away from the hinge kink
        const auto pairs = sample_ranking_pairs(dam, pad, seed);
        auto near_kink = [&] {
          for (auto [hi, lo] : pairs)
            if (std::abs(1.0 - (sl[hi] - sl[lo])) < 1e-3) return true;
          return false;
        };
        while (near_kink()) sl = random_tensor({n}, rng, -2, 2);
      }
      record("l_dam_" + std::string(to_string(kind)),
             grad_check([&] { return saliency_loss(sl, dam, bin, kind, pad, seed); }, {sl}));
    }
  }
  // the sampling primitives are checked away from the kernel's grid-line kinks
  for (int done = 0; done < kInstances;) {
    const std::size_t h = 2 + rng() % 4, w = 2 + rng() % 4, d = 1 + rng() % 3;
    auto map = random_tensor({h, w, d}, rng);
    auto pt = random_tensor({2}, rng, 0.1, 0.9);
    if (grid_distance(pt[0] * w - 0.5) < 1e-3 || grid_distance(pt[1] * h - 0.5) < 1e-3) continue;
    record("bilinear_sample", grad_check([&] { return projected(bilinear_sample(map, pt)); }, {map, pt}));
    ++done;
  }
  DeformAttnConfig cfg{4, 2, 2, 2};
  auto layout = TokenLayout::build({{3, 3}, {2, 2}});
  for (int done = 0, trial = 0; done < kInstances;) {
    auto p = random_attn_params(cfg, 1000 + trial++, 0.15);
    auto x = random_tensor({layout.size(), 4}, rng);
    auto q = random_tensor({2, 4}, rng);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Point2> refs = {{u(rng), u(rng)}, {u(rng), u(rng)}};
    AttentionRecord rec;
    deformable_attention(q, refs, x, layout, cfg, p, &rec);
    if (any_sample_near_grid_line(rec, layout)) continue;
    std::vector<TensorD> inputs = {x, q, p.value.weight, p.offset.weight, p.weight.weight, p.output.weight, p.offset.bias};
    record("deformable_attention",
           grad_check([&] { return projected(deformable_attention(q, refs, x, layout, cfg, p)); }, inputs));
    ++done;
  }
  const double secs = cpu_seconds() - t0;
  bool ok = secs < kGradSuiteCpuSeconds;
  double overall = 0.0;
  std::string names;
  for (const auto& [name, nw] : worst) {
    ok = ok && nw.first >= kInstances && nw.second < kGradTol;
    overall = std::max(overall, nw.second);
    if (nw.second >= kGradTol || nw.first < kInstances) names += " " + name + "=" + g(nw.second);
  }
  verdict(1, "gradient suite", ok,
          std::to_string(worst.size()) + " primitives x " + std::to_string(kInstances) + " instances, worst rel err " +
              g(overall) + " < " + g(kGradTol) + ", cpu " + f(secs, 1) + " s < " + f(kGradSuiteCpuSeconds, 0) + " s" +
              (names.empty() ? "" : "; over:" + names));
}

// ---------------------------------------------------------------- 2

void pass_through() {
  auto cfg = small_model();
  auto pd = ModelParams<double>::init(cfg, 3);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  const auto layout = TokenLayout::build(cfg.level_shapes());
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto tokens = random_tensor({layout.size(), cfg.d_model}, rng, -2, 2, false);
    auto mask = random_selection(u(rng), layout.pad_mask, rng());
    const auto norm = trial % 2 ? NormPlacement::pre_ln : NormPlacement::post_ln;
    auto y = sparse_encoder_layer(tokens, layout, mask, pd.encoder[trial % 2], cfg.attn(), norm);
    for (std::size_t t = 0; t < layout.size(); ++t) {
      if (mask.contains(t)) continue;
      for (std::size_t c = 0; c < cfg.d_model; ++c) mismatches += y[t * cfg.d_model + c] != tokens[t * cfg.d_model + c];
    }
  }

  // rho = 1 against the unsparsified reference, float model, nonzero offsets
  double rho_one = 0.0;
  auto pf = ModelParams<float>::init(cfg, 7);
  std::uniform_real_distribution<double> off(-0.2, 0.2);
  for (auto& layer : pf.encoder)
    for (auto& v : layer.attn.offset.weight.mutable_data()) v = static_cast<float>(off(rng));
  std::size_t identity_mismatches = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto img = random_image<float>(cfg.image_size, 100 + trial);
    auto a = model_forward(img, pf, cfg, {1.0, 1, false}), b = model_forward(img, pf, cfg, {1.0, 1, true});
    for (std::size_t i = 0; i < a.final.logits.numel(); ++i)
      rho_one = std::max(rho_one, static_cast<double>(std::abs(a.final.logits[i] - b.final.logits[i])));
    for (std::size_t i = 0; i < a.final.boxes.numel(); ++i)
      rho_one = std::max(rho_one, static_cast<double>(std::abs(a.final.boxes[i] - b.final.boxes[i])));
    auto feat = backbone_stub(pf.backbone, img, cfg);
    auto enc = encoder_forward(feat, 0.0, pf, cfg, 0);
    for (std::size_t i = 0; i < feat.tokens.numel(); ++i) identity_mismatches += enc.tokens[i] != feat.tokens[i];
  }
  verdict(2, "sparse encoder pass-through", mismatches == 0 && rho_one <= kRhoOneTol && identity_mismatches == 0,
          "1000 pairs, " + std::to_string(mismatches) + " unselected values changed; rho=1 vs reference max diff " +
              g(rho_one) + " <= " + g(kRhoOneTol) + "; rho=0 changed " + std::to_string(identity_mismatches) +
              " values");
}

// ---------------------------------------------------------------- 3

void selection_cardinality() {
  auto cfg = small_model();
  std::mt19937_64 rng(21);
  std::size_t checks = 0, bad = 0;
  for (auto crit : {Criterion::random, Criterion::os, Criterion::dam}) {
    cfg.criterion = crit;
    auto params = ModelParams<double>::init(cfg, 22);
    for (bool padded : {false, true}) {
      auto feat = backbone_stub(params.backbone, random_image<double>(cfg.image_size, rng()), cfg);
      if (padded) {
        // pad the right half of the finest level and one coarse column
        for (std::size_t l = 0; l < feat.layout.levels.size(); ++l) {
          const auto [lh, lw] = feat.layout.levels[l];
          for (std::size_t i = 0; i < lh; ++i)
            for (std::size_t j = l == 0 ? lw / 2 : lw - 1; j < lw; ++j) feat.layout.pad_mask[feat.layout.token_index(l, i, j)] = 1;
        }
      }
      const std::size_t nv = feat.layout.num_valid();
      for (std::size_t k = 0; k <= 10; ++k) {
        const double rho = static_cast<double>(k) / 10.0;
        auto out = model_forward_features(feat, params, cfg, {rho, rng()});
        const std::size_t want = (k * nv + 9) / 10;  // integer ceil(k/10 * nv)
        bool ok = out.mask.count() == want;
        for (std::size_t t = 0; t < nv + 100 && t < feat.layout.size(); ++t)
          ok = ok && !(feat.layout.pad_mask[t] && out.mask.contains(t));
        ++checks;
        bad += !ok;
      }
    }
  }
  verdict(3, "selection cardinality", bad == 0,
          std::to_string(checks) + " (criterion, padding, rho) cases, " + std::to_string(bad) +
              " with |mask| != ceil(rho*N_valid) or padded tokens selected");
}

// ---------------------------------------------------------------- 4

void dam_mass() {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0, 1);
  int configs = 0, skipped = 0;
  double worst = 0.0;
  while (configs < 100) {
    ModelConfig cfg;
    cfg.heads = std::array<std::size_t, 3>{1, 2, 4}[rng() % 3];
    cfg.d_model = 8 * cfg.heads;
    cfg.levels = 1 + rng() % 3;
    cfg.points = 1 + rng() % 4;
    cfg.ffn_dim = 16;
    cfg.num_queries = cfg.topk_queries = 1 + rng() % 6;
    cfg.decoder_layers = 1 + rng() % 3;
    cfg.encoder_layers = 1;
    cfg.image_size = cfg.coarsest_stride() * (2 + rng() % 2);
    auto params = ModelParams<double>::init(cfg, rng());
    for (auto& layer : params.decoder)
      for (auto& v : layer.cross.offset.weight.mutable_data()) v = 0.05 * (2 * u(rng) - 1);
    const auto layout = TokenLayout::build(cfg.level_shapes());
    auto memory = random_tensor({layout.size(), cfg.d_model}, rng, -1, 1, false);
    auto queries = random_tensor({cfg.num_queries, cfg.d_model}, rng, -1, 1, false);
    std::vector<BoxCxCyWH> refs;
    for (std::size_t q = 0; q < cfg.num_queries; ++q) refs.push_back({0.35 + 0.3 * u(rng), 0.35 + 0.3 * u(rng), 0.1, 0.1});
    auto dec = decoder_forward(queries, refs, memory, layout, params, cfg);
    bool inside = true;
    for (const auto& r : dec.records) inside = inside && all_samples_in_bounds(r, layout);
    if (!inside) {
      ++skipped;
      continue;
    }
    const double want = static_cast<double>(cfg.num_queries * cfg.decoder_layers * cfg.heads);
    worst = std::max(worst, std::abs(build_dam(dec.records, layout).total() - want));
    ++configs;
  }
  verdict(4, "DAM mass conservation", worst <= kDamMassTol,
          "100 in-bounds decoder passes (" + std::to_string(skipped) + " out-of-bounds redrawn), max |mass - Q*L*H| " +
              g(worst) + " <= " + g(kDamMassTol));
}

// ---------------------------------------------------------------- 5

double brute_force_min(const CostMatrix& c) {
  std::vector<std::size_t> perm(c.rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t j = 0; j < c.cols; ++j) s += c.at(perm[j], j);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

void hungarian_oracle() {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(-5, 5);
  std::size_t wrong = 0, shift_wrong = 0;
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t rows = 1 + t % 7, cols = 1 + rng() % rows;
    CostMatrix c(rows, cols);
    for (auto& v : c.values) v = u(rng);
    auto a = hungarian(c);
    const double gap = std::abs(a.total(c) - brute_force_min(c));
    worst = std::max(worst, gap);
    wrong += gap > 1e-9 || a.pairs.size() != cols;
    const double s = u(rng);
    auto shifted = c;
    for (auto& v : shifted.values) v += s;
    auto b = hungarian(shifted);
    shift_wrong += b.pairs != a.pairs || std::abs(b.total(shifted) - a.total(c) - s * static_cast<double>(cols)) > 1e-9;
  }
  verdict(5, "Hungarian oracle", wrong == 0 && shift_wrong == 0,
          "1000 matrices n<=7 vs exhaustive search: " + std::to_string(wrong) + " mismatches (max gap " + g(worst) +
              "); constant shift changed " + std::to_string(shift_wrong) + " assignments");
}

// ---------------------------------------------------------------- 6

void flop_exactness() {
  std::size_t cases = 0, bad = 0, tenth_cases = 0, tenth_bad = 0;
  for (std::size_t image : {32u, 64u})
    for (std::size_t levels : {1u, 2u, 3u})
      for (std::size_t heads : {1u, 2u, 4u})
        for (std::size_t points : {1u, 2u, 4u}) {
          ModelConfig cfg;
          cfg.criterion = Criterion::random;
          cfg.use_encoder_aux = false;
          cfg.image_size = image;
          cfg.levels = levels;
          cfg.heads = heads;
          cfg.points = points;
          cfg.d_model = 16;
          cfg.ffn_dim = 16;
          cfg.num_queries = cfg.topk_queries = 4;
          cfg.encoder_layers = 2;
          cfg.decoder_layers = 2;
          auto params = ModelParams<float>::init(cfg, 5);
          auto img = random_image<float>(image, image + levels);
          auto feat = backbone_stub(params.backbone, img, cfg);
          for (double rho : {0.0, 0.1, 0.3, 0.5, 1.0}) {
            const auto want = attention_flop_count(cfg, rho);
            OpCounter total, enc;
            {
              CounterScope cs(total);
              model_forward_features(feat, params, cfg, {rho, 1});
            }
            {
              CounterScope cs(enc);
              encoder_forward(feat, rho, params, cfg, 1);
            }
            ++cases;
            bad += total.sampling_slots != want.runtime_sampling_slots() ||
                   total.dense_pairs != want.runtime_dense_pairs() || enc.sampling_slots != want.encoder_sparse_slots ||
                   enc.linear_macs != want.encoder_linear_macs;
            if (rho == 0.1 && want.tokens % 10 == 0) {
              ++tenth_cases;
              tenth_bad += want.encoder_sparse_slots * 10 != want.encoder_deformable_slots;
            }
          }
        }
  verdict(6, "FLOP exactness", bad == 0 && tenth_bad == 0 && tenth_cases > 0,
          std::to_string(cases) + " (N, K, H, L, rho) cases, " + std::to_string(bad) +
              " counter mismatches; rho=0.1 sparse = deformable/10 in " + std::to_string(tenth_cases - tenth_bad) + "/" +
              std::to_string(tenth_cases) + " exact-ceil cases");
}

// ---------------------------------------------------------------- 7, 8

struct Cell {
  double ap = 0.0, corr_final_epoch = 0.0;
};

/// sweep.csv ap and the last-epoch training Corr per (criterion, rho, seed).
std::map<std::tuple<std::string, std::string, std::string>, Cell> read_sweep(const fs::path& dir) {
  std::map<std::tuple<std::string, std::string, std::string>, Cell> out;
  auto sweep = read_csv(dir / "sweep.csv");
  for (std::size_t r = 0; r < sweep.rows.size(); ++r)
    out[{sweep.str(r, "criterion"), sweep.str(r, "rho"), sweep.str(r, "seed")}].ap = sweep.num(r, "ap");
  auto curves = read_csv(dir / "corr_curves.csv");
  std::map<std::tuple<std::string, std::string, std::string>, double> last_epoch;
  for (std::size_t r = 0; r < curves.rows.size(); ++r) {
    std::tuple key{curves.str(r, "criterion"), curves.str(r, "rho"), curves.str(r, "seed")};
    const double e = curves.num(r, "epoch");
    if (e >= last_epoch[key]) {
      last_epoch[key] = e;
      out[key].corr_final_epoch = curves.num(r, "corr");
    }
  }
  return out;
}

double mean_over_seeds(const std::map<std::tuple<std::string, std::string, std::string>, Cell>& cells,
                       const std::string& crit, const std::string& rho, double Cell::*field) {
  double s = 0.0;
  int n = 0;
  for (const auto& [key, cell] : cells)
    if (std::get<0>(key) == crit && std::get<1>(key) == rho) {
      s += cell.*field;
      ++n;
    }
  if (n != 3) throw ContractError("expected 3 seeds for " + crit + " rho " + rho + ", found " + std::to_string(n));
  return s / n;
}

void training_analog(const Cli& cli, const std::string& config, const fs::path& work, bool reuse) {
  const fs::path a = work / "c7_rho0.2", b = work / "c7_dam";
  const double cpu0 = children_cpu_seconds();
  bool ran_ok = true;
  if (!(reuse && fs::exists(a / "sweep.csv")))
    ran_ok = ran_ok && cli("sweep --config " + config + " --rhos 0.2 --criteria dam,os,random --seeds 0,1,2 --out " +
                           a.string()) == 0;
  if (!(reuse && fs::exists(b / "sweep.csv")))
    ran_ok = ran_ok &&
             cli("sweep --config " + config + " --rhos 0.5,1.0 --criteria dam --seeds 0,1,2 --out " + b.string()) == 0;
  const double minutes = (children_cpu_seconds() - cpu0) / 60.0;
  if (!ran_ok) {
    verdict(7, "training analog", false, "sweep command failed, see " + cli.log.string());
    verdict(8, "Corr DAM vs OS", false, "no training runs");
    return;
  }
  auto cells = read_sweep(a);
  for (auto& kv : read_sweep(b)) cells.insert(kv);
  const double dam = mean_over_seeds(cells, "dam", "0.2", &Cell::ap), os = mean_over_seeds(cells, "os", "0.2", &Cell::ap),
               rnd = mean_over_seeds(cells, "random", "0.2", &Cell::ap);
  const double half = mean_over_seeds(cells, "dam", "0.5", &Cell::ap), full = mean_over_seeds(cells, "dam", "1", &Cell::ap);
  const bool timed = !(reuse && minutes < 1.0);
  verdict(7, "training analog", dam >= os && os >= rnd && std::abs(half - full) <= kApPointTol &&
                                    (!timed || minutes < kTrainingCpuMinutes),
          "AP@rho0.2 dam " + f(dam) + " >= os " + f(os) + " >= random " + f(rnd) + "; |dam0.5 " + f(half) +
              " - dam1.0 " + f(full) + "| = " + f(std::abs(half - full)) + " <= " + f(kApPointTol, 2) + "; cpu " +
              (timed ? f(minutes, 1) + " min < " + f(kTrainingCpuMinutes, 0) + " min" : "not measured (reused runs)"));
  const double cd = mean_over_seeds(cells, "dam", "0.2", &Cell::corr_final_epoch),
               co = mean_over_seeds(cells, "os", "0.2", &Cell::corr_final_epoch);
  verdict(8, "Corr DAM vs OS", cd > co, "final-epoch Corr at rho 0.2, 3-seed mean: dam " + f(cd) + " > os " + f(co));
}

// ---------------------------------------------------------------- 9, 10

void dynamic_sparsification(const Cli& cli, const std::string& config, const fs::path& work, bool reuse) {
  const fs::path dir = work / "c9_rho0.3";
  bool ok = true;
  if (!(reuse && fs::exists(dir / "checkpoint.sdtr")))
    ok = cli("train --config " + config + " --criterion dam --rho 0.3 --seed 0 --out " + dir.string()) == 0;
  ok = ok && cli("eval --checkpoint " + (dir / "checkpoint.sdtr").string() +
                 " --rho-infer 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0 --out " + (dir / "eval").string()) == 0;
  if (!ok) {
    verdict(9, "dynamic sparsification", false, "train or eval failed, see " + cli.log.string());
    return;
  }
  auto ev = read_csv(dir / "eval" / "eval.csv");
  std::map<std::string, double> ap;
  for (std::size_t r = 0; r < ev.rows.size(); ++r)
    if (ev.str(r, "metric") == "ap") ap[ev.str(r, "rho_infer")] = ev.num(r, "value");
  auto log = read_csv(dir / "metrics.csv");
  const double logged = log.num(log.rows.size() - 1, "ap");
  const bool all = ap.size() == 10;
  const double gap = std::abs(ap["0.3"] - logged);
  std::string curve;
  for (const auto& [r, v] : ap) curve += " " + r + ":" + f(v, 3);
  verdict(9, "dynamic sparsification", all && ap["0.5"] >= ap["0.1"] && gap <= kTrainLogTol,
          std::to_string(ap.size()) + "/10 inference ratios evaluated; AP@0.5 " + f(ap["0.5"]) + " >= AP@0.1 " +
              f(ap["0.1"]) + "; |AP@0.3 - training log| " + g(gap) + " <= " + g(kTrainLogTol) + ";" + curve);
}

void encoder_aux(const Cli& cli, const std::string& config, const fs::path& work, bool reuse) {
  // (a) same weights, same batches, aux on vs off
  const fs::path trained = work / "c9_rho0.3";
  double with_aux = 0.0, without_aux = 0.0;
  if (fs::exists(trained / "checkpoint.sdtr")) {
    auto rc = load_config((trained / "config.kv").string());
    auto params = ModelParams<float>::init(rc.model, rc.train.seed);
    load_checkpoint((trained / "checkpoint.sdtr").string(), params.named());
    auto scenes = generate_scenes(rc.scene, 0, 24);
    auto e1 = [&](bool aux) {
      auto mc = rc.model;
      mc.use_encoder_aux = aux;
      for (const auto& [label, v] : averaged_grad_norms(params, mc, scenes, 8, 3, 0))
        if (label == "E1") return v;
      throw ContractError("no E1 layer group");
    };
    with_aux = e1(true);
    without_aux = e1(false);
  }
  // (b) 6-layer encoder trained with and without the aux loss
  const fs::path on = work / "c10_aux", off = work / "c10_noaux";
  bool ok = true;
  for (auto [dir, flag] : {std::pair{on, "true"}, std::pair{off, "false"}})
    if (!(reuse && fs::exists(dir / "sweep.csv")))
      ok = ok && cli("sweep --config " + config + " --set encoder_layers=6 --set use_encoder_aux=" + flag +
                     " --rhos 0.2 --criteria dam --seeds 0,1,2 --out " + dir.string()) == 0;
  if (!ok) {
    verdict(10, "encoder aux loss", false, "sweep failed, see " + cli.log.string());
    return;
  }
  const double ap_on = mean_over_seeds(read_sweep(on), "dam", "0.2", &Cell::ap),
               ap_off = mean_over_seeds(read_sweep(off), "dam", "0.2", &Cell::ap);
  verdict(10, "encoder aux loss", with_aux > without_aux && ap_on >= ap_off,
          "E1 grad norm with aux " + g(with_aux) + " > without " + g(without_aux) +
              "; 6-layer encoder AP (3-seed mean) with aux " + f(ap_on) + " >= without " + f(ap_off));
}

// ---------------------------------------------------------------- 11

void determinism(const Cli& cli, const fs::path& work) {
  const fs::path dir = work / "c11";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = (dir / "small.kv").string();
  std::ofstream(cfg) << "d_model = 16\nheads = 2\npoints = 2\nffn_dim = 32\nnum_queries = 8\ntopk_queries = 8\n"
                        "train_scenes = 48\neval_scenes = 16\nepochs = 3\ndecay_epoch = 2\neval_every = 1\n";
  bool ran = true;
  for (const char* rep : {"a", "b"}) {
    const auto out = (dir / rep).string();
    ran = ran && cli("sweep --config " + cfg + " --rhos 0.3,1.0 --criteria random,os,dam --out " + out) == 0;
    ran = ran && cli("eval --checkpoint " + out + "/dam_rho0.3_seed0/checkpoint.sdtr --rho-infer 0.1,0.5 --out " + out +
                     "/eval") == 0;
    ran = ran && cli("report --checkpoint " + out + "/os_rho0.3_seed0/checkpoint.sdtr --dump flops,gradnorm --batches 2 --out " +
                     out + "/report") == 0;
  }
  std::size_t compared = 0, differ = 0;
  if (ran)
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
      if (e.path().extension() != ".csv") continue;
      const auto twin = dir / "b" / fs::relative(e.path(), dir / "a");
      ++compared;
      differ += !fs::exists(twin) || slurp(e.path()) != slurp(twin);
    }
  verdict(11, "determinism", ran && compared >= 10 && differ == 0,
          std::to_string(compared) + " CSV files from repeated sweep/eval/report runs, " + std::to_string(differ) +
              " differ byte-wise");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  bool reuse = false;
  std::string cli_path = SDETR_CLI, config = std::string(SDETR_SOURCE_DIR) + "/configs/default.kv";
  app.add_option("--workdir", workdir, "directory for training runs");
  app.add_option("--only", only, "run only these criteria");
  app.add_flag("--reuse", reuse, "reuse finished training runs found in the workdir");
  app.add_option("--cli", cli_path, "sdetr executable");
  app.add_option("--config", config, "benchmark configuration");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = fs::absolute(workdir);
  if (!reuse) fs::remove_all(work);
  fs::create_directories(work);
  const Cli cli{cli_path, work / "runs.log"};
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (want(1)) gradient_suite();
    if (want(2)) pass_through();
    if (want(3)) selection_cardinality();
    if (want(4)) dam_mass();
    if (want(5)) hungarian_oracle();
    if (want(6)) flop_exactness();
    if (want(7) || want(8)) training_analog(cli, config, work, reuse);
    if (want(9) || want(10)) dynamic_sparsification(cli, config, work, reuse);
    if (want(10)) encoder_aux(cli, config, work, reuse);
    if (want(11)) determinism(cli, work);
  } catch (const std::exception& e) {
    std::printf("FAIL aborted: %s\n", e.what());
    return 1;
  }
  const double mins = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  std::printf("%s: %d failing criteria, %.1f min wall\n", failures ? "FAIL" : "PASS", failures, mins);
  return failures ? 1 : 0;
}
