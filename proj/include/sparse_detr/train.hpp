#pragma once

// Optimiser, training loop, evaluation and CSV output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sparse_detr/config.hpp"
#include "sparse_detr/metrics.hpp"

namespace sdetr {

/// Decoupled-weight-decay Adam over a fixed parameter list.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Global L2 norm of all parameter gradients.
  double grad_norm() const {
    double ss = 0.0;
    for (const auto& p : params_)
      for (T g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(ss);
  }

  void scale_grads(double s) {
    for (auto& p : params_)
      if (p.has_grad())
        for (T& g : p.mutable_grad()) g = static_cast<T>(g * s);
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto data = params_[i].mutable_data();
      const bool has = params_[i].has_grad();
      auto grad = params_[i].grad();
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double g = has ? static_cast<double>(grad[k]) : 0.0;
        m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g * g;
        double p = static_cast<double>(data[k]);
        p -= lr * wd_ * p;
        p -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
        data[k] = static_cast<T>(p);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  double wd_, b1_, b2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

template <typename T>
std::vector<Tensor<T>> param_list(const ModelParams<T>& m) {
  std::vector<Tensor<T>> out;
  for (auto& [_, t] : m.named()) out.push_back(t);
  return out;
}

/// Seed used for the random criterion on evaluation scene `index`.
inline std::uint64_t eval_seed(std::uint64_t run_seed, std::size_t index) { return mix_seed(run_seed, index, 0xE7A1); }

struct EvalResult {
  double rho_infer = 0.0;
  ApReport ap;
  double corr = 0.0;
  double dam_nonzero_ratio = 0.0;
  FlopReport flops;
  OpCounter counters;  // summed over all scenes
};

/// Inference over `scenes` at keeping ratio `rho_infer`.
template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const ModelConfig& cfg, const std::vector<Scene>& scenes,
                    double rho_infer, std::uint64_t run_seed) {
  if (!(rho_infer >= 0.0 && rho_infer <= 1.0))
    throw ContractError("inference rho " + std::to_string(rho_infer) + " outside [0, 1]");
  EvalResult r;
  r.rho_infer = rho_infer;
  std::vector<std::vector<Detection>> dets;
  std::vector<Targets> gts;
  double corr = 0.0, nz = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    CounterScope cs(r.counters);
    auto out = model_forward(scenes[i].image<T>(), params, cfg, {rho_infer, eval_seed(run_seed, i)});
    dets.push_back(detections_from_set(out.final));
    gts.push_back(scenes[i].targets);
    corr += corr_metric(out.dam, out.dam_nearest, out.mask).corr;
    nz += dam_nonzero_ratio(out.dam_nearest, out.layout.pad_mask);
    if (i == 0) r.flops = attention_flop_count(out.layout.size(), out.layout.num_valid(), rho_infer, cfg);
  }
  r.ap = average_precision(dets, gts, cfg.num_classes);
  if (!scenes.empty()) {
    r.corr = corr / static_cast<double>(scenes.size());
    r.dam_nonzero_ratio = nz / static_cast<double>(scenes.size());
  }
  return r;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss_total = 0.0;
  std::vector<double> loss_terms;  // in kLossTerms order; absent terms are 0
  std::optional<ApReport> ap;
  double corr = 0.0;               // mean over training passes of the epoch
  double dam_nonzero_ratio = 0.0;  // idem
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace detail

/// Column order of the per-epoch training log.
inline std::vector<std::string> epoch_csv_header() {
  std::vector<std::string> h = {"epoch", "lr", "loss_total"};
  for (auto t : kLossTerms) h.push_back("loss_" + std::string(t));
  for (auto c : {"ap", "ap50", "ap75", "corr", "dam_nonzero_ratio"}) h.emplace_back(c);
  return h;
}

inline std::string csv_line(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) s += ',';
    s += cells[i];
  }
  return s + "\n";
}

inline std::string epoch_csv_row(const EpochLog& e) {
  using detail::fmt_double;
  std::vector<std::string> c = {std::to_string(e.epoch), fmt_double(e.lr), fmt_double(e.loss_total)};
  for (double v : e.loss_terms) c.push_back(fmt_double(v));
  if (e.ap) {
    c.push_back(fmt_double(e.ap->ap_mean));
    c.push_back(fmt_double(e.ap->ap50));
    c.push_back(fmt_double(e.ap->ap75));
  } else {
    c.insert(c.end(), {"", "", ""});
  }
  c.push_back(fmt_double(e.corr));
  c.push_back(fmt_double(e.dam_nonzero_ratio));
  return csv_line(c);
}

struct TrainResult {
  ModelParams<float> params;
  std::vector<EpochLog> epochs;
  EvalResult final_eval;
};

/// Deterministic training loop. Each batch accumulates per-sample gradients,
/// averages them, clips the global norm and takes one AdamW step.
class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochLog&)>;

  Trainer(RunConfig cfg, std::vector<Scene> train, std::vector<Scene> eval)
      : cfg_(std::move(cfg)), train_(std::move(train)), eval_(std::move(eval)) {
    cfg_.validate();
    require(!train_.empty(), "training set is empty");
  }

  TrainResult run(const EpochCallback& on_epoch = {}) {
    const auto& mc = cfg_.model;
    const auto& tc = cfg_.train;
    TrainResult res{ModelParams<float>::init(mc, tc.seed), {}, {}};
    AdamW<float> opt(param_list(res.params), tc.weight_decay);
    std::vector<std::size_t> order(train_.size());
    for (std::size_t e = 0; e < tc.epochs; ++e) {
      EpochLog log;
      log.epoch = e + 1;
      log.lr = e >= tc.decay_epoch ? tc.lr * 0.1 : tc.lr;
      log.loss_terms.assign(std::size(kLossTerms), 0.0);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle(mix_seed(tc.seed, e, 0x5F));
      std::shuffle(order.begin(), order.end(), shuffle);
      for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
        const std::size_t end = std::min(order.size(), b + tc.batch_size);
        opt.zero_grad();
        for (std::size_t i = b; i < end; ++i) {
          const auto& scene = train_[order[i]];
          Tape<float> tape;
          TapeScope<float> scope(tape);
          auto out = model_forward(scene.image<float>(), res.params, mc, {mc.rho, mix_seed(tc.seed, e, order[i])});
          auto loss = total_loss(out, scene.targets, mc);
          tape.backward(loss.total);
          log.loss_total += static_cast<double>(loss.total.item());
          for (std::size_t k = 0; k < std::size(kLossTerms); ++k) log.loss_terms[k] += loss.value(kLossTerms[k]);
          log.corr += corr_metric(out.dam, out.dam_nearest, out.mask).corr;
          log.dam_nonzero_ratio += dam_nonzero_ratio(out.dam_nearest, out.layout.pad_mask);
        }
        opt.scale_grads(1.0 / static_cast<double>(end - b));
        if (tc.grad_clip > 0.0) {
          const double norm = opt.grad_norm();
          if (norm > tc.grad_clip) opt.scale_grads(tc.grad_clip / norm);
        }
        opt.step(log.lr);
      }
      const double n = static_cast<double>(train_.size());
      log.loss_total /= n;
      for (auto& v : log.loss_terms) v /= n;
      log.corr /= n;
      log.dam_nonzero_ratio /= n;
      const bool last = e + 1 == tc.epochs;
      if (!eval_.empty() && (last || (tc.eval_every && (e + 1) % tc.eval_every == 0))) {
        auto ev = evaluate(res.params, mc, eval_, mc.rho, tc.seed);
        log.ap = ev.ap;
        if (last) res.final_eval = ev;
      }
      res.epochs.push_back(log);
      if (on_epoch) on_epoch(log);
    }
    return res;
  }

 private:
  RunConfig cfg_;
  std::vector<Scene> train_;
  std::vector<Scene> eval_;
};

/// Training and evaluation scenes of a run: disjoint index ranges of one generator.
inline std::vector<Scene> training_scenes(const RunConfig& c) { return generate_scenes(c.scene, 0, c.train.train_scenes); }
inline std::vector<Scene> evaluation_scenes(const RunConfig& c) {
  return generate_scenes(c.scene, 1'000'000'000ull, c.train.eval_scenes);
}

}  // namespace sdetr
