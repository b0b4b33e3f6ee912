// Experiment driver: train, eval, sweep, report, export.
//
// Exit status: 0 success, 1 contract/usage error, 2 I/O or format error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sparse_detr/report.hpp"

namespace fs = std::filesystem;
using namespace sdetr;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<double> rho;
  std::optional<std::string> criterion;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> dataset;
  std::optional<std::string> synthetic;
  std::vector<std::string> set;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "key = value run configuration");
  app->add_option("--rho", o.rho, "training keeping ratio");
  app->add_option("--criterion", o.criterion, "token selection criterion: random, os or dam");
  app->add_option("--seed", o.seed, "run seed");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--dataset", o.dataset, "SDDS1 dataset file");
  app->add_option("--synthetic", o.synthetic, "synthetic scenes as <seed>:<n>");
  app->add_option("--set", o.set, "extra key=value config overrides (repeatable)");
}

RunConfig resolve_config(const CommonOptions& o, const std::string& fallback = {}) {
  RunConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  } else if (!fallback.empty()) {
    c = load_config(fallback);
  }
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + kv + "'");
    apply_setting(c, detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  if (o.rho) c.model.rho = *o.rho;
  if (o.criterion) c.model.criterion = parse_criterion(*o.criterion);
  if (o.seed) c.train.seed = *o.seed;
  if (o.out) c.out_dir = *o.out;
  c.validate();
  return c;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

/// Scenes used for evaluation-type commands.
std::vector<Scene> eval_scene_set(RunConfig& c, const CommonOptions& o) {
  if (o.dataset) return import_dataset(*o.dataset);
  if (o.synthetic) {
    const auto s = parse_synthetic_spec(*o.synthetic);
    c.scene.seed = s.seed;
    c.train.eval_scenes = s.count;
  }
  return evaluation_scenes(c);
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = detail::trim(item);
    if (t.empty()) continue;
    out.push_back(detail::parse_number<double>(what, t));
  }
  return out;
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = detail::trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

TrainResult train_run(const RunConfig& c, std::vector<Scene> train, const std::string& dir) {
  ensure_dir(dir);
  write_text(dir + "/config.kv", format_config(c));
  const std::string csv = dir + "/metrics.csv";
  std::string text = csv_line(epoch_csv_header());
  write_text(csv, text);
  Trainer trainer(c, std::move(train), evaluation_scenes(c));
  auto res = trainer.run([&](const EpochLog& e) {
    text += epoch_csv_row(e);
    write_text(csv, text);
    std::printf("[%s rho=%g seed=%llu] epoch %zu loss %.4f corr %.3f%s\n", std::string(to_string(c.model.criterion)).c_str(),
                c.model.rho, static_cast<unsigned long long>(c.train.seed), e.epoch, e.loss_total, e.corr,
                e.ap ? (" ap " + detail::fmt_double(e.ap->ap_mean)).c_str() : "");
    std::fflush(stdout);
  });
  save_checkpoint(dir + "/checkpoint.sdtr", res.params.named());
  return res;
}

ModelParams<float> load_model(const RunConfig& c, const std::string& checkpoint) {
  auto params = ModelParams<float>::init(c.model, c.train.seed);
  load_checkpoint(checkpoint, params.named());
  return params;
}

std::string sibling_config(const std::string& checkpoint) {
  const auto p = fs::path(checkpoint).parent_path() / "config.kv";
  return fs::exists(p) ? p.string() : std::string();
}

int cmd_train(const CommonOptions& o) {
  RunConfig c = resolve_config(o);
  std::vector<Scene> train;
  if (o.dataset) {
    train = import_dataset(*o.dataset);
  } else {
    if (o.synthetic) {
      const auto s = parse_synthetic_spec(*o.synthetic);
      c.scene.seed = s.seed;
      c.train.train_scenes = s.count;
    }
    train = training_scenes(c);
  }
  train_run(c, std::move(train), c.out_dir);
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& rho_infer) {
  RunConfig c = resolve_config(o, sibling_config(checkpoint));
  auto rhos = rho_infer.empty() ? std::vector<double>{c.model.rho} : parse_list(rho_infer, "--rho-infer");
  if (rhos.empty()) throw ContractError("--rho-infer: empty list");
  for (double r : rhos)
    if (!(r >= 0.0 && r <= 1.0)) throw ContractError("--rho-infer " + detail::fmt_double(r) + " outside [0, 1]");
  auto scenes = eval_scene_set(c, o);
  auto params = load_model(c, checkpoint);
  ensure_dir(c.out_dir);
  std::string text = eval_csv_header();
  for (double r : rhos) {
    auto res = evaluate(params, c.model, scenes, r, c.train.seed);
    text += eval_csv_rows(c, res);
    std::printf("rho_infer %g: ap %.4f ap50 %.4f corr %.4f\n", r, res.ap.ap_mean, res.ap.ap50, res.corr);
  }
  write_text(c.out_dir + "/eval.csv", text);
  return 0;
}

int cmd_sweep(const CommonOptions& o, const std::string& rhos_s, const std::string& criteria_s, const std::string& seeds_s) {
  RunConfig base = resolve_config(o);
  const auto rhos = parse_list(rhos_s, "--rhos");
  const auto criteria = split_words(criteria_s);
  if (rhos.empty()) throw ContractError("sweep: --rhos is empty");
  if (criteria.empty()) throw ContractError("sweep: --criteria is empty");
  std::vector<std::uint64_t> seeds;
  for (double s : parse_list(seeds_s, "--seeds")) seeds.push_back(static_cast<std::uint64_t>(s));
  if (seeds.empty()) seeds.push_back(base.train.seed);
  for (const auto& cr : criteria) parse_criterion(cr);
  for (double r : rhos)
    if (!(r >= 0.0 && r <= 1.0)) throw ContractError("sweep: rho " + detail::fmt_double(r) + " outside [0, 1]");
  ensure_dir(base.out_dir);
  std::string grid = sweep_csv_header();
  std::string curves = "criterion,rho,seed,epoch,corr\n";
  for (auto seed : seeds) {
    for (const auto& cr : criteria) {
      for (double r : rhos) {
        RunConfig c = base;
        c.model.criterion = parse_criterion(cr);
        c.model.rho = r;
        c.train.seed = seed;
        const std::string dir =
            base.out_dir + "/" + cr + "_rho" + detail::fmt_double(r) + "_seed" + std::to_string(seed);
        auto res = train_run(c, training_scenes(c), dir);
        grid += sweep_csv_row(c, res.final_eval);
        for (const auto& e : res.epochs)
          curves += csv_line({cr, detail::fmt_double(r), std::to_string(seed), std::to_string(e.epoch),
                              detail::fmt_double(e.corr)});
        write_text(base.out_dir + "/sweep.csv", grid);
        write_text(base.out_dir + "/corr_curves.csv", curves);
      }
    }
  }
  return 0;
}

int cmd_report(const CommonOptions& o, const std::string& checkpoint, const std::vector<std::string>& dumps,
               std::size_t scene_index, std::size_t batches, std::optional<double> rho_infer) {
  if (dumps.empty()) throw ContractError("report: --dump requires at least one kind");
  for (const auto& d : dumps)
    if (d != "mask" && d != "dam" && d != "gradnorm" && d != "flops")
      throw ContractError("report: unknown dump kind '" + d + "' (expected mask, dam, gradnorm or flops)");
  RunConfig c = resolve_config(o, sibling_config(checkpoint));
  const double rho = rho_infer.value_or(c.model.rho);
  if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("--rho-infer outside [0, 1]");
  auto params = load_model(c, checkpoint);
  auto scenes = eval_scene_set(c, o);
  ensure_dir(c.out_dir);
  for (const auto& d : dumps) {
    if (d == "flops") {
      write_text(c.out_dir + "/flops.csv", flops_csv(attention_flop_count(c.model, rho), rho));
    } else if (d == "gradnorm") {
      write_text(c.out_dir + "/gradnorm.csv",
                 gradnorm_csv(averaged_grad_norms(params, c.model, scenes, c.train.batch_size, batches, c.train.seed)));
    } else {
      if (scene_index >= scenes.size()) throw ContractError("report: --scene index out of range");
      auto out = model_forward(scenes[scene_index].image<float>(), params, c.model, {rho, eval_seed(c.train.seed, scene_index)});
      if (d == "mask") write_mask_dump(c.out_dir + "/mask.bin", out.layout, out.mask);
      if (d == "dam") write_dam_dump(c.out_dir + "/dam.bin", out.layout, out.dam);
    }
  }
  return 0;
}

int cmd_export(const CommonOptions& o, const std::string& path) {
  RunConfig c = resolve_config(o);
  std::size_t n = c.train.train_scenes;
  if (o.synthetic) {
    const auto s = parse_synthetic_spec(*o.synthetic);
    c.scene.seed = s.seed;
    n = s.count;
  }
  export_dataset(generate_scenes(c.scene, 0, n), path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-encoder detection experiments on synthetic shapes"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string checkpoint, rho_infer_list, rhos = "0.1,0.2,0.3,0.5,1.0", criteria = "random,os,dam", seeds, export_path;
  std::vector<std::string> dumps;
  std::size_t scene_index = 0, batches = 4;
  std::optional<double> report_rho;

  auto* train = app.add_subcommand("train", "train a model and write metrics.csv and checkpoint.sdtr");
  add_common(train, common);
  std::string train_config;
  train->add_option("config_path", train_config, "run configuration (same as --config)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at one or more inference keeping ratios");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--rho-infer", rho_infer_list, "comma-separated inference keeping ratios");
  auto* sweep = app.add_subcommand("sweep", "train every (criterion, rho, seed) cell");
  add_common(sweep, common);
  sweep->add_option("--rhos", rhos, "comma-separated keeping ratios");
  sweep->add_option("--criteria", criteria, "comma-separated criteria");
  sweep->add_option("--seeds", seeds, "comma-separated seeds (default: the config seed)");
  auto* report = app.add_subcommand("report", "write mask/dam/gradnorm/flops artifacts for a checkpoint");
  add_common(report, common);
  report->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  report->add_option("--dump", dumps, "mask, dam, gradnorm, flops")->delimiter(',');
  report->add_option("--scene", scene_index, "evaluation scene for mask/dam dumps");
  report->add_option("--batches", batches, "fixed batches averaged for gradnorm");
  report->add_option("--rho-infer", report_rho, "keeping ratio for mask/dam/flops (default: training rho)");
  auto* exp = app.add_subcommand("export", "write synthetic scenes to an SDDS1 file");
  add_common(exp, common);
  exp->add_option("path", export_path, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*train) {
      if (!train_config.empty()) {
        if (!common.config.empty()) throw ContractError("train: give the config either positionally or with --config");
        common.config = train_config;
      }
      return cmd_train(common);
    }
    if (*eval) return cmd_eval(common, checkpoint, rho_infer_list);
    if (*sweep) return cmd_sweep(common, rhos, criteria, seeds);
    if (*report) return cmd_report(common, checkpoint, dumps, scene_index, batches, report_rho);
    if (*exp) return cmd_export(common, export_path);
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "format error at byte " << e.offset() << ": " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
