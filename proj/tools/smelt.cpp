#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "smelt/analysis.hpp"
#include "smelt/checkpoint.hpp"
#include "smelt/config.hpp"
#include "smelt/evalrun.hpp"
#include "smelt/tasks.hpp"

namespace fs = std::filesystem;
using namespace smelt;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << text;
  if (!f) throw ConfigError("write failed: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open: " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

EpisodeSource episode_source(const SuiteSpec& suite) {
  EpisodeSource src;
  src.train_episode = [suite](uint64_t i) { return sample_episode(suite, Split::kTrain, false, i); };
  src.val_id = [suite](uint64_t i) { return sample_episode(suite, Split::kVal, false, i); };
  if (!suite.ood_domains.empty())
    src.val_ood = [suite](uint64_t i) { return sample_episode(suite, Split::kVal, true, i); };
  return src;
}

// Pulls the run configuration back out of a checkpoint echo.
RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
  return parse_run_config(ckpt.config_json);
}

int cmd_pretrain(const std::string& config_path, const std::string& out_path) {
  RunConfig cfg = load_run_config(config_path);
  ParamSet theta_pre = pretrain_backbone(cfg.suite, cfg.net, cfg.pretrain);
  Checkpoint ckpt;
  ckpt.kind = PayloadKind::kParamsOnly;
  ckpt.config_json = run_config_json(cfg);
  ckpt.params = std::move(theta_pre);
  save_checkpoint(out_path, ckpt);
  std::cout << "pretrain: wrote " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& pre_path,
              const std::string& out_dir, bool dense) {
  RunConfig cfg = load_run_config(config_path);
  Checkpoint pre = load_checkpoint(pre_path);
  const ParamSet& theta_pre = pre.require_params();
  if (!theta_pre.same_specs(ParamSet::zeros(backbone_specs(cfg.net))))
    throw ShapeError("train: pretrained checkpoint does not match net config");

  fs::create_directories(out_dir);
  EpisodeSource src = episode_source(cfg.suite);
  std::string echo = run_config_json(cfg);

  if (dense) {
    DenseTuneResult res = dense_meta_tune(theta_pre, cfg.net, src.train_episode,
                                          cfg.train.max_steps, cfg.train.batch_tasks,
                                          cfg.train.lr_main, cfg.train.metric);
    Checkpoint ckpt;
    ckpt.kind = PayloadKind::kParamsOnly;
    ckpt.config_json = echo;
    ckpt.params = std::move(res.theta);
    save_checkpoint(out_dir + "/dense.ckpt", ckpt);
    std::string csv = "step,mean_ce\n";
    for (const auto& row : res.metrics_rows) csv += row + "\n";
    write_text(out_dir + "/dense_metrics.csv", csv);
    std::cout << "train (dense): wrote " << out_dir << "/dense.ckpt\n";
    return 0;
  }

  TrainResult res = train(cfg.train, cfg.net, theta_pre, src);
  Checkpoint best;
  best.kind = PayloadKind::kTrainState;
  best.config_json = echo;
  best.state = std::move(res.best);
  save_checkpoint(out_dir + "/checkpoint.ckpt", best);
  Checkpoint final_ckpt;
  final_ckpt.kind = PayloadKind::kTrainState;
  final_ckpt.config_json = echo;
  final_ckpt.state = std::move(res.final_state);
  save_checkpoint(out_dir + "/final.ckpt", final_ckpt);

  std::string csv = metrics_csv_header(cfg.train.experts) + "\n";
  for (const auto& row : res.metrics_rows) csv += row + "\n";
  write_text(out_dir + "/metrics.csv", csv);
  std::cout << "train: best step " << res.best_step << " val_id_acc " << res.best_val_acc
            << "; wrote " << out_dir << "/checkpoint.ckpt\n";
  return 0;
}

struct EvalCliArgs {
  std::string checkpoint, suite_name, split = "test", mode = "direct", out = "results.csv";
  std::string dump_episodes;
  int episodes = 100;
  int rounds = -1;
  double accept_prob = -1;
  int ft_steps = -1;
  double ft_lr = -1;
  std::vector<double> lr_grid;
  bool stochastic_gates = false;
  uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_eval(const EvalCliArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.checkpoint);
  RunConfig cfg = config_from_checkpoint(ckpt);
  const TrainState& state = ckpt.require_state();

  SuiteSpec suite = args.suite_name.empty() ? cfg.suite : find_suite(args.suite_name, cfg.catalog_version);

  EvalOptions opts;
  opts.split = split_from_name(args.split);
  opts.mode = eval_mode_from_name(args.mode);
  opts.episodes = args.episodes;
  opts.stochastic_gates = args.stochastic_gates || cfg.adapt.selection.stochastic_gates;
  opts.selection = cfg.adapt.selection;
  if (args.rounds > 0) opts.selection.rounds = args.rounds;
  if (args.accept_prob > 0) opts.selection.accept_prob = args.accept_prob;
  opts.finetune = cfg.adapt.finetune;
  if (!cfg.adapt.ft_lr_fixed) opts.finetune.lr = 0.0;  // search by default
  if (args.ft_steps >= 0) opts.finetune.steps = args.ft_steps;
  if (args.ft_lr > 0) opts.finetune.lr = args.ft_lr;
  opts.lr_grid = args.lr_grid.empty() ? cfg.adapt.lr_grid : args.lr_grid;
  opts.lr_search_episodes = cfg.adapt.lr_search_episodes;
  opts.seed = args.seed_given ? args.seed : cfg.seed;
  opts.metric = cfg.train.metric;

  if (!args.dump_episodes.empty()) {
    std::string lines;
    for (int i = 0; i < args.episodes; ++i) {
      lines += episode_json(sample_episode(suite, opts.split, false, static_cast<uint64_t>(i))) + "\n";
      if (!suite.ood_domains.empty())
        lines += episode_json(sample_episode(suite, opts.split, true, static_cast<uint64_t>(i))) + "\n";
    }
    write_text(args.dump_episodes, lines);
  }

  EvalOutput out = run_eval(state, cfg.net, suite, opts);
  write_text(args.out, out.csv);
  std::cout << "eval mode=" << args.mode << " split=" << args.split << ": ID " << out.summary.id_mean
            << " +/- " << out.summary.id_ci95 << " (n=" << out.summary.id_n << "), OOD "
            << out.summary.ood_mean << " +/- " << out.summary.ood_ci95
            << " (n=" << out.summary.ood_n << "); wrote " << args.out << "\n";
  return 0;
}

int cmd_fit_domain_mask(const std::string& pre_path, const std::string& tuned_path,
                        const std::string& domain, double tau, int steps,
                        const std::string& out_dir, uint64_t seed) {
  Checkpoint pre_ckpt = load_checkpoint(pre_path);
  Checkpoint tuned_ckpt = load_checkpoint(tuned_path);
  RunConfig cfg = config_from_checkpoint(pre_ckpt);
  const ParamSet& theta_pre = pre_ckpt.require_params();
  const ParamSet& theta_tuned = tuned_ckpt.require_params();

  bool found = false;
  for (const auto& d : cfg.suite.id_domains) found = found || d.name == domain;
  for (const auto& d : cfg.suite.ood_domains) found = found || d.name == domain;
  if (!found) throw ConfigError("fit-domain-mask: domain not in suite: " + domain);

  // domain-restricted episode stream over the train split
  SuiteSpec suite = cfg.suite;
  bool domain_is_ood = false;
  for (const auto& d : suite.ood_domains) domain_is_ood = domain_is_ood || d.name == domain;
  auto episodes = [suite, domain, domain_is_ood](uint64_t want) {
    Split split = domain_is_ood ? Split::kVal : Split::kTrain;
    uint64_t idx = 0, seen = 0;
    for (;; ++idx) {
      Episode ep = sample_episode(suite, split, domain_is_ood, idx);
      if (ep.domain == domain) {
        if (seen == want) return ep;
        ++seen;
      }
      if (idx > 1000000) throw ConfigError("fit-domain-mask: domain never sampled: " + domain);
    }
  };

  FitDomainConfig fit_cfg;
  fit_cfg.tau = tau;
  fit_cfg.steps = steps;
  fit_cfg.seed = seed;
  fit_cfg.hc = cfg.train.hc;
  fit_cfg.metric = cfg.train.metric;
  FitDomainResult res = fit_domain_mask(theta_pre, theta_tuned, episodes, cfg.net, fit_cfg);

  fs::create_directories(out_dir);
  Checkpoint mask_ckpt;
  mask_ckpt.kind = PayloadKind::kMask;
  mask_ckpt.config_json = run_config_json(cfg);
  mask_ckpt.mask = res.mask;
  save_checkpoint(out_dir + "/mask.ckpt", mask_ckpt);

  std::string hist = "step,loss,density,lambda\n";
  for (const auto& row : res.history_rows) hist += row + "\n";
  write_text(out_dir + "/fit_history.csv", hist);

  // held-out comparison on the fitted domain: pre vs tuned vs sparse interpolation
  ParamSet delta = axpy(-1.0, theta_pre, theta_tuned);
  ParamSet fitted = axpy(1.0, hadamard(delta, deterministic_gate(res.mask).z), theta_pre);
  auto eval_model = [&](const ParamSet& theta) {
    double acc = 0;
    int n = 0;
    for (uint64_t i = 0; n < 50 && i < 1000000; ++i) {
      Episode ep = sample_episode(suite, Split::kTest, domain_is_ood, i);
      if (ep.domain != domain) continue;
      acc += accuracy(protonet_logits(theta, cfg.net, ep, cfg.train.metric), ep.query_y);
      ++n;
    }
    return acc / std::max(1, n);
  };
  std::string summary = "model,acc,final_density,lambda\n";
  summary += "theta_pre," + std::to_string(eval_model(theta_pre)) + ",,\n";
  summary += "theta_tuned," + std::to_string(eval_model(theta_tuned)) + ",,\n";
  summary += "fitted," + std::to_string(eval_model(fitted)) + "," +
             std::to_string(res.final_density) + "," + std::to_string(res.lambda) + "\n";
  write_text(out_dir + "/fit_summary.csv", summary);
  std::cout << "fit-domain-mask: density " << res.final_density << ", wrote " << out_dir << "\n";
  return 0;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& eval_log,
                const std::string& report, const std::string& out, int pairs, double threshold) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg = config_from_checkpoint(ckpt);

  if (report == "selection") {
    if (eval_log.empty()) throw ConfigError("analyze selection: --eval-log required");
    auto rows = parse_eval_log(read_text(eval_log));
    write_text(out, selection_stats_csv(selection_stats(rows)));
  } else if (report == "sparsity") {
    const TrainState& st = ckpt.require_state();
    write_text(out, sparsity_report_csv(sparsity_report(st.pool), st.pool));
  } else if (report == "overlap") {
    const TrainState& st = ckpt.require_state();
    write_text(out, overlap_matrix_csv(mask_overlap_matrix(st.pool, threshold)));
  } else if (report == "alignment") {
    const TrainState& st = ckpt.require_state();
    std::vector<std::pair<AlignmentEpisode, AlignmentEpisode>> eps;
    for (int p = 0; p < pairs; ++p) {
      uint64_t a = static_cast<uint64_t>(2 * p), b = static_cast<uint64_t>(2 * p + 1);
      eps.push_back({{sample_episode(cfg.suite, Split::kVal, false, a), a},
                     {sample_episode(cfg.suite, Split::kVal, false, b), b}});
    }
    write_text(out, alignment_csv(gradient_alignment(st, cfg.net, cfg.train, eps)));
  } else {
    throw ConfigError("analyze: unknown report " + report);
  }
  std::cout << "analyze " << report << ": wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smelt: sparse interpolated expert meta-tuning engine"};
  app.require_subcommand(1);

  std::string config_path, out_path = "pretrained.ckpt";
  auto* pre = app.add_subcommand("pretrain", "train theta_pre on pooled ID data");
  pre->add_option("--config", config_path)->required();
  pre->add_option("--out", out_path);

  std::string train_pre, train_out = "runs/out";
  bool train_dense = false;
  auto* tr = app.add_subcommand("train", "meta-train the expert pool and router");
  tr->add_option("--config", config_path)->required();
  tr->add_option("--from-pretrained", train_pre)->required();
  tr->add_option("--out-dir", train_out);
  tr->add_flag("--dense", train_dense, "plain dense meta-tuning baseline (params-only output)");

  EvalCliArgs ev;
  auto* evc = app.add_subcommand("eval", "episodic evaluation of a checkpoint");
  evc->add_option("--checkpoint", ev.checkpoint)->required();
  evc->add_option("--suite", ev.suite_name);
  evc->add_option("--split", ev.split);
  evc->add_option("--mode", ev.mode);
  evc->add_option("--episodes", ev.episodes);
  evc->add_option("--out", ev.out);
  evc->add_option("--rounds", ev.rounds);
  evc->add_option("--accept-prob", ev.accept_prob);
  evc->add_option("--ft-steps", ev.ft_steps);
  evc->add_option("--ft-lr", ev.ft_lr);
  evc->add_option("--lr-grid", ev.lr_grid);
  evc->add_flag("--stochastic-gates", ev.stochastic_gates);
  evc->add_option("--dump-episodes", ev.dump_episodes);
  auto* seed_opt = evc->add_option("--seed", ev.seed);

  std::string fit_pre, fit_tuned, fit_domain, fit_out = "runs/fit";
  double fit_tau = 0.9;
  int fit_steps = 3000;
  uint64_t fit_seed = 0;
  auto* fit = app.add_subcommand("fit-domain-mask", "fit a single sparse interpolation mask");
  fit->add_option("--pre", fit_pre)->required();
  fit->add_option("--tuned", fit_tuned)->required();
  fit->add_option("--domain", fit_domain)->required();
  fit->add_option("--tau", fit_tau);
  fit->add_option("--steps", fit_steps);
  fit->add_option("--out-dir", fit_out);
  fit->add_option("--seed", fit_seed);

  std::string an_ckpt, an_log, an_report = "sparsity", an_out = "report.csv";
  int an_pairs = 20;
  double an_threshold = 0.5;
  auto* an = app.add_subcommand("analyze", "diagnostics reports from checkpoints and logs");
  an->add_option("--checkpoint", an_ckpt)->required();
  an->add_option("--eval-log", an_log);
  an->add_option("--report", an_report);
  an->add_option("--out", an_out);
  an->add_option("--pairs", an_pairs);
  an->add_option("--threshold", an_threshold);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(config_path, out_path);
    if (tr->parsed()) return cmd_train(config_path, train_pre, train_out, train_dense);
    if (evc->parsed()) {
      ev.seed_given = seed_opt->count() > 0;
      return cmd_eval(ev);
    }
    if (fit->parsed())
      return cmd_fit_domain_mask(fit_pre, fit_tuned, fit_domain, fit_tau, fit_steps, fit_out, fit_seed);
    if (an->parsed()) return cmd_analyze(an_ckpt, an_log, an_report, an_out, an_pairs, an_threshold);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ChecksumError& e) {
    std::cerr << "checksum error: " << e.what() << "\n";
    return 3;
  } catch (const VersionError& e) {
    std::cerr << "version error: " << e.what() << "\n";
    return 4;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 5;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
