#include "cli.hpp"

#include "iterthink/checkpoint.hpp"
#include "iterthink/csvio.hpp"
#include "iterthink/svgplot.hpp"
#include "reports.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

namespace iterthink {

namespace fs = std::filesystem;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    out.push_back(std::stoi(part));
  }
  if (out.empty()) throw ConfigError("expected a comma-separated integer list, got '" + s + "'");
  return out;
}

// ---- train ------------------------------------------------------------------

struct TrainOpts {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  bool early_stop = false;
};

template <typename S>
int run_train(const RunConfig& cfg, const TrainOpts& opts) {
  const ModelSpec spec = to_model_spec(cfg);
  TrainConfig tc = to_train_config(cfg);
  tc.early_stop_at_perfect_val = opts.early_stop;

  auto outcome = train<S>(spec, tc, [](const EpochRecord& r) {
    std::printf("epoch %4d  train_loss %.6f  val_loss %.6f  val_acc %.4f  lr %.2e%s\n", r.epoch,
                r.train_loss, r.val_loss, r.val_acc, r.lr, r.diverged ? "  [diverged]" : "");
    std::fflush(stdout);
  });

  write_metrics_csv((fs::path(opts.out_dir) / "metrics.csv").string(), outcome.records);

  Model<S> best(spec, tc.seed);
  best.load_state_dict(outcome.best_state);
  best.set_param_version(static_cast<std::uint64_t>(outcome.best_adam.t));
  write_checkpoint((fs::path(opts.out_dir) / "best.ckpt").string(),
                   make_checkpoint(best, outcome.best_state, outcome.best_adam, cfg,
                                   outcome.best_epoch, best.param_version()));

  Model<S> final_model(spec, tc.seed);
  final_model.load_state_dict(outcome.final_state);
  final_model.set_param_version(static_cast<std::uint64_t>(outcome.final_adam.t));
  write_checkpoint((fs::path(opts.out_dir) / "final.ckpt").string(),
                   make_checkpoint(final_model, outcome.final_state, outcome.final_adam, cfg,
                                   outcome.best_epoch, final_model.param_version()));

  std::ofstream cfg_out(fs::path(opts.out_dir) / "config.json");
  cfg_out << run_config_to_json(cfg);

  std::printf("best epoch %d  val_acc %.4f\n", outcome.best_epoch, outcome.best_val_acc);
  return 0;
}

int cmd_train(const TrainOpts& opts) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = load_run_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  fs::create_directories(opts.out_dir);
  if (cfg.precision == "f32") return run_train<float>(cfg, opts);
  return run_train<double>(cfg, opts);
}

// ---- eval -------------------------------------------------------------------

struct EvalOpts {
  std::string checkpoint;
  int bits = 512;
  std::size_t count = 10000;
  int iters = 0;
  std::string sweep;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

template <typename S>
int run_eval(const CheckpointData& data, const EvalOpts& opts) {
  auto [model, adam] = restore_checkpoint<S>(data);
  model.prepare_eval();
  std::vector<int> m_list;
  if (!opts.sweep.empty())
    m_list = parse_int_list(opts.sweep);
  else
    m_list = {opts.iters};
  auto sweep = extrapolation_sweep(model, opts.bits, opts.count, m_list, opts.seed);
  for (const auto& [m, acc] : sweep)
    std::printf("bits %d  M %d  count %zu  accuracy %.6f\n", opts.bits, m, opts.count, acc);
  write_sweep_csv((fs::path(opts.out_dir) / "sweep.csv").string(), sweep, opts.count, opts.bits);
  return 0;
}

int cmd_eval(const EvalOpts& opts) {
  const CheckpointData data = read_checkpoint(opts.checkpoint);
  fs::create_directories(opts.out_dir);
  if (data.precision == "f32") return run_eval<float>(data, opts);
  return run_eval<double>(data, opts);
}

// ---- analyze ----------------------------------------------------------------

struct AnalyzeOpts {
  std::string checkpoint;
  std::string mode;
  std::string out_dir = ".";
  int bits = 32;
  std::size_t count = 1000;
  int iters = 100;
  std::string sweep;
  int starts = 5;
  double tol = 1e-10;
  int max_iters = 10000;
  int pairs = 200;
  double drop_threshold = 0.05;
  std::uint64_t seed = 1;
};

template <typename S>
Tensor<S> random_bit_input(int bits, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x696e7075ull));
  typename Tensor<S>::Array a(bits);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    a[i] = static_cast<S>(rng.uniform_int(0, 1));
  return Tensor<S>(Shape{1, 1, bits}, std::move(a));
}

template <typename S>
int run_analyze(const CheckpointData& data, const AnalyzeOpts& opts) {
  auto [model, adam] = restore_checkpoint<S>(data);
  const bool dtl = model.spec().variant == Variant::DTL;
  const fs::path out(opts.out_dir);

  if (opts.mode == "spectral") {
    auto audit = audit_spectral_norms(model);
    write_json_file((out / "spectral.json").string(), spectral_to_json(audit));
    for (const auto& e : audit.entries)
      std::printf("%-12s norm %.9f%s\n", e.layer.c_str(), e.norm,
                  e.constrained ? "  [constrained]" : "");
    return 0;
  }
  if (opts.mode == "certify") {
    auto cert = certify_lipschitz(model);
    write_json_file((out / "certificate.json").string(), certificate_to_json(cert));
    std::printf("certified K = %.9f\n", cert.K);
    if (!dtl && cert.K >= 1.0)
      std::fprintf(stderr, "note: %s has no contraction constraint; K >= 1 is expected\n",
                   variant_name(model.spec().variant));
    return 0;
  }
  if (opts.mode == "contraction") {
    auto x = random_bit_input<S>(opts.bits, opts.seed);
    const double k = certify_lipschitz(model).K;
    const double ratio = verify_contraction(model, x, opts.pairs, opts.seed);
    write_json_file((out / "contraction.json").string(),
                    contraction_to_json(ratio, opts.pairs, k));
    std::printf("max empirical ratio %.9f  (certified K %.9f)\n", ratio, k);
    return 0;
  }
  if (opts.mode == "fixedpoint") {
    auto x = random_bit_input<S>(opts.bits, opts.seed);
    auto report = fixed_point_probe(model, x, opts.starts, opts.tol, opts.max_iters, opts.seed);
    write_json_file((out / "fixedpoint.json").string(), fixedpoint_to_json(report));
    std::printf("starts %d  converged %s  max pairwise distance %.3e  decay %.6f\n", opts.starts,
                report.converged ? "yes" : "no", report.max_pairwise_distance,
                report.decay_estimate);
    const bool unique = report.converged && report.max_pairwise_distance < 1e-6;
    if (dtl && !unique) {
      std::fprintf(stderr, "fixedpoint: DTL checkpoint failed the uniqueness probe\n");
      return 1;
    }
    return 0;
  }
  if (opts.mode == "growth") {
    auto x = random_bit_input<S>(opts.bits, opts.seed);
    auto ratios = growth_trace(model, x, opts.iters);
    write_json_file((out / "growth.json").string(), growth_to_json(ratios));
    std::printf("growth ratios: %zu recorded, last %.6f\n", ratios.size(),
                ratios.empty() ? 0.0 : ratios.back());
    return 0;
  }
  if (opts.mode == "overthink") {
    std::vector<int> m_list =
        opts.sweep.empty() ? std::vector<int>{30, 60, 120, 240, 480} : parse_int_list(opts.sweep);
    auto report = overthinking_scan(model, opts.bits, opts.count, m_list, opts.seed,
                                    opts.drop_threshold);
    write_json_file((out / "overthink.json").string(), overthink_to_json(report));
    std::printf("peak %.4f  final %.4f  %s\n", report.peak_accuracy, report.final_accuracy,
                report.flagged ? "OVERTHINKING FLAGGED" : "no overthinking drop");
    return 0;
  }
  std::fprintf(stderr, "unknown analyze mode '%s'\n", opts.mode.c_str());
  return 2;
}

int cmd_analyze(const AnalyzeOpts& opts) {
  const CheckpointData data = read_checkpoint(opts.checkpoint);
  fs::create_directories(opts.out_dir);
  if (data.precision == "f32") return run_analyze<float>(data, opts);
  return run_analyze<double>(data, opts);
}

// ---- plot ---------------------------------------------------------------------

struct PlotOpts {
  std::string input;
  std::string out;
  std::string x_col, y_col, group_col;
  std::string title;
};

int cmd_plot(const PlotOpts& opts) {
  const CsvTable t = read_csv(opts.input);
  const int xi = t.column(opts.x_col);
  const int yi = t.column(opts.y_col);
  if (xi < 0 || yi < 0) {
    std::fprintf(stderr, "plot: column '%s' not found in %s\n",
                 (xi < 0 ? opts.x_col : opts.y_col).c_str(), opts.input.c_str());
    return 1;
  }
  int gi = -1;
  if (!opts.group_col.empty()) {
    gi = t.column(opts.group_col);
    if (gi < 0) {
      std::fprintf(stderr, "plot: column '%s' not found in %s\n", opts.group_col.c_str(),
                   opts.input.c_str());
      return 1;
    }
  }
  std::vector<PlotSeries> series;
  std::map<std::string, std::size_t> by_group;
  for (const auto& row : t.rows) {
    const std::string group = gi >= 0 ? row[static_cast<std::size_t>(gi)] : opts.y_col;
    auto it = by_group.find(group);
    if (it == by_group.end()) {
      it = by_group.emplace(group, series.size()).first;
      series.push_back(PlotSeries{group, {}, {}});
    }
    auto& s = series[it->second];
    s.x.push_back(std::strtod(row[static_cast<std::size_t>(xi)].c_str(), nullptr));
    s.y.push_back(std::strtod(row[static_cast<std::size_t>(yi)].c_str(), nullptr));
  }
  write_line_chart(opts.out, series, opts.x_col, opts.y_col, opts.title);
  return 0;
}

// ---- datagen --------------------------------------------------------------------

struct DatagenOpts {
  int bits = 32;
  std::size_t count = 100;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_datagen(const DatagenOpts& opts) {
  Dataset d = generate_dataset(opts.bits, opts.count, opts.seed);
  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!opts.out.empty()) {
    file.open(opts.out, std::ios::trunc);
    if (!file) {
      std::fprintf(stderr, "datagen: cannot open '%s'\n", opts.out.c_str());
      return 1;
    }
    os = &file;
  }
  for (const auto& inst : d.instances) {
    for (auto b : inst.bits) *os << char('0' + b);
    *os << '\t';
    for (auto b : inst.target) *os << char('0' + b);
    *os << '\n';
  }
  return 0;
}

// ---- replicate-stability -----------------------------------------------------------

struct StabilityOpts {
  std::string widths = "16";
  int runs = 3;
  std::string precision = "f32";
  std::string out_dir = ".";
  std::string variants = "DTR,DTL";
  int epochs = 60;
  int dataset_size = 2000;
  int batch_size = 500;
  int m_train = 30;
  int bits = 32;
  std::uint64_t seed = 1;
};

template <typename S>
void stability_runs(const StabilityOpts& opts, const std::vector<int>& widths,
                    const std::vector<std::string>& variants) {
  CsvTable summary;
  summary.header = {"variant", "width", "run", "best_val_acc", "final_val_acc", "diverged"};
  for (int w : widths) {
    CsvTable per_width;
    per_width.header = {"variant", "run", "epoch", "train_loss", "val_loss", "val_acc", "lr",
                        "diverged"};
    for (const auto& vname : variants) {
      const Variant variant = variant_from_name(vname);
      for (int run = 0; run < opts.runs; ++run) {
        ModelSpec spec = ModelSpec::paper_defaults(variant, w);
        TrainConfig tc;
        tc.epochs = opts.epochs;
        tc.batch_size = static_cast<std::size_t>(opts.batch_size);
        tc.m_train = opts.m_train;
        tc.train_bits = opts.bits;
        tc.dataset_size = static_cast<std::size_t>(opts.dataset_size);
        tc.seed = mix_seed(opts.seed, 0x73746162ull + 1000ull * run + w);
        std::printf("[stability] variant %s  width %d  run %d\n", vname.c_str(), w, run);
        std::fflush(stdout);
        bool diverged = false;
        TrainOutcome<S> outcome;
        try {
          outcome = train<S>(spec, tc);
        } catch (const NumericError&) {
          diverged = true;  // f64 mode throws; report it as a divergence event
        }
        double final_acc = 0.0;
        for (const auto& r : outcome.records) {
          per_width.rows.push_back({vname, std::to_string(run), std::to_string(r.epoch),
                                    format_cell(r.train_loss), format_cell(r.val_loss),
                                    format_cell(r.val_acc), format_cell(r.lr),
                                    r.diverged ? "1" : "0"});
          diverged = diverged || r.diverged;
          final_acc = r.val_acc;
        }
        summary.rows.push_back({vname, std::to_string(w), std::to_string(run),
                                format_cell(outcome.best_val_acc), format_cell(final_acc),
                                diverged ? "1" : "0"});
      }
    }
    write_csv((fs::path(opts.out_dir) / ("stability_w" + std::to_string(w) + ".csv")).string(),
              per_width);
  }
  write_csv((fs::path(opts.out_dir) / "stability_summary.csv").string(), summary);
}

int cmd_stability(const StabilityOpts& opts) {
  const auto widths = parse_int_list(opts.widths);
  std::vector<std::string> variants;
  {
    std::stringstream ss(opts.variants);
    std::string part;
    while (std::getline(ss, part, ','))
      if (!part.empty()) variants.push_back(part);
  }
  fs::create_directories(opts.out_dir);
  if (opts.precision == "f32")
    stability_runs<float>(opts, widths, variants);
  else
    stability_runs<double>(opts, widths, variants);
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"iterative-thinking networks on prefix sums: train, certify, analyze"};
  app.require_subcommand(1);

  TrainOpts train_opts;
  auto* train_cmd = app.add_subcommand("train", "train a model per the config");
  train_cmd->add_option("--config", train_opts.config_path, "JSON config path (defaults apply)");
  train_cmd->add_option("--out", train_opts.out_dir, "output directory")->required();
  std::uint64_t seed_override = 0;
  auto* seed_opt = train_cmd->add_option("--seed", seed_override, "override config seed");
  train_cmd->add_flag("--early-stop", train_opts.early_stop,
                      "stop when validation accuracy reaches 1.0");

  EvalOpts eval_opts;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "checkpoint path")->required();
  eval_cmd->add_option("--bits", eval_opts.bits, "instance length");
  eval_cmd->add_option("--count", eval_opts.count, "instance count");
  eval_cmd->add_option("--iters", eval_opts.iters, "iteration count M");
  eval_cmd->add_option("--sweep", eval_opts.sweep, "comma-separated ascending M list");
  eval_cmd->add_option("--seed", eval_opts.seed, "instance seed");
  eval_cmd->add_option("--out", eval_opts.out_dir, "output directory");

  AnalyzeOpts an_opts;
  auto* an_cmd = app.add_subcommand("analyze", "spectral / certificate / dynamics reports");
  an_cmd->add_option("--checkpoint", an_opts.checkpoint, "checkpoint path")->required();
  an_cmd->add_option("--mode", an_opts.mode,
                     "spectral|certify|contraction|fixedpoint|growth|overthink")
      ->required();
  an_cmd->add_option("--out", an_opts.out_dir, "output directory");
  an_cmd->add_option("--bits", an_opts.bits, "probe instance length");
  an_cmd->add_option("--count", an_opts.count, "instances for overthink scan");
  an_cmd->add_option("--iters", an_opts.iters, "iterations for growth trace");
  an_cmd->add_option("--sweep", an_opts.sweep, "M list for overthink scan");
  an_cmd->add_option("--starts", an_opts.starts, "fixed-point starts");
  an_cmd->add_option("--tol", an_opts.tol, "fixed-point tolerance");
  an_cmd->add_option("--max-iters", an_opts.max_iters, "fixed-point iteration cap");
  an_cmd->add_option("--pairs", an_opts.pairs, "contraction sample pairs");
  an_cmd->add_option("--drop-threshold", an_opts.drop_threshold, "overthinking drop threshold");
  an_cmd->add_option("--seed", an_opts.seed, "probe seed");

  PlotOpts plot_opts;
  auto* plot_cmd = app.add_subcommand("plot", "render a CSV as a deterministic SVG line chart");
  plot_cmd->add_option("--input", plot_opts.input, "CSV path")->required();
  plot_cmd->add_option("--out", plot_opts.out, "SVG path")->required();
  plot_cmd->add_option("--x", plot_opts.x_col, "x column")->required();
  plot_cmd->add_option("--y", plot_opts.y_col, "y column")->required();
  plot_cmd->add_option("--group", plot_opts.group_col, "group column (one line per value)");
  plot_cmd->add_option("--title", plot_opts.title, "chart title");

  DatagenOpts dg_opts;
  auto* dg_cmd = app.add_subcommand("datagen", "dump generated instances as bits<TAB>target");
  dg_cmd->add_option("--bits", dg_opts.bits, "instance length");
  dg_cmd->add_option("--count", dg_opts.count, "instance count");
  dg_cmd->add_option("--seed", dg_opts.seed, "generator seed");
  dg_cmd->add_option("--out", dg_opts.out, "output file (stdout when omitted)");

  StabilityOpts st_opts;
  auto* st_cmd = app.add_subcommand("replicate-stability",
                                    "repeated seeded training runs per width and variant");
  st_cmd->add_option("--widths", st_opts.widths, "comma-separated widths");
  st_cmd->add_option("--runs", st_opts.runs, "runs per variant per width");
  st_cmd->add_option("--precision", st_opts.precision, "f32|f64");
  st_cmd->add_option("--out", st_opts.out_dir, "output directory")->required();
  st_cmd->add_option("--variants", st_opts.variants, "comma-separated variants");
  st_cmd->add_option("--epochs", st_opts.epochs, "epochs per run");
  st_cmd->add_option("--dataset-size", st_opts.dataset_size, "instances per run");
  st_cmd->add_option("--batch-size", st_opts.batch_size, "batch size");
  st_cmd->add_option("--m", st_opts.m_train, "training iteration count");
  st_cmd->add_option("--bits", st_opts.bits, "instance length");
  st_cmd->add_option("--seed", st_opts.seed, "base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) {
      if (*seed_opt) train_opts.seed = seed_override;
      return cmd_train(train_opts);
    }
    if (*eval_cmd) {
      if (eval_opts.sweep.empty() && eval_opts.iters <= 0) {
        std::fprintf(stderr, "eval: provide --iters or --sweep\n");
        return 2;
      }
      return cmd_eval(eval_opts);
    }
    if (*an_cmd) return cmd_analyze(an_opts);
    if (*plot_cmd) return cmd_plot(plot_opts);
    if (*dg_cmd) return cmd_datagen(dg_opts);
    if (*st_cmd) return cmd_stability(st_opts);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

}  // namespace iterthink
