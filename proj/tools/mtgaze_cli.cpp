// mtgaze command-line driver.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
// failure (gradient check exceedance, non-finite training loss, oracle
// mismatch).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtgaze/cost.hpp"
#include "mtgaze/errors.hpp"
#include "mtgaze/gradcheck.hpp"
#include "mtgaze/train.hpp"

using namespace mtgaze;
using nlohmann::json;

namespace {

void echo(const std::string& command, const json& resolved) {
  std::cerr << "mtgaze " << command << " resolved: " << resolved.dump() << '\n';
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ModelConfig load_config(const std::string& path, const ModelConfig& fallback) {
  if (path.empty()) return fallback;
  return ModelConfig::load_file(path);
}

json config_json(const ModelConfig& c) { return json::parse(c.to_text()); }

// --- summary ---------------------------------------------------------------

struct SummaryArgs {
  std::string config;
  std::string ablate;
  std::string csv;
};

int run_summary(const SummaryArgs& a) {
  ModelConfig cfg = load_config(a.config, ModelConfig::multitask_gaze());
  if (!a.ablate.empty()) {
    for (auto ab : parse_ablations(a.ablate)) cfg.ablate.insert(ab);
  }
  echo("summary", {{"config_path", a.config}, {"csv", a.csv}, {"model", config_json(cfg)}});
  const CostReport report = count_model(cfg);
  std::cout << "# " << kCostConvention << '\n';
  std::cout << std::left;
  for (const auto& r : report.rows) {
    std::printf("%-28s %12lld %14lld\n", r.name.c_str(), static_cast<long long>(r.params),
                static_cast<long long>(r.macs));
  }
  const auto p = report.total_params(), m = report.total_macs();
  std::printf("%-28s %12lld %14lld\n", "TOTAL", static_cast<long long>(p), static_cast<long long>(m));
  std::cout << "params " << p << " (" << fixed(p / 1e6, 3) << "M)\n";
  std::cout << "macs " << m << " (" << fixed(m / 1e9, 3) << "G)\n";
  if (!a.csv.empty()) write_text(a.csv, report.to_csv());
  return 0;
}

// --- counts ----------------------------------------------------------------

struct CountsArgs {
  std::int64_t kh = 0, kw = 0, cin = 0, cout = 0, hout = 0, wout = 0;
  bool uc = false;
  bool depthwise = false;
  bool verify = false;
};

int run_counts(const CountsArgs& a) {
  echo("counts", {{"kh", a.kh}, {"kw", a.kw}, {"cin", a.cin}, {"cout", a.cout}, {"hout", a.hout},
                  {"wout", a.wout}, {"uc", a.uc}, {"depthwise", a.depthwise}, {"verify", a.verify}});
  if (a.kh < 1 || a.kw < 1 || a.cin < 1 || a.cout < 1 || a.hout < 1 || a.wout < 1) {
    throw ValidationError("counts: all extents must be positive");
  }
  if (a.depthwise && a.cin != a.cout) throw ValidationError("counts: --depthwise needs --cin equal to --cout");
  ConvSpec spec{a.kh, a.kw, a.cin, a.cout, 1, 1, 0, 0, a.depthwise ? a.cin : 1};
  spec.validate();
  const FactorizationCost f = compare_factorized(spec, a.hout, a.wout);
  std::cout << "standard " << a.kh << "x" << a.kw << ": params " << f.standard.params << ", macs " << f.standard.macs
            << '\n';
  if (a.uc) {
    std::cout << "uc [1x" << a.kw << "; " << a.kh << "x1]: params " << f.factorized.params << ", macs "
              << f.factorized.macs << '\n';
    std::cout << "reduction: params " << fixed(100.0 * f.param_reduction, 2) << "%, macs "
              << fixed(100.0 * f.mac_reduction, 2) << "%\n";
  }
  if (a.verify) {
    // Valid-padding inputs sized so the outputs are exactly hout x wout.
    const std::int64_t counted = instrumented_macs(ConvOp{spec, 1, a.hout + a.kh - 1, a.wout + a.kw - 1, false});
    bool ok = counted == f.standard.macs;
    std::cout << "verify standard: counter " << counted << (ok ? " == " : " != ") << f.standard.macs << '\n';
    if (a.uc) {
      ConvSpec row = spec, col = spec;
      row.k_h = 1;
      col.k_w = 1;
      const std::int64_t c2 = instrumented_macs(ConvOp{row, 1, a.hout, a.wout + a.kw - 1, false}) +
                              instrumented_macs(ConvOp{col, 1, a.hout + a.kh - 1, a.wout, false});
      const bool ok2 = c2 == f.factorized.macs;
      std::cout << "verify uc: counter " << c2 << (ok2 ? " == " : " != ") << f.factorized.macs << '\n';
      ok = ok && ok2;
    }
    if (!ok) throw NumericError("instrumented MAC count disagrees with the analytic count");
  }
  return 0;
}

// --- erf -------------------------------------------------------------------

struct ErfArgs {
  std::string stack;
  std::string out;
  std::string csv;
  std::int64_t extent = 0;
  std::int64_t channels = 4;
  int draws = 32;
  std::uint64_t seed = 2024;
  std::string format = "binary";
  int bits = 8;
};

int run_erf(const ErfArgs& a) {
  const ConvStack stack = make_stack(a.stack, a.channels);
  const auto layers = stack.rf_layers();
  const auto rows = theoretical_rf(layers);
  const std::int64_t rf = rows.empty() ? 1 : std::max(rows.back().rf_h, rows.back().rf_w);
  const std::int64_t extent = a.extent > 0 ? a.extent : 2 * rf + 1;
  if (a.format != "ascii" && a.format != "binary") throw ValidationError("--format must be ascii or binary");
  echo("erf", {{"stack", a.stack}, {"layers", stack.layers.size()}, {"channels", a.channels}, {"extent", extent},
               {"draws", a.draws}, {"seed", a.seed}, {"out", a.out}, {"csv", a.csv}, {"format", a.format},
               {"bits", a.bits}});
  for (const auto& r : rows) {
    std::cout << r.name << ": rf " << r.rf_h << "x" << r.rf_w << ", jump " << r.jump_h << "x" << r.jump_w << '\n';
  }
  const Box box = theoretical_box(stack, extent);
  const auto weights = random_stack_weights(stack, a.seed);
  const Heatmap map = effective_rf(stack, weights, extent, a.draws, a.seed);
  const Box support = support_box(map);
  std::cout << "theoretical rf " << (rows.empty() ? 1 : rows.back().rf_h) << "x" << (rows.empty() ? 1 : rows.back().rf_w)
            << " at rows [" << box.top << ", " << box.top + box.height << ") cols [" << box.left << ", "
            << box.left + box.width << ") of " << extent << "x" << extent << '\n';
  std::cout << "heatmap support " << support.height << "x" << support.width << " at rows [" << support.top << ", "
            << support.top + support.height << ") cols [" << support.left << ", " << support.left + support.width
            << "), nonzero " << nonzero_count(map) << '\n';
  std::cout << (support == box ? "support matches theoretical box" : "support differs from theoretical box") << '\n';
  write_pgm(a.out, map, a.format == "ascii" ? PgmEncoding::ascii : PgmEncoding::binary, a.bits);
  if (!a.csv.empty()) write_text(a.csv, heatmap_csv(map));
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

int run_gradcheck_cmd(std::uint64_t seed, double tol) {
  echo("gradcheck", {{"seed", seed}, {"tol", tol}});
  if (!(tol >= 0.0)) throw ValidationError("--tol must be non-negative");
  const auto results = run_gradcheck(seed);
  std::string failed;
  for (const auto& r : results) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-12s rel_err %.3e (%-22s) worst_entry %.3e probes %4d kinks_skipped %3d %s\n",
                  r.name.c_str(), r.worst_rel_error, r.worst_tensor.c_str(), r.worst_entry_rel_error, r.probes,
                  r.kinks_skipped,
                  r.worst_rel_error <= tol ? "ok" : "FAIL");
    std::cout << buf;
    if (r.worst_rel_error > tol) failed += (failed.empty() ? "" : ", ") + r.name;
  }
  if (!failed.empty()) throw NumericError("gradient check above tolerance " + std::to_string(tol) + ": " + failed);
  return 0;
}

// --- train / eval ----------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string ablate;
  TrainConfig tc;
  std::string schedule = "cosine";
  std::string out;
  std::string metrics;
};

int run_train(TrainArgs a) {
  ModelConfig cfg = load_config(a.config, ModelConfig::reduced());
  if (!a.ablate.empty()) {
    for (auto ab : parse_ablations(a.ablate)) cfg.ablate.insert(ab);
  }
  cfg.validate();
  if (a.schedule == "cosine") {
    a.tc.schedule = LrSchedule::cosine;
  } else if (a.schedule == "constant") {
    a.tc.schedule = LrSchedule::constant;
  } else {
    throw ValidationError("--schedule must be cosine or constant");
  }
  if (a.tc.epochs < 1) throw ValidationError("--epochs must be at least 1");
  a.tc.data.image_size = cfg.input_hw;
  a.tc.validate();
  echo("train", {{"config_path", a.config},
                 {"model", config_json(cfg)},
                 {"epochs", a.tc.epochs},
                 {"lr", a.tc.learning_rate},
                 {"schedule", a.schedule},
                 {"momentum", a.tc.momentum},
                 {"batch", a.tc.batch_size},
                 {"seed", a.tc.seed},
                 {"p0", a.tc.dropout_p0},
                 {"samples", a.tc.samples},
                 {"holdout", a.tc.holdout},
                 {"image_size", a.tc.data.image_size},
                 {"label_range", a.tc.data.label_range},
                 {"noise", a.tc.data.noise_sigma},
                 {"out", a.out},
                 {"metrics", a.metrics}});
  const auto data = generate(a.tc.samples, a.tc.seed, a.tc.data);
  const auto split = data.end() - a.tc.holdout;
  const std::vector<GazeSample> train_set(data.begin(), split), heldout(split, data.end());
  Model model = Model::build(cfg, a.tc.seed);
  const auto history = train(model, a.tc, train_set, heldout, [](const EpochMetrics& m) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %3d  loss %.5f  yaw %.5f  pitch %.5f  joint %.5f  err %.3f deg  (p=%.4f lr=%.5f)\n",
                  m.epoch, m.l_total, m.l_yaw, m.l_pitch, m.l_joint, m.ang_err_deg, m.dropout, m.learning_rate);
    std::cerr << buf;
  });
  if (!a.metrics.empty()) write_text(a.metrics, metrics_csv(history));
  if (!a.out.empty()) model.save(a.out);
  std::cout << "final held-out angular error " << fixed(history.back().ang_err_deg, 4) << " deg (epoch 0: "
            << fixed(history.front().ang_err_deg, 4) << " deg)\n";
  return 0;
}

struct EvalArgs {
  std::string weights;
  std::int64_t n = 400;
  std::uint64_t seed = 0;
  std::string csv;
};

int run_eval(const EvalArgs& a) {
  if (a.n < 1) throw ValidationError("--n must be at least 1");
  Model model = Model::load(a.weights);
  GeneratorConfig gen;
  gen.image_size = model.config().input_hw;
  echo("eval", {{"weights", a.weights}, {"n", a.n}, {"seed", a.seed}, {"csv", a.csv}, {"model", config_json(model.config())},
                {"image_size", gen.image_size}, {"label_range", gen.label_range}, {"noise", gen.noise_sigma}});
  const auto data = generate(a.n, a.seed, gen);
  const EvalResult res = evaluate(model, data);
  if (!a.csv.empty()) write_text(a.csv, eval_csv(res));
  std::cout << "mean angular error " << fixed(res.mean_ang_err_deg, 4) << " deg over " << a.n
            << " samples (zero-predictor baseline " << fixed(zero_predictor_error(gen.label_range), 4) << " deg)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtgaze: lightweight gaze CNN kit (cost model, receptive fields, gradient checks, training)"};
  app.require_subcommand(1);

  SummaryArgs sa;
  auto* summary = app.add_subcommand("summary", "Per-layer parameter and MAC report of a model config");
  summary->add_option("--config", sa.config, "Model config file (JSON); default model when omitted");
  summary->add_option("--ablate", sa.ablate, "Comma-separated subset of sca,gcm,mrm");
  summary->add_option("--csv", sa.csv, "Write the report as CSV");

  CountsArgs ca;
  auto* counts = app.add_subcommand("counts", "Parameter and MAC count of one convolution");
  counts->add_option("--kh", ca.kh, "Kernel height")->required();
  counts->add_option("--kw", ca.kw, "Kernel width")->required();
  counts->add_option("--cin", ca.cin, "Input channels")->required();
  counts->add_option("--cout", ca.cout, "Output channels")->required();
  counts->add_option("--hout", ca.hout, "Output height")->required();
  counts->add_option("--wout", ca.wout, "Output width")->required();
  counts->add_flag("--uc", ca.uc, "Also count the [1 x kw; kh x 1] factorization");
  counts->add_flag("--depthwise", ca.depthwise, "groups = channels");
  counts->add_flag("--verify", ca.verify, "Cross-check MACs with the instrumented loop counter");

  ErfArgs ea;
  auto* erf = app.add_subcommand("erf", "Theoretical and gradient-based effective receptive field of a conv stack");
  erf->add_option("--stack", ea.stack, "std5x3 | uc5x3 | uc7x3 | std5x4 | custom list such as 5x5,uc7,3x3s2")->required();
  erf->add_option("--out", ea.out, "Heatmap PGM path")->required();
  erf->add_option("--csv", ea.csv, "Heatmap CSV path");
  erf->add_option("--extent", ea.extent, "Square input extent (default 2 * rf + 1)");
  erf->add_option("--channels", ea.channels, "Channels per layer");
  erf->add_option("--draws", ea.draws, "Random inputs averaged");
  erf->add_option("--seed", ea.seed, "Seed for weights and inputs");
  erf->add_option("--format", ea.format, "PGM encoding: binary (P5) or ascii (P2)");
  erf->add_option("--bits", ea.bits, "PGM depth, 8 or 16");

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-3;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every block");
  gradcheck->add_option("--seed", gc_seed, "Seed");
  gradcheck->add_option("--tol", gc_tol, "Maximum allowed relative error");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train on synthetic eye images");
  trn->add_option("--config", ta.config, "Model config file (JSON); reduced 64x64 model when omitted");
  trn->add_option("--ablate", ta.ablate, "Comma-separated subset of sca,gcm,mrm");
  trn->add_option("--epochs", ta.tc.epochs, "Training epochs");
  trn->add_option("--lr", ta.tc.learning_rate, "Peak learning rate");
  trn->add_option("--schedule", ta.schedule, "cosine or constant");
  trn->add_option("--momentum", ta.tc.momentum, "SGD momentum");
  trn->add_option("--batch", ta.tc.batch_size, "Batch size");
  trn->add_option("--seed", ta.tc.seed, "Seed for data, initialization, shuffling and dropout");
  trn->add_option("--p0", ta.tc.dropout_p0, "Initial SCA dropout rate");
  trn->add_option("--samples", ta.tc.samples, "Generated samples (training + held-out)");
  trn->add_option("--holdout", ta.tc.holdout, "Held-out samples");
  trn->add_option("--out", ta.out, "Weights output path");
  trn->add_option("--metrics", ta.metrics, "Metrics CSV path");

  EvalArgs va;
  auto* evl = app.add_subcommand("eval", "Evaluate saved weights on freshly generated samples");
  evl->add_option("--weights", va.weights, "Weights file")->required();
  evl->add_option("--n", va.n, "Number of samples");
  evl->add_option("--seed", va.seed, "Data seed");
  evl->add_option("--csv", va.csv, "Per-sample CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*summary) return run_summary(sa);
    if (*counts) return run_counts(ca);
    if (*erf) return run_erf(ea);
    if (*gradcheck) return run_gradcheck_cmd(gc_seed, gc_tol);
    if (*trn) return run_train(ta);
    if (*evl) return run_eval(va);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
