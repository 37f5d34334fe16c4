// sfr: train, eval, diagnose, verify and sweep on the synthetic style task.
//
// Exit codes: 0 success, 1 config or usage error, 2 runtime error,
// 3 verification failure.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sfr/checkpoint.hpp"
#include "sfr/config.hpp"
#include "sfr/diagnostics.hpp"
#include "sfr/theory.hpp"
#include "sfr/trainer.hpp"

namespace fs = std::filesystem;
using namespace sfr;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerify = 3;

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

// Refuses to reuse a nonempty output directory unless asked to.
void prepare_dir(const std::string& dir, bool overwrite) {
  if (dir.empty()) throw UsageError("--out is required");
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!overwrite) throw UsageError("output directory " + dir + " is not empty; pass --overwrite to replace it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void prepare_file(const std::string& path, bool overwrite) {
  if (path.empty()) return;
  if (fs::exists(path) && !overwrite) throw UsageError(path + " exists; pass --overwrite to replace it");
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  return os;
}

RunConfig load_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig cfg = load_config(path);
  if (seed) {
    cfg.seed = *seed;
    cfg.finalize();
  }
  return cfg;
}

struct TrainOutcome {
  std::vector<StepMetrics> metrics;
  double seconds = 0;
  std::size_t encoder_calls = 0;
};

TrainOutcome train_into(const RunConfig& cfg, const std::string& dir) {
  {
    auto os = open_out(dir + "/config.txt");
    os << cfg.to_text();
  }
  auto csv = open_out(dir + "/metrics.csv");
  write_metrics_header(csv);
  TrainOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(cfg);
  out.metrics = tr.run(&csv);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.encoder_calls = tr.encoder().calls();
  tr.save(dir + "/resume.ckpt", false);
  tr.save(dir + "/published.ckpt", true);
  return out;
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(what + ": cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError(what + " is empty");
  return out;
}

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic flow regularization lab"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, suite, axis, values, temperatures = "0,0.6,1.0", raw_sed;
  std::optional<std::uint64_t> seed;
  bool overwrite = false;
  int example = 0, samples = 64, euler_steps = 50;

  auto* train = app.add_subcommand("train", "Run training; writes metrics.csv, resume.ckpt and published.ckpt");
  train->add_option("--config", config_path, "Config file")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--seed", seed, "Override the run seed");
  train->add_flag("--overwrite", overwrite, "Replace an existing output directory");

  auto* eval = app.add_subcommand("eval", "CS-SB and answer-key accuracy per temperature (CSV)");
  eval->add_option("--checkpoint", checkpoint, "Published or resume checkpoint")->required();
  eval->add_option("--config", config_path, "Config whose task must match the checkpoint (default: its own)");
  eval->add_option("--temperatures", temperatures, "Comma-separated temperatures");
  eval->add_option("--seed", seed, "Sampling seed (default 0)");
  eval->add_option("--out", out, "Output CSV (default stdout)");
  eval->add_flag("--overwrite", overwrite, "Replace an existing output file");

  auto* diagnose = app.add_subcommand("diagnose", "Per-position SED as JSON lines (needs a resume checkpoint)");
  diagnose->add_option("--checkpoint", checkpoint, "Resume checkpoint");
  diagnose->add_option("--example", example, "Dataset example index");
  diagnose->add_option("--samples", samples, "Endpoints per position");
  diagnose->add_option("--steps", euler_steps, "Euler steps");
  diagnose->add_option("--seed", seed, "Integration seed (default 0)");
  diagnose->add_option("--raw-sed", raw_sed, "Label these comma-separated raw SED values instead");
  diagnose->add_option("--out", out, "Output file (default stdout)");
  diagnose->add_flag("--overwrite", overwrite, "Replace an existing output file");

  auto* verify = app.add_subcommand("verify", "Run verification suites; exit 3 if any check fails");
  verify->add_option("--suite", suite, "Suite name (default: all)");
  verify->add_option("--out", out, "Write the JSON reports here (default stdout)");
  verify->add_flag("--overwrite", overwrite, "Replace an existing output file");

  auto* sweep = app.add_subcommand("sweep", "One training run per value of lambda, k or s");
  sweep->add_option("--config", config_path, "Base config file")->required();
  sweep->add_option("--axis", axis, "lambda | k | s")->required()->check(CLI::IsMember({"lambda", "k", "s"}));
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--out", out, "Output directory")->required();
  sweep->add_option("--seed", seed, "Override the run seed");
  sweep->add_flag("--overwrite", overwrite, "Replace an existing output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      const RunConfig cfg = load_with_seed(config_path, seed);
      prepare_dir(out, overwrite);
      const auto r = train_into(cfg, out);
      std::cerr << "trained " << r.metrics.size() << " steps in " << r.seconds << " s\n";
      return 0;
    }

    if (*eval) {
      RunConfig cfg;
      LanguageModel model = load_language_model(checkpoint, &cfg);
      if (!config_path.empty()) {
        const RunConfig task_cfg = load_config(config_path);
        if (task_cfg.task.vocab_size != cfg.task.vocab_size)
          throw ConfigError("checkpoint vocabulary " + std::to_string(cfg.task.vocab_size) +
                            " does not match task vocabulary " + std::to_string(task_cfg.task.vocab_size));
        cfg.task = task_cfg.task;
      }
      const StyleDataset ds = gen_style_dataset(cfg.task);
      const auto temps = parse_list(temperatures, "--temperatures");
      prepare_file(out, overwrite);
      std::ofstream file;
      if (!out.empty()) file = open_out(out);
      std::ostream& os = out.empty() ? std::cout : file;
      write_cs_sb_header(os);
      for (double t : temps) {
        if (!(t >= 0)) throw UsageError("temperatures must be >= 0");
        write_cs_sb_rows(os, cfg.method, style_cs_sb(model, ds, t, seed.value_or(0)));
      }
      return 0;
    }

    if (*diagnose) {
      prepare_file(out, overwrite);
      std::ofstream file;
      if (!out.empty()) file = open_out(out);
      std::ostream& os = out.empty() ? std::cout : file;
      if (!raw_sed.empty()) {
        const auto raw = parse_list(raw_sed, "--raw-sed");
        write_sed_jsonl(os, lock_fork_labels(raw), Tokens(raw.size(), -1));
        return 0;
      }
      if (checkpoint.empty()) throw UsageError("diagnose needs --checkpoint or --raw-sed");
      Trainer tr = Trainer::resume(checkpoint);
      if (!tr.fm_head())
        throw StateError("checkpoint " + checkpoint + " comes from an SFT run and has no flow-matching head");
      const auto& ds = tr.dataset();
      if (example < 0 || example >= static_cast<int>(ds.examples.size()))
        throw UsageError("--example must lie in 0.." + std::to_string(ds.examples.size() - 1));
      const Example& ex = ds.examples[static_cast<std::size_t>(example)];
      const auto probe = probe_sed(tr.model(), *tr.fm_head(), ds, ex, tr.config().schedule.horizon, samples,
                                   euler_steps, seed.value_or(0));
      write_sed_jsonl(os, probe.report, Tokens(ex.response.begin(), ex.response.end() - 1));
      return 0;
    }

    if (*verify) {
      std::vector<std::string> suites = suite.empty() ? suite_names() : std::vector<std::string>{suite};
      // Resolve every name before running anything.
      for (const auto& s : suites)
        if (std::find(suite_names().begin(), suite_names().end(), s) == suite_names().end()) run_suite(s);
      prepare_file(out, overwrite);
      std::ofstream file;
      if (!out.empty()) file = open_out(out);
      std::ostream& os = out.empty() ? std::cout : file;
      bool ok = true;
      for (const auto& s : suites) {
        const auto report = run_suite(s);
        os << report.to_json() << '\n';
        std::cerr << s << ": " << (report.passed() ? "PASS" : "FAIL") << '\n';
        ok = ok && report.passed();
      }
      return ok ? 0 : kExitVerify;
    }

    if (*sweep) {
      const RunConfig base = load_with_seed(config_path, seed);
      const auto vals = parse_list(values, "--values");
      const std::string key = axis == "lambda" ? "lambda0" : axis == "k" ? "horizon_k" : "stride";
      std::vector<RunConfig> runs;
      for (double v : vals) {
        RunConfig cfg = base;
        const bool integral = axis != "lambda";
        if (integral && v != std::floor(v)) throw UsageError("--values for axis " + axis + " must be integers");
        apply_config_key(cfg, key, integral ? std::to_string(static_cast<long long>(v)) : format_value(v));
        cfg.finalize();
        runs.push_back(cfg);
      }
      prepare_dir(out, overwrite);
      auto table = open_out(out + "/sweep.csv");
      table << "axis,value,metric,result\n";
      for (std::size_t i = 0; i < runs.size(); ++i) {
        const std::string dir = out + "/" + axis + "_" + format_value(vals[i]);
        fs::create_directories(dir);
        const auto r = train_into(runs[i], dir);
        int gated = 0;
        for (const auto& m : r.metrics) gated += m.gated;
        const StepMetrics last = r.metrics.empty() ? StepMetrics{} : r.metrics.back();
        const auto row = [&](const std::string& metric, double result) {
          table << axis << ',' << format_value(vals[i]) << ',' << metric << ',' << format_value(result) << '\n';
        };
        row("final_l_ar", last.l_ar);
        row("final_l_sfr", last.l_sfr);
        row("gated_steps", gated);
        row("encoder_calls", static_cast<double>(r.encoder_calls));
        row("wall_clock_s", r.seconds);
        std::cerr << axis << '=' << format_value(vals[i]) << " done in " << r.seconds << " s\n";
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
