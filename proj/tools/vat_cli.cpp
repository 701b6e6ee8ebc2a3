#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "vat/run.hpp"

namespace {

using namespace vat;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> aggregator;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration (preset plus overrides)");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--aggregator", f.aggregator, "vtm | conv4d-baseline | identity");
  cmd->add_option("--out", f.out, "output path");
}

RunConfig resolve(const CommonFlags& f, const RunConfig* fallback = nullptr) {
  RunConfig c = !f.config.empty() ? load_config(f.config) : fallback ? *fallback : desk_preset();
  if (f.seed) c.seed = *f.seed;
  if (f.aggregator) c.model.aggregator = parse_aggregator(*f.aggregator);
  validate(c.model);
  return c;
}

void emit(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric cost aggregation for few-shot segmentation"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, bench_f, shapes_f;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  auto* train_cmd = app.add_subcommand("train", "train on synthetic episodes");
  add_common(train_cmd, train_f);
  train_cmd->add_option("--steps", steps, "optimizer steps");
  train_cmd->add_option("--lr", lr, "learning rate");
  train_cmd->add_flag("--quiet", "suppress progress output");

  std::string checkpoint, mask_dir;
  std::optional<std::size_t> k;
  std::optional<double> tau;
  bool inject_gt = false;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on fresh episodes");
  add_common(eval_cmd, eval_f);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval_cmd->add_option("--k", k, "shots per episode");
  eval_cmd->add_option("--tau", tau, "K-shot vote threshold");
  eval_cmd->add_option("--masks", mask_dir, "directory for predicted PGM masks");
  eval_cmd->add_flag("--debug-inject-ground-truth", inject_gt, "replace predictions with ground truth");

  std::size_t repeats = 10;
  auto* bench_cmd = app.add_subcommand("bench", "time forward passes per aggregator");
  add_common(bench_cmd, bench_f);
  bench_cmd->add_option("--repeats", repeats, "timed forward passes per aggregator");

  auto* shapes_cmd = app.add_subcommand("shapes", "print the symbolic shape trace");
  add_common(shapes_cmd, shapes_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      RunConfig c = resolve(train_f);
      if (steps) c.train.steps = *steps;
      if (lr) {
        if (*lr < 0) throw ConfigError("--lr: must be non-negative");
        c.train.lr = *lr;
      }
      const std::string out = train_f.out.empty() ? "run" : train_f.out;
      const bool quiet = train_cmd->count("--quiet") > 0;
      const auto outcome = run_train(c, out, quiet ? nullptr : &std::cout);
      std::cout << "trained " << outcome.log.losses.size() << " steps";
      if (!outcome.log.validation.empty()) {
        std::cout << ", best validation " << outcome.log.best_score << " at step " << outcome.log.best_step;
      }
      std::cout << "\ncheckpoint: " << (std::filesystem::path(out) / "checkpoint.vat").string() << '\n';
    } else if (*eval_cmd) {
      std::optional<RunConfig> stored;
      if (!checkpoint.empty()) stored = read_checkpoint(checkpoint).config;
      RunConfig c = resolve(eval_f, stored ? &*stored : nullptr);
      if (k) c.eval.k = *k;
      if (tau) {
        if (!(*tau > 0 && *tau <= 1)) throw ConfigError("--tau: must lie in (0, 1]");
        c.eval.tau = *tau;
      }
      if (c.eval.k == 0) throw ConfigError("--k: must be positive");
      c.eval.inject_ground_truth = inject_gt;
      if (checkpoint.empty() && !inject_gt) throw ConfigError("--checkpoint is required");
      auto model = checkpoint.empty() ? std::make_unique<VatModel<float>>(c.model, c.seed) : load_model(c, checkpoint);
      const auto report = run_eval(c, *model, mask_dir);
      std::cerr << format_report(report);
      emit(report, eval_f.out);
    } else if (*bench_cmd) {
      RunConfig c = resolve(bench_f);
      std::vector<Aggregator> aggs{Aggregator::kVtm, Aggregator::kConv4d, Aggregator::kIdentity};
      if (bench_f.aggregator) aggs = {c.model.aggregator};
      const auto rows = run_bench(c, aggs, repeats);
      std::cerr << kBenchLabel << '\n' << std::fixed << std::setprecision(3);
      for (const auto& r : rows) {
        std::cerr << std::setw(16) << to_string(r.aggregator) << "  median " << r.median_ms << " ms  p95 " << r.p95_ms
                  << " ms  peak " << r.peak_bytes << " B\n";
      }
      emit(bench_report(c, rows), bench_f.out);
    } else if (*shapes_cmd) {
      const RunConfig c = resolve(shapes_f);
      std::ostringstream os;
      for (const auto& [name, shape] : shape_trace(c.model)) os << std::left << std::setw(28) << name << to_string(shape) << '\n';
      if (shapes_f.out.empty()) {
        std::cout << os.str();
      } else {
        std::ofstream(shapes_f.out) << os.str();
      }
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
