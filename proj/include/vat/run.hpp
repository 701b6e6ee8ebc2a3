#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "vat/checkpoint.hpp"

namespace vat {

// Independent episode streams derived from the run seed.
enum class Stream { kTrain = 1, kValidation = 2, kEvaluation = 3 };
std::uint64_t stream_seed(std::uint64_t run_seed, Stream stream, std::uint64_t salt = 0);

struct TrainOutcome {
  TrainLog log;
  std::unique_ptr<VatModel<float>> model;
};

// Trains from scratch. When `out` is non-empty it receives loss.log (one
// "step loss" row per executed step), validation.log, periodic
// checkpoint-step<N>.vat files and the final checkpoint.vat. A non-finite
// loss dumps the offending episode to out/nonfinite-seed<S> and rethrows.
TrainOutcome run_train(const RunConfig& config, const std::filesystem::path& out, std::ostream* progress = nullptr);

// Model built from `config.model` with weights from the checkpoint.
std::unique_ptr<VatModel<float>> load_model(const RunConfig& config, const std::filesystem::path& checkpoint);

// Metric report over fresh episodes of every fold (mask head) or PCK over
// correspondence episodes (flow head). Writes per-episode PGM masks to
// `mask_dir` when non-empty.
nlohmann::json run_eval(const RunConfig& config, const VatModel<float>& model, const std::filesystem::path& mask_dir = {});
std::string format_report(const nlohmann::json& report);

inline constexpr const char* kBenchLabel = "measured on this machine; not comparable to published hardware numbers";

struct BenchRow {
  Aggregator aggregator = Aggregator::kVtm;
  std::size_t repeats = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t peak_bytes = 0;
};

// Times full forward passes (correlation to head) on one synthetic episode.
std::vector<BenchRow> run_bench(const RunConfig& config, const std::vector<Aggregator>& aggregators,
                                std::size_t repeats);
nlohmann::json bench_report(const RunConfig& config, const std::vector<BenchRow>& rows);

}  // namespace vat
