#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vat/decoder.hpp"
#include "vat/encoder.hpp"

namespace vat {

// Shape of one backbone layer's feature map (query and support alike).
struct LayerSpec {
  int layer = 0;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;
};

struct LevelSpec {
  int level = 0;
  std::vector<int> layers;  // L_p, all of one spatial size
  Extents4 target{};
  std::size_t depth = 2;
};

struct ModelConfig {
  std::size_t image = 32;  // mask side length
  std::vector<LayerSpec> layers;
  std::vector<LevelSpec> levels;  // coarsest first
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t window = 2;
  std::size_t vem_blocks = 2;
  std::size_t vem_groups = 4;
  Aggregator aggregator = Aggregator::kVtm;
  std::vector<DecoderStage> decoder_stages;
  std::size_t decoder_window = 4;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_heads = 2;
  bool use_affinity = true;
  HeadKind head = HeadKind::kMask;

  const LayerSpec& layer(int index) const;
  EncoderConfig encoder() const;
  DecoderConfig decoder() const;
};

struct TrainConfig {
  std::size_t steps = 1200;
  double lr = 5e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t episodes = 8;       // fixed training set size
  std::size_t val_episodes = 16;  // held-out split for early stopping
  std::size_t val_every = 50;      // 0 disables validation
  std::size_t patience = 0;       // validations without improvement; 0 disables
  std::size_t checkpoint_every = 0;
};

struct DataConfig {
  std::size_t folds = 4;
  std::size_t classes_per_fold = 2;
  std::size_t test_fold = 0;
  double noise = 0.35;
  double jitter = 0.2;        // per-instance signature perturbation
  bool distractor = true;     // query also shows an object of another class
  std::uint64_t world_seed = 7;  // fixes the class signatures
};

enum class FusionNorm { kShots, kMaxVotes };

struct EvalConfig {
  std::size_t episodes = 16;
  std::size_t k = 1;
  double tau = 0.5;
  FusionNorm fusion = FusionNorm::kShots;
  bool inject_ground_truth = false;  // debug: predictions replaced by ground truth
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

RunConfig desk_preset();
RunConfig full_preset();
RunConfig preset(const std::string& name);

nlohmann::json to_json(const RunConfig& config);
// Starts from json["preset"] (default "desk") and overlays the remaining
// keys. Unknown keys and wrong types throw ConfigError naming the field.
RunConfig parse_config(const nlohmann::json& json);
RunConfig load_config(const std::filesystem::path& path);

// Checks every module constraint without allocating tensors. Throws
// ConfigError naming the first violated constraint.
void validate(const ModelConfig& config);

// Symbolic shape ledger from hypercorrelations to the head output.
std::vector<std::pair<std::string, Shape>> shape_trace(const ModelConfig& config);

}  // namespace vat
