#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "vat/config.hpp"
#include "vat/correlation.hpp"
#include "vat/decoder.hpp"

namespace vat {

struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // row-major, 0 or 1

  static Mask zeros(std::size_t height, std::size_t width);
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

template <typename T>
Tensor<T> to_tensor(const Mask& mask);
// PGM (P5): foreground 255, background 0.
void write_pgm(const std::filesystem::path& path, const Mask& mask);

using LayerMaps = std::map<int, Tensor<float>>;  // layer index -> [h, w, c]

// K-shot segmentation task at feature level.
struct Episode {
  std::uint64_t seed = 0;
  int class_id = 0;
  std::size_t fold = 0;
  LayerMaps query;
  std::vector<LayerMaps> supports;
  std::vector<Mask> support_masks;
  Mask query_mask;
  std::map<int, std::vector<int>> groups;

  std::size_t shots() const { return supports.size(); }
  FeaturePyramid<float> pyramid(std::size_t shot) const;
};

enum class Split { kTrain, kTest };

// Classes are numbered fold-major: fold f owns
// [f * classes_per_fold, (f + 1) * classes_per_fold). The test split is the
// test fold; the train split is every other fold.
std::vector<int> split_classes(const DataConfig& data, Split split);
std::size_t fold_of(const DataConfig& data, int class_id);

// Deterministic in (data, model, class_id, shots, seed). Objects of the class
// carry a class signature (plus instance jitter) in every feature layer;
// background cells carry random vectors; all cells get additive noise.
Episode generate_episode(const DataConfig& data, const ModelConfig& model, int class_id, std::size_t shots,
                         std::uint64_t seed);

// Seed of the i-th episode of a stream.
std::uint64_t episode_seed(std::uint64_t base, std::uint64_t index);

// `count` episodes of the split, classes cycling in order.
std::vector<Episode> episode_set(const DataConfig& data, const ModelConfig& model, Split split, std::size_t count,
                                 std::size_t shots, std::uint64_t base_seed);

// Writes one feature-pyramid directory per shot plus the query mask.
void save_episode(const std::filesystem::path& dir, const Episode& episode);

// Dense-correspondence task: the support is the query scene translated by a
// sub-cell displacement; keypoints are in flow-grid cells.
struct CorrespondenceEpisode {
  std::uint64_t seed = 0;
  LayerMaps query;
  LayerMaps support;
  std::map<int, std::vector<int>> groups;
  std::size_t image = 0;
  std::array<std::size_t, 2> grid{};  // flow grid extents
  std::vector<Keypoint> query_keypoints;
  std::vector<Keypoint> support_keypoints;

  FeaturePyramid<float> pyramid() const;
};

CorrespondenceEpisode generate_correspondence_episode(const DataConfig& data, const ModelConfig& model,
                                                      std::size_t keypoints, std::uint64_t seed);

// Pixel is foreground iff votes / K >= tau (kShots), or
// votes / max_votes >= tau (kMaxVotes, all background when no votes).
Mask kshot_fuse(std::span<const Mask> masks, double tau, FusionNorm norm);

struct IouCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

class MetricAccumulator {
 public:
  void add(int class_id, const Mask& prediction, const Mask& truth);
  void add_keypoints(std::span<const Keypoint> predicted, std::span<const Keypoint> truth, double alpha,
                     double normalizer);
  void merge(const MetricAccumulator& other);

  // Mean IoU over classes with a non-empty union.
  double miou() const;
  // Mean of the foreground and background IoU, classes pooled.
  double fbiou() const;
  double pck(double alpha) const;
  std::map<int, double> class_iou() const;

  const std::map<int, IouCounts>& classes() const { return classes_; }
  const IouCounts& foreground() const { return fg_; }
  const IouCounts& background() const { return bg_; }

 private:
  std::map<int, IouCounts> classes_;
  IouCounts fg_, bg_;
  std::map<double, std::pair<std::uint64_t, std::uint64_t>> keypoints_;  // alpha -> (correct, total)
};

// Fraction of keypoints whose error is at most alpha * normalizer.
double pck(std::span<const Keypoint> predicted, std::span<const Keypoint> truth, double alpha, double normalizer);

}  // namespace vat
