#include "vat/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "vat/errors.hpp"
#include "vat/serialize.hpp"

namespace vat {

Mask Mask::zeros(std::size_t height, std::size_t width) {
  return {height, width, std::vector<std::uint8_t>(height * width, 0)};
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

template <typename T>
Tensor<T> to_tensor(const Mask& mask) {
  std::vector<T> v(mask.values.begin(), mask.values.end());
  return Tensor<T>::from({mask.height, mask.width}, std::move(v));
}

template Tensor<float> to_tensor<float>(const Mask&);
template Tensor<double> to_tensor<double>(const Mask&);

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  for (auto v : mask.values) out.put(static_cast<char>(v ? 255 : 0));
  if (!out) throw FormatError("failed writing " + path.string());
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::vector<float> random_vector(Rng& rng, std::size_t c, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> v(c);
  for (auto& x : v) x = static_cast<float>(normal(rng) * scale / std::sqrt(double(c)));
  return v;
}

std::vector<float> unit(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += double(x) * x;
  n = std::sqrt(n);
  for (auto& x : v) x = static_cast<float>(x / std::max(n, 1e-12));
  return v;
}

std::vector<float> class_signature(const DataConfig& data, int class_id, int layer, std::size_t channels) {
  Rng rng(splitmix64(data.world_seed ^ splitmix64((std::uint64_t(class_id) << 20) + std::uint64_t(layer))));
  return unit(random_vector(rng, channels, 1.0));
}

std::vector<float> instance_signature(const std::vector<float>& signature, double jitter, Rng& rng) {
  auto noise = random_vector(rng, signature.size(), jitter);
  for (std::size_t i = 0; i < signature.size(); ++i) noise[i] += signature[i];
  return unit(std::move(noise));
}

// Filled axis-aligned ellipse on an S x S label map.
void draw_ellipse(std::vector<std::uint8_t>& labels, std::size_t side, std::uint8_t label, Rng& rng) {
  const double s = static_cast<double>(side);
  std::uniform_real_distribution<double> centre(0.2 * s, 0.8 * s), radius(0.15 * s, 0.3 * s);
  const double cx = centre(rng), cy = centre(rng), rx = radius(rng), ry = radius(rng);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) labels[y * side + x] = label;
    }
  }
}

struct SceneObject {
  std::uint8_t label;
  int class_id;
};

// Features of one image: every cell mixes the background vector and the
// object signatures by area fraction, then gets noise.
LayerMaps render(const DataConfig& data, const ModelConfig& model, const std::vector<std::uint8_t>& labels,
                 const std::vector<SceneObject>& objects, Rng& rng) {
  const std::size_t side = model.image;
  LayerMaps maps;
  for (const auto& spec : model.layers) {
    const std::size_t h = spec.height, w = spec.width, c = spec.channels;
    std::vector<std::vector<float>> signatures;
    for (const auto& obj : objects) {
      signatures.push_back(instance_signature(class_signature(data, obj.class_id, spec.layer, c), data.jitter, rng));
    }
    auto t = Tensor<float>::zeros({h, w, c});
    auto out = t.data();
    for (std::size_t i = 0; i < h; ++i) {
      const std::size_t y0 = i * side / h, y1 = std::max(y0 + 1, (i + 1) * side / h);
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t x0 = j * side / w, x1 = std::max(x0 + 1, (j + 1) * side / w);
        std::vector<double> fraction(objects.size() + 1, 0.0);
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) {
            const auto l = labels[y * side + x];
            std::size_t slot = 0;
            for (std::size_t o = 0; o < objects.size(); ++o) {
              if (objects[o].label == l) slot = o + 1;
            }
            fraction[slot] += 1.0;
          }
        }
        const double area = double((y1 - y0) * (x1 - x0));
        const auto background = random_vector(rng, c, 1.0);
        const auto noise = random_vector(rng, c, data.noise);
        float* cell = &out[(i * w + j) * c];
        for (std::size_t k = 0; k < c; ++k) {
          double v = fraction[0] / area * background[k] + noise[k];
          for (std::size_t o = 0; o < objects.size(); ++o) v += fraction[o + 1] / area * signatures[o][k];
          cell[k] = static_cast<float>(v);
        }
      }
    }
    maps.emplace(spec.layer, std::move(t));
  }
  return maps;
}

std::map<int, std::vector<int>> groups_of(const ModelConfig& model) {
  std::map<int, std::vector<int>> groups;
  for (const auto& lv : model.levels) groups[lv.level] = lv.layers;
  return groups;
}

FeaturePyramid<float> assemble(const LayerMaps& query, const LayerMaps& support, Tensor<float> mask,
                               const std::map<int, std::vector<int>>& groups) {
  FeaturePyramid<float> p;
  for (const auto& [layer, q] : query) p.layers.push_back({layer, q, support.at(layer)});
  p.support_mask = std::move(mask);
  p.groups = groups;
  return p;
}

}  // namespace

FeaturePyramid<float> Episode::pyramid(std::size_t shot) const {
  if (shot >= supports.size()) {
    throw ConfigError("episode has " + std::to_string(supports.size()) + " shots, asked for shot " + std::to_string(shot));
  }
  return assemble(query, supports[shot], to_tensor<float>(support_masks[shot]), groups);
}

std::vector<int> split_classes(const DataConfig& data, Split split) {
  std::vector<int> out;
  for (std::size_t f = 0; f < data.folds; ++f) {
    if ((f == data.test_fold) != (split == Split::kTest)) continue;
    for (std::size_t c = 0; c < data.classes_per_fold; ++c) out.push_back(int(f * data.classes_per_fold + c));
  }
  if (out.empty()) throw ConfigError("data: the requested split has no classes (need folds >= 2 for training)");
  return out;
}

std::size_t fold_of(const DataConfig& data, int class_id) {
  if (class_id < 0 || std::size_t(class_id) >= data.folds * data.classes_per_fold) {
    throw ConfigError("class id " + std::to_string(class_id) + " out of range");
  }
  return std::size_t(class_id) / data.classes_per_fold;
}

std::uint64_t episode_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(splitmix64(base) + index);
}

Episode generate_episode(const DataConfig& data, const ModelConfig& model, int class_id, std::size_t shots,
                         std::uint64_t seed) {
  if (shots == 0) throw ConfigError("episode needs at least one shot");
  const std::size_t fold = fold_of(data, class_id);
  Rng rng(seed);
  // Distractors come from the same split so held-out classes never leak into training.
  std::vector<int> pool;
  for (int c : split_classes(data, fold == data.test_fold ? Split::kTest : Split::kTrain)) {
    if (c != class_id) pool.push_back(c);
  }
  const bool distractor = data.distractor && !pool.empty();

  const std::size_t side = model.image;
  auto scene = [&](Mask& mask) {
    std::vector<std::uint8_t> labels(side * side, 0);
    std::vector<SceneObject> objects{{1, class_id}};
    if (distractor) {
      const int other = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      draw_ellipse(labels, side, 2, rng);
      objects.push_back({2, other});
    }
    draw_ellipse(labels, side, 1, rng);
    mask = Mask::zeros(side, side);
    for (std::size_t i = 0; i < labels.size(); ++i) mask.values[i] = labels[i] == 1;
    return render(data, model, labels, objects, rng);
  };

  Episode e;
  e.seed = seed;
  e.class_id = class_id;
  e.fold = fold;
  e.groups = groups_of(model);
  e.query = scene(e.query_mask);
  e.supports.resize(shots);
  e.support_masks.resize(shots);
  for (std::size_t k = 0; k < shots; ++k) e.supports[k] = scene(e.support_masks[k]);
  return e;
}

std::vector<Episode> episode_set(const DataConfig& data, const ModelConfig& model, Split split, std::size_t count,
                                 std::size_t shots, std::uint64_t base_seed) {
  const auto classes = split_classes(data, split);
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(generate_episode(data, model, classes[i % classes.size()], shots, episode_seed(base_seed, i)));
  }
  return out;
}

void save_episode(const std::filesystem::path& dir, const Episode& episode) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < episode.shots(); ++k) save_pyramid(dir / ("shot" + std::to_string(k)), episode.pyramid(k));
  save_tensor(dir / "query_mask.vt", "query_mask", to_tensor<float>(episode.query_mask));
}

FeaturePyramid<float> CorrespondenceEpisode::pyramid() const {
  return assemble(query, support, Tensor<float>::full({image, image}, 1.0f), groups);
}

CorrespondenceEpisode generate_correspondence_episode(const DataConfig& data, const ModelConfig& model,
                                                      std::size_t keypoints, std::uint64_t seed) {
  if (keypoints == 0) throw ConfigError("correspondence episode needs at least one keypoint");
  Rng rng(seed);
  const double side = static_cast<double>(model.image);
  std::uniform_real_distribution<double> shift(-side / 8, side / 8), phase(0, 2 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(-3, 3);
  const double dx = shift(rng), dy = shift(rng);

  CorrespondenceEpisode e;
  e.seed = seed;
  e.groups = groups_of(model);
  e.image = model.image;
  // Smooth random field per layer: a few sinusoids per channel.
  constexpr int kWaves = 4;
  for (const auto& spec : model.layers) {
    const std::size_t c = spec.channels;
    std::vector<std::array<double, 3>> waves(c * kWaves);
    for (auto& w : waves) w = {double(freq(rng)), double(freq(rng)), phase(rng)};
    auto field = [&](double x, double y, std::size_t k) {
      double v = 0;
      for (int m = 0; m < kWaves; ++m) {
        const auto& w = waves[k * kWaves + m];
        v += std::sin(2 * std::numbers::pi * (w[0] * x + w[1] * y) / side + w[2]);
      }
      return v / std::sqrt(double(kWaves));
    };
    auto q = Tensor<float>::zeros({spec.height, spec.width, c});
    auto s = Tensor<float>::zeros({spec.height, spec.width, c});
    std::normal_distribution<double> noise(0.0, data.noise);
    for (std::size_t i = 0; i < spec.height; ++i) {
      for (std::size_t j = 0; j < spec.width; ++j) {
        const double x = (j + 0.5) * side / spec.width, y = (i + 0.5) * side / spec.height;
        for (std::size_t k = 0; k < c; ++k) {
          q.data()[(i * spec.width + j) * c + k] = static_cast<float>(field(x, y, k) + noise(rng));
          s.data()[(i * spec.width + j) * c + k] = static_cast<float>(field(x - dx, y - dy, k) + noise(rng));
        }
      }
    }
    e.query.emplace(spec.layer, std::move(q));
    e.support.emplace(spec.layer, std::move(s));
  }
  const auto& finest = model.levels.back().target;
  e.grid = {finest[0], finest[1]};
  std::uniform_int_distribution<std::size_t> row(0, e.grid[0] - 1), col(0, e.grid[1] - 1);
  for (std::size_t k = 0; k < keypoints; ++k) {
    const Keypoint kp{double(col(rng)), double(row(rng))};
    e.query_keypoints.push_back(kp);
    e.support_keypoints.push_back({kp.x + dx * e.grid[1] / side, kp.y + dy * e.grid[0] / side});
  }
  return e;
}

Mask kshot_fuse(std::span<const Mask> masks, double tau, FusionNorm norm) {
  if (masks.empty()) throw ConfigError("kshot_fuse: need at least one mask");
  if (!(tau > 0 && tau <= 1)) throw ConfigError("kshot_fuse: tau must lie in (0, 1]");
  const auto& first = masks.front();
  std::vector<std::size_t> votes(first.values.size(), 0);
  for (const auto& m : masks) {
    if (m.height != first.height || m.width != first.width || m.values.size() != votes.size()) {
      throw ShapeError("kshot_fuse: mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                       " does not match " + std::to_string(first.height) + "x" + std::to_string(first.width));
    }
    for (std::size_t i = 0; i < votes.size(); ++i) votes[i] += m.values[i] ? 1 : 0;
  }
  double denom = double(masks.size());
  if (norm == FusionNorm::kMaxVotes) denom = double(*std::max_element(votes.begin(), votes.end()));
  Mask fused = Mask::zeros(first.height, first.width);
  if (denom == 0) return fused;
  for (std::size_t i = 0; i < votes.size(); ++i) fused.values[i] = double(votes[i]) / denom >= tau;
  return fused;
}

namespace {
void count(IouCounts& c, bool pred, bool truth) {
  c.intersection += pred && truth;
  c.union_ += pred || truth;
}

std::size_t count_correct(std::span<const Keypoint> predicted, std::span<const Keypoint> truth, double alpha,
                          double normalizer) {
  if (truth.empty()) throw ConfigError("pck: zero keypoints");
  if (predicted.size() != truth.size()) {
    throw ShapeError("pck: " + std::to_string(predicted.size()) + " predictions for " + std::to_string(truth.size()) +
                     " keypoints");
  }
  if (!(alpha > 0) || !(normalizer > 0)) throw ConfigError("pck: alpha and normalizer must be positive");
  const double threshold = alpha * normalizer;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    correct += std::hypot(predicted[i].x - truth[i].x, predicted[i].y - truth[i].y) <= threshold;
  }
  return correct;
}
}  // namespace

void MetricAccumulator::add(int class_id, const Mask& prediction, const Mask& truth) {
  if (prediction.height != truth.height || prediction.width != truth.width ||
      prediction.values.size() != truth.values.size()) {
    throw ShapeError("metric: prediction " + std::to_string(prediction.height) + "x" + std::to_string(prediction.width) +
                     " vs truth " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  }
  auto& cls = classes_[class_id];
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    const bool p = prediction.values[i] != 0, t = truth.values[i] != 0;
    count(cls, p, t);
    count(fg_, p, t);
    count(bg_, !p, !t);
  }
}

void MetricAccumulator::add_keypoints(std::span<const Keypoint> predicted, std::span<const Keypoint> truth,
                                      double alpha, double normalizer) {
  const std::size_t hits = count_correct(predicted, truth, alpha, normalizer);
  auto& [correct, total] = keypoints_[alpha];
  correct += hits;
  total += truth.size();
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
  for (const auto& [c, counts] : other.classes_) {
    classes_[c].intersection += counts.intersection;
    classes_[c].union_ += counts.union_;
  }
  fg_.intersection += other.fg_.intersection;
  fg_.union_ += other.fg_.union_;
  bg_.intersection += other.bg_.intersection;
  bg_.union_ += other.bg_.union_;
  for (const auto& [alpha, ct] : other.keypoints_) {
    keypoints_[alpha].first += ct.first;
    keypoints_[alpha].second += ct.second;
  }
}

std::map<int, double> MetricAccumulator::class_iou() const {
  std::map<int, double> out;
  for (const auto& [c, counts] : classes_) {
    if (counts.union_ > 0) out[c] = double(counts.intersection) / double(counts.union_);
  }
  return out;
}

double MetricAccumulator::miou() const {
  const auto ious = class_iou();
  if (ious.empty()) throw ConfigError("miou: no class with a non-empty union");
  double sum = 0;
  for (const auto& [_, v] : ious) sum += v;
  return sum / double(ious.size());
}

double MetricAccumulator::fbiou() const {
  double sum = 0;
  int n = 0;
  for (const auto* c : {&fg_, &bg_}) {
    if (c->union_ > 0) {
      sum += double(c->intersection) / double(c->union_);
      ++n;
    }
  }
  if (n == 0) throw ConfigError("fbiou: empty accumulator");
  return sum / n;
}

double MetricAccumulator::pck(double alpha) const {
  auto it = keypoints_.find(alpha);
  if (it == keypoints_.end() || it->second.second == 0) throw ConfigError("pck: no keypoints recorded at this alpha");
  return double(it->second.first) / double(it->second.second);
}

double pck(std::span<const Keypoint> predicted, std::span<const Keypoint> truth, double alpha, double normalizer) {
  return double(count_correct(predicted, truth, alpha, normalizer)) / double(truth.size());
}

}  // namespace vat
