#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "vat/episodes.hpp"
#include "vat/model.hpp"

namespace vat {

// Adam with decoupled weight decay. Each step first shrinks every parameter
// by lr * weight_decay, then applies the bias-corrected moment update.
template <typename T>
class AdamW {
 public:
  struct Options {
    double lr = 5e-4;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamW(const ParamSet<T>& params, Options options);
  static Options from(const TrainConfig& config);

  void step();
  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t steps) { steps_ = steps; }
  const Options& options() const { return options_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  ParamSet<T> params_;
  Options options_;
  std::size_t steps_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Thrown when a training loss is not finite.
class NonFiniteLoss : public NumericError {
 public:
  NonFiniteLoss(std::size_t step, std::uint64_t episode_seed);
  std::size_t step() const { return step_; }
  std::uint64_t episode_seed() const { return seed_; }

 private:
  std::size_t step_;
  std::uint64_t seed_;
};

struct TrainLog {
  std::vector<double> losses;                             // one per executed step
  std::vector<std::pair<std::size_t, double>> validation;  // (steps done, score)
  std::size_t best_step = 0;
  double best_score = 0.0;
  bool stopped_early = false;
};

struct TrainHooks {
  // Loss of step `step`; must be a scalar built with gradients enabled.
  std::function<Tensor<float>(std::size_t step)> loss;
  // Seed of the episode used at `step` (for diagnostics).
  std::function<std::uint64_t(std::size_t step)> episode_seed;
  // Higher is better. Empty disables validation and early stopping.
  std::function<double()> validate;
  std::function<void(std::size_t step, double loss)> on_step;
};

// Runs config.steps optimizer steps. With validation, the parameters of the
// best-scoring validation are restored at the end and training stops after
// `patience` validations without improvement (0 = never). Validation runs
// every config.val_every steps; 0 disables it.
TrainLog train(ParamSet<float>& params, AdamW<float>& optimizer, const TrainConfig& config, const TrainHooks& hooks);

// Inputs of one model evaluation, with the parameter-free hypercorrelations
// precomputed.
struct PreparedShot {
  std::vector<Tensor<float>> hypercorrelations;
  std::vector<Tensor<float>> features;
};

PreparedShot prepare(const VatModel<float>& model, const FeaturePyramid<float>& pyramid);

// Mean per-pixel cross-entropy of the logits against a binary mask.
Tensor<float> mask_loss(const Tensor<float>& logits, const Mask& truth);
// Mean endpoint error of the flow at the query keypoints.
Tensor<float> flow_loss(const Tensor<float>& flow, const CorrespondenceEpisode& episode);

TrainHooks segmentation_hooks(VatModel<float>& model, const std::vector<Episode>& train_set,
                              const std::vector<Episode>& val_set);
TrainHooks flow_hooks(VatModel<float>& model, const std::vector<CorrespondenceEpisode>& train_set,
                      const std::vector<CorrespondenceEpisode>& val_set);

Mask predict_shot(const VatModel<float>& model, const PreparedShot& shot);

struct EpisodePrediction {
  std::vector<Mask> shots;
  Mask fused;
};

EpisodePrediction predict_episode(const VatModel<float>& model, const Episode& episode, const EvalConfig& eval);

// Accumulates fused predictions over the episodes. With
// eval.inject_ground_truth the model is bypassed and every shot predicts the
// query ground truth.
MetricAccumulator evaluate(const VatModel<float>& model, const std::vector<Episode>& episodes, const EvalConfig& eval);

// PCK over correspondence episodes at each alpha, normalized by the flow-grid side.
MetricAccumulator evaluate_flow(const VatModel<float>& model, const std::vector<CorrespondenceEpisode>& episodes,
                                const std::vector<double>& alphas);

}  // namespace vat
