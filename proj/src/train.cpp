#include "vat/train.hpp"

#include <cmath>

#include "vat/ops.hpp"

namespace vat {

template <typename T>
AdamW<T>::AdamW(const ParamSet<T>& params, Options options) : params_(params), options_(options) {
  for (const auto& [_, p] : params_.entries()) {
    m_.push_back(Tensor<T>::zeros(p.shape()));
    v_.push_back(Tensor<T>::zeros(p.shape()));
  }
}

template <typename T>
typename AdamW<T>::Options AdamW<T>::from(const TrainConfig& c) {
  return {c.lr, c.weight_decay, c.beta1, c.beta2, c.eps};
}

template <typename T>
void AdamW<T>::step() {
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(steps_)), c2 = 1.0 - std::pow(b2, double(steps_));
  const T lr = T(options_.lr), decay = T(options_.lr * options_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> p = params_.entries()[i].second;
    auto w = p.data();
    auto g = p.grad();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T grad = g.empty() ? T(0) : g[j];
      w[j] -= decay * w[j];
      m[j] = T(b1) * m[j] + T(1 - b1) * grad;
      v[j] = T(b2) * v[j] + T(1 - b2) * grad * grad;
      const T m_hat = m[j] / T(c1), v_hat = v[j] / T(c2);
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + T(options_.eps));
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

NonFiniteLoss::NonFiniteLoss(std::size_t step, std::uint64_t episode_seed)
    : NumericError("non-finite loss at step " + std::to_string(step) + " (episode seed " +
                   std::to_string(episode_seed) + ")"),
      step_(step),
      seed_(episode_seed) {}

namespace {

std::vector<std::vector<float>> snapshot(const ParamSet<float>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& [_, p] : params.entries()) out.push_back(p.to_vector());
  return out;
}

void restore(ParamSet<float>& params, const std::vector<std::vector<float>>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    Tensor<float> p = params.entries()[i].second;
    std::copy(values[i].begin(), values[i].end(), p.data().begin());
  }
}

}  // namespace

TrainLog train(ParamSet<float>& params, AdamW<float>& optimizer, const TrainConfig& config, const TrainHooks& hooks) {
  TrainLog log;
  std::vector<std::vector<float>> best;
  std::size_t stale = 0;
  auto run_validation = [&](std::size_t done) {
    const double score = hooks.validate();
    log.validation.emplace_back(done, score);
    if (best.empty() || score > log.best_score) {
      log.best_score = score;
      log.best_step = done;
      best = snapshot(params);
      stale = 0;
    } else {
      ++stale;
    }
  };
  const bool validating = hooks.validate && config.val_every > 0;
  if (validating) run_validation(0);

  for (std::size_t step = 0; step < config.steps; ++step) {
    params.zero_grad();
    Tensor<float> loss;
    double value = 0;
    try {
      loss = hooks.loss(step);
      value = loss.item();
      if (!std::isfinite(value)) throw NumericError("loss");
      backward(loss);
    } catch (const NumericError&) {
      throw NonFiniteLoss(step, hooks.episode_seed ? hooks.episode_seed(step) : 0);
    }
    optimizer.step();
    log.losses.push_back(value);
    if (hooks.on_step) hooks.on_step(step, value);
    if (validating && (step + 1) % config.val_every == 0) {
      run_validation(step + 1);
      if (config.patience > 0 && stale >= config.patience) {
        log.stopped_early = true;
        break;
      }
    }
  }
  if (validating && !best.empty()) restore(params, best);
  return log;
}

PreparedShot prepare(const VatModel<float>& model, const FeaturePyramid<float>& pyramid) {
  NoGradGuard guard;
  return {model.hypercorrelations(pyramid), model.stage_features(pyramid)};
}

Tensor<float> mask_loss(const Tensor<float>& logits, const Mask& truth) {
  if (logits.rank() != 3 || logits.dim(0) != truth.height || logits.dim(1) != truth.width || logits.dim(2) != 2) {
    throw ShapeError("mask_loss: logits " + to_string(logits.shape()) + " vs mask " + std::to_string(truth.height) +
                     "x" + std::to_string(truth.width));
  }
  std::vector<int> labels(truth.values.begin(), truth.values.end());
  return ops::softmax_cross_entropy(ops::reshape(logits, {truth.height * truth.width, 2}), std::span<const int>(labels));
}

Tensor<float> flow_loss(const Tensor<float>& flow, const CorrespondenceEpisode& episode) {
  if (flow.rank() != 3 || flow.dim(0) != episode.grid[0] || flow.dim(1) != episode.grid[1] || flow.dim(2) != 2) {
    throw ShapeError("flow_loss: flow " + to_string(flow.shape()) + " does not match the episode grid " +
                     std::to_string(episode.grid[0]) + "x" + std::to_string(episode.grid[1]));
  }
  const std::size_t n = episode.query_keypoints.size();
  std::vector<std::size_t> cells;
  std::vector<float> target;
  const long h = long(flow.dim(0)), w = long(flow.dim(1));
  for (std::size_t k = 0; k < n; ++k) {
    const auto& q = episode.query_keypoints[k];
    const auto& s = episode.support_keypoints[k];
    const long row = std::clamp(std::lround(q.y), 0L, h - 1), col = std::clamp(std::lround(q.x), 0L, w - 1);
    cells.push_back(std::size_t(row * w + col));
    target.push_back(float(s.x - q.x));
    target.push_back(float(s.y - q.y));
  }
  auto sampled = ops::gather_rows(ops::reshape(flow, {flow.dim(0) * flow.dim(1), 2}), std::span<const std::size_t>(cells),
                                  {n, 2});
  auto error = ops::sub(sampled, Tensor<float>::from({n, 2}, std::move(target)));
  return ops::mean(ops::row_norm(error));
}

TrainHooks segmentation_hooks(VatModel<float>& model, const std::vector<Episode>& train_set,
                              const std::vector<Episode>& val_set) {
  if (train_set.empty()) throw ConfigError("training needs at least one episode");
  auto prepared = std::make_shared<std::vector<PreparedShot>>();
  for (const auto& e : train_set) prepared->push_back(prepare(model, e.pyramid(0)));
  TrainHooks hooks;
  hooks.loss = [&model, &train_set, prepared](std::size_t step) {
    const std::size_t i = step % train_set.size();
    const auto& shot = (*prepared)[i];
    return mask_loss(model.forward(shot.hypercorrelations, shot.features), train_set[i].query_mask);
  };
  hooks.episode_seed = [&train_set](std::size_t step) { return train_set[step % train_set.size()].seed; };
  if (!val_set.empty()) {
    hooks.validate = [&model, &val_set] {
      EvalConfig eval;
      return evaluate(model, val_set, eval).miou();
    };
  }
  return hooks;
}

TrainHooks flow_hooks(VatModel<float>& model, const std::vector<CorrespondenceEpisode>& train_set,
                      const std::vector<CorrespondenceEpisode>& val_set) {
  if (train_set.empty()) throw ConfigError("training needs at least one episode");
  auto prepared = std::make_shared<std::vector<PreparedShot>>();
  for (const auto& e : train_set) prepared->push_back(prepare(model, e.pyramid()));
  TrainHooks hooks;
  hooks.loss = [&model, &train_set, prepared](std::size_t step) {
    const std::size_t i = step % train_set.size();
    const auto& shot = (*prepared)[i];
    return flow_loss(model.forward(shot.hypercorrelations, shot.features), train_set[i]);
  };
  hooks.episode_seed = [&train_set](std::size_t step) { return train_set[step % train_set.size()].seed; };
  if (!val_set.empty()) {
    hooks.validate = [&model, &val_set] { return evaluate_flow(model, val_set, {0.1}).pck(0.1); };
  }
  return hooks;
}

Mask predict_shot(const VatModel<float>& model, const PreparedShot& shot) {
  NoGradGuard guard;
  const auto logits = model.forward(shot.hypercorrelations, shot.features);
  return {logits.dim(0), logits.dim(1), hard_mask(logits)};
}

EpisodePrediction predict_episode(const VatModel<float>& model, const Episode& episode, const EvalConfig& eval) {
  if (eval.k > episode.shots()) {
    throw ConfigError("eval.k = " + std::to_string(eval.k) + " exceeds the episode's " +
                      std::to_string(episode.shots()) + " shots");
  }
  EpisodePrediction out;
  for (std::size_t k = 0; k < eval.k; ++k) {
    out.shots.push_back(eval.inject_ground_truth ? episode.query_mask : predict_shot(model, prepare(model, episode.pyramid(k))));
  }
  out.fused = kshot_fuse(out.shots, eval.tau, eval.fusion);
  return out;
}

MetricAccumulator evaluate(const VatModel<float>& model, const std::vector<Episode>& episodes, const EvalConfig& eval) {
  MetricAccumulator acc;
  for (const auto& e : episodes) acc.add(e.class_id, predict_episode(model, e, eval).fused, e.query_mask);
  return acc;
}

MetricAccumulator evaluate_flow(const VatModel<float>& model, const std::vector<CorrespondenceEpisode>& episodes,
                                const std::vector<double>& alphas) {
  MetricAccumulator acc;
  for (const auto& e : episodes) {
    NoGradGuard guard;
    const auto shot = prepare(model, e.pyramid());
    const auto flow = model.forward(shot.hypercorrelations, shot.features);
    const auto moved = transfer_keypoints(flow, e.query_keypoints);
    const double normalizer = double(std::max(e.grid[0], e.grid[1]));
    for (double a : alphas) acc.add_keypoints(moved, e.support_keypoints, a, normalizer);
  }
  return acc;
}

}  // namespace vat
