#include "vat/run.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "vat/memory.hpp"

namespace vat {

std::uint64_t stream_seed(std::uint64_t run_seed, Stream stream, std::uint64_t salt) {
  return episode_seed(episode_seed(run_seed, static_cast<std::uint64_t>(stream)), salt);
}

namespace {

constexpr std::size_t kKeypoints = 8;
const std::vector<double> kAlphas{0.05, 0.1, 0.15};

std::vector<CorrespondenceEpisode> correspondence_set(const RunConfig& c, Stream stream, std::size_t count) {
  std::vector<CorrespondenceEpisode> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(generate_correspondence_episode(c.data, c.model, kKeypoints, stream_seed(c.seed, stream, i)));
  }
  return out;
}

void write_lines(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

}  // namespace

TrainOutcome run_train(const RunConfig& config, const std::filesystem::path& out, std::ostream* progress) {
  validate(config.model);
  if (!out.empty()) std::filesystem::create_directories(out);
  TrainOutcome outcome;
  outcome.model = std::make_unique<VatModel<float>>(config.model, config.seed);
  auto& model = *outcome.model;
  AdamW<float> optimizer(model.params(), AdamW<float>::from(config.train));

  std::vector<Episode> train_set, val_set;
  std::vector<CorrespondenceEpisode> flow_train, flow_val;
  TrainHooks hooks;
  if (config.model.head == HeadKind::kMask) {
    train_set = episode_set(config.data, config.model, Split::kTrain, config.train.episodes, 1,
                            stream_seed(config.seed, Stream::kTrain));
    val_set = episode_set(config.data, config.model, Split::kTrain, config.train.val_episodes, 1,
                          stream_seed(config.seed, Stream::kValidation));
    hooks = segmentation_hooks(model, train_set, val_set);
  } else {
    flow_train = correspondence_set(config, Stream::kTrain, config.train.episodes);
    flow_val = correspondence_set(config, Stream::kValidation, config.train.val_episodes);
    hooks = flow_hooks(model, flow_train, flow_val);
  }

  std::ostringstream loss_log;
  loss_log << std::setprecision(9);
  hooks.on_step = [&](std::size_t step, double loss) {
    loss_log << step << ' ' << loss << '\n';
    if (progress && (step % 50 == 0 || step + 1 == config.train.steps)) {
      *progress << "step " << step << " loss " << loss << std::endl;
    }
    const std::size_t done = step + 1;
    if (!out.empty() && config.train.checkpoint_every > 0 && done % config.train.checkpoint_every == 0) {
      save_checkpoint(out / ("checkpoint-step" + std::to_string(done) + ".vat"), config, model.params(), &optimizer,
                      done);
    }
  };

  try {
    outcome.log = train(model.params(), optimizer, config.train, hooks);
  } catch (const NonFiniteLoss& e) {
    if (!out.empty()) {
      const auto dump = out / ("nonfinite-seed" + std::to_string(e.episode_seed()));
      for (const auto& ep : train_set) {
        if (ep.seed == e.episode_seed()) save_episode(dump, ep);
      }
      write_lines(out / "loss.log", loss_log.str());
    }
    throw;
  }

  if (!out.empty()) {
    write_lines(out / "loss.log", loss_log.str());
    std::ostringstream val;
    val << std::setprecision(9);
    for (const auto& [step, score] : outcome.log.validation) val << step << ' ' << score << '\n';
    write_lines(out / "validation.log", val.str());
    save_checkpoint(out / "checkpoint.vat", config, model.params(), &optimizer, outcome.log.losses.size());
  }
  return outcome;
}

std::unique_ptr<VatModel<float>> load_model(const RunConfig& config, const std::filesystem::path& checkpoint) {
  const auto ck = read_checkpoint(checkpoint);
  auto model = std::make_unique<VatModel<float>>(config.model, config.seed);
  restore_checkpoint(ck, model->params(), nullptr);
  return model;
}

nlohmann::json run_eval(const RunConfig& config, const VatModel<float>& model, const std::filesystem::path& mask_dir) {
  nlohmann::json report;
  report["preset"] = config.preset;
  report["seed"] = config.seed;
  report["aggregator"] = to_string(config.model.aggregator);
  report["episodes"] = config.eval.episodes;

  if (config.model.head == HeadKind::kFlow) {
    const auto episodes = correspondence_set(config, Stream::kEvaluation, config.eval.episodes);
    const auto acc = evaluate_flow(model, episodes, kAlphas);
    nlohmann::json pck = nlohmann::json::object();
    for (double a : kAlphas) {
      std::ostringstream key;
      key << a;
      pck[key.str()] = acc.pck(a);
    }
    report["head"] = "flow";
    report["pck"] = pck;
    return report;
  }

  report["head"] = "mask";
  report["k"] = config.eval.k;
  report["tau"] = config.eval.tau;
  report["fusion"] = config.eval.fusion == FusionNorm::kShots ? "shots" : "max-votes";
  report["test_fold"] = config.data.test_fold;
  if (!mask_dir.empty()) std::filesystem::create_directories(mask_dir);

  nlohmann::json folds = nlohmann::json::array();
  MetricAccumulator test_acc;
  for (std::size_t f = 0; f < config.data.folds; ++f) {
    std::vector<int> classes;
    for (std::size_t c = 0; c < config.data.classes_per_fold; ++c) classes.push_back(int(f * config.data.classes_per_fold + c));
    MetricAccumulator acc;
    for (std::size_t i = 0; i < config.eval.episodes; ++i) {
      const int cls = classes[i % classes.size()];
      const auto ep = generate_episode(config.data, config.model, cls, config.eval.k,
                                       stream_seed(config.seed, Stream::kEvaluation, f * 1000003 + i));
      const auto pred = predict_episode(model, ep, config.eval);
      acc.add(ep.class_id, pred.fused, ep.query_mask);
      if (!mask_dir.empty()) {
        write_pgm(mask_dir / ("fold" + std::to_string(f) + "-episode" + std::to_string(i) + ".pgm"), pred.fused);
      }
    }
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, iou] : acc.class_iou()) per_class[std::to_string(c)] = iou;
    folds.push_back({{"fold", f},
                     {"role", f == config.data.test_fold ? "test" : "train"},
                     {"miou", acc.miou()},
                     {"fbiou", acc.fbiou()},
                     {"class_iou", per_class}});
    if (f == config.data.test_fold) test_acc = acc;
  }
  report["folds"] = folds;
  double mean = 0;
  for (const auto& f : folds) mean += f["miou"].get<double>();
  report["mean_fold_miou"] = mean / double(folds.size());
  report["test_miou"] = test_acc.miou();
  report["test_fbiou"] = test_acc.fbiou();
  return report;
}

std::string format_report(const nlohmann::json& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  if (r.at("head") == "flow") {
    os << "PCK";
    for (const auto& [alpha, v] : r.at("pck").items()) os << "  alpha=" << alpha << ": " << v.get<double>();
    os << '\n';
    return os.str();
  }
  os << "k=" << r.at("k").get<std::size_t>() << " tau=" << r.at("tau").get<double>()
     << " aggregator=" << r.at("aggregator").get<std::string>() << '\n';
  for (const auto& f : r.at("folds")) os << std::setw(10) << ("fold" + std::to_string(f.at("fold").get<int>()));
  os << std::setw(10) << "mean" << std::setw(10) << "FB-IoU" << '\n';
  for (const auto& f : r.at("folds")) os << std::setw(10) << f.at("miou").get<double>();
  os << std::setw(10) << r.at("mean_fold_miou").get<double>() << std::setw(10) << r.at("test_fbiou").get<double>()
     << '\n';
  os << "test fold " << r.at("test_fold").get<std::size_t>() << ": mIoU " << r.at("test_miou").get<double>()
     << ", FB-IoU " << r.at("test_fbiou").get<double>() << '\n';
  os << "class IoU:";
  for (const auto& f : r.at("folds")) {
    for (const auto& [c, v] : f.at("class_iou").items()) os << "  " << c << '=' << v.get<double>();
  }
  os << '\n';
  return os.str();
}

std::vector<BenchRow> run_bench(const RunConfig& config, const std::vector<Aggregator>& aggregators,
                                std::size_t repeats) {
  if (repeats == 0) throw ConfigError("bench: repeats must be positive");
  const auto episode = generate_episode(config.data, config.model, split_classes(config.data, Split::kTest).front(), 1,
                                        stream_seed(config.seed, Stream::kEvaluation));
  const auto pyramid = episode.pyramid(0);
  std::vector<BenchRow> rows;
  for (Aggregator agg : aggregators) {
    ModelConfig mc = config.model;
    mc.aggregator = agg;
    VatModel<float> model(mc, config.seed);
    NoGradGuard guard;
    (void)model.forward(pyramid);  // warm-up
    std::vector<double> times;
    std::size_t peak = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
      memory::reset_peak();
      const auto start = std::chrono::steady_clock::now();
      const auto out = model.forward(pyramid);
      const auto stop = std::chrono::steady_clock::now();
      peak = std::max(peak, memory::peak_bytes());
      times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    const double median = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    const std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * double(n)));
    rows.push_back({agg, repeats, median, times[std::max<std::size_t>(rank, 1) - 1], peak});
  }
  return rows;
}

nlohmann::json bench_report(const RunConfig& config, const std::vector<BenchRow>& rows) {
  nlohmann::json r;
  r["label"] = kBenchLabel;
  r["preset"] = config.preset;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& row : rows) {
    list.push_back({{"aggregator", to_string(row.aggregator)},
                    {"repeats", row.repeats},
                    {"median_ms", row.median_ms},
                    {"p95_ms", row.p95_ms},
                    {"peak_tensor_bytes", row.peak_bytes}});
  }
  r["rows"] = list;
  return r;
}

}  // namespace vat
