#include "vat/config.hpp"

#include <fstream>
#include <set>

#include "vat/errors.hpp"

namespace vat {

using nlohmann::json;

const LayerSpec& ModelConfig::layer(int index) const {
  for (const auto& l : layers) {
    if (l.layer == index) return l;
  }
  throw ConfigError("model.layers: no layer " + std::to_string(index));
}

EncoderConfig ModelConfig::encoder() const {
  EncoderConfig e;
  e.dim = dim;
  e.heads = heads;
  e.window = window;
  e.vem_blocks = vem_blocks;
  e.vem_groups = vem_groups;
  e.aggregator = aggregator;
  for (const auto& lv : levels) {
    if (lv.layers.empty()) throw ConfigError("model.levels: level " + std::to_string(lv.level) + " has no layers");
    const auto& first = layer(lv.layers.front());
    e.levels.push_back({lv.level, {first.height, first.width, first.height, first.width}, lv.target,
                        lv.layers.size(), lv.depth});
  }
  return e;
}

DecoderConfig ModelConfig::decoder() const {
  DecoderConfig d;
  d.dim = dim;
  d.heads = decoder_heads;
  d.window = decoder_window;
  d.blocks = decoder_blocks;
  if (levels.empty()) throw ConfigError("model.levels: empty");
  d.extent = {levels.back().target[0], levels.back().target[1]};
  d.stages = decoder_stages;
  for (auto& st : d.stages) st.channels = layer(st.layer).channels;
  d.upsample = head == HeadKind::kMask;
  d.use_affinity = use_affinity;
  d.head = head;
  return d;
}

RunConfig desk_preset() {
  RunConfig c;
  c.preset = "desk";
  auto& m = c.model;
  m.image = 32;
  m.layers = {{1, 4, 4, 8}, {2, 8, 8, 8}, {3, 8, 8, 8}, {4, 16, 16, 8}, {5, 16, 16, 8}, {6, 32, 32, 8}};
  m.levels = {{5, {1}, {2, 2, 4, 4}, 4}, {4, {2, 3}, {4, 4, 4, 4}, 2}, {3, {4, 5}, {8, 8, 4, 4}, 2}};
  m.dim = 16;
  m.heads = 2;
  m.window = 2;
  m.decoder_stages = {{3, 8, 8}, {5, 8, 8}, {6, 8, 4}};
  m.decoder_window = 4;
  m.decoder_heads = 2;
  return c;
}

RunConfig full_preset() {
  RunConfig c;
  c.preset = "full";
  auto& m = c.model;
  m.image = 128;
  // ResNet-101 bottleneck outputs: conv2_x 1-3, conv3_x 4-7, conv4_x 8-30, conv5_x 31-33.
  m.layers.push_back({3, 64, 64, 256});
  std::vector<int> l3, l4, l5;
  for (int l = 4; l <= 7; ++l) {
    m.layers.push_back({l, 32, 32, 512});
    l3.push_back(l);
  }
  for (int l = 8; l <= 30; ++l) {
    m.layers.push_back({l, 16, 16, 1024});
    l4.push_back(l);
  }
  for (int l = 31; l <= 33; ++l) {
    m.layers.push_back({l, 8, 8, 2048});
    l5.push_back(l);
  }
  m.levels = {{5, l5, {8, 8, 8, 8}, 4}, {4, l4, {16, 16, 8, 8}, 2}, {3, l3, {32, 32, 8, 8}, 2}};
  m.dim = 128;
  m.heads = 4;
  m.window = 4;
  m.decoder_stages = {{30, 1024, 64}, {7, 512, 32}, {3, 256, 16}};
  m.decoder_window = 4;
  m.decoder_heads = 4;
  return c;
}

RunConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "full") return full_preset();
  throw ConfigError("preset: unknown preset '" + name + "' (expected desk or full)");
}

namespace {

std::string head_name(HeadKind h) { return h == HeadKind::kMask ? "mask" : "flow"; }
std::string fusion_name(FusionNorm f) { return f == FusionNorm::kShots ? "shots" : "max-votes"; }

json extents_json(const Extents4& e) { return json::array({e[0], e[1], e[2], e[3]}); }

// Typed, path-aware accessors over a fully merged document.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  const json& at(const std::string& key) const {
    if (!j_.contains(key)) throw ConfigError(field(key) + ": missing");
    return j_.at(key);
  }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  std::size_t size(const std::string& key, bool positive = true) const {
    const auto& v = at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0 || (positive && v.get<long long>() == 0)) {
      throw ConfigError(field(key) + ": expected a " + (positive ? "positive" : "non-negative") + " integer");
    }
    return v.get<std::size_t>();
  }
  std::uint64_t u64(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(field(key) + ": expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  int integer(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
    return v.get<int>();
  }
  double number(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    return v.get<double>();
  }
  bool boolean(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    return v.get<std::string>();
  }
  Reader object(const std::string& key) const { return Reader(at(key), field(key)); }
  const json& array(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_array()) throw ConfigError(field(key) + ": expected an array");
    return v;
  }
  Extents4 extents(const std::string& key) const {
    const auto& v = array(key);
    if (v.size() != 4) throw ConfigError(field(key) + ": expected 4 extents");
    Extents4 e{};
    for (std::size_t i = 0; i < 4; ++i) {
      if (!v[i].is_number_integer() || v[i].get<long long>() <= 0) {
        throw ConfigError(field(key) + ": extents must be positive integers");
      }
      e[i] = v[i].get<std::size_t>();
    }
    return e;
  }
  void expect_keys(std::initializer_list<const char*> keys) const {
    std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, _] : j_.items()) {
      if (!known.count(k)) throw ConfigError(field(k) + ": unknown key");
    }
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError((path_.empty() ? std::string("config") : path_) + ": " + what);
  }

 private:
  const json& j_;
  std::string path_;
};

// Overlays `patch` onto `base`; every key in the patch must already exist.
void overlay(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string at = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError(at + ": unknown key");
    if (base[key].is_object()) {
      overlay(base[key], value, at);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  json layers = json::array();
  for (const auto& l : c.model.layers) {
    layers.push_back({{"layer", l.layer}, {"height", l.height}, {"width", l.width}, {"channels", l.channels}});
  }
  json levels = json::array();
  for (const auto& lv : c.model.levels) {
    levels.push_back({{"level", lv.level}, {"layers", lv.layers}, {"target", extents_json(lv.target)}, {"depth", lv.depth}});
  }
  json stages = json::array();
  for (const auto& st : c.model.decoder_stages) stages.push_back({{"layer", st.layer}, {"projection", st.projection}});
  return {
      {"preset", c.preset},
      {"seed", c.seed},
      {"model",
       {{"image", c.model.image},
        {"layers", layers},
        {"levels", levels},
        {"dim", c.model.dim},
        {"heads", c.model.heads},
        {"window", c.model.window},
        {"vem_blocks", c.model.vem_blocks},
        {"vem_groups", c.model.vem_groups},
        {"aggregator", to_string(c.model.aggregator)},
        {"decoder_stages", stages},
        {"decoder_window", c.model.decoder_window},
        {"decoder_blocks", c.model.decoder_blocks},
        {"decoder_heads", c.model.decoder_heads},
        {"use_affinity", c.model.use_affinity},
        {"head", head_name(c.model.head)}}},
      {"train",
       {{"steps", c.train.steps},
        {"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"episodes", c.train.episodes},
        {"val_episodes", c.train.val_episodes},
        {"val_every", c.train.val_every},
        {"patience", c.train.patience},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"data",
       {{"folds", c.data.folds},
        {"classes_per_fold", c.data.classes_per_fold},
        {"test_fold", c.data.test_fold},
        {"noise", c.data.noise},
        {"jitter", c.data.jitter},
        {"distractor", c.data.distractor},
        {"world_seed", c.data.world_seed}}},
      {"eval",
       {{"episodes", c.eval.episodes},
        {"k", c.eval.k},
        {"tau", c.eval.tau},
        {"fusion", fusion_name(c.eval.fusion)},
        {"inject_ground_truth", c.eval.inject_ground_truth}}},
  };
}

RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  std::string name = "desk";
  if (doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw ConfigError("preset: expected a string");
    name = doc["preset"].get<std::string>();
  }
  json merged = to_json(preset(name));
  overlay(merged, doc, "");

  const Reader root(merged, "");
  root.expect_keys({"preset", "seed", "model", "train", "data", "eval"});
  RunConfig c;
  c.preset = name;
  c.seed = root.u64("seed");

  const Reader m = root.object("model");
  m.expect_keys({"image", "layers", "levels", "dim", "heads", "window", "vem_blocks", "vem_groups", "aggregator",
                 "decoder_stages", "decoder_window", "decoder_blocks", "decoder_heads", "use_affinity", "head"});
  auto& mc = c.model;
  mc.image = m.size("image");
  const auto& layers = m.array("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Reader l(layers[i], m.field("layers") + "[" + std::to_string(i) + "]");
    l.expect_keys({"layer", "height", "width", "channels"});
    mc.layers.push_back({l.integer("layer"), l.size("height"), l.size("width"), l.size("channels")});
  }
  const auto& levels = m.array("levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const Reader lv(levels[i], m.field("levels") + "[" + std::to_string(i) + "]");
    lv.expect_keys({"level", "layers", "target", "depth"});
    LevelSpec spec{lv.integer("level"), {}, lv.extents("target"), lv.size("depth")};
    for (const auto& v : lv.array("layers")) {
      if (!v.is_number_integer()) throw ConfigError(lv.field("layers") + ": expected integers");
      spec.layers.push_back(v.get<int>());
    }
    mc.levels.push_back(std::move(spec));
  }
  mc.dim = m.size("dim");
  mc.heads = m.size("heads");
  mc.window = m.size("window");
  mc.vem_blocks = m.size("vem_blocks");
  mc.vem_groups = m.size("vem_groups");
  try {
    mc.aggregator = parse_aggregator(m.string("aggregator"));
  } catch (const ConfigError& e) {
    throw ConfigError(m.field("aggregator") + ": " + e.what());
  }
  const auto& stages = m.array("decoder_stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Reader st(stages[i], m.field("decoder_stages") + "[" + std::to_string(i) + "]");
    st.expect_keys({"layer", "projection"});
    mc.decoder_stages.push_back({st.integer("layer"), 1, st.size("projection")});
  }
  mc.decoder_window = m.size("decoder_window");
  mc.decoder_blocks = m.size("decoder_blocks");
  mc.decoder_heads = m.size("decoder_heads");
  mc.use_affinity = m.boolean("use_affinity");
  const std::string head = m.string("head");
  if (head == "mask") {
    mc.head = HeadKind::kMask;
  } else if (head == "flow") {
    mc.head = HeadKind::kFlow;
  } else {
    throw ConfigError(m.field("head") + ": expected mask or flow, got '" + head + "'");
  }

  const Reader t = root.object("train");
  t.expect_keys({"steps", "lr", "weight_decay", "beta1", "beta2", "eps", "episodes", "val_episodes", "val_every",
                 "patience", "checkpoint_every"});
  c.train.steps = t.size("steps", false);
  c.train.lr = t.number("lr");
  c.train.weight_decay = t.number("weight_decay");
  c.train.beta1 = t.number("beta1");
  c.train.beta2 = t.number("beta2");
  c.train.eps = t.number("eps");
  c.train.episodes = t.size("episodes");
  c.train.val_episodes = t.size("val_episodes", false);
  c.train.val_every = t.size("val_every", false);
  c.train.patience = t.size("patience", false);
  c.train.checkpoint_every = t.size("checkpoint_every", false);
  if (c.train.lr < 0) throw ConfigError("train.lr: must be non-negative");
  if (c.train.weight_decay < 0) throw ConfigError("train.weight_decay: must be non-negative");
  if (!(c.train.beta1 >= 0 && c.train.beta1 < 1)) throw ConfigError("train.beta1: must lie in [0, 1)");
  if (!(c.train.beta2 >= 0 && c.train.beta2 < 1)) throw ConfigError("train.beta2: must lie in [0, 1)");
  if (!(c.train.eps > 0)) throw ConfigError("train.eps: must be positive");

  const Reader d = root.object("data");
  d.expect_keys({"folds", "classes_per_fold", "test_fold", "noise", "jitter", "distractor", "world_seed"});
  c.data.folds = d.size("folds");
  c.data.classes_per_fold = d.size("classes_per_fold");
  c.data.test_fold = d.size("test_fold", false);
  c.data.noise = d.number("noise");
  c.data.jitter = d.number("jitter");
  c.data.distractor = d.boolean("distractor");
  c.data.world_seed = d.u64("world_seed");
  if (c.data.test_fold >= c.data.folds) throw ConfigError("data.test_fold: must be below data.folds");
  if (c.data.noise < 0) throw ConfigError("data.noise: must be non-negative");
  if (c.data.jitter < 0) throw ConfigError("data.jitter: must be non-negative");

  const Reader e = root.object("eval");
  e.expect_keys({"episodes", "k", "tau", "fusion", "inject_ground_truth"});
  c.eval.episodes = e.size("episodes");
  c.eval.k = e.size("k");
  c.eval.tau = e.number("tau");
  if (!(c.eval.tau > 0 && c.eval.tau <= 1)) throw ConfigError("eval.tau: must lie in (0, 1]");
  const std::string fusion = e.string("fusion");
  if (fusion == "shots") {
    c.eval.fusion = FusionNorm::kShots;
  } else if (fusion == "max-votes") {
    c.eval.fusion = FusionNorm::kMaxVotes;
  } else {
    throw ConfigError("eval.fusion: expected shots or max-votes, got '" + fusion + "'");
  }
  c.eval.inject_ground_truth = e.boolean("inject_ground_truth");

  validate(c.model);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

void validate(const ModelConfig& m) {
  if (m.layers.empty()) throw ConfigError("model.layers: empty");
  if (m.levels.empty()) throw ConfigError("model.levels: empty");
  std::set<int> seen;
  for (const auto& l : m.layers) {
    if (!seen.insert(l.layer).second) throw ConfigError("model.layers: duplicate layer " + std::to_string(l.layer));
  }
  for (const auto& lv : m.levels) {
    if (lv.layers.empty()) throw ConfigError("model.levels: level " + std::to_string(lv.level) + " has no layers");
    const auto& first = m.layer(lv.layers.front());
    for (int id : lv.layers) {
      const auto& l = m.layer(id);
      if (l.height != first.height || l.width != first.width) {
        throw ConfigError("model.levels: level " + std::to_string(lv.level) + " mixes spatial sizes (layer " +
                          std::to_string(id) + ")");
      }
    }
  }
  Encoder<float>::check(m.encoder());
  if (m.decoder_stages.empty()) throw ConfigError("model.decoder_stages: empty");
  const auto d = m.decoder();
  Decoder<float>::check(d);
  if (m.head == HeadKind::kMask) {
    const std::size_t out = d.extent[0] << (d.stages.size() - 1);
    if (out != m.image || (d.extent[1] << (d.stages.size() - 1)) != m.image) {
      throw ConfigError("model.image: decoder output " + std::to_string(out) + " does not match mask size " +
                        std::to_string(m.image));
    }
  }
}

std::vector<std::pair<std::string, Shape>> shape_trace(const ModelConfig& m) {
  validate(m);
  std::vector<std::pair<std::string, Shape>> trace;
  const auto enc = m.encoder();
  const std::size_t d = m.dim;
  for (std::size_t i = 0; i < enc.levels.size(); ++i) {
    const auto& lv = enc.levels[i];
    const auto& t = lv.target;
    const std::string p = "level" + std::to_string(lv.level);
    trace.emplace_back(p + ".hypercorrelation", Shape{lv.input[0], lv.input[1], lv.input[2], lv.input[3], lv.channels});
    trace.emplace_back(p + ".embedding", Shape{t[0], t[1], t[2], t[3], d});
    if (i > 0) trace.emplace_back(p + ".guidance", Shape{t[0], t[1], t[2], t[3], d});
    trace.emplace_back(p + ".aggregated", Shape{t[0], t[1], t[2], t[3], d});
  }
  const auto dec = m.decoder();
  trace.emplace_back("decoder.pooled", Shape{dec.extent[0], dec.extent[1], d});
  for (std::size_t s = 0; s < dec.stages.size(); ++s) {
    const std::size_t f = dec.upsample ? (std::size_t{1} << s) : 1;
    const std::size_t h = dec.extent[0] * f, w = dec.extent[1] * f;
    const std::string p = "decoder.stage" + std::to_string(s);
    if (dec.use_affinity) {
      const auto& l = m.layer(dec.stages[s].layer);
      trace.emplace_back(p + ".features", Shape{l.height, l.width, l.channels});
      trace.emplace_back(p + ".projection", Shape{h, w, dec.stages[s].projection});
    }
    trace.emplace_back(p + ".output", Shape{h, w, d});
  }
  const std::size_t s_last = dec.stages.size() - 1;
  const std::size_t f = dec.upsample ? (std::size_t{1} << s_last) : 1;
  trace.emplace_back(m.head == HeadKind::kMask ? "head.logits" : "head.flow",
                     Shape{dec.extent[0] * f, dec.extent[1] * f, 2});
  return trace;
}

}  // namespace vat
