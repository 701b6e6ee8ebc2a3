#include "vat/correlation.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "vat/ops.hpp"
#include "vat/serialize.hpp"

namespace vat {

template <typename T>
const FeatureLayer<T>& FeaturePyramid<T>::layer(int index) const {
  for (const auto& l : layers) {
    if (l.layer == index) return l;
  }
  throw ConfigError("feature pyramid has no layer " + std::to_string(index));
}

template <typename T>
void FeaturePyramid<T>::validate() const {
  if (support_mask.rank() != 2) throw ShapeError("support mask must be [H, W], got " + to_string(support_mask.shape()));
  for (T v : support_mask.data()) {
    if (v != T(0) && v != T(1)) throw ConfigError("support mask must be binary");
  }
  std::set<int> seen;
  for (const auto& l : layers) {
    if (!seen.insert(l.layer).second) throw ConfigError("duplicate layer index " + std::to_string(l.layer));
    if (l.query.rank() != 3 || l.support.rank() != 3 || l.query.dim(2) != l.support.dim(2)) {
      throw ShapeError("layer " + std::to_string(l.layer) + ": query " + to_string(l.query.shape()) +
                       " and support " + to_string(l.support.shape()) + " must be [h, w, c] with equal c");
    }
  }
  for (const auto& [level, members] : groups) {
    if (members.empty()) throw ConfigError("pyramid level " + std::to_string(level) + " has no layers");
    const auto& first = layer(members.front());
    for (int m : members) {
      const auto& l = layer(m);
      if (l.query.dim(0) != first.query.dim(0) || l.query.dim(1) != first.query.dim(1) ||
          l.support.dim(0) != first.support.dim(0) || l.support.dim(1) != first.support.dim(1)) {
        throw ShapeError("pyramid level " + std::to_string(level) + ": layer " + std::to_string(m) +
                         " spatial size differs from layer " + std::to_string(members.front()));
      }
    }
  }
}

template <typename T>
Tensor<T> resize_mask_nearest(const Tensor<T>& mask, std::size_t h, std::size_t w) {
  if (mask.rank() != 2) throw ShapeError("resize_mask_nearest: mask must be [H, W], got " + to_string(mask.shape()));
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  auto out = Tensor<T>::zeros({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t si = std::min(i * H / h, H - 1);
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t sj = std::min(j * W / w, W - 1);
      out.data()[i * w + j] = mask.data()[si * W + sj];
    }
  }
  return out;
}

template <typename T>
Tensor<T> mask_support(const Tensor<T>& support, const Tensor<T>& mask) {
  if (support.rank() != 3) throw ShapeError("mask_support: features must be [h, w, c], got " + to_string(support.shape()));
  for (T v : mask.data()) {
    if (v != T(0) && v != T(1)) throw ConfigError("mask_support: mask must be binary");
  }
  const std::size_t h = support.dim(0), w = support.dim(1), c = support.dim(2);
  const auto small = resize_mask_nearest(mask, h, w);
  auto expanded = Tensor<T>::zeros(support.shape());
  for (std::size_t p = 0; p < h * w; ++p) {
    std::fill_n(expanded.data().begin() + static_cast<std::ptrdiff_t>(p * c), c, small.data()[p]);
  }
  return ops::mul(support, expanded);
}

template <typename T>
Tensor<T> correlate(const Tensor<T>& query, const Tensor<T>& masked_support) {
  if (query.rank() != 3 || masked_support.rank() != 3 || query.dim(2) != masked_support.dim(2)) {
    throw ShapeError("correlate: query " + to_string(query.shape()) + " and support " +
                     to_string(masked_support.shape()) + " must be [h, w, c] with equal channel count");
  }
  const std::size_t hq = query.dim(0), wq = query.dim(1), hs = masked_support.dim(0), ws = masked_support.dim(1);
  const std::size_t c = query.dim(2);
  const T eps = T(kCosineEps);
  auto qn = ops::reshape(ops::l2_normalize(query, eps), {1, hq * wq, c});
  auto sn = ops::reshape(ops::l2_normalize(masked_support, eps), {1, hs * ws, c});
  auto cos = ops::bmm(qn, sn, /*transpose_b=*/true);
  return ops::reshape(ops::relu(cos), {hq, wq, hs, ws});
}

template <typename T>
Tensor<T> build_hypercorrelation(const FeaturePyramid<T>& pyramid, int level) {
  auto it = pyramid.groups.find(level);
  if (it == pyramid.groups.end() || it->second.empty()) {
    throw ConfigError("build_hypercorrelation: pyramid level " + std::to_string(level) + " has no layers");
  }
  std::vector<int> members = it->second;
  std::sort(members.begin(), members.end());
  std::vector<Tensor<T>> maps;
  Shape spatial;
  for (int m : members) {
    const auto& l = pyramid.layer(m);
    auto corr = correlate(l.query, mask_support(l.support, pyramid.support_mask));
    if (spatial.empty()) spatial = corr.shape();
    if (corr.shape() != spatial) {
      throw ShapeError("build_hypercorrelation: level " + std::to_string(level) + " mixes spatial sizes " +
                       to_string(spatial) + " and " + to_string(corr.shape()) + " (layer " + std::to_string(m) + ")");
    }
    Shape stacked = spatial;
    stacked.push_back(1);
    maps.push_back(ops::reshape(corr, stacked));
  }
  return maps.size() == 1 ? maps.front() : ops::concat(maps, 4);
}

namespace {

nlohmann::json blob_entry(const std::string& file, const Shape& shape) {
  return {{"file", file}, {"shape", shape}};
}

template <typename T>
Tensor<T> load_checked(const std::filesystem::path& dir, const nlohmann::json& entry) {
  const auto file = entry.at("file").get<std::string>();
  const auto declared = entry.at("shape").get<Shape>();
  auto blob = load_tensor<T>(dir / file);
  if (blob.tensor.shape() != declared) {
    throw FormatError(file + ": manifest declares shape " + to_string(declared) + " but blob holds " +
                      to_string(blob.tensor.shape()));
  }
  return blob.tensor;
}

}  // namespace

template <typename T>
void save_pyramid(const std::filesystem::path& dir, const FeaturePyramid<T>& pyramid) {
  pyramid.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "vat-feature-pyramid";
  manifest["version"] = 1;
  manifest["layers"] = nlohmann::json::array();
  for (const auto& l : pyramid.layers) {
    const std::string q = "query_" + std::to_string(l.layer) + ".vt";
    const std::string s = "support_" + std::to_string(l.layer) + ".vt";
    save_tensor(dir / q, q, l.query);
    save_tensor(dir / s, s, l.support);
    manifest["layers"].push_back(
        {{"layer", l.layer}, {"query", blob_entry(q, l.query.shape())}, {"support", blob_entry(s, l.support.shape())}});
  }
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [level, members] : pyramid.groups) groups[std::to_string(level)] = members;
  manifest["groups"] = groups;
  save_tensor(dir / "support_mask.vt", "support_mask", pyramid.support_mask);
  manifest["support_mask"] = blob_entry("support_mask.vt", pyramid.support_mask.shape());
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

template <typename T>
FeaturePyramid<T> load_pyramid(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  FeaturePyramid<T> pyramid;
  try {
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.at("format") != "vat-feature-pyramid") throw FormatError("not a feature-pyramid manifest");
    for (const auto& entry : manifest.at("layers")) {
      FeatureLayer<T> l;
      l.layer = entry.at("layer").get<int>();
      l.query = load_checked<T>(dir, entry.at("query"));
      l.support = load_checked<T>(dir, entry.at("support"));
      pyramid.layers.push_back(std::move(l));
    }
    for (const auto& [key, members] : manifest.at("groups").items()) {
      pyramid.groups[std::stoi(key)] = members.template get<std::vector<int>>();
    }
    pyramid.support_mask = load_checked<T>(dir, manifest.at("support_mask"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  pyramid.validate();
  return pyramid;
}

#define VAT_CORR_INSTANTIATE(T)                                                               \
  template struct FeaturePyramid<T>;                                                          \
  template Tensor<T> resize_mask_nearest<T>(const Tensor<T>&, std::size_t, std::size_t);      \
  template Tensor<T> mask_support<T>(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> correlate<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> build_hypercorrelation<T>(const FeaturePyramid<T>&, int);                \
  template void save_pyramid<T>(const std::filesystem::path&, const FeaturePyramid<T>&);      \
  template FeaturePyramid<T> load_pyramid<T>(const std::filesystem::path&);

VAT_CORR_INSTANTIATE(float)
VAT_CORR_INSTANTIATE(double)

}  // namespace vat
