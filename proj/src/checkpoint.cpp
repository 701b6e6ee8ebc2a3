#include "vat/checkpoint.hpp"

#include <fstream>
#include <map>

namespace vat {

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const ParamSet<float>& params,
                     const AdamW<float>* optimizer, std::size_t step) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::size_t count = params.size() * (optimizer ? 3 : 1);
  nlohmann::json header = {{"format", "vat-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"step", step},
                           {"tensors", count},
                           {"config", to_json(config)}};
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    out << header.dump() << '\n';
    for (const auto& [name, t] : params.entries()) write_tensor(out, name, t);
    if (optimizer) {
      const auto& opt = *optimizer;
      for (std::size_t i = 0; i < params.size(); ++i) write_tensor(out, "adam.m/" + params.entries()[i].first, opt.first_moments()[i]);
      for (std::size_t i = 0; i < params.size(); ++i) write_tensor(out, "adam.v/" + params.entries()[i].first, opt.second_moments()[i]);
    }
    if (!out) throw FormatError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  if (header.value("format", "") != "vat-checkpoint") throw FormatError(path.string() + ": not a checkpoint");
  if (header.value("version", 0) != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + header["version"].dump());
  }
  Checkpoint ck;
  ck.config = parse_config(header.at("config"));
  ck.step = header.at("step").get<std::size_t>();
  const auto count = header.at("tensors").get<std::size_t>();
  for (std::size_t i = 0; i < count; ++i) ck.tensors.push_back(read_tensor<float>(in));
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after tensors");
  return ck;
}

void restore_checkpoint(const Checkpoint& checkpoint, ParamSet<float>& params, AdamW<float>* optimizer) {
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto& nt : checkpoint.tensors) stored[nt.name] = &nt.tensor;
  auto copy = [&](const std::string& name, Tensor<float> into) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ShapeError("checkpoint has no tensor '" + name + "'");
    if (it->second->shape() != into.shape()) {
      throw ShapeError("tensor '" + name + "': checkpoint shape " + to_string(it->second->shape()) +
                       " vs model shape " + to_string(into.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), into.data().begin());
  };
  for (const auto& [name, t] : params.entries()) copy(name, t);
  if (optimizer && stored.count("adam.m/" + params.entries().front().first)) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      copy("adam.m/" + params.entries()[i].first, optimizer->first_moments()[i]);
      copy("adam.v/" + params.entries()[i].first, optimizer->second_moments()[i]);
    }
    optimizer->set_steps(checkpoint.step);
  }
}

}  // namespace vat
