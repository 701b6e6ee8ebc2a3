#include "vat/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

namespace vat {

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const std::string& name, const Tensor<T>& tensor) {
  nlohmann::json meta = {{"name", name}, {"dtype", "f32"}, {"shape", tensor.shape()}};
  out << meta.dump() << '\n';
  std::vector<std::uint32_t> words(tensor.numel());
  for (std::size_t i = 0; i < words.size(); ++i) {
    const float f = static_cast<float>(tensor.data()[i]);
    words[i] = to_le(std::bit_cast<std::uint32_t>(f));
  }
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw FormatError("failed writing tensor '" + name + "'");
}

template <typename T>
NamedTensor<T> read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing tensor metadata line");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad tensor metadata: ") + e.what());
  }
  if (!meta.is_object() || !meta.contains("shape") || !meta.contains("dtype") || !meta.contains("name")) {
    throw FormatError("tensor metadata needs name, dtype and shape");
  }
  if (meta["dtype"] != "f32") throw FormatError("unsupported dtype " + meta["dtype"].dump());
  NamedTensor<T> result;
  result.name = meta["name"].get<std::string>();
  Shape shape;
  try {
    shape = meta["shape"].get<Shape>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("tensor '" + result.name + "': shape must be a list of positive integers");
  }
  if (shape.empty()) throw FormatError("tensor '" + result.name + "': empty shape");
  for (std::size_t e : shape) {
    if (e == 0) throw FormatError("tensor '" + result.name + "': zero extent in " + to_string(shape));
  }
  std::vector<std::uint32_t> words(numel(shape));
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (in.gcount() != static_cast<std::streamsize>(words.size() * 4)) {
    throw FormatError("tensor '" + result.name + "': expected " + std::to_string(words.size() * 4) +
                      " data bytes for shape " + to_string(shape) + ", got " + std::to_string(in.gcount()));
  }
  result.tensor = Tensor<T>::zeros(shape);
  auto data = result.tensor.data();
  for (std::size_t i = 0; i < words.size(); ++i) data[i] = static_cast<T>(std::bit_cast<float>(to_le(words[i])));
  return result;
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const std::string& name, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, name, tensor);
}

template <typename T>
NamedTensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  auto result = read_tensor<T>(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes after tensor '" + result.name + "'");
  }
  return result;
}

template void write_tensor<float>(std::ostream&, const std::string&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const std::string&, const Tensor<double>&);
template NamedTensor<float> read_tensor<float>(std::istream&);
template NamedTensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::filesystem::path&, const std::string&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const std::string&, const Tensor<double>&);
template NamedTensor<float> load_tensor<float>(const std::filesystem::path&);
template NamedTensor<double> load_tensor<double>(const std::filesystem::path&);

}  // namespace vat
