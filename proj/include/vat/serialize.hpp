#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "vat/tensor.hpp"

namespace vat {

// On-disk tensor record: one line of JSON metadata
//   {"dtype":"f32","name":"...","shape":[...]}\n
// followed by numel(shape) little-endian IEEE-754 32-bit floats, row-major.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
void write_tensor(std::ostream& out, const std::string& name, const Tensor<T>& tensor);

// Reads one record. Throws FormatError on malformed metadata or short data.
template <typename T>
NamedTensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const std::string& name, const Tensor<T>& tensor);

template <typename T>
NamedTensor<T> load_tensor(const std::filesystem::path& path);

}  // namespace vat
