#pragma once

#include <filesystem>
#include <vector>

#include "vat/config.hpp"
#include "vat/serialize.hpp"
#include "vat/train.hpp"

namespace vat {

inline constexpr int kCheckpointVersion = 1;

// File layout: one JSON header line
//   {"format":"vat-checkpoint","version":1,"step":N,"tensors":T,"config":{...}}
// followed by T tensor records: every parameter under its own name, then the
// optimizer moments as "adam.m/<name>" and "adam.v/<name>" when present.
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const ParamSet<float>& params,
                     const AdamW<float>* optimizer, std::size_t step);

struct Checkpoint {
  RunConfig config;
  std::size_t step = 0;
  std::vector<NamedTensor<float>> tensors;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies the stored parameters (and optimizer state, if requested and
// stored) into place. Missing names and shape mismatches throw ShapeError
// naming both shapes.
void restore_checkpoint(const Checkpoint& checkpoint, ParamSet<float>& params, AdamW<float>* optimizer);

}  // namespace vat
