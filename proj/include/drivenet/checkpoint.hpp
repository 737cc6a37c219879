#pragma once

#include <optional>
#include <string>

#include "drivenet/model.hpp"

namespace drivenet {

// Binary checkpoint, little-endian:
//   magic "FRFCNCKP", u16 version=1, u8 kind tag, then records of
//   (u16 name length, name bytes, u8 rank, u32 extents..., f32 values...).
// Parameter values come first, then adam.m:/adam.v: moment records, then
// BatchNorm running statistics, then the shared optimizer step count.
void save_checkpoint(Model<float>& model, const std::string& path);

// Rebuilds a model of the stored kind under `cfg` and restores every record;
// missing records, unknown records, or shape mismatches are errors. When
// `expected_kind` is given, a checkpoint of any other kind is rejected.
Model<float> load_checkpoint(const std::string& path,
                             const ModelConfig& cfg = ModelConfig(),
                             std::optional<ModelKind> expected_kind = {});

ModelKind peek_checkpoint_kind(const std::string& path);

}  // namespace drivenet
