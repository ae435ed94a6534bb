#pragma once

#include <memory>
#include <string>

#include "sonostack/models.hpp"

namespace sonostack::models {

// Binary checkpoint: magic "SSCK", u32 version, length-prefixed spec
// text, u32 tensor count, per tensor {u32 name length + UTF-8, u8 dtype
// (0 = f32), u8 rank, u64 dims..., f32 payload little-endian}, the
// per-channel normalization block, the label block, provenance, and a
// trailing u64 FNV-1a digest over everything before it.
//
// Parameters and batchnorm running statistics are both stored as
// tensors; buffers carry a "buf:" name prefix on disk.
void save_checkpoint(Model<float>& model, const std::string& path);

// Rebuilds the model from its spec and restores every tensor. Throws
// CheckpointError on version mismatch, truncation, digest mismatch, or
// any missing/duplicate/mis-shaped tensor; never returns a partial model.
std::unique_ptr<Model<float>> load_checkpoint(const std::string& path);

} // namespace sonostack::models
