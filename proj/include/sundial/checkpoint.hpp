#pragma once

#include <string>

#include "sundial/model.hpp"

namespace sundial {

// Binary checkpoint layout, all integers little-endian:
//   bytes 0..3   magic "SNDL"
//   u32          format version (currently 1)
//   u32          config text length, then that many bytes (canonical key=value)
//   u32          tensor count; per tensor: u32 name length, name bytes,
//                u32 rank, u64 extents, u64 payload byte offset
//   payload      contiguous f32 blobs in table order
void save_checkpoint(SundialModelT<float>& model, const std::string& path);
SundialModelT<float> load_checkpoint(const std::string& path);

// throws CheckpointError listing every differing field
void require_same_architecture(const ModelConfig& a, HeadKind ha, const ModelConfig& b,
                               HeadKind hb);

}  // namespace sundial
