#pragma once

// Binary artifact formats. All integers and floats are little-endian.
//
//   BKDF  feature dump      magic, u32 version, u32 frames, u32 dims,
//                           f32 row-major payload
//   BKLB  frame labels      magic, u32 version, u32 frames, u32 n_classes,
//                           u16 class id per frame
//   BKST  soft targets      magic, u32 version, u32 k, f32 temperature,
//                           then per frame k x (u32 index, f32 prob)
//   BKBF  beamformer bank   magic, u32 version, dims header, f32 payload
//                           interleaved (re, im)

#include <cstdint>
#include <string>
#include <vector>

#include "beamkd/beamform.hpp"
#include "beamkd/sigproc.hpp"

namespace beamkd {

void write_features(const std::string& path, const RowMatXd& rows);
RowMatXd read_features(const std::string& path);

void write_labels(const std::string& path, const std::vector<uint16_t>& labels, int n_classes);
struct LabelFile {
  std::vector<uint16_t> labels;
  int n_classes = 0;
};
LabelFile read_labels(const std::string& path);

// Per-frame top-k soft targets; `temperature` records the softening already
// applied so it is never applied twice.
struct SoftTargets {
  int k = 0;
  float temperature = 1.0f;
  std::vector<uint32_t> indices;  // [frames * k]
  std::vector<float> probs;       // [frames * k], each frame renormalized to 1

  int frames() const { return k == 0 ? 0 : static_cast<int>(indices.size()) / k; }
};

void write_soft_targets(const std::string& path, const SoftTargets& st);
SoftTargets read_soft_targets(const std::string& path);

}  // namespace beamkd
