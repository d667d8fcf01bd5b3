#pragma once

#include <string>

#include "beamkd/sigproc.hpp"

namespace beamkd {

// RIFF PCM, 16-bit little-endian, mono or N-channel. Samples are scaled to
// [-1, 1) on read; writes clamp and round symmetrically.
MultiChannelAudio read_wav(const std::string& path);
void write_wav(const std::string& path, const MultiChannelAudio& audio);

}  // namespace beamkd
