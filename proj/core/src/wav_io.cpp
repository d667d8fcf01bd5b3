#include "beamkd/wav_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace beamkd {

namespace {

uint32_t rd_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t rd_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
  b.push_back((v >> 16) & 0xff);
  b.push_back((v >> 24) & 0xff);
}

void wr_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
}

}  // namespace

MultiChannelAudio read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("wav: cannot open " + path);
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  if (data.size() < 44 || std::memcmp(data.data(), "RIFF", 4) != 0 ||
      std::memcmp(data.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("wav: not a RIFF/WAVE file: " + path);

  int channels = 0, sample_rate = 0, bits = 0;
  size_t data_off = 0, data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= data.size()) {
    const char* id = reinterpret_cast<const char*>(data.data() + pos);
    const uint32_t len = rd_u32(data.data() + pos + 4);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw std::runtime_error("wav: truncated fmt chunk");
      const uint8_t* f = data.data() + pos + 8;
      const uint16_t format = rd_u16(f);
      if (format != 1) throw std::runtime_error("wav: only PCM supported");
      channels = rd_u16(f + 2);
      sample_rate = static_cast<int>(rd_u32(f + 4));
      bits = rd_u16(f + 14);
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = pos + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (channels <= 0 || sample_rate <= 0) throw std::runtime_error("wav: missing fmt chunk");
  if (bits != 16) throw std::runtime_error("wav: only 16-bit PCM supported");
  if (data_off == 0) throw std::runtime_error("wav: missing data chunk");
  if (data_off + data_len > data.size()) throw std::runtime_error("wav: truncated data chunk");

  const size_t n_samples = data_len / (2 * channels);
  MultiChannelAudio audio;
  audio.sample_rate_hz = sample_rate;
  audio.channels.assign(channels, std::vector<double>(n_samples));
  const uint8_t* p = data.data() + data_off;
  for (size_t s = 0; s < n_samples; ++s)
    for (int c = 0; c < channels; ++c) {
      const int16_t v = static_cast<int16_t>(rd_u16(p + (s * channels + c) * 2));
      audio.channels[c][s] = static_cast<double>(v) / 32768.0;
    }
  return audio;
}

void write_wav(const std::string& path, const MultiChannelAudio& audio) {
  const int channels = audio.num_channels();
  if (channels == 0) throw std::invalid_argument("wav: no channels to write");
  const size_t n_samples = audio.channels[0].size();
  for (const auto& ch : audio.channels)
    if (ch.size() != n_samples) throw std::invalid_argument("wav: channel lengths differ");

  std::vector<uint8_t> out;
  const uint32_t data_bytes = static_cast<uint32_t>(n_samples * channels * 2);
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  wr_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  wr_u32(out, 16);
  wr_u16(out, 1);  // PCM
  wr_u16(out, static_cast<uint16_t>(channels));
  wr_u32(out, static_cast<uint32_t>(audio.sample_rate_hz));
  wr_u32(out, static_cast<uint32_t>(audio.sample_rate_hz * channels * 2));
  wr_u16(out, static_cast<uint16_t>(channels * 2));
  wr_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  wr_u32(out, data_bytes);
  for (size_t s = 0; s < n_samples; ++s)
    for (int c = 0; c < channels; ++c) {
      const double x = std::clamp(audio.channels[c][s], -1.0, 32767.0 / 32768.0);
      wr_u16(out, static_cast<uint16_t>(static_cast<int16_t>(std::lround(x * 32768.0))));
    }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("wav: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("wav: short write to " + path);
}

}  // namespace beamkd
