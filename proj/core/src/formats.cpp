#include "beamkd/formats.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace beamkd {

namespace {

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), f_(path, std::ios::binary | std::ios::trunc) {
    if (!f_) throw std::runtime_error("cannot write " + path);
  }
  void magic(const char m[4]) { f_.write(m, 4); }
  void u32(uint32_t v) { f_.write(reinterpret_cast<const char*>(&v), 4); }
  void f32(float v) { f_.write(reinterpret_cast<const char*>(&v), 4); }
  void bytes(const void* p, size_t n) { f_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void close() {
    f_.flush();
    if (!f_) throw std::runtime_error("short write to " + path_);
  }

 private:
  std::string path_;
  std::ofstream f_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("cannot open " + path);
  }
  void expect_magic(const char m[4]) {
    char got[4];
    f_.read(got, 4);
    if (!f_ || std::memcmp(got, m, 4) != 0)
      throw std::runtime_error(path_ + ": bad magic, expected " + std::string(m, 4));
  }
  uint32_t u32() {
    uint32_t v;
    f_.read(reinterpret_cast<char*>(&v), 4);
    check();
    return v;
  }
  float f32() {
    float v;
    f_.read(reinterpret_cast<char*>(&v), 4);
    check();
    return v;
  }
  void bytes(void* p, size_t n) {
    f_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    check();
  }
  bool at_eof() {
    f_.peek();
    return f_.eof();
  }
  const std::string& path() const { return path_; }

 private:
  void check() {
    if (!f_) throw std::runtime_error(path_ + ": truncated file");
  }
  std::string path_;
  std::ifstream f_;
};

// Little-endian byte order is assumed throughout; refuse to run elsewhere.
static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian only");

}  // namespace

void write_features(const std::string& path, const RowMatXd& rows) {
  Writer w(path);
  w.magic("BKDF");
  w.u32(1);
  w.u32(static_cast<uint32_t>(rows.rows()));
  w.u32(static_cast<uint32_t>(rows.cols()));
  std::vector<float> buf(static_cast<size_t>(rows.rows()) * rows.cols());
  for (int r = 0; r < rows.rows(); ++r)
    for (int c = 0; c < rows.cols(); ++c)
      buf[static_cast<size_t>(r) * rows.cols() + c] = static_cast<float>(rows(r, c));
  w.bytes(buf.data(), buf.size() * 4);
  w.close();
}

RowMatXd read_features(const std::string& path) {
  Reader r(path);
  r.expect_magic("BKDF");
  const uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error(path + ": unsupported BKDF version");
  const uint32_t frames = r.u32();
  const uint32_t dims = r.u32();
  std::vector<float> buf(static_cast<size_t>(frames) * dims);
  r.bytes(buf.data(), buf.size() * 4);
  RowMatXd out(frames, dims);
  for (uint32_t f = 0; f < frames; ++f)
    for (uint32_t d = 0; d < dims; ++d) out(f, d) = buf[static_cast<size_t>(f) * dims + d];
  return out;
}

void write_labels(const std::string& path, const std::vector<uint16_t>& labels, int n_classes) {
  Writer w(path);
  w.magic("BKLB");
  w.u32(1);
  w.u32(static_cast<uint32_t>(labels.size()));
  w.u32(static_cast<uint32_t>(n_classes));
  w.bytes(labels.data(), labels.size() * 2);
  w.close();
}

LabelFile read_labels(const std::string& path) {
  Reader r(path);
  r.expect_magic("BKLB");
  const uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error(path + ": unsupported BKLB version");
  const uint32_t frames = r.u32();
  LabelFile lf;
  lf.n_classes = static_cast<int>(r.u32());
  lf.labels.resize(frames);
  r.bytes(lf.labels.data(), frames * 2);
  return lf;
}

void write_soft_targets(const std::string& path, const SoftTargets& st) {
  if (st.k <= 0) throw std::invalid_argument("soft targets: k must be positive");
  if (st.indices.size() != st.probs.size() || st.indices.size() % st.k != 0)
    throw std::invalid_argument("soft targets: inconsistent payload");
  Writer w(path);
  w.magic("BKST");
  w.u32(1);
  w.u32(static_cast<uint32_t>(st.k));
  w.f32(st.temperature);
  const int frames = st.frames();
  for (int f = 0; f < frames; ++f)
    for (int i = 0; i < st.k; ++i) {
      w.u32(st.indices[static_cast<size_t>(f) * st.k + i]);
      w.f32(st.probs[static_cast<size_t>(f) * st.k + i]);
    }
  w.close();
}

SoftTargets read_soft_targets(const std::string& path) {
  Reader r(path);
  r.expect_magic("BKST");
  const uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error(path + ": unsupported BKST version");
  SoftTargets st;
  st.k = static_cast<int>(r.u32());
  st.temperature = r.f32();
  while (!r.at_eof()) {
    for (int i = 0; i < st.k; ++i) {
      st.indices.push_back(r.u32());
      st.probs.push_back(r.f32());
    }
  }
  return st;
}

// Bank checkpoint: magic "BKBF", u32 version, dims header (directions, bins,
// mics, sample rate, dft size, loading sigma), geometry echo, then weights as
// f32 interleaved (re, im) in (direction, bin, mic) order.
void save_bank(const BeamformerBank& bank, const std::string& path) {
  Writer w(path);
  w.magic("BKBF");
  w.u32(1);
  w.u32(static_cast<uint32_t>(bank.num_directions()));
  w.u32(static_cast<uint32_t>(bank.bins));
  w.u32(static_cast<uint32_t>(bank.geometry.num_mics()));
  w.u32(static_cast<uint32_t>(bank.sample_rate_hz));
  w.u32(static_cast<uint32_t>(bank.dft_size));
  w.f32(static_cast<float>(bank.loading_sigma));
  w.u32(static_cast<uint32_t>(bank.geometry.name.size()));
  w.bytes(bank.geometry.name.data(), bank.geometry.name.size());
  for (const auto& d : bank.directions)
    for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(d[i]));
  for (const auto& m : bank.geometry.mics)
    for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(m[i]));
  for (const auto& z : bank.weights) {
    w.f32(static_cast<float>(z.real()));
    w.f32(static_cast<float>(z.imag()));
  }
  w.close();
}

BeamformerBank load_bank(const std::string& path) {
  Reader r(path);
  r.expect_magic("BKBF");
  const uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error(path + ": unsupported BKBF version");
  BeamformerBank bank;
  const uint32_t D = r.u32();
  bank.bins = static_cast<int>(r.u32());
  const uint32_t M = r.u32();
  bank.sample_rate_hz = static_cast<int>(r.u32());
  bank.dft_size = static_cast<int>(r.u32());
  bank.loading_sigma = r.f32();
  const uint32_t name_len = r.u32();
  bank.geometry.name.resize(name_len);
  if (name_len) r.bytes(bank.geometry.name.data(), name_len);
  bank.directions.resize(D);
  for (uint32_t d = 0; d < D; ++d)
    for (int i = 0; i < 3; ++i) bank.directions[d][i] = r.f32();
  bank.geometry.mics.resize(M);
  for (uint32_t m = 0; m < M; ++m)
    for (int i = 0; i < 3; ++i) bank.geometry.mics[m][i] = r.f32();
  bank.weights.resize(static_cast<size_t>(D) * bank.bins * M);
  for (auto& z : bank.weights) {
    const float re = r.f32();
    const float im = r.f32();
    z = {re, im};
  }
  if (!r.at_eof()) throw std::runtime_error(path + ": trailing bytes after bank payload");
  return bank;
}

}  // namespace beamkd
