#include "beamkd/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "beamkd/errors.hpp"
#include "beamkd/json_support.hpp"

namespace beamkd {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_scale() {
  ModelConfig cfg;
  cfg.lstm_hidden = 768;
  cfg.n_classes = 3183;
  cfg.teacher.blstm_hidden = 768;
  return cfg;
}

void ModelConfig::validate() const {
  const int all[] = {n_bins,      n_channels,  n_looks,     comb_dim,
                     n_mels,      lstm_layers, lstm_hidden, n_classes,
                     teacher_input_dim, teacher.flstm_layers, teacher.flstm_hidden,
                     teacher.flstm_window, teacher.flstm_stride, teacher.blstm_layers,
                     teacher.blstm_hidden};
  for (int v : all)
    if (v <= 0) throw std::invalid_argument("model config: all dimensions must be positive");
  if (comb_dim > power_dim())
    throw std::invalid_argument("model config: comb_dim exceeds power dimension");
}

namespace {

void add_lstm(ParamSet<float>& p, const std::string& base, int in_dim, int hidden) {
  p.add(base + ".Wx", in_dim, 4 * hidden);
  p.add(base + ".Wh", hidden, 4 * hidden);
  p.add(base + ".b", 1, 4 * hidden);
}

}  // namespace

StudentModel StudentModel::build(const ModelConfig& cfg) {
  cfg.validate();
  StudentModel m;
  m.cfg = cfg;
  m.params.add("spatial", 1, cfg.n_looks * cfg.n_bins * cfg.n_channels * 2);
  m.params.add("comb.W", cfg.power_dim(), cfg.comb_dim);
  m.params.add("comb.b", 1, cfg.comb_dim);
  m.params.add("mel.W", cfg.comb_dim, cfg.n_mels);
  m.params.add("mel.b", 1, cfg.n_mels);
  int in_dim = cfg.n_mels;
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    add_lstm(m.params, "lstm" + std::to_string(l), in_dim, cfg.lstm_hidden);
    in_dim = cfg.lstm_hidden;
  }
  m.params.add("out.W", cfg.lstm_hidden, cfg.n_classes);
  m.params.add("out.b", 1, cfg.n_classes);
  return m;
}

TeacherModel TeacherModel::build(const ModelConfig& cfg) {
  cfg.validate();
  TeacherModel m;
  m.cfg = cfg;
  const TeacherConfig& t = cfg.teacher;
  int in_dim = t.flstm_window;
  for (int l = 0; l < t.flstm_layers; ++l) {
    add_lstm(m.params, "flstm" + std::to_string(l) + ".fwd", in_dim, t.flstm_hidden);
    add_lstm(m.params, "flstm" + std::to_string(l) + ".bwd", in_dim, t.flstm_hidden);
    in_dim = 2 * t.flstm_hidden;
  }
  in_dim = cfg.flstm_out_dim();
  for (int l = 0; l < t.blstm_layers; ++l) {
    add_lstm(m.params, "blstm" + std::to_string(l) + ".fwd", in_dim, t.blstm_hidden);
    add_lstm(m.params, "blstm" + std::to_string(l) + ".bwd", in_dim, t.blstm_hidden);
    in_dim = 2 * t.blstm_hidden;
  }
  m.params.add("out.W", 2 * t.blstm_hidden, cfg.n_classes);
  m.params.add("out.b", 1, cfg.n_classes);
  return m;
}

namespace {

void xavier_tensor(NamedTensor<float>& t, int fan_in, int fan_out, Rng& rng) {
  ad::xavier_normal_fill<float>(t.v, fan_in, fan_out, rng);
}

void xavier_lstm(ParamSet<float>& p, const std::string& base, Rng& rng) {
  NamedTensor<float>& wx = p.find(base + ".Wx");
  NamedTensor<float>& wh = p.find(base + ".Wh");
  xavier_tensor(wx, wx.rows, wh.rows, rng);
  xavier_tensor(wh, wh.rows, wh.rows, rng);
  std::fill(p.find(base + ".b").v.begin(), p.find(base + ".b").v.end(), 0.f);
}

}  // namespace

void init_random(StudentModel& model, Rng& rng, const ParamSet<float>* lstm_seed) {
  const ModelConfig& cfg = model.cfg;
  // Spatial weights are per-(look, bin) complex maps of the channel pairs.
  xavier_tensor(model.params.find("spatial"), cfg.n_channels * 2, 2, rng);
  xavier_tensor(model.params.find("comb.W"), cfg.power_dim(), cfg.comb_dim, rng);
  std::fill(model.params.find("comb.b").v.begin(), model.params.find("comb.b").v.end(), 0.f);
  xavier_tensor(model.params.find("mel.W"), cfg.comb_dim, cfg.n_mels, rng);
  std::fill(model.params.find("mel.b").v.begin(), model.params.find("mel.b").v.end(), 0.f);
  for (int l = 0; l < cfg.lstm_layers; ++l)
    xavier_lstm(model.params, "lstm" + std::to_string(l), rng);
  xavier_tensor(model.params.find("out.W"), cfg.lstm_hidden, cfg.n_classes, rng);
  std::fill(model.params.find("out.b").v.begin(), model.params.find("out.b").v.end(), 0.f);

  if (lstm_seed != nullptr) {
    for (const auto& t : lstm_seed->tensors) {
      if (t.name.rfind("lstm", 0) != 0 && t.name.rfind("out.", 0) != 0) continue;
      NamedTensor<float>& dst = model.params.find(t.name);
      if (dst.rows != t.rows || dst.cols != t.cols)
        throw IncompatibleArtifacts("lstm seed checkpoint shape mismatch on " + t.name);
      dst.v = t.v;
    }
  }
}

void init_dsp(StudentModel& model, const BeamformerBank& bank, const MelFilterbank& mel,
              InitVariant variant, Rng& rng) {
  const ModelConfig& cfg = model.cfg;
  const int M = bank.geometry.num_mics();
  if (M != cfg.n_channels)
    throw IncompatibleArtifacts("init_dsp: bank channel count must equal model channels");
  if (bank.num_directions() != cfg.n_looks || bank.bins != cfg.n_bins)
    throw IncompatibleArtifacts("init_dsp: bank look/bin dimensions mismatch");
  if (mel.n_mels != cfg.n_mels || mel.n_bins != cfg.n_bins)
    throw IncompatibleArtifacts("init_dsp: filterbank dimensions mismatch");

  NamedTensor<float>& spatial = model.params.find("spatial");
  for (int d = 0; d < cfg.n_looks; ++d)
    for (int b = 0; b < cfg.n_bins; ++b)
      for (int c = 0; c < cfg.n_channels; ++c) {
        const std::complex<double> w = bank.weight(d, b, c);
        const size_t base = ((static_cast<size_t>(d) * cfg.n_bins + b) * cfg.n_channels + c) * 2;
        spatial.v[base] = static_cast<float>(w.real());
        spatial.v[base + 1] = static_cast<float>(w.imag());
      }

  // The mel affine consumes the combination output (bins 1..comb_dim of the
  // selected look); the dropped top column of the filterbank is zero by
  // construction, so no energy is lost.
  NamedTensor<float>& mel_w = model.params.find("mel.W");
  for (int i = 0; i < cfg.comb_dim; ++i)
    for (int o = 0; o < cfg.n_mels; ++o)
      mel_w.v[static_cast<size_t>(i) * cfg.n_mels + o] = static_cast<float>(mel.weights(o, i));
  std::fill(model.params.find("mel.b").v.begin(), model.params.find("mel.b").v.end(), 0.f);

  NamedTensor<float>& comb = model.params.find("comb.W");
  if (variant == InitVariant::kDspInit) {
    xavier_tensor(comb, cfg.power_dim(), cfg.comb_dim, rng);
  } else {
    double bank_min = std::numeric_limits<double>::infinity(), bank_max = -bank_min;
    for (const auto& z : bank.weights) {
      bank_min = std::min({bank_min, z.real(), z.imag()});
      bank_max = std::max({bank_max, z.real(), z.imag()});
    }
    const double mel_min = mel.weights.minCoeff();
    const double mel_max = mel.weights.maxCoeff();
    const double lo = 0.5 * (bank_min + mel_min);
    const double hi = 0.5 * (bank_max + mel_max);
    for (float& v : comb.v) v = static_cast<float>(rng.uniform(lo, hi));
  }
  std::fill(model.params.find("comb.b").v.begin(), model.params.find("comb.b").v.end(), 0.f);
}

void init_teacher_uniform(TeacherModel& model, Rng& rng) {
  for (auto& t : model.params.tensors) {
    if (t.name.ends_with(".b")) {
      std::fill(t.v.begin(), t.v.end(), 0.f);
      continue;
    }
    const double bound = std::sqrt(1.0 / t.rows);
    for (float& v : t.v) v = static_cast<float>(rng.uniform(-bound, bound));
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json manifest;
  manifest["kind"] = ckpt.kind;
  manifest["config"] = ckpt.cfg;
  auto index = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& t : ckpt.params.tensors) {
    index.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", offset}});
    offset += t.size() * 4;
  }
  manifest["tensors"] = index;
  const std::string mtext = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write("BKCP", 4);
  const uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t mlen = mtext.size();
  f.write(reinterpret_cast<const char*>(&mlen), 8);
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& t : ckpt.params.tensors)
    f.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * 4));
  f.flush();
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingPrerequisite("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "BKCP", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || version != 1) throw std::runtime_error("checkpoint: unsupported version in " + path);
  uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw std::runtime_error("checkpoint: truncated manifest in " + path);
  const nlohmann::json manifest = nlohmann::json::parse(mtext);

  Checkpoint ckpt;
  ckpt.kind = manifest.at("kind").get<std::string>();
  ckpt.cfg = manifest.at("config").get<ModelConfig>();
  for (const auto& e : manifest.at("tensors")) {
    NamedTensor<float>& t = ckpt.params.add(e.at("name").get<std::string>(),
                                            e.at("rows").get<int>(), e.at("cols").get<int>());
    f.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
    if (!f)
      throw std::runtime_error("checkpoint: truncated payload for tensor '" + t.name + "' in " +
                               path);
  }
  f.peek();
  if (!f.eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path);
  return ckpt;
}

namespace {

template <class M>
M checked_model(Checkpoint&& ckpt, const std::string& kind, const std::string& path) {
  if (ckpt.kind != kind)
    throw IncompatibleArtifacts("checkpoint " + path + " holds a '" + ckpt.kind +
                                "' model, expected '" + kind + "'");
  M expected = M::build(ckpt.cfg);
  for (const auto& t : expected.params.tensors) {
    const NamedTensor<float>& got = ckpt.params.find(t.name);
    if (got.rows != t.rows || got.cols != t.cols)
      throw IncompatibleArtifacts("checkpoint tensor '" + t.name + "' has unexpected shape");
  }
  M m;
  m.cfg = ckpt.cfg;
  m.params = std::move(ckpt.params);
  return m;
}

}  // namespace

StudentModel load_student_checkpoint(const std::string& path) {
  return checked_model<StudentModel>(load_checkpoint(path), "student", path);
}

TeacherModel load_teacher_checkpoint(const std::string& path) {
  return checked_model<TeacherModel>(load_checkpoint(path), "teacher", path);
}

// ---------------------------------------------------------------------------
// Closed-form parameter counts
// ---------------------------------------------------------------------------

namespace {

int64_t lstm_params(int64_t in, int64_t h) { return 4 * h * (in + h + 1); }

}  // namespace

int64_t student_param_count(const ModelConfig& c) {
  int64_t n = 0;
  n += static_cast<int64_t>(c.n_looks) * c.n_bins * c.n_channels * 2;  // spatial
  n += static_cast<int64_t>(c.power_dim()) * c.comb_dim + c.comb_dim;  // combination
  n += static_cast<int64_t>(c.comb_dim) * c.n_mels + c.n_mels;         // mel affine
  int64_t in = c.n_mels;
  for (int l = 0; l < c.lstm_layers; ++l) {
    n += lstm_params(in, c.lstm_hidden);
    in = c.lstm_hidden;
  }
  n += static_cast<int64_t>(c.lstm_hidden) * c.n_classes + c.n_classes;
  return n;
}

int64_t teacher_param_count(const ModelConfig& c) {
  const TeacherConfig& t = c.teacher;
  int64_t n = 0;
  int64_t in = t.flstm_window;
  for (int l = 0; l < t.flstm_layers; ++l) {
    n += 2 * lstm_params(in, t.flstm_hidden);
    in = 2 * t.flstm_hidden;
  }
  in = c.flstm_out_dim();
  for (int l = 0; l < t.blstm_layers; ++l) {
    n += 2 * lstm_params(in, t.blstm_hidden);
    in = 2 * t.blstm_hidden;
  }
  n += static_cast<int64_t>(2 * t.blstm_hidden) * c.n_classes + c.n_classes;
  return n;
}

}  // namespace beamkd
