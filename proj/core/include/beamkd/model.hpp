#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "beamkd/autodiff.hpp"
#include "beamkd/beamform.hpp"
#include "beamkd/rng.hpp"
#include "beamkd/sigproc.hpp"

namespace beamkd {

struct TeacherConfig {
  int flstm_layers = 2;
  int flstm_hidden = 16;
  int flstm_window = 48;
  int flstm_stride = 15;
  int blstm_layers = 5;
  int blstm_hidden = 64;
};

struct ModelConfig {
  int n_bins = 128;
  int n_channels = 2;
  int n_looks = 12;
  int comb_dim = 127;
  int n_mels = 64;
  int lstm_layers = 5;
  int lstm_hidden = 64;
  int n_classes = 16;
  int teacher_input_dim = 256;  // log-DFT feature width
  TeacherConfig teacher;

  // The desk profile shrinks hidden sizes and the class inventory only;
  // wiring and front-end dimensions never change.
  static ModelConfig desk();
  static ModelConfig paper_scale();

  int spatial_input_dim() const { return n_bins * n_channels * 2; }
  int spatial_output_dim() const { return n_looks * n_bins * 2; }
  int power_dim() const { return n_looks * n_bins; }
  int flstm_windows() const {
    const int span = teacher_input_dim - teacher.flstm_window;
    return (span + teacher.flstm_stride - 1) / teacher.flstm_stride + 1;
  }
  int flstm_out_dim() const { return flstm_windows() * 2 * teacher.flstm_hidden; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <class S>
struct NamedTensor {
  std::string name;
  int rows = 0, cols = 0;
  std::vector<S> v;

  int64_t size() const { return static_cast<int64_t>(rows) * cols; }
};

template <class S>
struct ParamSet {
  std::vector<NamedTensor<S>> tensors;

  NamedTensor<S>& find(std::string_view name) {
    for (auto& t : tensors)
      if (t.name == name) return t;
    throw std::invalid_argument("unknown tensor name: " + std::string(name));
  }
  const NamedTensor<S>& find(std::string_view name) const {
    return const_cast<ParamSet*>(this)->find(name);
  }
  NamedTensor<S>& add(std::string name, int rows, int cols) {
    tensors.push_back({std::move(name), rows, cols,
                       std::vector<S>(static_cast<size_t>(rows) * cols, S(0))});
    return tensors.back();
  }
  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  template <class T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& t : tensors) {
      auto& nt = out.add(t.name, t.rows, t.cols);
      for (int64_t i = 0; i < t.size(); ++i) nt.v[i] = static_cast<T>(t.v[i]);
    }
    return out;
  }
};

struct StudentModel {
  ModelConfig cfg;
  ParamSet<float> params;

  static StudentModel build(const ModelConfig& cfg);
};

struct TeacherModel {
  ModelConfig cfg;
  ParamSet<float> params;

  static TeacherModel build(const ModelConfig& cfg);
};

// Binds parameter tensors onto a tape as leaves, each at most once.
template <class S>
class ParamBinder {
 public:
  ParamBinder(ad::Tape<S>& tape, const ParamSet<S>& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable) {}

  ad::TensorRef operator()(std::string_view name) {
    auto it = cache_.find(std::string(name));
    if (it != cache_.end()) return it->second;
    const NamedTensor<S>& t = params_.find(name);
    ad::TensorRef ref = tape_.leaf(t.v.data(), t.rows, t.cols, trainable_);
    cache_.emplace(std::string(name), ref);
    bound_.emplace_back(t.name, ref);
    return ref;
  }

  const std::vector<std::pair<std::string, ad::TensorRef>>& bound() const { return bound_; }

 private:
  ad::Tape<S>& tape_;
  const ParamSet<S>& params_;
  bool trainable_;
  std::map<std::string, ad::TensorRef> cache_;
  std::vector<std::pair<std::string, ad::TensorRef>> bound_;
};

// ---------------------------------------------------------------------------
// Forward passes. Inputs arrive step-major: row s*batch + b is item b at
// frame s; all front-end ops are frame-wise so only the LSTM stack cares.
// ---------------------------------------------------------------------------

// spatial -> complex power -> combination -> mel affine -> relu -> log.
template <class S>
ad::TensorRef frontend_forward(ad::Tape<S>& tape, ParamBinder<S>& p, const ModelConfig& cfg,
                               ad::TensorRef x) {
  ad::TensorRef beams = ad::spatial_filter(tape, x, p("spatial"), cfg.n_looks, cfg.n_bins,
                                           cfg.n_channels);
  ad::TensorRef power = ad::complex_power(tape, beams);
  ad::TensorRef comb = ad::affine(tape, power, p("comb.W"), p("comb.b"));
  ad::TensorRef mel = ad::affine(tape, comb, p("mel.W"), p("mel.b"));
  return ad::guarded_log(tape, ad::relu(tape, mel));
}

template <class S>
ad::TensorRef student_forward(ad::Tape<S>& tape, ParamBinder<S>& p, const ModelConfig& cfg,
                              ad::TensorRef x, int steps, int batch) {
  ad::TensorRef h = frontend_forward(tape, p, cfg, x);
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    const std::string base = "lstm" + std::to_string(l);
    h = ad::lstm_seq(tape, h, p(base + ".Wx"), p(base + ".Wh"), p(base + ".b"), steps, batch);
  }
  return ad::affine(tape, h, p("out.W"), p("out.b"));
}

template <class S>
ad::TensorRef bilstm_layer(ad::Tape<S>& tape, ParamBinder<S>& p, const std::string& base,
                           ad::TensorRef x, int steps, int batch) {
  ad::TensorRef fwd = ad::lstm_seq(tape, x, p(base + ".fwd.Wx"), p(base + ".fwd.Wh"),
                                   p(base + ".fwd.b"), steps, batch, false);
  ad::TensorRef bwd = ad::lstm_seq(tape, x, p(base + ".bwd.Wx"), p(base + ".bwd.Wh"),
                                   p(base + ".bwd.b"), steps, batch, true);
  return ad::concat_cols(tape, fwd, bwd);
}

// Frequency windows -> 2-layer biLSTM over windows (every frame is a batch
// item) -> per-frame concatenation -> 5-layer biLSTM over time -> logits.
template <class S>
ad::TensorRef teacher_forward(ad::Tape<S>& tape, ParamBinder<S>& p, const ModelConfig& cfg,
                              ad::TensorRef feats, int steps, int batch) {
  const int n_win = cfg.flstm_windows();
  const int rows = feats.rows;  // steps * batch frames
  ad::TensorRef h = ad::freq_windows(tape, feats, cfg.teacher.flstm_window,
                                     cfg.teacher.flstm_stride, n_win);
  for (int l = 0; l < cfg.teacher.flstm_layers; ++l)
    h = bilstm_layer(tape, p, "flstm" + std::to_string(l), h, n_win, rows);
  ad::TensorRef per_frame = ad::window_concat(tape, h, n_win);
  for (int l = 0; l < cfg.teacher.blstm_layers; ++l)
    per_frame = bilstm_layer(tape, p, "blstm" + std::to_string(l), per_frame, steps, batch);
  return ad::affine(tape, per_frame, p("out.W"), p("out.b"));
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

enum class InitVariant { kDspInit, kPretrainedDspInit };

// Copies superdirective weights into the spatial layer and mel filterbank
// weights into the mel affine. The combination layer is Xavier-normal for
// kDspInit, or uniform on [lo, hi] for kPretrainedDspInit where lo/hi average
// the beamformer and filterbank extrema.
void init_dsp(StudentModel& model, const BeamformerBank& pair_bank, const MelFilterbank& mel,
              InitVariant variant, Rng& rng);

// Xavier-normal everywhere; the LSTM stack is taken from `lstm_seed`
// when provided (a stand-in for initializing from a previously trained
// classification stack).
void init_random(StudentModel& model, Rng& rng, const ParamSet<float>* lstm_seed = nullptr);

// Uniform on +-sqrt(1/fan_in) for every teacher tensor.
void init_teacher_uniform(TeacherModel& model, Rng& rng);

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest (kind, config, tensor index) + f32 payload.
// Save -> load -> save is byte-identical.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string kind;  // "student" or "teacher"
  ModelConfig cfg;
  ParamSet<float> params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
StudentModel load_student_checkpoint(const std::string& path);
TeacherModel load_teacher_checkpoint(const std::string& path);

// Closed-form parameter counts for the wiring above.
int64_t student_param_count(const ModelConfig& cfg);
int64_t teacher_param_count(const ModelConfig& cfg);

}  // namespace beamkd
