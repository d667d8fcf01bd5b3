#include "beamkd/sigproc.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <stdexcept>
#include <unordered_map>

#include "beamkd/defs.hpp"
#include "fft_util.hpp"

namespace beamkd {

namespace detail {
namespace {

// FFTW plans are cached per transform size; creation is serialized, execution
// through the new-array interface is thread-safe. FFTW_UNALIGNED lets plans
// run on arbitrary caller buffers.
struct PlanCache {
  std::mutex mu;
  std::unordered_map<std::size_t, fftw_plan> fwd, inv;

  fftw_plan get_fwd(std::size_t n) {
    std::lock_guard<std::mutex> lock(mu);
    auto it = fwd.find(n);
    if (it != fwd.end()) return it->second;
    std::vector<double> in(n);
    std::vector<std::complex<double>> out(n / 2 + 1);
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(),
                                       reinterpret_cast<fftw_complex*>(out.data()),
                                       FFTW_ESTIMATE | FFTW_UNALIGNED);
    fwd.emplace(n, p);
    return p;
  }

  fftw_plan get_inv(std::size_t n) {
    std::lock_guard<std::mutex> lock(mu);
    auto it = inv.find(n);
    if (it != inv.end()) return it->second;
    std::vector<std::complex<double>> in(n / 2 + 1);
    std::vector<double> out(n);
    fftw_plan p = fftw_plan_dft_c2r_1d(static_cast<int>(n),
                                       reinterpret_cast<fftw_complex*>(in.data()), out.data(),
                                       FFTW_ESTIMATE | FFTW_UNALIGNED);
    inv.emplace(n, p);
    return p;
  }
};

PlanCache& plan_cache() {
  static PlanCache cache;
  return cache;
}

}  // namespace

void rfft(const double* in, std::size_t n, std::complex<double>* out) {
  fftw_plan p = plan_cache().get_fwd(n);
  // r2c preserves its input, but the API wants a mutable pointer.
  fftw_execute_dft_r2c(p, const_cast<double*>(in), reinterpret_cast<fftw_complex*>(out));
}

void irfft(const std::complex<double>* in, std::size_t n, double* out) {
  fftw_plan p = plan_cache().get_inv(n);
  // c2r destroys its input; work on a copy.
  std::vector<std::complex<double>> tmp(in, in + n / 2 + 1);
  fftw_execute_dft_c2r(p, reinterpret_cast<fftw_complex*>(tmp.data()), out);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv_n;
}

}  // namespace detail

int AudioConfig::window_samples() const {
  return static_cast<int>(std::lround(window_ms * sample_rate_hz / 1000.0));
}

int AudioConfig::shift_samples() const {
  return static_cast<int>(std::lround(shift_ms * sample_rate_hz / 1000.0));
}

double AudioConfig::bin_hz(int bin_index) const {
  return static_cast<double>(bin_index + 1) * sample_rate_hz / dft_size;
}

void AudioConfig::validate() const {
  const double win = window_ms * sample_rate_hz / 1000.0;
  const double shf = shift_ms * sample_rate_hz / 1000.0;
  if (win <= 0 || std::abs(win - std::lround(win)) > 1e-9)
    throw std::invalid_argument("window_ms * sample_rate must be a positive integer of samples");
  if (shf <= 0 || std::abs(shf - std::lround(shf)) > 1e-9)
    throw std::invalid_argument("shift_ms * sample_rate must be a positive integer of samples");
  if (dft_size < window_samples())
    throw std::invalid_argument("dft_size must be >= window length");
  if (teacher_dft_size < window_samples())
    throw std::invalid_argument("teacher_dft_size must be >= window length");
}

double mel_of_hz(double f_hz) { return 2595.0 * std::log10(1.0 + f_hz / 700.0); }

double hz_of_mel(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / n));
  return w;
}

RowMatXd frame_signal(std::span<const double> audio, const AudioConfig& cfg) {
  cfg.validate();
  const int win = cfg.window_samples();
  const int shift = cfg.shift_samples();
  if (static_cast<int>(audio.size()) < win)
    throw std::invalid_argument("frame_signal: audio too short for one window");
  const int n_frames = static_cast<int>((audio.size() - win) / shift) + 1;
  const std::vector<double> w = hann_window(win);
  RowMatXd frames(n_frames, win);
  for (int f = 0; f < n_frames; ++f) {
    const double* src = audio.data() + static_cast<size_t>(f) * shift;
    for (int i = 0; i < win; ++i) frames(f, i) = src[i] * w[i];
  }
  return frames;
}

namespace {

// Zero-pad frames to `n_fft`, run the real DFT and keep bins 1..n_fft/2.
void dft_rows(const RowMatXd& frames, int n_fft,
              const std::function<void(int, const std::complex<double>*)>& sink) {
  const int win = static_cast<int>(frames.cols());
  std::vector<double> padded(n_fft, 0.0);
  std::vector<std::complex<double>> spectrum(n_fft / 2 + 1);
  for (int f = 0; f < frames.rows(); ++f) {
    std::copy(frames.row(f).data(), frames.row(f).data() + win, padded.begin());
    std::fill(padded.begin() + win, padded.end(), 0.0);
    detail::rfft(padded.data(), n_fft, spectrum.data());
    sink(f, spectrum.data());
  }
}

}  // namespace

ComplexSpectrogram dft_frames(const RowMatXd& frames, const AudioConfig& cfg) {
  ComplexSpectrogram spec;
  spec.frames = static_cast<int>(frames.rows());
  spec.bins = cfg.dft_size / 2;
  spec.channels = 1;
  spec.values.resize(static_cast<size_t>(spec.frames) * spec.bins);
  dft_rows(frames, cfg.dft_size, [&](int f, const std::complex<double>* s) {
    for (int b = 0; b < spec.bins; ++b) spec.values[static_cast<size_t>(f) * spec.bins + b] = s[b + 1];
  });
  return spec;
}

ComplexSpectrogram stft_multichannel(const MultiChannelAudio& audio, const AudioConfig& cfg) {
  if (audio.num_channels() == 0) throw std::invalid_argument("stft: no channels");
  ComplexSpectrogram spec;
  spec.channels = audio.num_channels();
  spec.bins = cfg.dft_size / 2;
  for (int c = 0; c < audio.num_channels(); ++c) {
    ComplexSpectrogram one = dft_frames(frame_signal(audio.channels[c], cfg), cfg);
    if (c == 0) {
      spec.frames = one.frames;
      spec.values.resize(static_cast<size_t>(spec.frames) * spec.bins * spec.channels);
    } else if (one.frames != spec.frames) {
      throw std::invalid_argument("stft: channel lengths differ");
    }
    for (int f = 0; f < spec.frames; ++f)
      for (int b = 0; b < spec.bins; ++b)
        spec.at(f, b, c) = one.values[static_cast<size_t>(f) * spec.bins + b];
  }
  return spec;
}

RowMatXd log_dft_teacher(const RowMatXd& frames, const AudioConfig& cfg) {
  const int bins = cfg.teacher_dft_size / 2;
  RowMatXd out(frames.rows(), bins);
  dft_rows(frames, cfg.teacher_dft_size, [&](int f, const std::complex<double>* s) {
    for (int b = 0; b < bins; ++b)
      out(f, b) = std::log(std::max(std::norm(s[b + 1]), kLogFloor));
  });
  return out;
}

MelFilterbank make_mel_filterbank(const AudioConfig& cfg, int n_mels) {
  const int n_bins = cfg.dft_size / 2;
  if (n_mels < 1) throw std::invalid_argument("make_mel_filterbank: n_mels must be >= 1");
  if (n_mels > n_bins)
    throw std::invalid_argument("make_mel_filterbank: n_mels exceeds bin count");
  const double nyquist = cfg.sample_rate_hz / 2.0;
  const double mel_max = mel_of_hz(nyquist);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) edges[i] = mel_max * i / (n_mels + 1);

  MelFilterbank fb;
  fb.n_mels = n_mels;
  fb.n_bins = n_bins;
  fb.weights = RowMatXd::Zero(n_mels, n_bins);
  for (int b = 0; b < n_bins; ++b) {
    const double m = mel_of_hz(cfg.bin_hz(b));
    for (int k = 0; k < n_mels; ++k) {
      const double lo = edges[k], mid = edges[k + 1], hi = edges[k + 2];
      double w = 0.0;
      if (m >= lo && m <= mid && mid > lo)
        w = (m - lo) / (mid - lo);
      else if (m > mid && m < hi)
        w = (hi - m) / (hi - mid);
      fb.weights(k, b) = std::max(0.0, w);
    }
  }
  return fb;
}

RowMatXd lfbe(const RowMatXd& power, const MelFilterbank& mel) {
  if (power.cols() != mel.n_bins)
    throw std::invalid_argument("lfbe: power spectrum width != filterbank bins");
  if ((power.array() < 0.0).any())
    throw std::invalid_argument("lfbe: power spectrum must be non-negative");
  RowMatXd energies = power * mel.weights.transpose();  // [frames x n_mels]
  return energies.array().max(kLogFloor).log().matrix();
}

RowMatXd power_spectrum(const ComplexSpectrogram& spec, int channel) {
  if (channel < 0 || channel >= spec.channels)
    throw std::invalid_argument("power_spectrum: channel out of range");
  RowMatXd out(spec.frames, spec.bins);
  for (int f = 0; f < spec.frames; ++f)
    for (int b = 0; b < spec.bins; ++b) out(f, b) = std::norm(spec.at(f, b, channel));
  return out;
}

void GmvAccumulator::add(const ComplexSpectrogram& spec) {
  if (mean_.empty()) {
    mean_.assign(spec.bins, 0.0);
    m2_.assign(spec.bins, 0.0);
  } else if (static_cast<int>(mean_.size()) != spec.bins) {
    throw std::invalid_argument("gmv_fit: bin count changed mid-fit");
  }
  for (int f = 0; f < spec.frames; ++f)
    for (int c = 0; c < spec.channels; ++c) {
      ++count_per_bin_;
      for (int b = 0; b < spec.bins; ++b) {
        const double mag = std::abs(spec.at(f, b, c));
        const double delta = mag - mean_[b];
        mean_[b] += delta / static_cast<double>(count_per_bin_);
        m2_[b] += delta * (mag - mean_[b]);
      }
    }
  frames_ += spec.frames;
}

GmvStats GmvAccumulator::finish() const {
  if (frames_ < 1000)
    throw std::invalid_argument("gmv_fit: needs at least 1000 frames");
  GmvStats stats;
  stats.n_frames_fitted = frames_;
  stats.per_bin_scale.resize(mean_.size());
  for (size_t b = 0; b < mean_.size(); ++b) {
    const double var = m2_[b] / static_cast<double>(count_per_bin_);
    const double sd = std::sqrt(var);
    stats.per_bin_scale[b] = (sd > 0.0 && std::isfinite(sd)) ? 1.0 / sd : 1.0;
  }
  return stats;
}

GmvStats gmv_fit(std::span<const ComplexSpectrogram> corpus) {
  GmvAccumulator acc;
  for (const auto& spec : corpus) acc.add(spec);
  return acc.finish();
}

void gmv_apply(ComplexSpectrogram& spec, const GmvStats& stats) {
  if (static_cast<int>(stats.per_bin_scale.size()) != spec.bins)
    throw std::invalid_argument("gmv_apply: bin count mismatch");
  for (int f = 0; f < spec.frames; ++f)
    for (int b = 0; b < spec.bins; ++b) {
      const double s = stats.per_bin_scale[b];
      for (int c = 0; c < spec.channels; ++c) spec.at(f, b, c) *= s;
    }
}

int align_delay(std::span<const double> reference, std::span<const double> signal, int max_lag) {
  if (max_lag < 0) throw std::invalid_argument("align_delay: max_lag must be >= 0");
  if (static_cast<int>(reference.size()) < 2 * max_lag ||
      static_cast<int>(signal.size()) < 2 * max_lag)
    throw std::invalid_argument("align_delay: signals shorter than 2*max_lag");

  auto energy = [](std::span<const double> x, int begin, int end) {
    double e = 0;
    for (int i = begin; i < end; ++i) e += x[i] * x[i];
    return e;
  };

  double best = -2.0;
  int best_lag = 0;
  bool any = false;
  // Visit lags by increasing |lag| so exact ties keep the smaller shift.
  for (int a = 0; a <= max_lag; ++a) {
    for (int sign = 0; sign < (a == 0 ? 1 : 2); ++sign) {
      const int lag = sign == 0 ? a : -a;
      // overlap of ref[t] with sig[t + lag]
      const int t0 = std::max(0, -lag);
      const int t1 = std::min<int>(static_cast<int>(reference.size()),
                                   static_cast<int>(signal.size()) - lag);
      if (t1 - t0 < 1) continue;
      double dot = 0;
      for (int ti = t0; ti < t1; ++ti) dot += reference[ti] * signal[ti + lag];
      const double er = energy(reference, t0, t1);
      const double es = energy(signal, t0 + lag, t1 + lag);
      if (er <= 1e-12 || es <= 1e-12) continue;
      const double r = dot / std::sqrt(er * es);
      any = true;
      if (r > best) {
        best = r;
        best_lag = lag;
      }
    }
  }
  if (!any) throw std::runtime_error("align_delay: degenerate correlation (silent signal)");
  return best_lag;
}

}  // namespace beamkd
