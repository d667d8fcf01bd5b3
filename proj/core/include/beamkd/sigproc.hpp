#pragma once

#include <Eigen/Dense>

#include <complex>
#include <span>
#include <string>
#include <vector>

namespace beamkd {

using RowMatXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AudioConfig {
  int sample_rate_hz = 16000;
  double window_ms = 12.5;
  double shift_ms = 10.0;
  int dft_size = 256;          // front-end path: bins 1..128 kept
  int teacher_dft_size = 512;  // teacher path: bins 1..256 kept

  int window_samples() const;
  int shift_samples() const;
  int bins() const { return dft_size / 2; }
  int teacher_bins() const { return teacher_dft_size / 2; }
  double bin_hz(int bin_index) const;  // center frequency of kept bin 0..bins()-1
  void validate() const;
};

struct MultiChannelAudio {
  int sample_rate_hz = 16000;
  std::vector<std::vector<double>> channels;

  int num_channels() const { return static_cast<int>(channels.size()); }
  int num_samples() const { return channels.empty() ? 0 : static_cast<int>(channels[0].size()); }
};

// frames x bins x channels complex STFT values; the DC bin is dropped, bins
// run from 1 through Nyquist of the analysis DFT.
struct ComplexSpectrogram {
  int frames = 0, bins = 0, channels = 0;
  std::vector<std::complex<double>> values;

  std::complex<double>& at(int f, int b, int c) {
    return values[(static_cast<size_t>(f) * bins + b) * channels + c];
  }
  const std::complex<double>& at(int f, int b, int c) const {
    return values[(static_cast<size_t>(f) * bins + b) * channels + c];
  }
};

struct MelFilterbank {
  int n_mels = 0, n_bins = 0;
  RowMatXd weights;  // [n_mels x n_bins], non-negative
};

struct GmvStats {
  std::vector<double> per_bin_scale;  // inverse corpus std of magnitude
  int64_t n_frames_fitted = 0;
};

double mel_of_hz(double f_hz);
double hz_of_mel(double mel);

// Periodic Hann window of length n.
std::vector<double> hann_window(int n);

// Hann-windowed frames, floor((len - window)/shift) + 1 rows.
RowMatXd frame_signal(std::span<const double> audio, const AudioConfig& cfg);

// Zero-pads each frame to cfg.dft_size, keeps DFT bins 1..dft_size/2
// (DC dropped, Nyquist kept).
ComplexSpectrogram dft_frames(const RowMatXd& frames, const AudioConfig& cfg);

// Full multi-channel STFT of an utterance; channels share frame timing.
ComplexSpectrogram stft_multichannel(const MultiChannelAudio& audio, const AudioConfig& cfg);

// Teacher features: 512-point DFT bins 1..256, log power with floor.
RowMatXd log_dft_teacher(const RowMatXd& frames, const AudioConfig& cfg);

// Triangular filters with centers equally spaced on the mel axis between
// 0 Hz and Nyquist, sampled at the kept-bin center frequencies. The Nyquist
// column is identically zero by construction.
MelFilterbank make_mel_filterbank(const AudioConfig& cfg, int n_mels = 64);

// log(max(mel * power, 1e-10)) per frame; power must be non-negative.
RowMatXd lfbe(const RowMatXd& power_spectrum, const MelFilterbank& mel);

// |X|^2 for one channel of a spectrogram, [frames x bins].
RowMatXd power_spectrum(const ComplexSpectrogram& spec, int channel);

// Streaming fit of per-bin magnitude statistics, pooled over channels.
class GmvAccumulator {
 public:
  void add(const ComplexSpectrogram& spec);
  GmvStats finish() const;  // requires >= 1000 frames

 private:
  std::vector<double> mean_, m2_;
  int64_t frames_ = 0;
  int64_t count_per_bin_ = 0;
};

GmvStats gmv_fit(std::span<const ComplexSpectrogram> corpus);

// Scales every bin by per_bin_scale; phase is preserved exactly.
void gmv_apply(ComplexSpectrogram& spec, const GmvStats& stats);

// Argmax of normalized cross-correlation over lags in [-max_lag, max_lag];
// positive lag means `signal` is a delayed copy of `reference`. Ties break
// toward the smallest |lag|.
int align_delay(std::span<const double> reference, std::span<const double> signal, int max_lag);

}  // namespace beamkd
