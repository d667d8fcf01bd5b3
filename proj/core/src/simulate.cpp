#include "beamkd/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <bit>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "beamkd/defs.hpp"
#include "beamkd/errors.hpp"
#include "beamkd/formats.hpp"
#include "beamkd/json_support.hpp"
#include "beamkd/thread_pool.hpp"
#include "beamkd/wav_io.hpp"

#include "fft_util.hpp"

namespace beamkd::sim {

namespace fs = std::filesystem;

SynthLabelSpec SynthLabelSpec::default_spec(int n_classes) {
  SynthLabelSpec spec;
  spec.n_classes = n_classes;
  const double f_lo = 300.0, f_hi = 7000.0;
  for (int c = 0; c < n_classes; ++c) {
    const double t = n_classes == 1 ? 0.0 : static_cast<double>(c) / (n_classes - 1);
    spec.bands.push_back({f_lo * std::pow(f_hi / f_lo, t), 6.0});
  }
  return spec;
}

void SynthLabelSpec::validate() const {
  if (n_classes < 1 || static_cast<int>(bands.size()) != n_classes)
    throw std::invalid_argument("label spec: bands must match n_classes");
  if (segment_min_ms <= 0 || segment_mean_ms < segment_min_ms)
    throw std::invalid_argument("label spec: segment durations invalid");
}

namespace {

// RBJ constant-peak-gain band-pass resonator.
struct Biquad {
  double b0, b1, b2, a1, a2;
  double z1 = 0, z2 = 0;

  Biquad(double fc, double q, double fs) {
    const double w = 2.0 * kPi * fc / fs;
    const double alpha = std::sin(w) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0 = alpha / a0;
    b1 = 0.0;
    b2 = -alpha / a0;
    a1 = -2.0 * std::cos(w) / a0;
    a2 = (1.0 - alpha) / a0;
  }

  double step(double x) {
    const double y = b0 * x + z1;
    z1 = b1 * x - a1 * y + z2;
    z2 = b2 * x - a2 * y;
    return y;
  }
};

}  // namespace

LabeledSource synth_source(const SynthLabelSpec& spec, double seconds, Rng& rng,
                           const AudioConfig& audio) {
  spec.validate();
  if (seconds < 0.5) throw std::invalid_argument("synth_source: need at least 0.5 s");
  const int fs = audio.sample_rate_hz;
  const int n = static_cast<int>(std::lround(seconds * fs));
  LabeledSource src;
  src.waveform.assign(n, 0.0);
  std::vector<uint16_t> sample_class(n, 0);

  int pos = 0;
  while (pos < n) {
    const int cls = static_cast<int>(rng.uniform_int(spec.n_classes));
    const double extra_ms = -(spec.segment_mean_ms - spec.segment_min_ms) *
                            std::log(std::max(rng.uniform(), 1e-12));
    int seg = static_cast<int>(std::lround((spec.segment_min_ms + extra_ms) * fs / 1000.0));
    seg = std::min(seg, n - pos);
    Biquad filt(spec.bands[cls].center_hz, spec.bands[cls].q, fs);
    const double mod_hz = rng.uniform(2.0, 8.0);
    const double mod_phase = rng.uniform(0.0, 2.0 * kPi);
    double energy = 0.0;
    std::vector<double> seg_buf(seg);
    for (int i = 0; i < seg; ++i) {
      const double white = rng.normal();
      double y = filt.step(white);
      y *= 0.6 + 0.4 * std::sin(2.0 * kPi * mod_hz * i / fs + mod_phase);
      seg_buf[i] = y;
      energy += y * y;
    }
    const double rms = std::sqrt(energy / std::max(seg, 1));
    const double gain = rms > 0 ? 0.1 / rms : 0.0;
    const int fade = std::min(seg / 4, fs / 200);  // 5 ms boundary fades
    for (int i = 0; i < seg; ++i) {
      double g = gain;
      if (i < fade) g *= 0.5 * (1.0 - std::cos(kPi * i / fade));
      if (seg - 1 - i < fade) g *= 0.5 * (1.0 - std::cos(kPi * (seg - 1 - i) / fade));
      src.waveform[pos + i] = seg_buf[i] * g;
      sample_class[pos + i] = static_cast<uint16_t>(cls);
    }
    pos += seg;
  }

  const int win = audio.window_samples();
  const int shift = audio.shift_samples();
  const int n_frames = n >= win ? (n - win) / shift + 1 : 0;
  src.frame_labels.resize(n_frames);
  for (int f = 0; f < n_frames; ++f)
    src.frame_labels[f] = sample_class[f * shift + win / 2];
  return src;
}

namespace {

constexpr int kDelayTaps = 32;
constexpr int kDelayLatency = 16;

// Unit-DC-gain windowed-sinc fractional delay of d samples (latency removed).
std::vector<double> fractional_delay_filter(double d) {
  std::vector<double> h(kDelayTaps);
  double sum = 0.0;
  for (int k = 0; k < kDelayTaps; ++k) {
    const double x = k - kDelayLatency - d;
    const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(kPi * x) / (kPi * x);
    const double win =
        0.42 - 0.5 * std::cos(2.0 * kPi * k / (kDelayTaps - 1)) +
        0.08 * std::cos(4.0 * kPi * k / (kDelayTaps - 1));
    h[k] = sinc * win;
    sum += h[k];
  }
  for (double& v : h) v /= sum;
  return h;
}

std::vector<double> apply_delay(std::span<const double> x, double d) {
  const std::vector<double> h = fractional_delay_filter(d);
  const int n = static_cast<int>(x.size());
  std::vector<double> y(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = 0; k < kDelayTaps; ++k) {
      const int j = i + kDelayLatency - k;
      if (j >= 0 && j < n) acc += h[k] * x[j];
    }
    y[i] = acc;
  }
  return y;
}

MultiChannelAudio propagate_direction(std::span<const double> source, const ArrayGeometry& geom,
                                      const Eigen::Vector3d& propagation, int fs, double c) {
  MultiChannelAudio out;
  out.sample_rate_hz = fs;
  const Eigen::Vector3d center = geom.centroid();
  out.channels.resize(geom.num_mics());
  for (int m = 0; m < geom.num_mics(); ++m) {
    const double tau = (geom.mics[m] - center).dot(propagation) / c;
    out.channels[m] = apply_delay(source, tau * fs);
  }
  return out;
}

}  // namespace

MultiChannelAudio propagate(std::span<const double> source, const ArrayGeometry& geom,
                            double azimuth_deg, int sample_rate_hz, double c) {
  geom.validate();
  // A wave arriving from bearing `azimuth` travels along the opposite vector.
  return propagate_direction(source, geom, -azimuth_direction(azimuth_deg), sample_rate_hz, c);
}

NoisyMix add_noise(const MultiChannelAudio& clean, const SceneConfig& scene, Rng& rng) {
  const int M = clean.num_channels();
  const int n = clean.num_samples();
  NoisyMix mix;
  mix.clean = clean;
  mix.noise.sample_rate_hz = clean.sample_rate_hz;
  mix.noise.channels.assign(M, std::vector<double>(n, 0.0));
  if (scene.snr_db >= kNoiselessSnrDb) {
    mix.mixed = clean;
    return mix;
  }

  double source_power = 0.0;
  for (const auto& ch : clean.channels)
    for (double v : ch) source_power += v * v;
  source_power /= std::max<size_t>(1, static_cast<size_t>(M) * n);

  // Each plane wave is synthesized in the frequency domain: a Hermitian
  // white spectrum steered to every mic by an exact per-bin phase ramp
  // (phasor recurrence), one inverse FFT per mic at the end.
  const size_t n_fft = std::bit_ceil(static_cast<size_t>(n));
  const size_t n_bins = n_fft / 2 + 1;
  const Eigen::Vector3d center = scene.geometry.centroid();
  std::vector<std::complex<double>> wave(n_bins);
  std::vector<std::vector<std::complex<double>>> acc(
      M, std::vector<std::complex<double>>(n_bins, 0.0));
  for (int w = 0; w < scene.n_diffuse_plane_waves; ++w) {
    // Uniform direction on the sphere (spherically isotropic field).
    const double z = rng.uniform(-1.0, 1.0);
    const double az = rng.uniform(0.0, 2.0 * kPi);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Eigen::Vector3d dir(r * std::cos(az), r * std::sin(az), z);
    const double amp = std::sqrt(n_fft / 2.0);
    wave[0] = std::sqrt(2.0) * amp * rng.normal();
    for (size_t k = 1; k + 1 < n_bins; ++k)
      wave[k] = std::complex<double>(amp * rng.normal(), amp * rng.normal());
    wave[n_bins - 1] = std::sqrt(2.0) * amp * rng.normal();
    for (int m = 0; m < M; ++m) {
      const double tau =
          (scene.geometry.mics[m] - center).dot(dir) / kSpeedOfSound;
      const double step_phase = -2.0 * kPi * tau * clean.sample_rate_hz / n_fft;
      const std::complex<double> step = std::polar(1.0, step_phase);
      std::complex<double> phasor(1.0, 0.0);
      auto& dst = acc[m];
      for (size_t k = 0; k < n_bins; ++k) {
        dst[k] += wave[k] * phasor;
        phasor *= step;
      }
    }
  }
  std::vector<double> time_buf(n_fft);
  for (int m = 0; m < M; ++m) {
    acc[m][0] = acc[m][0].real();
    acc[m][n_bins - 1] = acc[m][n_bins - 1].real();
    detail::irfft(acc[m].data(), n_fft, time_buf.data());
    std::copy(time_buf.begin(), time_buf.begin() + n, mix.noise.channels[m].begin());
  }

  double noise_power = 0.0;
  for (const auto& ch : mix.noise.channels)
    for (double v : ch) noise_power += v * v;
  noise_power /= std::max<size_t>(1, static_cast<size_t>(M) * n);

  const double target = source_power / std::pow(10.0, scene.snr_db / 10.0);
  const double gain = (noise_power > 0 && source_power > 0)
                          ? std::sqrt(target / noise_power)
                          : 0.0;
  const double sensor_sd =
      std::sqrt(source_power * std::pow(10.0, scene.sensor_noise_db / 10.0));
  for (int m = 0; m < M; ++m)
    for (int i = 0; i < n; ++i)
      mix.noise.channels[m][i] = mix.noise.channels[m][i] * gain + sensor_sd * rng.normal();

  mix.mixed.sample_rate_hz = clean.sample_rate_hz;
  mix.mixed.channels.assign(M, std::vector<double>(n));
  for (int m = 0; m < M; ++m)
    for (int i = 0; i < n; ++i)
      mix.mixed.channels[m][i] = clean.channels[m][i] + mix.noise.channels[m][i];
  return mix;
}

namespace {

std::string utt_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "utt%05d", i);
  return buf;
}

}  // namespace

CorpusManifest make_corpus(const CorpusParams& params, const std::string& out_dir,
                           uint64_t seed, bool force) {
  params.audio.validate();
  params.labels.validate();
  params.geometry.validate();
  if (params.n_utts < 1) throw ConfigError("make_corpus: n_utts must be >= 1");
  const fs::path dir(out_dir);
  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path) && !force)
    throw ConfigError("make_corpus: " + manifest_path.string() +
                      " already exists (use --force to overwrite)");
  fs::create_directories(dir);

  const int n_labeled = static_cast<int>(std::lround(params.n_utts * params.labeled_fraction));
  CorpusManifest manifest;
  manifest.seed = seed;
  manifest.n_classes = params.labels.n_classes;
  manifest.audio = params.audio;
  manifest.geometry = params.geometry;
  manifest.utterances.resize(params.n_utts);

  parallel_for(params.n_utts, [&](size_t i) {
    Rng rng(Rng::derive(seed, "utt", i));
    UtteranceEntry& e = manifest.utterances[i];
    e.id = utt_id(static_cast<int>(i));
    e.labeled = static_cast<int>(i) < n_labeled;
    e.azimuth_deg = rng.uniform(0.0, 360.0);
    e.snr_db = rng.uniform(params.snr_db_min, params.snr_db_max);

    LabeledSource src =
        synth_source(params.labels, params.utterance_seconds, rng, params.audio);
    MultiChannelAudio mc = propagate(src.waveform, params.geometry, e.azimuth_deg,
                                     params.audio.sample_rate_hz);
    SceneConfig scene;
    scene.geometry = params.geometry;
    scene.source_azimuth_deg = e.azimuth_deg;
    scene.snr_db = e.snr_db;
    scene.n_diffuse_plane_waves = params.n_diffuse_plane_waves;
    scene.sensor_noise_db = params.sensor_noise_db;
    NoisyMix mix = add_noise(mc, scene, rng);

    e.wav = e.id + ".wav";
    e.labels = e.id + std::string(".bklb") + (e.labeled ? "" : ".evalonly");
    e.n_frames = static_cast<int>(src.frame_labels.size());
    try {
      write_wav((dir / e.wav).string(), mix.mixed);
      write_labels((dir / e.labels).string(), src.frame_labels, params.labels.n_classes);
    } catch (const std::exception& ex) {
      throw std::runtime_error("make_corpus: " + e.id + ": " + ex.what());
    }
  });

  nlohmann::json j;
  j["seed"] = seed;
  j["n_classes"] = manifest.n_classes;
  j["audio"] = manifest.audio;
  j["geometry"] = manifest.geometry;
  auto utts = nlohmann::json::array();
  for (const auto& e : manifest.utterances) {
    utts.push_back({{"id", e.id},
                    {"wav", e.wav},
                    {"labels", e.labels},
                    {"labeled", e.labeled},
                    {"azimuth_deg", e.azimuth_deg},
                    {"snr_db", e.snr_db},
                    {"n_frames", e.n_frames}});
  }
  j["utterances"] = utts;
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("make_corpus: cannot write manifest");
  out << j.dump(2) << "\n";
  return manifest;
}

CorpusManifest load_manifest(const std::string& dir) {
  const fs::path path = fs::path(dir) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw MissingPrerequisite("missing corpus manifest: " + path.string());
  nlohmann::json j;
  in >> j;
  CorpusManifest m;
  m.seed = j.at("seed").get<uint64_t>();
  m.n_classes = j.at("n_classes").get<int>();
  m.audio = j.at("audio").get<AudioConfig>();
  m.geometry = j.at("geometry").get<ArrayGeometry>();
  for (const auto& u : j.at("utterances")) {
    UtteranceEntry e;
    e.id = u.at("id").get<std::string>();
    e.wav = u.at("wav").get<std::string>();
    e.labels = u.at("labels").get<std::string>();
    e.labeled = u.at("labeled").get<bool>();
    e.azimuth_deg = u.at("azimuth_deg").get<double>();
    e.snr_db = u.at("snr_db").get<double>();
    e.n_frames = u.at("n_frames").get<int>();
    m.utterances.push_back(std::move(e));
  }
  return m;
}

}  // namespace beamkd::sim
