#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beamkd/beamform.hpp"
#include "beamkd/rng.hpp"
#include "beamkd/sigproc.hpp"

namespace beamkd::sim {

struct SceneConfig {
  ArrayGeometry geometry = ArrayGeometry::circular_7ch();
  double source_azimuth_deg = 0.0;
  double snr_db = 15.0;                // 1e9 or larger means noiseless
  int n_diffuse_plane_waves = 36;
  double sensor_noise_db = -40.0;      // relative to the source power
  double utterance_seconds = 2.0;
  uint64_t seed = 0;
};

inline constexpr double kNoiselessSnrDb = 1e9;

struct BandSpec {
  double center_hz = 0.0;
  double q = 6.0;  // resonator quality factor
};

// Synthetic class inventory standing in for senones: band-passed noise
// bursts with per-class resonant centers, geometrically spaced so classes
// stay acoustically separable.
struct SynthLabelSpec {
  int n_classes = 16;
  double segment_mean_ms = 300.0;
  double segment_min_ms = 80.0;
  std::vector<BandSpec> bands;

  static SynthLabelSpec default_spec(int n_classes = 16);
  void validate() const;
};

struct LabeledSource {
  std::vector<double> waveform;
  std::vector<uint16_t> frame_labels;  // one per analysis frame
};

// Piecewise class segments; labels are emitted at the frame rate of `audio`
// (label of a frame = class active at its center sample).
LabeledSource synth_source(const SynthLabelSpec& spec, double seconds, Rng& rng,
                           const AudioConfig& audio);

// Far-field plane wave from the given bearing: per-mic fractional delays
// (windowed-sinc, 32 taps, latency compensated) referenced to the centroid.
MultiChannelAudio propagate(std::span<const double> source, const ArrayGeometry& geom,
                            double azimuth_deg, int sample_rate_hz,
                            double c = kSpeedOfSound);

struct NoisyMix {
  MultiChannelAudio mixed;
  MultiChannelAudio clean;  // oracle decomposition kept for measurement
  MultiChannelAudio noise;
};

// Diffuse field as a sum of independent white-noise plane waves from
// uniformly random directions on the sphere, scaled to the requested SNR,
// plus independent per-mic sensor noise.
NoisyMix add_noise(const MultiChannelAudio& clean, const SceneConfig& scene, Rng& rng);

struct CorpusParams {
  int n_utts = 100;
  double labeled_fraction = 0.25;
  double snr_db_min = 5.0;
  double snr_db_max = 20.0;
  double sensor_noise_db = -40.0;
  double utterance_seconds = 2.0;
  int n_diffuse_plane_waves = 36;
  ArrayGeometry geometry = ArrayGeometry::circular_7ch();
  SynthLabelSpec labels = SynthLabelSpec::default_spec();
  AudioConfig audio;
};

struct UtteranceEntry {
  std::string id;
  std::string wav;     // relative path
  std::string labels;  // relative path; ".evalonly" suffix when unlabeled
  bool labeled = true;
  double azimuth_deg = 0.0;
  double snr_db = 0.0;
  int n_frames = 0;
};

struct CorpusManifest {
  uint64_t seed = 0;
  int n_classes = 0;
  AudioConfig audio;
  ArrayGeometry geometry;
  std::vector<UtteranceEntry> utterances;
};

// Writes per-utterance 7-channel WAVs, label files and a manifest JSON.
// Ground truth for "unlabeled" utterances goes to a .evalonly sidecar that
// training loaders refuse to read.
CorpusManifest make_corpus(const CorpusParams& params, const std::string& out_dir,
                           uint64_t seed, bool force = false);

CorpusManifest load_manifest(const std::string& dir);

}  // namespace beamkd::sim
