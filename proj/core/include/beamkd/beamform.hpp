#pragma once

#include <Eigen/Dense>

#include <complex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "beamkd/defs.hpp"
#include "beamkd/sigproc.hpp"

namespace beamkd {

struct ArrayGeometry {
  std::string name;
  std::vector<Eigen::Vector3d> mics;  // meters

  int num_mics() const { return static_cast<int>(mics.size()); }
  Eigen::Vector3d centroid() const;
  void validate() const;  // >= 2 mics, pairwise distinct

  // 1 center mic + 6 ring mics at radius 0.0425 m; ring azimuths k*60 deg.
  static ArrayGeometry circular_7ch(double radius_m = 0.0425);
  static ArrayGeometry from_json_file(const std::string& path);
  std::string to_json() const;
};

// Default student channel pair: the ring mics at azimuth 0 and 180 degrees.
std::pair<int, int> opposite_pair(const ArrayGeometry& geom);

struct SteeringVector {
  Eigen::Vector3d direction;  // propagation direction (unit)
  double freq_hz = 0;
  Eigen::VectorXcd phases;    // unit-modulus, one per mic
};

struct BeamformerConfig {
  // Diagonal loading: sigma = loading_scale * trace(Gamma) / M.
  double loading_scale = 1e-2;
  double speed_of_sound = kSpeedOfSound;
};

struct BeamformerBank {
  ArrayGeometry geometry;
  std::vector<Eigen::Vector3d> directions;  // look directions (source bearings)
  int bins = 0;
  int sample_rate_hz = 16000;
  int dft_size = 256;
  double loading_sigma = 0.0;  // representative sigma used at design time
  // weights[(d * bins + b) * M + m]
  std::vector<std::complex<double>> weights;

  int num_directions() const { return static_cast<int>(directions.size()); }
  std::span<const std::complex<double>> weights_for(int direction) const;
  std::complex<double> weight(int d, int b, int m) const {
    return weights[(static_cast<size_t>(d) * bins + b) * geometry.num_mics() + m];
  }
};

// Plane-wave phases exp(-i 2 pi f (r_m . u) / c) for propagation direction u
// (pointing from the source toward the array). Positions are taken relative
// to the array centroid so delays reference the array center.
SteeringVector steering_vector(const ArrayGeometry& geom, const Eigen::Vector3d& propagation,
                               double freq_hz, double c = kSpeedOfSound);

// Unit look-direction vector for an azimuth in degrees (elevation 0).
Eigen::Vector3d azimuth_direction(double azimuth_deg);

// Spherically isotropic noise coherence: Gamma_ij = sinc(2 pi f d_ij / c).
Eigen::MatrixXd diffuse_coherence(const ArrayGeometry& geom, double freq_hz,
                                  double c = kSpeedOfSound);

// Superdirective (MVDR against diffuse noise) weights for every kept bin:
// w = (Gamma + sigma I)^-1 d / (d^H (Gamma + sigma I)^-1 d), rows = bins.
// `look` is the source bearing the beam passes undistorted.
Eigen::MatrixXcd design_superdirective(const ArrayGeometry& geom, const Eigen::Vector3d& look,
                                       const AudioConfig& audio, const BeamformerConfig& cfg);

// D look directions at azimuths k*(360/D) degrees, elevation 0.
BeamformerBank design_bank(const ArrayGeometry& geom, int n_directions, const AudioConfig& audio,
                           const BeamformerConfig& cfg = {});

// out[t, b] = sum_m conj(w[b, m]) * spec[t, b, m].
ComplexSpectrogram apply_beamformer(const ComplexSpectrogram& spec,
                                    std::span<const std::complex<double>> weights);
ComplexSpectrogram apply_beamformer(const ComplexSpectrogram& spec,
                                    const Eigen::MatrixXcd& weights);  // [bins x M]

// Weighted overlap-add resynthesis (synthesis window = analysis window with
// squared-window normalization); the DC bin is re-inserted as zero.
std::vector<double> istft(const ComplexSpectrogram& spec, const AudioConfig& cfg);

MultiChannelAudio select_channels(const MultiChannelAudio& audio, std::pair<int, int> pair);

// Largest |w^H d - 1| over all (direction, bin); the distortionless self-check.
double max_distortionless_error(const BeamformerBank& bank, const AudioConfig& audio,
                                double c = kSpeedOfSound);

void save_bank(const BeamformerBank& bank, const std::string& path);
BeamformerBank load_bank(const std::string& path);

}  // namespace beamkd
