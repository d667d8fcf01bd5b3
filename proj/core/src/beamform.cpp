#include "beamkd/beamform.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "fft_util.hpp"

namespace beamkd {

Eigen::Vector3d ArrayGeometry::centroid() const {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const auto& m : mics) c += m;
  return c / static_cast<double>(mics.size());
}

void ArrayGeometry::validate() const {
  if (mics.size() < 2) throw std::invalid_argument("geometry: needs at least 2 mics");
  for (size_t i = 0; i < mics.size(); ++i)
    for (size_t j = i + 1; j < mics.size(); ++j)
      if ((mics[i] - mics[j]).norm() < 1e-9)
        throw std::invalid_argument("geometry: mic positions must be pairwise distinct");
}

ArrayGeometry ArrayGeometry::circular_7ch(double radius_m) {
  ArrayGeometry g;
  g.name = "circular7";
  g.mics.emplace_back(0.0, 0.0, 0.0);
  for (int k = 0; k < 6; ++k) {
    const double a = 2.0 * kPi * k / 6.0;
    g.mics.emplace_back(radius_m * std::cos(a), radius_m * std::sin(a), 0.0);
  }
  return g;
}

ArrayGeometry ArrayGeometry::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("geometry: cannot open " + path);
  nlohmann::json j;
  in >> j;
  ArrayGeometry g;
  g.name = j.at("name").get<std::string>();
  for (const auto& m : j.at("mics")) {
    if (m.size() != 3) throw std::runtime_error("geometry: mic entries must be [x,y,z]");
    g.mics.emplace_back(m[0].get<double>(), m[1].get<double>(), m[2].get<double>());
  }
  g.validate();
  return g;
}

std::string ArrayGeometry::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  auto arr = nlohmann::json::array();
  for (const auto& m : mics) arr.push_back({m.x(), m.y(), m.z()});
  j["mics"] = arr;
  return j.dump(2);
}

std::pair<int, int> opposite_pair(const ArrayGeometry& geom) {
  // The two mics whose separation is largest; for the default ring that is
  // the azimuth-0 / azimuth-180 pair (indices 1 and 4).
  double best = -1.0;
  std::pair<int, int> pair{0, 1};
  for (int i = 0; i < geom.num_mics(); ++i)
    for (int j = i + 1; j < geom.num_mics(); ++j) {
      const double d = (geom.mics[i] - geom.mics[j]).norm();
      if (d > best + 1e-12) {
        best = d;
        pair = {i, j};
      }
    }
  return pair;
}

Eigen::Vector3d azimuth_direction(double azimuth_deg) {
  const double a = azimuth_deg * kPi / 180.0;
  return {std::cos(a), std::sin(a), 0.0};
}

SteeringVector steering_vector(const ArrayGeometry& geom, const Eigen::Vector3d& propagation,
                               double freq_hz, double c) {
  SteeringVector sv;
  sv.direction = propagation;
  sv.freq_hz = freq_hz;
  sv.phases.resize(geom.num_mics());
  // Literal mic positions; the default geometry is centered on its centroid,
  // which keeps these phases consistent with the simulator's delays.
  for (int m = 0; m < geom.num_mics(); ++m) {
    const double tau = geom.mics[m].dot(propagation) / c;
    const double phi = -2.0 * kPi * freq_hz * tau;
    sv.phases[m] = std::polar(1.0, phi);
  }
  return sv;
}

Eigen::MatrixXd diffuse_coherence(const ArrayGeometry& geom, double freq_hz, double c) {
  const int M = geom.num_mics();
  Eigen::MatrixXd gamma(M, M);
  for (int i = 0; i < M; ++i) {
    gamma(i, i) = 1.0;
    for (int j = i + 1; j < M; ++j) {
      const double d = (geom.mics[i] - geom.mics[j]).norm();
      const double x = 2.0 * kPi * freq_hz * d / c;
      const double v = std::abs(x) < 1e-12 ? 1.0 : std::sin(x) / x;
      gamma(i, j) = v;
      gamma(j, i) = v;
    }
  }
  return gamma;
}

Eigen::MatrixXcd design_superdirective(const ArrayGeometry& geom, const Eigen::Vector3d& look,
                                       const AudioConfig& audio, const BeamformerConfig& cfg) {
  geom.validate();
  if (!(cfg.loading_scale > 0)) throw std::invalid_argument("loading must be positive");
  const int M = geom.num_mics();
  const int bins = audio.dft_size / 2;
  Eigen::MatrixXcd weights(bins, M);
  // Plane waves from bearing `look` propagate along -look.
  const Eigen::Vector3d propagation = -look;
  for (int b = 0; b < bins; ++b) {
    const double f = audio.bin_hz(b);
    const Eigen::MatrixXd gamma = diffuse_coherence(geom, f, cfg.speed_of_sound);
    const double sigma = cfg.loading_scale * gamma.trace() / M;
    Eigen::MatrixXcd loaded = gamma.cast<std::complex<double>>();
    loaded.diagonal().array() += sigma;
    const Eigen::VectorXcd d = steering_vector(geom, propagation, f, cfg.speed_of_sound).phases;
    const Eigen::VectorXcd gd = loaded.ldlt().solve(d);
    const std::complex<double> denom = d.dot(gd);  // d^H (Gamma+sI)^-1 d
    Eigen::VectorXcd w = gd / denom;
    if (!w.allFinite()) throw std::runtime_error("design_superdirective: non-finite weights");
    weights.row(b) = w.transpose();
  }
  return weights;
}

BeamformerBank design_bank(const ArrayGeometry& geom, int n_directions, const AudioConfig& audio,
                           const BeamformerConfig& cfg) {
  if (n_directions < 1) throw std::invalid_argument("design_bank: need at least one direction");
  BeamformerBank bank;
  bank.geometry = geom;
  bank.bins = audio.dft_size / 2;
  bank.sample_rate_hz = audio.sample_rate_hz;
  bank.dft_size = audio.dft_size;
  const int M = geom.num_mics();
  bank.weights.resize(static_cast<size_t>(n_directions) * bank.bins * M);
  bank.loading_sigma = cfg.loading_scale;  // trace(Gamma)/M == 1 for unit diagonals
  for (int d = 0; d < n_directions; ++d) {
    const Eigen::Vector3d look = azimuth_direction(360.0 * d / n_directions);
    bank.directions.push_back(look);
    const Eigen::MatrixXcd w = design_superdirective(geom, look, audio, cfg);
    for (int b = 0; b < bank.bins; ++b)
      for (int m = 0; m < M; ++m)
        bank.weights[(static_cast<size_t>(d) * bank.bins + b) * M + m] = w(b, m);
  }
  return bank;
}

std::span<const std::complex<double>> BeamformerBank::weights_for(int direction) const {
  const size_t stride = static_cast<size_t>(bins) * geometry.num_mics();
  return {weights.data() + direction * stride, stride};
}

ComplexSpectrogram apply_beamformer(const ComplexSpectrogram& spec,
                                    std::span<const std::complex<double>> weights) {
  const int M = spec.channels;
  if (weights.size() != static_cast<size_t>(spec.bins) * M)
    throw std::invalid_argument("apply_beamformer: weight/spectrogram dims mismatch");
  ComplexSpectrogram out;
  out.frames = spec.frames;
  out.bins = spec.bins;
  out.channels = 1;
  out.values.resize(static_cast<size_t>(out.frames) * out.bins);
  for (int f = 0; f < spec.frames; ++f)
    for (int b = 0; b < spec.bins; ++b) {
      std::complex<double> acc = 0.0;
      for (int m = 0; m < M; ++m)
        acc += std::conj(weights[static_cast<size_t>(b) * M + m]) * spec.at(f, b, m);
      out.values[static_cast<size_t>(f) * out.bins + b] = acc;
    }
  return out;
}

ComplexSpectrogram apply_beamformer(const ComplexSpectrogram& spec,
                                    const Eigen::MatrixXcd& weights) {
  std::vector<std::complex<double>> flat(static_cast<size_t>(weights.rows()) * weights.cols());
  for (int b = 0; b < weights.rows(); ++b)
    for (int m = 0; m < weights.cols(); ++m)
      flat[static_cast<size_t>(b) * weights.cols() + m] = weights(b, m);
  return apply_beamformer(spec, flat);
}

std::vector<double> istft(const ComplexSpectrogram& spec, const AudioConfig& cfg) {
  if (spec.channels != 1) throw std::invalid_argument("istft: expects a single channel");
  if (spec.bins != cfg.dft_size / 2)
    throw std::invalid_argument("istft: spectrogram bins inconsistent with dft_size");
  const int win = cfg.window_samples();
  const int shift = cfg.shift_samples();
  const int n = spec.frames > 0 ? (spec.frames - 1) * shift + win : 0;
  const std::vector<double> w = hann_window(win);
  std::vector<double> out(n, 0.0), norm(n, 0.0);
  std::vector<std::complex<double>> full(cfg.dft_size / 2 + 1);
  std::vector<double> frame(cfg.dft_size);
  for (int f = 0; f < spec.frames; ++f) {
    full[0] = 0.0;  // DC was dropped at analysis
    for (int b = 0; b < spec.bins; ++b)
      full[b + 1] = spec.values[static_cast<size_t>(f) * spec.bins + b];
    detail::irfft(full.data(), cfg.dft_size, frame.data());
    double* dst = out.data() + static_cast<size_t>(f) * shift;
    double* nrm = norm.data() + static_cast<size_t>(f) * shift;
    for (int i = 0; i < win; ++i) {
      dst[i] += w[i] * frame[i];
      nrm[i] += w[i] * w[i];
    }
  }
  for (int i = 0; i < n; ++i) out[i] = norm[i] > 1e-8 ? out[i] / norm[i] : 0.0;
  return out;
}

MultiChannelAudio select_channels(const MultiChannelAudio& audio, std::pair<int, int> pair) {
  const auto [i, j] = pair;
  if (i == j) throw std::invalid_argument("select_channels: channel pair must be distinct");
  if (i < 0 || j < 0 || i >= audio.num_channels() || j >= audio.num_channels())
    throw std::invalid_argument("select_channels: channel index out of range");
  MultiChannelAudio out;
  out.sample_rate_hz = audio.sample_rate_hz;
  out.channels = {audio.channels[i], audio.channels[j]};
  return out;
}

double max_distortionless_error(const BeamformerBank& bank, const AudioConfig& audio, double c) {
  double worst = 0.0;
  const int M = bank.geometry.num_mics();
  for (int d = 0; d < bank.num_directions(); ++d) {
    for (int b = 0; b < bank.bins; ++b) {
      const Eigen::VectorXcd sv =
          steering_vector(bank.geometry, -bank.directions[d], audio.bin_hz(b), c).phases;
      std::complex<double> resp = 0.0;
      for (int m = 0; m < M; ++m) resp += std::conj(bank.weight(d, b, m)) * sv[m];
      worst = std::max(worst, std::abs(resp - std::complex<double>(1.0, 0.0)));
    }
  }
  return worst;
}

}  // namespace beamkd
