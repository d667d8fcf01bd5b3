#include "beamkd/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "beamkd/defs.hpp"
#include "beamkd/errors.hpp"
#include "beamkd/thread_pool.hpp"
#include "beamkd/wav_io.hpp"

namespace beamkd {

namespace fs = std::filesystem;

int nearest_look(const BeamformerBank& bank, double azimuth_deg) {
  const Eigen::Vector3d u = azimuth_direction(azimuth_deg);
  int best = 0;
  double best_dot = -2.0;
  for (int d = 0; d < bank.num_directions(); ++d) {
    const double dot = u.dot(bank.directions[d]);
    if (dot > best_dot) {
      best_dot = dot;
      best = d;
    }
  }
  return best;
}

namespace {

std::vector<float> pack_pair_spectra(const ComplexSpectrogram& spec, std::pair<int, int> pair) {
  // Layout per frame: ((bin * 2 + channel) * 2 + re/im).
  std::vector<float> out(static_cast<size_t>(spec.frames) * spec.bins * 4);
  const int chans[2] = {pair.first, pair.second};
  for (int f = 0; f < spec.frames; ++f) {
    float* row = out.data() + static_cast<size_t>(f) * spec.bins * 4;
    for (int b = 0; b < spec.bins; ++b)
      for (int c = 0; c < 2; ++c) {
        const std::complex<double>& z = spec.at(f, b, chans[c]);
        row[(b * 2 + c) * 2] = static_cast<float>(z.real());
        row[(b * 2 + c) * 2 + 1] = static_cast<float>(z.imag());
      }
  }
  return out;
}

std::vector<float> to_float_rows(const RowMatXd& m) {
  std::vector<float> out(static_cast<size_t>(m.rows()) * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      out[static_cast<size_t>(r) * m.cols() + c] = static_cast<float>(m(r, c));
  return out;
}

}  // namespace

LoadedCorpus load_corpus(const std::string& dir, const FeatureOptions& opts) {
  LoadedCorpus corpus;
  corpus.manifest = sim::load_manifest(dir);
  const AudioConfig& audio = corpus.manifest.audio;
  audio.validate();
  corpus.mel = make_mel_filterbank(audio, 64);
  corpus.bank = design_bank(corpus.manifest.geometry, 12, audio);
  corpus.pair = opts.channel_pair.value_or(opposite_pair(corpus.manifest.geometry));

  const size_t n = corpus.manifest.utterances.size();
  // Pass 1: per-bin magnitude statistics over the full pool.
  {
    GmvAccumulator acc;
    for (size_t i = 0; i < n; ++i) {
      const auto& e = corpus.manifest.utterances[i];
      const MultiChannelAudio wav = read_wav((fs::path(dir) / e.wav).string());
      acc.add(stft_multichannel(wav, audio));
    }
    corpus.gmv = acc.finish();
  }

  // Pass 2: per-utterance features.
  corpus.utts.resize(n);
  parallel_for(n, [&](size_t i) {
    const auto& e = corpus.manifest.utterances[i];
    LoadedUtterance& u = corpus.utts[i];
    u.id = e.id;
    u.labeled = e.labeled;
    u.azimuth_deg = e.azimuth_deg;
    u.snr_db = e.snr_db;

    const MultiChannelAudio wav = read_wav((fs::path(dir) / e.wav).string());
    ComplexSpectrogram spec = stft_multichannel(wav, audio);
    u.n_frames = spec.frames;
    // Reference beamformer pointed at the true source bearing recorded in
    // the manifest (the simulated stand-in for the production beam picker).
    const Eigen::MatrixXcd ref_weights = (opts.teacher_features || opts.lfbe_target)
        ? design_superdirective(corpus.manifest.geometry,
                                azimuth_direction(e.azimuth_deg), audio, {})
        : Eigen::MatrixXcd();

    if (opts.teacher_features) {
      // Beamformed audio from the raw (un-normalized) spectra, aligned to the
      // first student channel, then re-framed for the wide DFT.
      const ComplexSpectrogram beam = apply_beamformer(spec, ref_weights);
      std::vector<double> beam_audio = istft(beam, audio);
      const int max_lag = 8;
      const auto& ref = wav.channels[corpus.pair.first];
      const int lag = align_delay({ref.data(), std::min(ref.size(), beam_audio.size())},
                                  beam_audio, max_lag);
      if (lag > 0)
        beam_audio.erase(beam_audio.begin(), beam_audio.begin() + lag);
      else if (lag < 0)
        beam_audio.insert(beam_audio.begin(), static_cast<size_t>(-lag), 0.0);
      const size_t needed = static_cast<size_t>(u.n_frames - 1) * audio.shift_samples() +
                            audio.window_samples();
      if (beam_audio.size() < needed) beam_audio.resize(needed, 0.0);
      u.teacher_feat = to_float_rows(log_dft_teacher(frame_signal(beam_audio, audio), audio));
      u.teacher_feat.resize(static_cast<size_t>(u.n_frames) * audio.teacher_bins());
    }

    gmv_apply(spec, corpus.gmv);
    if (opts.student_input) u.student_input = pack_pair_spectra(spec, corpus.pair);
    if (opts.lfbe_target) {
      const ComplexSpectrogram beam = apply_beamformer(spec, ref_weights);
      u.lfbe_target = to_float_rows(lfbe(power_spectrum(beam, 0), corpus.mel));
    }

    if (!e.labels.empty()) {
      const bool sidecar = e.labels.ends_with(".evalonly");
      if (!sidecar || opts.eval_labels) {
        const LabelFile lf = read_labels((fs::path(dir) / e.labels).string());
        if (static_cast<int>(lf.labels.size()) != u.n_frames)
          throw std::runtime_error("label/frame count mismatch for " + u.id);
        u.labels = lf.labels;
      }
    }
  });
  return corpus;
}

void attach_soft_targets(LoadedCorpus& corpus, const std::string& targets_dir) {
  for (auto& u : corpus.utts) {
    const fs::path path = fs::path(targets_dir) / (u.id + ".bkst");
    if (!fs::exists(path))
      throw MissingPrerequisite("missing soft targets file: " + path.string());
    u.soft = read_soft_targets(path.string());
    if (u.soft.frames() != u.n_frames)
      throw std::runtime_error("soft targets frame count mismatch for utterance " + u.id);
  }
}

}  // namespace beamkd
