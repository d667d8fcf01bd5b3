#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "beamkd/beamform.hpp"
#include "beamkd/formats.hpp"
#include "beamkd/model.hpp"
#include "beamkd/sigproc.hpp"
#include "beamkd/simulate.hpp"

namespace beamkd {

// What to materialize per utterance when loading a corpus.
struct FeatureOptions {
  bool student_input = true;     // GMV-normalized pair spectra, [T x bins*2*2]
  bool lfbe_target = false;      // 7-channel beamformed LFBE, [T x n_mels]
  bool teacher_features = false; // log-DFT of beamformed audio, [T x 256]
  bool eval_labels = false;      // allow .evalonly sidecars (evaluation only)
  std::optional<std::pair<int, int>> channel_pair;  // default: opposite pair
};

struct LoadedUtterance {
  std::string id;
  bool labeled = false;
  int n_frames = 0;
  double azimuth_deg = 0.0;
  double snr_db = 0.0;
  std::vector<float> student_input;
  std::vector<float> lfbe_target;
  std::vector<float> teacher_feat;
  std::vector<uint16_t> labels;  // empty when unavailable
  SoftTargets soft;              // empty until attach_soft_targets
};

struct LoadedCorpus {
  sim::CorpusManifest manifest;
  GmvStats gmv;
  MelFilterbank mel;
  BeamformerBank bank;           // full-array superdirective bank
  std::pair<int, int> pair;      // student channel pair
  std::vector<LoadedUtterance> utts;

  int n_classes() const { return manifest.n_classes; }
};

// Fits GMV over the full pool, then builds the requested per-utterance
// features. Teacher features run through beamformed audio (istft of the
// beamformed spectrogram, delay-compensated against the first pair channel);
// LFBE targets are beamformed in the spectral domain on GMV-normalized input
// so they share the student front-end's scaling.
LoadedCorpus load_corpus(const std::string& dir, const FeatureOptions& opts);

// Reads <id>.bkst for every utterance; throws MissingPrerequisite naming the
// first absent file, and rejects frame-count mismatches naming the utterance.
void attach_soft_targets(LoadedCorpus& corpus, const std::string& targets_dir);

// Nearest bank look direction for a source bearing, in [0, directions).
int nearest_look(const BeamformerBank& bank, double azimuth_deg);

}  // namespace beamkd
