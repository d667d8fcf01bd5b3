#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace beamkd::verify {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
};

struct GradCheckSummary {
  std::vector<GradCheckEntry> entries;
  bool ok() const {
    for (const auto& e : entries)
      if (e.max_rel_err > e.tolerance) return false;
    return true;
  }
  double worst_ratio() const;
};

// Finite-difference checks for every differentiable layer plus the composite
// student front-end + one LSTM layer, all in wide (double) precision.
GradCheckSummary gradcheck_all(uint64_t seed = 7);

// DSP-initialized front-end with a look-selection combination layer versus
// the offline beamform -> power -> mel -> log pipeline, on synthetic
// utterances. Returns the maximum absolute per-coordinate deviation.
double dsp_equivalence_max_dev(int n_utts = 100, uint64_t seed = 11);

}  // namespace beamkd::verify
