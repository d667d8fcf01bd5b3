#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "beamkd/autodiff.hpp"
#include "beamkd/corpus.hpp"
#include "beamkd/model.hpp"

namespace beamkd {

struct TrainConfig {
  ad::OptimizerConfig optimizer;
  int epochs = 10;
  double temperature = 2.0;
  int top_k = 20;
  bool freeze_frontend_first_epoch = false;
  uint64_t seed = 1;
  double held_out_fraction = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double held_out_loss = 0.0;
};

struct TrainReport {
  std::string procedure;
  std::vector<EpochStat> epochs;
  std::map<std::string, double> final_metrics;
  double wall_clock_sec = 0.0;
  nlohmann::json config_echo;
  std::string run_id;

  nlohmann::json to_json() const;
  void save(const std::string& path) const;
};

// Utterance-level held-out split; deterministic per (seed, utterance id).
bool is_held_out(const std::string& utt_id, double fraction, uint64_t seed);

// Differentiable distillation loss: T^2 * mean_t sum_i q_ti * (-log_softmax
// (z_t / T)[i]), with the student's log-probabilities taken over the full
// class set. `targets` rows are dense (zero off the teacher's top-k support).
template <class S>
ad::TensorRef distill_loss(ad::Tape<S>& tape, ad::TensorRef logits, ad::TensorRef targets,
                           double temperature) {
  ad::TensorRef scaled = ad::scale(tape, logits, static_cast<S>(1.0 / temperature));
  ad::TensorRef lp = ad::log_softmax(tape, scaled);
  ad::TensorRef ce = ad::cross_entropy(tape, targets, lp);
  return ad::scale(tape, ce, static_cast<S>(temperature * temperature));
}

// Top-k softened targets for one frame of logits: p = softmax(z / T), keep
// the k largest, renormalize the kept mass to 1.
SoftTargets soften_logits(const std::vector<float>& logits, int n_frames, int n_classes,
                          double temperature, int top_k);

// L2 pre-training of the front-end against beamformed LFBE targets. With
// freeze_frontend_first_epoch set, the spatial and mel tensors stay fixed
// for the first epoch.
TrainReport pretrain_frontend(StudentModel& model, const LoadedCorpus& corpus,
                              const TrainConfig& cfg);

// Supervised frame-level cross-entropy on the labeled subset; retains the
// best-held-out parameters.
TrainReport train_xent_student(StudentModel& model, const LoadedCorpus& corpus,
                               const TrainConfig& cfg);
TrainReport train_xent_teacher(TeacherModel& model, const LoadedCorpus& corpus,
                               const TrainConfig& cfg);

// Writes <id>.bkst soft-target files for every utterance in the corpus.
int generate_soft_targets(const TeacherModel& teacher, const LoadedCorpus& corpus,
                          const TrainConfig& cfg, const std::string& out_dir);

// Teacher-student training on soft targets only (attach_soft_targets first).
TrainReport distill(StudentModel& model, const LoadedCorpus& corpus, const TrainConfig& cfg);

struct EvalMetrics {
  double frame_error_rate = 0.0;
  double mean_xent = 0.0;
  double mean_kl_to_teacher = 0.0;
  int64_t frames = 0;
  bool has_kl = false;
};

// Deterministic metrics over the given utterances. Frame error and
// cross-entropy need labels on those utterances; KL needs a teacher and
// teacher features.
EvalMetrics evaluate_student(const StudentModel& model, const LoadedCorpus& corpus,
                             std::span<const int> utt_indices,
                             const TeacherModel* teacher = nullptr);
EvalMetrics evaluate_teacher(const TeacherModel& model, const LoadedCorpus& corpus,
                             std::span<const int> utt_indices,
                             const TeacherModel* ref_teacher = nullptr);

// Forward passes without gradients, one utterance at a time.
std::vector<float> student_logits(const StudentModel& model, const LoadedUtterance& utt);
std::vector<float> teacher_logits(const TeacherModel& model, const LoadedUtterance& utt);

std::vector<int> split_indices(const LoadedCorpus& corpus, const TrainConfig& cfg,
                               bool held_out, bool labeled_only);

}  // namespace beamkd
