#include "beamkd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include "beamkd/defs.hpp"
#include "beamkd/errors.hpp"
#include "beamkd/json_support.hpp"
#include "beamkd/rng.hpp"
#include "beamkd/thread_pool.hpp"

namespace beamkd {

void TrainConfig::validate() const {
  optimizer.validate();
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (!(temperature > 0)) throw std::invalid_argument("train: temperature must be > 0");
  if (top_k < 1) throw std::invalid_argument("train: top_k must be >= 1");
  if (held_out_fraction < 0 || held_out_fraction >= 1)
    throw std::invalid_argument("train: held_out_fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"optimizer", c.optimizer},
       {"epochs", c.epochs},
       {"temperature", c.temperature},
       {"top_k", c.top_k},
       {"freeze_frontend_first_epoch", c.freeze_frontend_first_epoch},
       {"seed", c.seed},
       {"held_out_fraction", c.held_out_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<ad::OptimizerConfig>();
  c.epochs = j.value("epochs", c.epochs);
  c.temperature = j.value("temperature", c.temperature);
  c.top_k = j.value("top_k", c.top_k);
  c.freeze_frontend_first_epoch =
      j.value("freeze_frontend_first_epoch", c.freeze_frontend_first_epoch);
  c.seed = j.value("seed", c.seed);
  c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json j;
  j["procedure"] = procedure;
  auto ep = nlohmann::json::array();
  for (const auto& e : epochs)
    ep.push_back({{"epoch", e.epoch},
                  {"train_loss", e.train_loss},
                  {"held_out_loss", e.held_out_loss}});
  j["epochs"] = ep;
  j["final_metrics"] = final_metrics;
  j["wall_clock_sec"] = wall_clock_sec;
  j["config"] = config_echo;
  j["run_id"] = run_id;
  return j;
}

void TrainReport::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("report: cannot write " + path);
  f << to_json().dump(2) << "\n";
}

bool is_held_out(const std::string& utt_id, double fraction, uint64_t seed) {
  const uint64_t h = Rng::derive(seed, utt_id, 0x48454c44);
  return (static_cast<double>(h >> 11) * 0x1.0p-53) < fraction;
}

std::vector<int> split_indices(const LoadedCorpus& corpus, const TrainConfig& cfg, bool held_out,
                               bool labeled_only) {
  std::vector<int> out;
  for (size_t i = 0; i < corpus.utts.size(); ++i) {
    const auto& u = corpus.utts[i];
    if (labeled_only && !u.labeled) continue;
    if (is_held_out(u.id, cfg.held_out_fraction, cfg.seed) != held_out) continue;
    out.push_back(static_cast<int>(i));
  }
  return out;
}

namespace {

std::string make_run_id(const nlohmann::json& config_echo) {
  const std::string text = config_echo.dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Step machinery: equal-length buckets, gradient accumulation in fixed
// tensor order, Adam with an optional freeze set.
// ---------------------------------------------------------------------------

struct Bucket {
  int frames = 0;           // per utterance
  std::vector<int> utts;    // corpus indices
};

std::vector<Bucket> bucket_by_length(const LoadedCorpus& corpus, std::span<const int> utts) {
  std::map<int, Bucket> by_len;
  for (int i : utts) {
    Bucket& b = by_len[corpus.utts[i].n_frames];
    b.frames = corpus.utts[i].n_frames;
    b.utts.push_back(i);
  }
  std::vector<Bucket> out;
  for (auto& [len, b] : by_len) out.push_back(std::move(b));
  return out;
}

// Step-major packing: output row s*B + b holds frame s of bucket item b.
std::vector<float> pack_step_major(const LoadedCorpus& corpus, const Bucket& bucket,
                                   const std::vector<float> LoadedUtterance::* field, int dim) {
  const int B = static_cast<int>(bucket.utts.size());
  const int T = bucket.frames;
  std::vector<float> out(static_cast<size_t>(T) * B * dim);
  for (int b = 0; b < B; ++b) {
    const std::vector<float>& src = corpus.utts[bucket.utts[b]].*field;
    if (static_cast<int>(src.size()) != T * dim)
      throw std::runtime_error("pack: missing features for utterance " +
                               corpus.utts[bucket.utts[b]].id);
    for (int s = 0; s < T; ++s)
      std::copy(src.begin() + static_cast<size_t>(s) * dim,
                src.begin() + static_cast<size_t>(s + 1) * dim,
                out.begin() + (static_cast<size_t>(s) * B + b) * dim);
  }
  return out;
}

class Optimizer {
 public:
  Optimizer(ParamSet<float>& params, const ad::OptimizerConfig& cfg)
      : params_(params), cfg_(cfg), state_(params.tensors.size()),
        grads_(params.tensors.size()), frozen_(params.tensors.size(), 0) {
    for (size_t i = 0; i < params.tensors.size(); ++i)
      index_[params.tensors[i].name] = i;
  }

  void set_frozen(const std::set<std::string>& names) {
    std::fill(frozen_.begin(), frozen_.end(), 0);
    for (const auto& n : names) frozen_[index_.at(n)] = 1;
  }

  void zero_grads() {
    for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.f);
  }

  void accumulate(const ParamBinder<float>& binder, const ad::Tape<float>& tape) {
    for (const auto& [name, ref] : binder.bound()) {
      const auto g = tape.grad(ref);
      if (g.empty()) continue;
      auto& dst = grads_[index_.at(name)];
      if (dst.empty()) dst.assign(g.size(), 0.f);
      for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }

  void step() {
    for (size_t i = 0; i < params_.tensors.size(); ++i) {
      if (frozen_[i] || grads_[i].empty()) continue;
      ad::adam_step(params_.tensors[i].v, grads_[i], state_[i], cfg_);
    }
  }

 private:
  ParamSet<float>& params_;
  ad::OptimizerConfig cfg_;
  std::vector<ad::AdamState> state_;
  std::vector<std::vector<float>> grads_;
  std::vector<char> frozen_;
  std::map<std::string, size_t> index_;
};

// Builds the scalar loss for one bucket; rows arrive step-major.
using LossBuilder = std::function<ad::TensorRef(ad::Tape<float>&, ParamBinder<float>&,
                                                const Bucket&)>;

double run_batch(ParamSet<float>& params, const std::vector<Bucket>& buckets, int total_utts,
                 const LossBuilder& builder, Optimizer* opt) {
  double total_loss = 0.0;
  if (opt) opt->zero_grads();
  for (const Bucket& bucket : buckets) {
    ad::Tape<float> tape;
    ParamBinder<float> binder(tape, params, opt != nullptr);
    ad::TensorRef loss = builder(tape, binder, bucket);
    const float w = static_cast<float>(bucket.utts.size()) / total_utts;
    total_loss += static_cast<double>(tape.value(loss)[0]) * w;
    if (opt) {
      ad::TensorRef weighted = ad::scale(tape, loss, w);
      tape.backward(weighted);
      opt->accumulate(binder, tape);
    }
  }
  if (opt) opt->step();
  return total_loss;
}

double run_eval(ParamSet<float>& params, const LoadedCorpus& corpus, std::span<const int> utts,
                int batch_size, const LossBuilder& builder) {
  if (utts.empty()) return 0.0;
  double loss = 0.0;
  for (size_t start = 0; start < utts.size(); start += batch_size) {
    const size_t end = std::min(utts.size(), start + batch_size);
    std::vector<int> chunk(utts.begin() + start, utts.begin() + end);
    const auto buckets = bucket_by_length(corpus, chunk);
    loss += run_batch(params, buckets, static_cast<int>(chunk.size()), builder, nullptr) *
            (static_cast<double>(chunk.size()) / utts.size());
  }
  return loss;
}

struct LoopResult {
  std::vector<EpochStat> epochs;
  double best_held_out = 0.0;
  int best_epoch = -1;
};

// Shared epoch loop; `on_epoch_begin` adjusts freezing, `keep_best` snapshots
// the best-held-out parameters and restores them at the end.
LoopResult train_loop(ParamSet<float>& params, const LoadedCorpus& corpus,
                      const TrainConfig& cfg, std::span<const int> train_utts,
                      std::span<const int> held_utts, const LossBuilder& builder,
                      Optimizer& opt, const std::function<void(int)>& on_epoch_begin,
                      bool keep_best) {
  LoopResult result;
  ParamSet<float> best;
  std::vector<int> order(train_utts.begin(), train_utts.end());
  const int B = cfg.optimizer.batch_size;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    on_epoch_begin(epoch);
    Rng rng(Rng::derive(cfg.seed, "shuffle", epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    double train_loss = 0.0;
    int steps = 0;
    for (size_t start = 0; start < order.size(); start += B) {
      const size_t end = std::min(order.size(), start + B);
      std::vector<int> batch(order.begin() + start, order.begin() + end);
      const auto buckets = bucket_by_length(corpus, batch);
      train_loss += run_batch(params, buckets, static_cast<int>(batch.size()), builder, &opt);
      ++steps;
    }
    train_loss /= std::max(steps, 1);

    const double held = run_eval(params, corpus, held_utts, B, builder);
    result.epochs.push_back({epoch, train_loss, held});
    if (result.best_epoch < 0 || held < result.best_held_out) {
      result.best_held_out = held;
      result.best_epoch = epoch;
      if (keep_best) best = params;
    }
  }
  if (keep_best && result.best_epoch >= 0) params = best;
  return result;
}

std::vector<float> one_hot_step_major(const LoadedCorpus& corpus, const Bucket& bucket,
                                      int n_classes) {
  const int B = static_cast<int>(bucket.utts.size());
  const int T = bucket.frames;
  std::vector<float> q(static_cast<size_t>(T) * B * n_classes, 0.f);
  for (int b = 0; b < B; ++b) {
    const auto& u = corpus.utts[bucket.utts[b]];
    if (static_cast<int>(u.labels.size()) != T)
      throw std::runtime_error("xent: missing labels for utterance " + u.id);
    for (int s = 0; s < T; ++s) {
      const int cls = u.labels[s];
      if (cls < 0 || cls >= n_classes)
        throw std::runtime_error("xent: label out of range in utterance " + u.id);
      q[(static_cast<size_t>(s) * B + b) * n_classes + cls] = 1.f;
    }
  }
  return q;
}

std::vector<float> soft_step_major(const LoadedCorpus& corpus, const Bucket& bucket,
                                   int n_classes) {
  const int B = static_cast<int>(bucket.utts.size());
  const int T = bucket.frames;
  std::vector<float> q(static_cast<size_t>(T) * B * n_classes, 0.f);
  for (int b = 0; b < B; ++b) {
    const auto& u = corpus.utts[bucket.utts[b]];
    if (u.soft.frames() != T)
      throw std::runtime_error("distill: soft targets missing for utterance " + u.id);
    for (int s = 0; s < T; ++s)
      for (int i = 0; i < u.soft.k; ++i) {
        const uint32_t cls = u.soft.indices[static_cast<size_t>(s) * u.soft.k + i];
        if (cls >= static_cast<uint32_t>(n_classes))
          throw std::runtime_error("distill: target index out of range in " + u.id);
        q[(static_cast<size_t>(s) * B + b) * n_classes + cls] +=
            u.soft.probs[static_cast<size_t>(s) * u.soft.k + i];
      }
  }
  return q;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

TrainReport pretrain_frontend(StudentModel& model, const LoadedCorpus& corpus,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.utts.empty()) throw std::invalid_argument("pretrain: empty corpus");
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& mc = model.cfg;
  const int in_dim = mc.spatial_input_dim();

  const std::vector<int> train_utts = split_indices(corpus, cfg, false, false);
  const std::vector<int> held_utts = split_indices(corpus, cfg, true, false);

  LossBuilder builder = [&](ad::Tape<float>& tape, ParamBinder<float>& p,
                            const Bucket& bucket) {
    // Front-end ops are frame-wise; plain row concatenation suffices.
    auto input = pack_step_major(corpus, bucket, &LoadedUtterance::student_input, in_dim);
    auto target = pack_step_major(corpus, bucket, &LoadedUtterance::lfbe_target, mc.n_mels);
    const int rows = bucket.frames * static_cast<int>(bucket.utts.size());
    ad::TensorRef x = tape.constant(std::move(input), rows, in_dim);
    ad::TensorRef y = frontend_forward(tape, p, mc, x);
    ad::TensorRef t = tape.constant(std::move(target), rows, mc.n_mels);
    return ad::mse(tape, y, t);
  };

  Optimizer opt(model.params, cfg.optimizer);
  const std::set<std::string> frontend_frozen = {"spatial", "mel.W", "mel.b"};
  auto on_epoch = [&](int epoch) {
    if (cfg.freeze_frontend_first_epoch && epoch == 0)
      opt.set_frozen(frontend_frozen);
    else
      opt.set_frozen({});
  };

  const double initial_held = run_eval(model.params, corpus, held_utts,
                                       cfg.optimizer.batch_size, builder);
  LoopResult result = train_loop(model.params, corpus, cfg, train_utts, held_utts, builder, opt,
                                 on_epoch, false);

  // Mean per-frame Pearson correlation between output and target on the
  // held-out split.
  double corr_sum = 0.0;
  int64_t corr_frames = 0;
  for (int ui : held_utts) {
    const auto& u = corpus.utts[ui];
    ad::Tape<float> tape;
    ParamBinder<float> p(tape, model.params, false);
    ad::TensorRef x = tape.constant(std::vector<float>(u.student_input), u.n_frames, in_dim);
    ad::TensorRef y = frontend_forward(tape, p, mc, x);
    const auto out = tape.value(y);
    for (int f = 0; f < u.n_frames; ++f) {
      const float* a = out.data() + static_cast<size_t>(f) * mc.n_mels;
      const float* b = u.lfbe_target.data() + static_cast<size_t>(f) * mc.n_mels;
      double ma = 0, mb = 0;
      for (int i = 0; i < mc.n_mels; ++i) {
        ma += a[i];
        mb += b[i];
      }
      ma /= mc.n_mels;
      mb /= mc.n_mels;
      double sab = 0, saa = 0, sbb = 0;
      for (int i = 0; i < mc.n_mels; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
      }
      if (saa > 0 && sbb > 0) {
        corr_sum += sab / std::sqrt(saa * sbb);
        ++corr_frames;
      }
    }
  }

  TrainReport report;
  report.procedure = "pretrain";
  report.epochs = result.epochs;
  report.final_metrics["initial_held_out_l2"] = initial_held;
  report.final_metrics["final_held_out_l2"] =
      result.epochs.empty() ? initial_held : result.epochs.back().held_out_loss;
  report.final_metrics["best_held_out_l2"] = result.best_held_out;
  report.final_metrics["held_out_corr"] =
      corr_frames > 0 ? corr_sum / static_cast<double>(corr_frames) : 0.0;
  nlohmann::json echo;
  to_json(echo, cfg);
  report.config_echo = echo;
  report.run_id = make_run_id(echo);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Supervised cross-entropy
// ---------------------------------------------------------------------------

namespace {

template <class Model, class ForwardFn>
TrainReport train_xent_impl(Model& model, const LoadedCorpus& corpus, const TrainConfig& cfg,
                            const char* procedure, int feat_dim,
                            const std::vector<float> LoadedUtterance::* field,
                            const ForwardFn& forward) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<int> train_utts = split_indices(corpus, cfg, false, true);
  const std::vector<int> held_utts = split_indices(corpus, cfg, true, true);
  if (train_utts.empty()) throw std::invalid_argument("train_xent: no labeled utterances");
  const int K = corpus.n_classes();

  LossBuilder builder = [&](ad::Tape<float>& tape, ParamBinder<float>& p,
                            const Bucket& bucket) {
    const int B = static_cast<int>(bucket.utts.size());
    const int T = bucket.frames;
    auto input = pack_step_major(corpus, bucket, field, feat_dim);
    ad::TensorRef x = tape.constant(std::move(input), T * B, feat_dim);
    ad::TensorRef logits = forward(tape, p, x, T, B);
    ad::TensorRef lp = ad::log_softmax(tape, logits);
    ad::TensorRef q = tape.constant(one_hot_step_major(corpus, bucket, K), T * B, K);
    return ad::cross_entropy(tape, q, lp);
  };

  Optimizer opt(model.params, cfg.optimizer);
  LoopResult result = train_loop(model.params, corpus, cfg, train_utts, held_utts, builder, opt,
                                 [](int) {}, true);

  TrainReport report;
  report.procedure = procedure;
  report.epochs = result.epochs;
  report.final_metrics["best_held_out_xent"] = result.best_held_out;
  report.final_metrics["best_epoch"] = result.best_epoch;
  nlohmann::json echo;
  to_json(echo, cfg);
  report.config_echo = echo;
  report.run_id = make_run_id(echo);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace

TrainReport train_xent_student(StudentModel& model, const LoadedCorpus& corpus,
                               const TrainConfig& cfg) {
  return train_xent_impl(model, corpus, cfg, "train_xent_student",
                         model.cfg.spatial_input_dim(), &LoadedUtterance::student_input,
                         [&](ad::Tape<float>& tape, ParamBinder<float>& p, ad::TensorRef x,
                             int T, int B) {
                           return student_forward(tape, p, model.cfg, x, T, B);
                         });
}

TrainReport train_xent_teacher(TeacherModel& model, const LoadedCorpus& corpus,
                               const TrainConfig& cfg) {
  return train_xent_impl(model, corpus, cfg, "train_xent_teacher",
                         model.cfg.teacher_input_dim, &LoadedUtterance::teacher_feat,
                         [&](ad::Tape<float>& tape, ParamBinder<float>& p, ad::TensorRef x,
                             int T, int B) {
                           return teacher_forward(tape, p, model.cfg, x, T, B);
                         });
}

// ---------------------------------------------------------------------------
// Soft targets and distillation
// ---------------------------------------------------------------------------

SoftTargets soften_logits(const std::vector<float>& logits, int n_frames, int n_classes,
                          double temperature, int top_k) {
  if (!(temperature > 0)) throw std::invalid_argument("soften: temperature must be > 0");
  const int k = std::min(top_k, n_classes);
  SoftTargets st;
  st.k = k;
  st.temperature = static_cast<float>(temperature);
  st.indices.resize(static_cast<size_t>(n_frames) * k);
  st.probs.resize(static_cast<size_t>(n_frames) * k);
  std::vector<std::pair<double, int>> scored(n_classes);
  for (int f = 0; f < n_frames; ++f) {
    const float* z = logits.data() + static_cast<size_t>(f) * n_classes;
    double mx = z[0];
    for (int i = 1; i < n_classes; ++i) mx = std::max(mx, static_cast<double>(z[i]));
    // Unnormalized softened mass; the shared normalizer cancels in the
    // top-k renormalization.
    for (int i = 0; i < n_classes; ++i)
      scored[i] = {std::exp((z[i] - mx) / temperature), i};
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    double kept = 0.0;
    for (int i = 0; i < k; ++i) kept += scored[i].first;
    for (int i = 0; i < k; ++i) {
      st.indices[static_cast<size_t>(f) * k + i] = static_cast<uint32_t>(scored[i].second);
      st.probs[static_cast<size_t>(f) * k + i] = static_cast<float>(scored[i].first / kept);
    }
  }
  return st;
}

int generate_soft_targets(const TeacherModel& teacher, const LoadedCorpus& corpus,
                          const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const int K = teacher.cfg.n_classes;
  parallel_for(corpus.utts.size(), [&](size_t i) {
    const auto& u = corpus.utts[i];
    if (u.teacher_feat.empty())
      throw MissingPrerequisite("soft targets: teacher features missing for " + u.id);
    const std::vector<float> logits = teacher_logits(teacher, u);
    SoftTargets st = soften_logits(logits, u.n_frames, K, cfg.temperature, cfg.top_k);
    write_soft_targets((fs::path(out_dir) / (u.id + ".bkst")).string(), st);
  });
  return static_cast<int>(corpus.utts.size());
}

TrainReport distill(StudentModel& model, const LoadedCorpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<int> train_utts = split_indices(corpus, cfg, false, false);
  const std::vector<int> held_utts = split_indices(corpus, cfg, true, false);
  if (train_utts.empty()) throw std::invalid_argument("distill: empty corpus");
  const int K = corpus.n_classes();
  const int in_dim = model.cfg.spatial_input_dim();

  LossBuilder builder = [&](ad::Tape<float>& tape, ParamBinder<float>& p,
                            const Bucket& bucket) {
    const int B = static_cast<int>(bucket.utts.size());
    const int T = bucket.frames;
    auto input = pack_step_major(corpus, bucket, &LoadedUtterance::student_input, in_dim);
    ad::TensorRef x = tape.constant(std::move(input), T * B, in_dim);
    ad::TensorRef logits = student_forward(tape, p, model.cfg, x, T, B);
    ad::TensorRef q = tape.constant(soft_step_major(corpus, bucket, K), T * B, K);
    return distill_loss(tape, logits, q, cfg.temperature);
  };

  Optimizer opt(model.params, cfg.optimizer);
  LoopResult result = train_loop(model.params, corpus, cfg, train_utts, held_utts, builder, opt,
                                 [](int) {}, false);

  TrainReport report;
  report.procedure = "distill";
  report.epochs = result.epochs;
  report.final_metrics["final_held_out_distill_loss"] =
      result.epochs.empty() ? 0.0 : result.epochs.back().held_out_loss;
  nlohmann::json echo;
  to_json(echo, cfg);
  report.config_echo = echo;
  report.run_id = make_run_id(echo);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::vector<float> student_logits(const StudentModel& model, const LoadedUtterance& utt) {
  ad::Tape<float> tape;
  ParamBinder<float> p(tape, model.params, false);
  ad::TensorRef x = tape.leaf(utt.student_input.data(), utt.n_frames,
                              model.cfg.spatial_input_dim(), false);
  ad::TensorRef logits = student_forward(tape, p, model.cfg, x, utt.n_frames, 1);
  const auto v = tape.value(logits);
  return {v.begin(), v.end()};
}

std::vector<float> teacher_logits(const TeacherModel& model, const LoadedUtterance& utt) {
  ad::Tape<float> tape;
  ParamBinder<float> p(tape, model.params, false);
  ad::TensorRef x = tape.leaf(utt.teacher_feat.data(), utt.n_frames,
                              model.cfg.teacher_input_dim, false);
  ad::TensorRef logits = teacher_forward(tape, p, model.cfg, x, utt.n_frames, 1);
  const auto v = tape.value(logits);
  return {v.begin(), v.end()};
}

namespace {

void log_softmax_rows(std::vector<float>& z, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    float* x = z.data() + static_cast<size_t>(r) * cols;
    double mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, static_cast<double>(x[c]));
    double Z = 0.0;
    for (int c = 0; c < cols; ++c) Z += std::exp(x[c] - mx);
    const double lz = std::log(Z) + mx;
    for (int c = 0; c < cols; ++c) x[c] = static_cast<float>(x[c] - lz);
  }
}

EvalMetrics evaluate_impl(const std::function<std::vector<float>(const LoadedUtterance&)>& fwd,
                          const LoadedCorpus& corpus, std::span<const int> utt_indices,
                          const TeacherModel* teacher) {
  if (utt_indices.empty()) throw std::invalid_argument("evaluate: empty corpus slice");
  const int K = corpus.n_classes();
  EvalMetrics m;
  double xent = 0.0, kl = 0.0;
  int64_t errors = 0, frames = 0;
  for (int ui : utt_indices) {
    const auto& u = corpus.utts[ui];
    std::vector<float> lp = fwd(u);
    log_softmax_rows(lp, u.n_frames, K);
    std::vector<float> teacher_lp;
    if (teacher != nullptr) {
      teacher_lp = teacher_logits(*teacher, u);
      log_softmax_rows(teacher_lp, u.n_frames, K);
    }
    if (static_cast<int>(u.labels.size()) != u.n_frames)
      throw std::invalid_argument("evaluate: labels unavailable for " + u.id);
    for (int f = 0; f < u.n_frames; ++f) {
      const float* row = lp.data() + static_cast<size_t>(f) * K;
      int arg = 0;
      for (int c = 1; c < K; ++c)
        if (row[c] > row[arg]) arg = c;
      errors += arg != u.labels[f];
      xent += -static_cast<double>(row[u.labels[f]]);
      if (teacher != nullptr) {
        const float* trow = teacher_lp.data() + static_cast<size_t>(f) * K;
        for (int c = 0; c < K; ++c)
          kl += std::exp(static_cast<double>(trow[c])) *
                (static_cast<double>(trow[c]) - row[c]);
      }
      ++frames;
    }
  }
  m.frames = frames;
  m.frame_error_rate = static_cast<double>(errors) / frames;
  m.mean_xent = xent / frames;
  m.has_kl = teacher != nullptr;
  m.mean_kl_to_teacher = teacher != nullptr ? kl / frames : 0.0;
  return m;
}

}  // namespace

EvalMetrics evaluate_student(const StudentModel& model, const LoadedCorpus& corpus,
                             std::span<const int> utt_indices, const TeacherModel* teacher) {
  return evaluate_impl([&](const LoadedUtterance& u) { return student_logits(model, u); },
                       corpus, utt_indices, teacher);
}

EvalMetrics evaluate_teacher(const TeacherModel& model, const LoadedCorpus& corpus,
                             std::span<const int> utt_indices, const TeacherModel* ref_teacher) {
  return evaluate_impl([&](const LoadedUtterance& u) { return teacher_logits(model, u); },
                       corpus, utt_indices, ref_teacher);
}

}  // namespace beamkd
