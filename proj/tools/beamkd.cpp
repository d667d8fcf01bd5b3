// beamkd: corpus simulation, beamforming, feature extraction, the four-way
// initialization/training matrix, teacher-student distillation, evaluation
// and verification, from one binary.
//
// Exit codes: 0 ok, 2 config error, 3 artifact incompatibility,
// 4 missing prerequisite, 5 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "beamkd/beamform.hpp"
#include "beamkd/corpus.hpp"
#include "beamkd/errors.hpp"
#include "beamkd/formats.hpp"
#include "beamkd/json_support.hpp"
#include "beamkd/model.hpp"
#include "beamkd/runconfig.hpp"
#include "beamkd/simulate.hpp"
#include "beamkd/train.hpp"
#include "beamkd/verify.hpp"
#include "beamkd/wav_io.hpp"

namespace fs = std::filesystem;
using namespace beamkd;

namespace {

// Rejects concurrent invocations targeting the same output directory.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    if (dir.empty()) return;
    fs::create_directories(dir);
    path_ = dir / ".beamkd.lock";
    std::error_code ec;
    if (fs::exists(path_, ec))
      throw IncompatibleArtifacts("output directory is locked by another run: " +
                                  path_.string());
    std::ofstream f(path_);
    f << "locked\n";
    held_ = true;
  }
  ~DirLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  bool held_ = false;
};

RunConfig load_config(const std::string& config_path) {
  if (config_path.empty()) return RunConfig::from_json(nlohmann::json::object());
  return RunConfig::from_file(config_path);
}

uint64_t effective_seed(std::optional<uint64_t> cli_seed, const RunConfig& cfg) {
  if (cli_seed) return *cli_seed;
  if (cfg.train.seed != 0) return cfg.train.seed;
  // No seed given anywhere: record a wall-clock-derived one in the report.
  return static_cast<uint64_t>(
      std::chrono::steady_clock::now().time_since_epoch().count());
}

ArrayGeometry pair_geometry(const ArrayGeometry& geom, std::pair<int, int> pair) {
  ArrayGeometry g;
  g.name = geom.name + "-pair";
  g.mics = {geom.mics[pair.first], geom.mics[pair.second]};
  return g;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// train presets (the experiment matrix rows, minus the sMBR stages which are
// recorded as explicit not-implemented markers)
// ---------------------------------------------------------------------------

struct PresetResult {
  nlohmann::json stages = nlohmann::json::array();
  StudentModel model{ModelConfig{}, {}};
};

StudentModel init_student(const RunConfig& cfg, const LoadedCorpus& corpus,
                          const std::string& preset, uint64_t seed,
                          const ParamSet<float>* lstm_seed) {
  ModelConfig mc = cfg.model;
  mc.n_classes = corpus.n_classes();
  StudentModel model = StudentModel::build(mc);
  Rng rng(Rng::derive(seed, "init"));
  init_random(model, rng, lstm_seed);
  if (preset == "dsp-init" || preset == "pretrained-dsp-init") {
    const BeamformerBank bank2 =
        design_bank(pair_geometry(corpus.manifest.geometry, corpus.pair), mc.n_looks,
                    corpus.manifest.audio);
    const InitVariant variant = preset == "dsp-init" ? InitVariant::kDspInit
                                                     : InitVariant::kPretrainedDspInit;
    init_dsp(model, bank2, corpus.mel, variant, rng);
  }
  return model;
}

int cmd_train(const std::string& mode, const std::string& preset,
              const std::string& corpus_dir, const std::string& out_dir,
              const std::string& config_path, std::optional<uint64_t> cli_seed,
              const std::string& init_ckpt, const std::string& targets_dir,
              const std::string& lstm_seed_path) {
  RunConfig cfg = load_config(config_path);
  const uint64_t seed = effective_seed(cli_seed, cfg);
  cfg.train.seed = seed;
  DirLock lock(out_dir);
  fs::create_directories(out_dir);

  std::optional<ParamSet<float>> lstm_seed;
  if (!lstm_seed_path.empty())
    lstm_seed = load_student_checkpoint(lstm_seed_path).params;

  nlohmann::json run;
  run["command"] = "train " + mode;
  run["preset"] = preset;
  run["seed"] = seed;
  run["config"] = cfg.to_json();
  auto stages = nlohmann::json::array();

  if (mode == "teacher") {
    FeatureOptions opts;
    opts.student_input = false;
    opts.teacher_features = true;
    LoadedCorpus corpus = load_corpus(corpus_dir, opts);
    ModelConfig mc = cfg.model;
    mc.n_classes = corpus.n_classes();
    TeacherModel teacher = TeacherModel::build(mc);
    Rng rng(Rng::derive(seed, "teacher-init"));
    init_teacher_uniform(teacher, rng);
    TrainReport report = train_xent_teacher(teacher, corpus, cfg.train);
    save_checkpoint({"teacher", teacher.cfg, teacher.params},
                    (fs::path(out_dir) / "teacher.bkcp").string());
    report.save((fs::path(out_dir) / "teacher.report.json").string());
    stages.push_back({{"stage", "xent"}, {"report", "teacher.report.json"}});
    stages.push_back({{"stage", "smbr"}, {"status", "not implemented"}});
  } else if (mode == "xent" || mode == "pretrain") {
    FeatureOptions opts;
    opts.lfbe_target = (mode == "pretrain" || preset.rfind("pretrained", 0) == 0);
    LoadedCorpus corpus = load_corpus(corpus_dir, opts);
    StudentModel model =
        init_student(cfg, corpus, preset, seed, lstm_seed ? &*lstm_seed : nullptr);

    if (opts.lfbe_target) {
      TrainConfig pre_cfg = cfg.train;
      pre_cfg.freeze_frontend_first_epoch = preset == "pretrained-dsp-init";
      TrainReport report = pretrain_frontend(model, corpus, pre_cfg);
      report.save((fs::path(out_dir) / "pretrain.report.json").string());
      stages.push_back({{"stage", "pretrain"}, {"report", "pretrain.report.json"}});
    }
    if (mode == "xent") {
      TrainReport report = train_xent_student(model, corpus, cfg.train);
      report.save((fs::path(out_dir) / "xent.report.json").string());
      stages.push_back({{"stage", "xent"}, {"report", "xent.report.json"}});
      stages.push_back({{"stage", "smbr"}, {"status", "not implemented"}});
    }
    save_checkpoint({"student", model.cfg, model.params},
                    (fs::path(out_dir) / "student.bkcp").string());
  } else if (mode == "distill") {
    if (init_ckpt.empty())
      throw MissingPrerequisite("distill: --init <supervised checkpoint> is required");
    if (targets_dir.empty())
      throw MissingPrerequisite("distill: --targets <soft target dir> is required");
    StudentModel model = load_student_checkpoint(init_ckpt);
    LoadedCorpus corpus = load_corpus(corpus_dir, FeatureOptions{});
    attach_soft_targets(corpus, targets_dir);
    TrainReport report = distill(model, corpus, cfg.train);
    save_checkpoint({"student", model.cfg, model.params},
                    (fs::path(out_dir) / "student.bkcp").string());
    report.save((fs::path(out_dir) / "distill.report.json").string());
    stages.push_back({{"stage", "distill"}, {"report", "distill.report.json"}});
    stages.push_back({{"stage", "smbr"}, {"status", "not implemented"}});
  } else {
    throw ConfigError("unknown train mode: " + mode);
  }

  run["stages"] = stages;
  write_json(fs::path(out_dir) / "run.json", run);
  std::cout << "OK " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-channel acoustic front-end training toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, corpus_dir, geometry_path, bank_path, in_path,
      model_path, teacher_path, targets_dir, init_ckpt, feat_type = "lfbe",
      preset = "dsp-init", lstm_seed_path, split = "held-out";
  std::optional<uint64_t> seed_flag;
  bool force = false;
  int look = 0;
  double azimuth = -1.0;

  // simulate make-corpus
  auto* sim_cmd = app.add_subcommand("simulate", "synthetic corpus generation");
  auto* make_corpus_cmd = sim_cmd->add_subcommand("make-corpus", "generate a corpus");
  make_corpus_cmd->add_option("--config", config_path, "run config JSON");
  make_corpus_cmd->add_option("--out", out_dir)->required();
  make_corpus_cmd->add_option("--seed", seed_flag);
  make_corpus_cmd->add_flag("--force", force);

  // beamform design / apply
  auto* bf_cmd = app.add_subcommand("beamform", "superdirective beamformer");
  auto* design_cmd = bf_cmd->add_subcommand("design", "design a weight bank");
  design_cmd->add_option("--config", config_path);
  design_cmd->add_option("--geometry", geometry_path, "geometry JSON file");
  design_cmd->add_option("--out", bank_path)->required();
  auto* apply_cmd = bf_cmd->add_subcommand("apply", "beamform a multi-channel WAV");
  apply_cmd->add_option("--bank", bank_path)->required();
  apply_cmd->add_option("--in", in_path)->required();
  apply_cmd->add_option("--out", out_dir)->required();
  apply_cmd->add_option("--look", look, "bank look index");
  apply_cmd->add_option("--azimuth", azimuth, "steer to nearest look for this bearing");

  // features extract
  auto* feat_cmd = app.add_subcommand("features", "feature extraction");
  auto* extract_cmd = feat_cmd->add_subcommand("extract", "write feature files");
  extract_cmd->add_option("--type", feat_type, "lfbe | logdft");
  extract_cmd->add_option("--corpus", corpus_dir)->required();
  extract_cmd->add_option("--out", out_dir)->required();
  extract_cmd->add_option("--config", config_path);

  // train
  auto* train_cmd = app.add_subcommand("train", "training procedures");
  std::string train_mode;
  train_cmd->add_option("mode", train_mode, "teacher | xent | pretrain | distill")->required();
  train_cmd->add_option("--preset", preset,
                        "random-init | dsp-init | pretrained | pretrained-dsp-init | "
                        "student-dsp-init | student-pretrained | teacher");
  train_cmd->add_option("--corpus", corpus_dir)->required();
  train_cmd->add_option("--out", out_dir)->required();
  train_cmd->add_option("--config", config_path);
  train_cmd->add_option("--seed", seed_flag);
  train_cmd->add_option("--init", init_ckpt, "supervised checkpoint for distillation");
  train_cmd->add_option("--targets", targets_dir, "soft target directory");
  train_cmd->add_option("--lstm-seed", lstm_seed_path, "seed checkpoint for the LSTM stack");

  // targets generate
  auto* targets_cmd = app.add_subcommand("targets", "soft target generation");
  auto* gen_cmd = targets_cmd->add_subcommand("generate", "emit teacher soft targets");
  gen_cmd->add_option("--teacher", teacher_path)->required();
  gen_cmd->add_option("--corpus", corpus_dir)->required();
  gen_cmd->add_option("--out", out_dir)->required();
  gen_cmd->add_option("--config", config_path);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on a corpus");
  eval_cmd->add_option("--model", model_path)->required();
  eval_cmd->add_option("--corpus", corpus_dir)->required();
  eval_cmd->add_option("--teacher", teacher_path);
  eval_cmd->add_option("--split", split, "held-out | train | all");
  eval_cmd->add_option("--config", config_path);

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "oracle suites");
  std::string verify_what;
  verify_cmd->add_option("what", verify_what, "gradcheck | dsp-equivalence")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*make_corpus_cmd) {
      RunConfig cfg = load_config(config_path);
      const uint64_t seed = effective_seed(seed_flag, cfg);
      DirLock lock(out_dir);
      sim::make_corpus(cfg.simulate, out_dir, seed, force);
      std::cout << "OK " << out_dir << "\n";
      return 0;
    }

    if (*design_cmd) {
      RunConfig cfg = load_config(config_path);
      ArrayGeometry geom = geometry_path.empty()
                               ? cfg.geometry
                               : ArrayGeometry::from_json_file(geometry_path);
      const BeamformerBank bank = design_bank(geom, cfg.model.n_looks, cfg.audio);
      const double err = max_distortionless_error(bank, cfg.audio);
      if (err > 1e-9) {
        std::cerr << "distortionless self-check failed: " << err << "\n";
        return 5;
      }
      save_bank(bank, bank_path);
      std::cout << "OK distortionless max |w^H d - 1| = " << err << "\n";
      return 0;
    }

    if (*apply_cmd) {
      RunConfig cfg = load_config(config_path);
      const BeamformerBank bank = load_bank(bank_path);
      const MultiChannelAudio in = read_wav(in_path);
      if (in.num_channels() != bank.geometry.num_mics())
        throw IncompatibleArtifacts("beamform apply: WAV has " +
                                    std::to_string(in.num_channels()) +
                                    " channels, bank expects " +
                                    std::to_string(bank.geometry.num_mics()));
      if (in.sample_rate_hz != bank.sample_rate_hz)
        throw IncompatibleArtifacts("beamform apply: sample rate mismatch");
      AudioConfig audio = cfg.audio;
      audio.sample_rate_hz = bank.sample_rate_hz;
      audio.dft_size = bank.dft_size;
      const int d = azimuth >= 0 ? nearest_look(bank, azimuth) : look;
      if (d < 0 || d >= bank.num_directions())
        throw ConfigError("beamform apply: look index out of range");
      const ComplexSpectrogram spec = stft_multichannel(in, audio);
      const ComplexSpectrogram beam = apply_beamformer(spec, bank.weights_for(d));
      MultiChannelAudio out;
      out.sample_rate_hz = in.sample_rate_hz;
      out.channels = {istft(beam, audio)};
      write_wav(out_dir, out);
      std::cout << "OK " << out_dir << "\n";
      return 0;
    }

    if (*extract_cmd) {
      RunConfig cfg = load_config(config_path);
      FeatureOptions opts;
      opts.student_input = false;
      opts.lfbe_target = feat_type == "lfbe";
      opts.teacher_features = feat_type == "logdft";
      if (!opts.lfbe_target && !opts.teacher_features)
        throw ConfigError("features extract: --type must be lfbe or logdft");
      DirLock lock(out_dir);
      LoadedCorpus corpus = load_corpus(corpus_dir, opts);
      fs::create_directories(out_dir);
      for (const auto& u : corpus.utts) {
        const auto& data = opts.lfbe_target ? u.lfbe_target : u.teacher_feat;
        const int dim = static_cast<int>(data.size()) / u.n_frames;
        RowMatXd rows(u.n_frames, dim);
        for (int f = 0; f < u.n_frames; ++f)
          for (int c = 0; c < dim; ++c) rows(f, c) = data[static_cast<size_t>(f) * dim + c];
        write_features((fs::path(out_dir) / (u.id + ".bkdf")).string(), rows);
      }
      std::cout << "OK " << corpus.utts.size() << " feature files\n";
      return 0;
    }

    if (*train_cmd) {
      return cmd_train(train_mode, preset, corpus_dir, out_dir, config_path, seed_flag,
                       init_ckpt, targets_dir, lstm_seed_path);
    }

    if (*gen_cmd) {
      RunConfig cfg = load_config(config_path);
      const TeacherModel teacher = load_teacher_checkpoint(teacher_path);
      FeatureOptions opts;
      opts.student_input = false;
      opts.teacher_features = true;
      DirLock lock(out_dir);
      LoadedCorpus corpus = load_corpus(corpus_dir, opts);
      if (teacher.cfg.n_classes != corpus.n_classes())
        throw IncompatibleArtifacts("targets: teacher classes != corpus classes");
      const int n = generate_soft_targets(teacher, corpus, cfg.train, out_dir);
      std::cout << "OK " << n << " target files\n";
      return 0;
    }

    if (*eval_cmd) {
      RunConfig cfg = load_config(config_path);
      const Checkpoint ckpt = load_checkpoint(model_path);
      FeatureOptions opts;
      opts.eval_labels = true;
      opts.student_input = ckpt.kind == "student";
      opts.teacher_features = ckpt.kind == "teacher" || !teacher_path.empty();
      LoadedCorpus corpus = load_corpus(corpus_dir, opts);
      std::vector<int> utts;
      if (split == "all") {
        for (size_t i = 0; i < corpus.utts.size(); ++i) utts.push_back(static_cast<int>(i));
      } else {
        utts = split_indices(corpus, cfg.train, split == "held-out", false);
      }
      std::optional<TeacherModel> teacher;
      if (!teacher_path.empty()) teacher = load_teacher_checkpoint(teacher_path);
      EvalMetrics m;
      if (ckpt.kind == "student") {
        StudentModel model = load_student_checkpoint(model_path);
        if (model.cfg.n_classes != corpus.n_classes())
          throw IncompatibleArtifacts("eval: model classes != corpus classes");
        m = evaluate_student(model, corpus, utts, teacher ? &*teacher : nullptr);
      } else {
        TeacherModel model = load_teacher_checkpoint(model_path);
        if (model.cfg.n_classes != corpus.n_classes())
          throw IncompatibleArtifacts("eval: model classes != corpus classes");
        m = evaluate_teacher(model, corpus, utts, teacher ? &*teacher : nullptr);
      }
      nlohmann::json j = {{"frame_error_rate", m.frame_error_rate},
                          {"mean_xent", m.mean_xent},
                          {"frames", m.frames},
                          {"utterances", utts.size()},
                          {"split", split}};
      if (m.has_kl) j["mean_kl_to_teacher"] = m.mean_kl_to_teacher;
      std::cout << j.dump(2) << "\n";
      return 0;
    }

    if (*verify_cmd) {
      if (verify_what == "gradcheck") {
        const verify::GradCheckSummary summary = verify::gradcheck_all();
        for (const auto& e : summary.entries)
          std::printf("%-24s max_rel_err %.3e (tol %.0e)\n", e.name.c_str(), e.max_rel_err,
                      e.tolerance);
        if (!summary.ok()) {
          std::cerr << "gradcheck FAILED\n";
          return 5;
        }
        std::cout << "OK\n";
        return 0;
      }
      if (verify_what == "dsp-equivalence") {
        const double dev = verify::dsp_equivalence_max_dev();
        std::printf("dsp-equivalence max |dev| = %.3e (tol 1e-4)\n", dev);
        if (!(dev <= 1e-4)) {
          std::cerr << "dsp-equivalence FAILED\n";
          return 5;
        }
        std::cout << "OK\n";
        return 0;
      }
      throw ConfigError("verify: unknown suite '" + verify_what + "'");
    }

    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IncompatibleArtifacts& e) {
    std::cerr << "incompatible artifacts: " << e.what() << "\n";
    return 3;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 4;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
