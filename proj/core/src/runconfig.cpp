#include "beamkd/runconfig.hpp"

#include <fstream>

#include "beamkd/errors.hpp"
#include "beamkd/json_support.hpp"

namespace beamkd {

namespace {

struct Schema {
  std::map<std::string, Schema> children;
  bool any_children = false;  // arrays / free-form leaves
};

Schema leaf() { return {}; }

Schema schema_tree() {
  Schema audio;
  for (const char* k : {"sample_rate_hz", "window_ms", "shift_ms", "dft_size",
                        "teacher_dft_size"})
    audio.children[k] = leaf();

  Schema geometry;
  geometry.children["name"] = leaf();
  geometry.children["mics"] = leaf();
  geometry.children["mics"].any_children = true;

  Schema teacher;
  for (const char* k : {"flstm_layers", "flstm_hidden", "flstm_window", "flstm_stride",
                        "blstm_layers", "blstm_hidden"})
    teacher.children[k] = leaf();

  Schema model;
  for (const char* k : {"n_bins", "n_channels", "n_looks", "comb_dim", "n_mels",
                        "lstm_layers", "lstm_hidden", "n_classes", "teacher_input_dim"})
    model.children[k] = leaf();
  model.children["teacher"] = teacher;

  Schema optimizer;
  for (const char* k : {"learning_rate", "beta1", "beta2", "epsilon", "batch_size"})
    optimizer.children[k] = leaf();

  Schema train;
  for (const char* k : {"epochs", "temperature", "top_k", "freeze_frontend_first_epoch",
                        "seed", "held_out_fraction"})
    train.children[k] = leaf();
  train.children["optimizer"] = optimizer;

  Schema simulate;
  for (const char* k : {"n_utts", "labeled_fraction", "snr_db_min", "snr_db_max",
                        "sensor_noise_db", "utterance_seconds", "n_diffuse_plane_waves",
                        "n_classes"})
    simulate.children[k] = leaf();

  Schema paths;
  for (const char* k : {"corpus", "out", "bank", "checkpoint", "teacher", "targets",
                        "lstm_seed"})
    paths.children[k] = leaf();

  Schema root;
  root.children["audio"] = audio;
  root.children["geometry"] = geometry;
  root.children["model"] = model;
  root.children["train"] = train;
  root.children["simulate"] = simulate;
  root.children["paths"] = paths;
  return root;
}

void check_keys(const nlohmann::json& j, const Schema& schema, const std::string& pointer) {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    const auto it = schema.children.find(key);
    if (it == schema.children.end())
      throw ConfigError("unknown config key at " + pointer + "/" + key);
    if (!it->second.any_children) check_keys(value, it->second, pointer + "/" + key);
  }
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  check_keys(j, schema_tree(), "");
  RunConfig cfg;
  if (j.contains("audio")) cfg.audio = j.at("audio").get<AudioConfig>();
  if (j.contains("geometry")) cfg.geometry = j.at("geometry").get<ArrayGeometry>();
  if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    cfg.simulate.n_utts = s.value("n_utts", cfg.simulate.n_utts);
    cfg.simulate.labeled_fraction = s.value("labeled_fraction", cfg.simulate.labeled_fraction);
    cfg.simulate.snr_db_min = s.value("snr_db_min", cfg.simulate.snr_db_min);
    cfg.simulate.snr_db_max = s.value("snr_db_max", cfg.simulate.snr_db_max);
    cfg.simulate.sensor_noise_db = s.value("sensor_noise_db", cfg.simulate.sensor_noise_db);
    cfg.simulate.utterance_seconds =
        s.value("utterance_seconds", cfg.simulate.utterance_seconds);
    cfg.simulate.n_diffuse_plane_waves =
        s.value("n_diffuse_plane_waves", cfg.simulate.n_diffuse_plane_waves);
    if (s.contains("n_classes"))
      cfg.simulate.labels = sim::SynthLabelSpec::default_spec(s.at("n_classes").get<int>());
  }
  if (j.contains("paths"))
    for (const auto& [k, v] : j.at("paths").items())
      cfg.paths[k] = v.get<std::string>();

  // The simulator shares the audio config and geometry sections.
  cfg.simulate.audio = cfg.audio;
  cfg.simulate.geometry = cfg.geometry;
  try {
    cfg.audio.validate();
    cfg.model.validate();
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["audio"] = audio;
  j["geometry"] = geometry;
  j["model"] = model;
  j["train"] = train;
  j["simulate"] = {{"n_utts", simulate.n_utts},
                   {"labeled_fraction", simulate.labeled_fraction},
                   {"snr_db_min", simulate.snr_db_min},
                   {"snr_db_max", simulate.snr_db_max},
                   {"sensor_noise_db", simulate.sensor_noise_db},
                   {"utterance_seconds", simulate.utterance_seconds},
                   {"n_diffuse_plane_waves", simulate.n_diffuse_plane_waves},
                   {"n_classes", simulate.labels.n_classes}};
  j["paths"] = paths;
  return j;
}

}  // namespace beamkd
