#pragma once

// nlohmann-json ADL serializers for the config types that appear in
// manifests, checkpoints and run configs.

#include "json.hpp"

#include "beamkd/autodiff.hpp"
#include "beamkd/beamform.hpp"
#include "beamkd/model.hpp"
#include "beamkd/sigproc.hpp"

namespace beamkd {

inline void to_json(nlohmann::json& j, const TeacherConfig& t) {
  j = {{"flstm_layers", t.flstm_layers},
       {"flstm_hidden", t.flstm_hidden},
       {"flstm_window", t.flstm_window},
       {"flstm_stride", t.flstm_stride},
       {"blstm_layers", t.blstm_layers},
       {"blstm_hidden", t.blstm_hidden}};
}

inline void from_json(const nlohmann::json& j, TeacherConfig& t) {
  t.flstm_layers = j.value("flstm_layers", t.flstm_layers);
  t.flstm_hidden = j.value("flstm_hidden", t.flstm_hidden);
  t.flstm_window = j.value("flstm_window", t.flstm_window);
  t.flstm_stride = j.value("flstm_stride", t.flstm_stride);
  t.blstm_layers = j.value("blstm_layers", t.blstm_layers);
  t.blstm_hidden = j.value("blstm_hidden", t.blstm_hidden);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_bins", c.n_bins},
       {"n_channels", c.n_channels},
       {"n_looks", c.n_looks},
       {"comb_dim", c.comb_dim},
       {"n_mels", c.n_mels},
       {"lstm_layers", c.lstm_layers},
       {"lstm_hidden", c.lstm_hidden},
       {"n_classes", c.n_classes},
       {"teacher_input_dim", c.teacher_input_dim},
       {"teacher", c.teacher}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_bins = j.value("n_bins", c.n_bins);
  c.n_channels = j.value("n_channels", c.n_channels);
  c.n_looks = j.value("n_looks", c.n_looks);
  c.comb_dim = j.value("comb_dim", c.comb_dim);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
  c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.teacher_input_dim = j.value("teacher_input_dim", c.teacher_input_dim);
  if (j.contains("teacher")) c.teacher = j.at("teacher").get<TeacherConfig>();
}

inline void to_json(nlohmann::json& j, const AudioConfig& c) {
  j = {{"sample_rate_hz", c.sample_rate_hz},
       {"window_ms", c.window_ms},
       {"shift_ms", c.shift_ms},
       {"dft_size", c.dft_size},
       {"teacher_dft_size", c.teacher_dft_size}};
}

inline void from_json(const nlohmann::json& j, AudioConfig& c) {
  c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
  c.window_ms = j.value("window_ms", c.window_ms);
  c.shift_ms = j.value("shift_ms", c.shift_ms);
  c.dft_size = j.value("dft_size", c.dft_size);
  c.teacher_dft_size = j.value("teacher_dft_size", c.teacher_dft_size);
}

inline void to_json(nlohmann::json& j, const ArrayGeometry& g) {
  auto mics = nlohmann::json::array();
  for (const auto& m : g.mics) mics.push_back({m.x(), m.y(), m.z()});
  j = {{"name", g.name}, {"mics", mics}};
}

inline void from_json(const nlohmann::json& j, ArrayGeometry& g) {
  g.name = j.at("name").get<std::string>();
  g.mics.clear();
  for (const auto& m : j.at("mics"))
    g.mics.emplace_back(m.at(0).get<double>(), m.at(1).get<double>(), m.at(2).get<double>());
}

namespace ad {

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epsilon", c.epsilon},
       {"batch_size", c.batch_size}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.batch_size = j.value("batch_size", c.batch_size);
}

}  // namespace ad

}  // namespace beamkd
