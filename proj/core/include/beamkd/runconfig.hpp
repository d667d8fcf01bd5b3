#pragma once

#include <map>
#include <string>

#include "json.hpp"

#include "beamkd/beamform.hpp"
#include "beamkd/model.hpp"
#include "beamkd/sigproc.hpp"
#include "beamkd/simulate.hpp"
#include "beamkd/train.hpp"

namespace beamkd {

// The single JSON document driving CLI runs. Every section mirrors its
// owning module's config; unknown keys are rejected (ConfigError with the
// JSON pointer of the offending field) before any work starts.
struct RunConfig {
  AudioConfig audio;
  ArrayGeometry geometry = ArrayGeometry::circular_7ch();
  ModelConfig model;
  TrainConfig train;
  sim::CorpusParams simulate;
  std::map<std::string, std::string> paths;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
};

}  // namespace beamkd
