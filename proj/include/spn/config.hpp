// Flat key=value run configuration.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "spn/pipeline.hpp"
#include "spn/spn_model.hpp"

namespace spn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  SPNConfig model;
  TrainConfig train;
  TrainLoopOptions loop;

  bool operator==(const RunConfig& o) const {
    return model == o.model && train == o.train && loop.log_every == o.loop.log_every &&
           loop.checkpoint_every == o.loop.checkpoint_every;
  }
};

// One "key=value" per line; blank lines and lines starting with '#' are
// skipped. Keys not given keep their defaults; unknown keys are an error.
RunConfig parse_config(const std::string& text);
// Merges `text` over `base`.
RunConfig parse_config(const std::string& text, RunConfig base);

// Every key, in a fixed order, numbers in round-trippable form.
std::string format_config(const RunConfig& cfg);
std::string format_model_config(const SPNConfig& cfg);

// FNV-1a 64 of format_config, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Ready-made configurations sized for a single CPU core.
RunConfig desk_config();

}  // namespace spn
