// Text configuration: one `key=value` per line, `#` starts a comment.
// Keys not present take their defaults; unknown keys are rejected.
//
//   width=32
//   cond_aware_set=[dw-conv,patch-embed,out-proj]
//   control_method=[CAN,CondTokens]
//   cond_sources=[ClassLabel,Timestep]

#ifndef CANF_CONFIG_HPP_
#define CANF_CONFIG_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "canf/harness.hpp"
#include "canf/model_config.hpp"

namespace canf {

struct RunConfig {
  ModelConfig model;
  TrainSettings train;
  bool operator==(const RunConfig&) const = default;
};

/// All recognised keys, in serialization order.
const std::vector<std::string>& config_keys();

/// Applies one `key=value` pair. Throws ConfigError naming the key (and the
/// closest valid key when it is unknown) or the expected type.
void apply_override(RunConfig& config, const std::string& key_value);

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::optional<std::filesystem::path>& path,
                       const std::vector<std::string>& overrides = {});

/// Every key in canonical order and formatting; parse_config_text of the
/// result reproduces the same RunConfig.
std::string serialize_config(const RunConfig& config);
std::string serialize_model_config(const ModelConfig& config);

/// 16 hex digits of FNV-1a over the serialized config.
std::string config_hash(const RunConfig& config);

std::string format_double(double value);

}  // namespace canf

#endif  // CANF_CONFIG_HPP_
