#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cama/model.hpp"

namespace cama {

/// Flat run configuration. Text form: one `key=value` per line, `#` starts a comment.
struct RunConfig {
  int layers = 3;
  Index width = 128;
  Index state_size = 16;
  GateVariant gate_variant = GateVariant::differential;
  TemporalVariant temporal_variant = TemporalVariant::interleave;
  DecoderKind decoder = DecoderKind::cross_attention;
  double lr = 3e-4;
  int batch = 16;
  int epochs = 30;
  std::uint64_t seed = 7;
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
  bool tie_directions = false;
  bool tt_conv = true;

  /// Applies one key=value; unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;

  ModelConfig model_config(int vocab_size) const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

std::string to_string(GateVariant v);
std::string to_string(TemporalVariant v);
std::string to_string(DecoderKind k);
GateVariant parse_gate_variant(const std::string& s);
TemporalVariant parse_temporal_variant(const std::string& s);
DecoderKind parse_decoder_kind(const std::string& s);

}  // namespace cama
