#include "cama/config.hpp"

#include <charconv>
#include <sstream>

#include "cama/errors.hpp"
#include "cama/fsutil.hpp"

namespace cama {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid value '" + v + "' for " + key + " (expected true or false)");
}

}  // namespace

std::string to_string(GateVariant v) { return v == GateVariant::differential ? "differential" : "self"; }

std::string to_string(TemporalVariant v) {
  switch (v) {
    case TemporalVariant::interleave: return "interleave";
    case TemporalVariant::length_concat: return "length_concat";
    case TemporalVariant::off: return "off";
  }
  return "";
}

std::string to_string(DecoderKind k) {
  switch (k) {
    case DecoderKind::mamba: return "mamba";
    case DecoderKind::gpt_style: return "gpt_style";
    case DecoderKind::cross_attention: return "cross_attention";
  }
  return "";
}

GateVariant parse_gate_variant(const std::string& s) {
  if (s == "differential") return GateVariant::differential;
  if (s == "self") return GateVariant::self;
  throw ConfigError("gate_variant must be differential or self, got '" + s + "'");
}

TemporalVariant parse_temporal_variant(const std::string& s) {
  if (s == "interleave") return TemporalVariant::interleave;
  if (s == "length_concat") return TemporalVariant::length_concat;
  if (s == "off") return TemporalVariant::off;
  throw ConfigError("temporal_variant must be interleave, length_concat or off, got '" + s + "'");
}

DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "mamba") return DecoderKind::mamba;
  if (s == "gpt_style") return DecoderKind::gpt_style;
  if (s == "cross_attention") return DecoderKind::cross_attention;
  throw ConfigError("decoder must be mamba, gpt_style or cross_attention, got '" + s + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "layers") {
    layers = parse_number<int>(key, value);
  } else if (key == "width") {
    width = parse_number<Index>(key, value);
  } else if (key == "state_size") {
    state_size = parse_number<Index>(key, value);
  } else if (key == "gate_variant") {
    gate_variant = parse_gate_variant(value);
  } else if (key == "temporal_variant") {
    temporal_variant = parse_temporal_variant(value);
  } else if (key == "decoder") {
    decoder = parse_decoder_kind(value);
  } else if (key == "lr") {
    lr = parse_number<double>(key, value);
  } else if (key == "batch") {
    batch = parse_number<int>(key, value);
  } else if (key == "epochs") {
    epochs = parse_number<int>(key, value);
  } else if (key == "seed") {
    seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "data_dir") {
    data_dir = value;
  } else if (key == "out_dir") {
    out_dir = value;
  } else if (key == "tie_directions") {
    tie_directions = parse_bool(key, value);
  } else if (key == "tt_conv") {
    tt_conv = parse_bool(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void RunConfig::validate() const {
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (width < 4 || width % 4 != 0) throw ConfigError("width must be a positive multiple of 4 (attention heads)");
  if (state_size < 1) throw ConfigError("state_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "layers=" << layers << '\n'
     << "width=" << width << '\n'
     << "state_size=" << state_size << '\n'
     << "gate_variant=" << to_string(gate_variant) << '\n'
     << "temporal_variant=" << to_string(temporal_variant) << '\n'
     << "decoder=" << to_string(decoder) << '\n'
     << "lr=" << lr << '\n'
     << "batch=" << batch << '\n'
     << "epochs=" << epochs << '\n'
     << "seed=" << seed << '\n'
     << "data_dir=" << data_dir << '\n'
     << "out_dir=" << out_dir << '\n'
     << "tie_directions=" << (tie_directions ? "true" : "false") << '\n'
     << "tt_conv=" << (tt_conv ? "true" : "false") << '\n';
  return os.str();
}

ModelConfig RunConfig::model_config(int vocab_size) const {
  ModelConfig m;
  m.encoder.num_layers = layers;
  m.encoder.width = width;
  m.encoder.state_size = state_size;
  m.encoder.gate_variant = gate_variant;
  m.encoder.temporal_variant = temporal_variant;
  m.encoder.decoder_kind = decoder;
  m.encoder.tie_directions = tie_directions;
  m.encoder.tt_conv = tt_conv;
  m.decoder.kind = decoder;
  m.decoder.width = width;
  m.decoder.vocab_size = vocab_size;
  return m;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  try {
    return parse_config(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace cama
