#pragma once

// File-backed key/value run configuration covering the generator and the
// experiment. Format: one `key = value` pair per line, `#` starts a comment,
// blank lines are ignored. Unknown and duplicate keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "sessionfit/data.hpp"
#include "sessionfit/experiment.hpp"

namespace sessionfit {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  GeneratorConfig generator;
  ExperimentConfig experiment;

  // The single `seed` key seeds both the generator and the experiment.
  void set_seed(std::uint64_t seed) {
    generator.seed = seed;
    experiment.seed = seed;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

inline long long parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + value + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + value +
                      "'");
  }
}

inline float parse_float(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const float v = std::stof(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + value + "'");
}

}  // namespace detail

inline SplitMode parse_split_mode(const std::string& value) {
  if (value == "intra") return SplitMode::intra_session;
  if (value == "inter") return SplitMode::inter_session;
  throw ConfigError("config: mode must be 'intra' or 'inter', got '" + value + "'");
}

inline FreezeMode parse_freeze_mode(const std::string& value) {
  if (value == "conv") return FreezeMode::freeze_conv_sections;
  if (value == "all-but-last") return FreezeMode::freeze_all_but_last;
  if (value == "none") return FreezeMode::none;
  throw ConfigError("config: freeze must be 'conv', 'all-but-last' or 'none', got '" + value +
                    "'");
}

inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_float;
  using detail::parse_int;
  using detail::parse_u64;
  if (key == "seed") {
    cfg.set_seed(parse_u64(key, value));
  } else if (key == "mode") {
    cfg.experiment.mode = parse_split_mode(value);
  } else if (key == "intra_session") {
    cfg.experiment.intra_session = static_cast<int>(parse_int(key, value));
  } else if (key == "height") {
    cfg.generator.height = static_cast<int>(parse_int(key, value));
  } else if (key == "width") {
    cfg.generator.width = static_cast<int>(parse_int(key, value));
  } else if (key == "sessions") {
    cfg.generator.sessions_count = static_cast<int>(parse_int(key, value));
  } else if (key == "rounds_per_session") {
    cfg.generator.rounds_per_session = static_cast<int>(parse_int(key, value));
  } else if (key == "images_per_class") {
    cfg.generator.images_per_class_per_round = static_cast<int>(parse_int(key, value));
  } else if (key == "session_shift_px") {
    cfg.generator.session_shift_px = static_cast<int>(parse_int(key, value));
  } else if (key == "session_gain_lo") {
    cfg.generator.session_gain_lo = parse_float(key, value);
  } else if (key == "session_gain_hi") {
    cfg.generator.session_gain_hi = parse_float(key, value);
  } else if (key == "round_jitter_px") {
    cfg.generator.round_jitter_px = static_cast<int>(parse_int(key, value));
  } else if (key == "speckle_sigma") {
    cfg.generator.speckle_sigma = parse_float(key, value);
  } else if (key == "epochs_initial") {
    cfg.experiment.epochs_initial = static_cast<int>(parse_int(key, value));
  } else if (key == "epochs_finetune") {
    cfg.experiment.epochs_per_ft = static_cast<int>(parse_int(key, value));
  } else if (key == "lr_initial") {
    cfg.experiment.lr_initial = parse_float(key, value);
  } else if (key == "lr_finetune") {
    cfg.experiment.lr_ft = parse_float(key, value);
  } else if (key == "batch_size") {
    cfg.experiment.batch_size = static_cast<int>(parse_int(key, value));
  } else if (key == "freeze") {
    cfg.experiment.freeze_mode = parse_freeze_mode(value);
  } else if (key == "cv_repeats") {
    cfg.experiment.cv_repeats = static_cast<int>(parse_int(key, value));
  } else if (key == "cv_randomize") {
    cfg.experiment.cv_randomize = parse_bool(key, value);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

inline RunConfig parse_run_config(std::istream& in, const std::string& origin) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const std::size_t eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    const std::string key = detail::trim(trimmed.substr(0, eq));
    const std::string value = detail::trim(trimmed.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    if (!seen.insert(key).second)
      throw ConfigError("config: duplicate key '" + key + "' in " + origin);
    apply_config_kv(cfg, key, value);
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  return parse_run_config(in, path.string());
}

// Fully resolved echo embedded into every results document and manifest.
inline nlohmann::json run_config_json(const RunConfig& cfg) {
  return nlohmann::json{{"generator", generator_config_json(cfg.generator)},
                        {"experiment", experiment_config_json(cfg.experiment)}};
}

}  // namespace sessionfit
