#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambo/model.hpp"

namespace mambo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Schedule { cosine, constant };

// Desk-scale defaults. The reference recipe (batch 32, 200 epochs) is
// available through full_scale_preset().
struct TrainConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.01;
  int batch = 8;
  int epochs = 100;
  int components = 128;
  int band_width = 2;
  std::optional<std::uint64_t> seed;
  double split_fraction = 0.7;
  Schedule schedule = Schedule::cosine;
  int image_size = 64;
  std::string dataset = "synthetic";
  int samples = 256;
  bool augment = true;
  bool use_gsm = true;
  bool use_cibm = true;
  bool detach_uncertainty = false;
  bool stochastic_inference = false;
  std::vector<int> channels{8, 16, 32};

  static TrainConfig full_scale_preset() {
    TrainConfig c;
    c.batch = 32;
    c.epochs = 200;
    return c;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.components = components;
    m.channels = channels;
    m.use_gsm = use_gsm;
    m.use_cibm = use_cibm;
    m.band_width = band_width;
    m.detach_uncertainty = detach_uncertainty;
    return m;
  }

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (components < 1 || components > 512) throw ConfigError("k must lie in [1,512]");
    if (band_width < 1) throw ConfigError("band_width must be >= 1");
    if (!(split_fraction > 0 && split_fraction < 1)) throw ConfigError("split_fraction must lie in (0,1)");
    if (channels.empty()) throw ConfigError("channels must list at least one stage");
    for (int c : channels)
      if (c < 1) throw ConfigError("channel counts must be positive");
    const int div = std::max(8, 1 << channels.size());
    if (image_size < div || image_size % div) throw ConfigError("image_size must be a multiple of " + std::to_string(div));
    if (samples < 1) throw ConfigError("samples must be >= 1");
  }
};

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "lr",        "momentum",   "weight_decay",   "batch",   "epochs",  "k",
      "band_width", "seed",      "split_fraction", "schedule", "image_size", "dataset",
      "samples",   "augment",    "use_gsm",        "use_cibm", "detach_uncertainty",
      "stochastic_inference", "channels"};
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  N out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

}  // namespace detail

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& raw) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string v = detail::trim(raw);
  if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "momentum") c.momentum = parse_number<double>(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, v);
  else if (key == "batch") c.batch = parse_number<int>(key, v);
  else if (key == "epochs") c.epochs = parse_number<int>(key, v);
  else if (key == "k") c.components = parse_number<int>(key, v);
  else if (key == "band_width") c.band_width = parse_number<int>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "split_fraction") c.split_fraction = parse_number<double>(key, v);
  else if (key == "schedule") {
    if (v == "cosine") c.schedule = Schedule::cosine;
    else if (v == "constant") c.schedule = Schedule::constant;
    else throw ConfigError("schedule: expected cosine or constant, got '" + v + "'");
  } else if (key == "image_size") c.image_size = parse_number<int>(key, v);
  else if (key == "dataset") c.dataset = v;
  else if (key == "samples") c.samples = parse_number<int>(key, v);
  else if (key == "augment") c.augment = parse_bool(key, v);
  else if (key == "use_gsm") c.use_gsm = parse_bool(key, v);
  else if (key == "use_cibm") c.use_cibm = parse_bool(key, v);
  else if (key == "detach_uncertainty") c.detach_uncertainty = parse_bool(key, v);
  else if (key == "stochastic_inference") c.stochastic_inference = parse_bool(key, v);
  else if (key == "channels") {
    c.channels.clear();
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) c.channels.push_back(parse_number<int>(key, detail::trim(part)));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

// `key = value` lines, `#` starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::istream& is, const std::string& origin = "config") {
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    out[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline void apply_config(TrainConfig& c, std::istream& is, const std::string& origin = "config") {
  for (const auto& [k, v] : parse_key_values(is, origin)) set_config_value(c, k, v);
}

inline void apply_config_file(TrainConfig& c, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  apply_config(c, is, path.string());
}

using ConfigHash = std::array<std::uint8_t, 32>;

// SHA-256 over the architecture-defining fields.
inline ConfigHash model_hash(const ModelConfig& m) {
  std::ostringstream os;
  os << "k=" << m.components << ";channels=";
  for (std::size_t i = 0; i < m.channels.size(); ++i) os << (i ? "," : "") << m.channels[i];
  os << ";use_gsm=" << m.use_gsm << ";use_cibm=" << m.use_cibm;
  const std::string s = os.str();
  ConfigHash h{};
  unsigned int len = 0;
  if (EVP_Digest(s.data(), s.size(), h.data(), &len, EVP_sha256(), nullptr) != 1 || len != h.size())
    throw std::runtime_error("sha256 failed");
  return h;
}

}  // namespace mambo
