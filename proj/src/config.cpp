#include "cardiovae/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace cardiovae {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || ptr != end) throw std::invalid_argument("'" + v + "' is not a valid number");
  return out;
}

double parse_double(const std::string& v) {
  const double d = parse_number<double>(v);
  if (!std::isfinite(d)) throw std::invalid_argument("'" + v + "' is not finite");
  return d;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

StreamMode parse_streams(const std::string& v) {
  if (v == "tri") return StreamMode::tri;
  if (v == "joint-only") return StreamMode::joint_only;
  throw std::invalid_argument("expected tri or joint-only, got '" + v + "'");
}

Modality parse_modality(const std::string& v) {
  if (v == "cxr") return Modality::cxr;
  if (v == "ecg") return Modality::ecg;
  if (v == "joint") return Modality::joint;
  throw std::invalid_argument("expected cxr, ecg or joint, got '" + v + "'");
}

bool is_none(const std::string& v) { return v == "none" || v.empty(); }

std::string num(double v) { return fmt::format("{:.17g}", v); }

using Setter = std::function<void(Settings&, const std::string&)>;
using Getter = std::function<std::string(const Settings&)>;

struct Key {
  std::string name;
  Setter set;
  Getter get;
};

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    const auto sz = [&](std::string name, std::function<std::size_t&(Settings&)> ref) {
      k.push_back({name, [ref](Settings& s, const std::string& v) { ref(s) = parse_number<std::size_t>(v); },
                   [ref](const Settings& s) {
                     Settings c = s;
                     return std::to_string(ref(c));
                   }});
    };
    const auto dbl = [&](std::string name, std::function<double&(Settings&)> ref) {
      k.push_back({name, [ref](Settings& s, const std::string& v) { ref(s) = parse_double(v); },
                   [ref](const Settings& s) {
                     Settings c = s;
                     return num(ref(c));
                   }});
    };

    k.push_back({"arch",
                 [](Settings& s, const std::string& v) {
                   if (v == "desk")
                     s.arch = ArchConfig::desk();
                   else if (v == "paper")
                     s.arch = ArchConfig::paper();
                   else
                     throw std::invalid_argument("expected desk or paper, got '" + v + "'");
                   s.arch_preset = v;
                 },
                 [](const Settings& s) { return s.arch_preset; }});
    sz("image_h", [](Settings& s) -> std::size_t& { return s.arch.image_h; });
    sz("image_w", [](Settings& s) -> std::size_t& { return s.arch.image_w; });
    sz("image_c", [](Settings& s) -> std::size_t& { return s.arch.image_c; });
    sz("signal_len", [](Settings& s) -> std::size_t& { return s.arch.signal_len; });
    k.push_back({"channels",
                 [](Settings& s, const std::string& v) {
                   const auto parts = split_list(v);
                   if (parts.size() != 3) throw std::invalid_argument("expected three comma-separated channel counts");
                   for (std::size_t i = 0; i < 3; ++i) s.arch.channels[i] = parse_number<std::size_t>(parts[i]);
                 },
                 [](const Settings& s) {
                   return fmt::format("{},{},{}", s.arch.channels[0], s.arch.channels[1], s.arch.channels[2]);
                 }});
    sz("latent_dim", [](Settings& s) -> std::size_t& { return s.arch.latent_dim; });
    sz("head_hidden", [](Settings& s) -> std::size_t& { return s.arch.head_hidden; });
    dbl("head_dropout", [](Settings& s) -> double& { return s.arch.head_dropout; });

    dbl("lambda_cxr", [](Settings& s) -> double& { return s.objective.lambda_cxr; });
    dbl("lambda_ecg", [](Settings& s) -> double& { return s.objective.lambda_ecg; });
    dbl("max_beta", [](Settings& s) -> double& { return s.objective.beta.max_beta; });
    sz("anneal_steps", [](Settings& s) -> std::size_t& { return s.objective.beta.anneal_steps; });
    k.push_back({"reduction",
                 [](Settings& s, const std::string& v) {
                   if (v == "mean")
                     s.objective.reduction = BatchReduction::mean;
                   else if (v == "sum")
                     s.objective.reduction = BatchReduction::sum;
                   else
                     throw std::invalid_argument("expected mean or sum, got '" + v + "'");
                 },
                 [](const Settings& s) { return std::string(s.objective.reduction == BatchReduction::mean ? "mean" : "sum"); }});

    k.push_back({"seed",
                 [](Settings& s, const std::string& v) { s.seed = parse_number<std::uint64_t>(v); },
                 [](const Settings& s) { return std::to_string(s.seed); }});
    k.push_back({"streams", [](Settings& s, const std::string& v) { s.pretrain.streams = parse_streams(v); },
                 [](const Settings& s) { return std::string(stream_mode_name(s.pretrain.streams)); }});
    k.push_back({"modality", [](Settings& s, const std::string& v) { s.finetune.modality = parse_modality(v); },
                 [](const Settings& s) { return std::string(modality_name(s.finetune.modality)); }});

    sz("pretrain_epochs", [](Settings& s) -> std::size_t& { return s.pretrain.epochs; });
    sz("pretrain_batch", [](Settings& s) -> std::size_t& { return s.pretrain.batch_size; });
    dbl("pretrain_lr", [](Settings& s) -> double& { return s.pretrain.adam.lr; });
    dbl("val_fraction", [](Settings& s) -> double& { return s.pretrain.val_fraction; });
    sz("finetune_epochs", [](Settings& s) -> std::size_t& { return s.finetune.epochs; });
    sz("finetune_batch", [](Settings& s) -> std::size_t& { return s.finetune.batch_size; });
    dbl("finetune_lr", [](Settings& s) -> double& { return s.finetune.adam.lr; });
    sz("folds", [](Settings& s) -> std::size_t& { return s.folds; });
    sz("ig_steps", [](Settings& s) -> std::size_t& { return s.ig_steps; });
    k.push_back({"lambda_grid",
                 [](Settings& s, const std::string& v) {
                   s.lambda_grid.clear();
                   for (const auto& p : split_list(v)) s.lambda_grid.push_back(parse_double(p));
                   if (s.lambda_grid.empty()) throw std::invalid_argument("empty lambda grid");
                 },
                 [](const Settings& s) {
                   std::string out;
                   for (std::size_t i = 0; i < s.lambda_grid.size(); ++i) out += (i ? "," : "") + num(s.lambda_grid[i]);
                   return out;
                 }});

    k.push_back({"grid_search",
                 [](Settings& s, const std::string& v) {
                   if (v == "true" || v == "1")
                     s.grid_search = true;
                   else if (v == "false" || v == "0")
                     s.grid_search = false;
                   else
                     throw std::invalid_argument("expected true or false, got '" + v + "'");
                 },
                 [](const Settings& s) { return std::string(s.grid_search ? "true" : "false"); }});
    const auto str = [&](std::string name, std::string Settings::*field) {
      k.push_back({name, [field](Settings& s, const std::string& v) { s.*field = v; },
                   [field](const Settings& s) { return s.*field; }});
    };
    str("data", &Settings::data);
    str("checkpoint", &Settings::checkpoint);
    str("sample", &Settings::sample);

    sz("synth_n", [](Settings& s) -> std::size_t& { return s.synth.n; });
    sz("synth_shared_dim", [](Settings& s) -> std::size_t& { return s.synth.shared_dim; });
    dbl("synth_image_noise", [](Settings& s) -> double& { return s.synth.image_noise; });
    dbl("synth_signal_noise", [](Settings& s) -> double& { return s.synth.signal_noise; });
    dbl("synth_view_noise", [](Settings& s) -> double& { return s.synth.view_noise; });
    dbl("synth_threshold", [](Settings& s) -> double& { return s.synth.threshold; });
    k.push_back({"synth_positive_fraction",
                 [](Settings& s, const std::string& v) {
                   s.synth.positive_fraction = is_none(v) ? std::nullopt : std::optional<double>(parse_double(v));
                 },
                 [](const Settings& s) {
                   return s.synth.positive_fraction ? num(*s.synth.positive_fraction) : std::string("none");
                 }});
    k.push_back({"synth_noise_seed",
                 [](Settings& s, const std::string& v) {
                   s.synth.noise_seed =
                       is_none(v) ? std::nullopt : std::optional<std::uint64_t>(parse_number<std::uint64_t>(v));
                 },
                 [](const Settings& s) {
                   return s.synth.noise_seed ? std::to_string(*s.synth.noise_seed) : std::string("none");
                 }});
    return k;
  }();
  return keys;
}

void finish(Settings& s) {
  s.pretrain.seed = s.finetune.seed = s.synth.seed = s.seed;
  s.synth.image_h = s.arch.image_h;
  s.synth.image_w = s.arch.image_w;
  s.synth.image_c = s.arch.image_c;
  s.synth.signal_len = s.arch.signal_len;
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& source) {
  ConfigMap out;
  std::vector<std::string> problems;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = fmt::format("{}:{}", source, line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(where + ": expected 'key = value'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) {
      problems.push_back(where + ": missing key");
      continue;
    }
    if (const auto it = out.find(key); it != out.end()) {
      problems.push_back(where + ": duplicate key '" + key + "' (first set at " + it->second.origin + ")");
      continue;
    }
    out.emplace(key, ConfigEntry{value, where});
  }
  if (!problems.empty()) {
    std::string msg = problems.front();
    for (std::size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
    throw Error(ErrorKind::config, msg);
  }
  return out;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

void merge_config(ConfigMap& base, const ConfigMap& overrides) {
  for (const auto& [k, v] : overrides) base[k] = v;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : key_table()) n.push_back(k.name);
    return n;
  }();
  return names;
}

Settings resolve_settings(const ConfigMap& cfg) {
  Settings s;
  std::vector<std::string> problems;
  std::map<std::string, const Key*> by_name;
  for (const auto& k : key_table()) by_name[k.name] = &k;

  const auto apply = [&](const std::string& name, const ConfigEntry& e) {
    try {
      by_name.at(name)->set(s, e.value);
    } catch (const std::exception& ex) {
      problems.push_back(fmt::format("{}: {}: {}", e.origin, name, ex.what()));
    }
  };
  if (const auto it = cfg.find("arch"); it != cfg.end()) apply("arch", it->second);
  for (const auto& [name, e] : cfg) {
    if (name == "arch") continue;
    if (!by_name.count(name)) {
      problems.push_back(fmt::format("{}: unknown key '{}'", e.origin, name));
      continue;
    }
    apply(name, e);
  }
  if (!problems.empty()) {
    std::string msg = problems.front();
    for (std::size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
    throw Error(ErrorKind::config, msg);
  }
  finish(s);
  try {
    s.arch.validate();
    s.objective.validate();
    s.pretrain.validate();
    s.finetune.validate();
    s.synth.validate();
    if (s.folds < 2) throw Error(ErrorKind::config, "folds must be >= 2");
    if (s.ig_steps < 8) throw Error(ErrorKind::config, "ig_steps must be >= 8");
  } catch (const Error& e) {
    throw Error(ErrorKind::config, e.what());
  }
  return s;
}

std::string render_settings(const Settings& s) {
  std::string out;
  for (const auto& k : key_table()) out += k.name + " = " + k.get(s) + "\n";
  return out;
}

}  // namespace cardiovae
