#include "invcoss/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace invcoss {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ConfigMap ConfigMap::parse_text(const std::string& text, const std::string& origin) {
  ConfigMap m;
  m.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
      }
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    std::string full = section.empty() ? key : section + "." + key;
    if (m.values_.count(full)) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + full + "'");
    }
    m.values_[full] = value;
  }
  return m;
}

ConfigMap ConfigMap::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str(), path);
}

std::string ConfigMap::get_str(const std::string& key, const std::string& fallback) {
  auto it = values_.find(key);
  consumed_[key] = true;
  return it == values_.end() ? fallback : it->second;
}

uint64_t ConfigMap::get_u64(const std::string& key, uint64_t fallback) {
  auto it = values_.find(key);
  consumed_[key] = true;
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an unsigned integer: '" + it->second +
                      "'");
  }
}

double ConfigMap::get_f64(const std::string& key, double fallback) {
  auto it = values_.find(key);
  consumed_[key] = true;
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: '" + it->second + "'");
  }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) {
  auto it = values_.find(key);
  consumed_[key] = true;
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config: key '" + key + "' is not a boolean: '" + it->second + "'");
}

std::vector<std::string> ConfigMap::get_list(const std::string& key,
                                             const std::vector<std::string>& fallback) {
  auto it = values_.find(key);
  consumed_[key] = true;
  if (it == values_.end()) return fallback;
  std::vector<std::string> out;
  std::string cur;
  for (char ch : it->second + ",") {
    if (ch == ',') {
      std::string v = trim(cur);
      if (!v.empty()) out.push_back(v);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' is an empty list");
  return out;
}

void ConfigMap::reject_unknown() const {
  std::string unknown;
  for (const auto& [k, v] : values_) {
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) {
    throw ConfigError(origin_ + ": unknown config keys: " + unknown);
  }
}

namespace {

NormKind norm_from_name(const std::string& s) {
  if (s == "batch") return NormKind::batch;
  if (s == "instance") return NormKind::instance;
  if (s == "none") return NormKind::none;
  throw ConfigError("config: unknown norm kind '" + s + "'");
}

std::string norm_name(NormKind k) {
  switch (k) {
    case NormKind::batch:
      return "batch";
    case NormKind::instance:
      return "instance";
    case NormKind::none:
      return "none";
  }
  return "?";
}

ActKind act_from_name(const std::string& s) {
  if (s == "leaky_relu") return ActKind::leaky_relu;
  if (s == "relu") return ActKind::relu;
  if (s == "gelu") return ActKind::gelu;
  throw ConfigError("config: unknown activation '" + s + "'");
}

std::string act_name(ActKind k) {
  switch (k) {
    case ActKind::leaky_relu:
      return "leaky_relu";
    case ActKind::relu:
      return "relu";
    case ActKind::gelu:
      return "gelu";
  }
  return "?";
}

UpsampleKind upsample_from_name(const std::string& s) {
  if (s == "bilinear") return UpsampleKind::bilinear;
  if (s == "nearest") return UpsampleKind::nearest;
  throw ConfigError("config: unknown upsample kind '" + s + "'");
}

std::string upsample_name(UpsampleKind k) {
  return k == UpsampleKind::bilinear ? "bilinear" : "nearest";
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

FullConfig config_from_map(ConfigMap& m) {
  FullConfig c;
  c.seed = m.get_u64("run.seed", c.seed);

  c.encoder.image = m.get_u64("encoder.image", c.encoder.image);
  c.encoder.patch = m.get_u64("encoder.patch", c.encoder.patch);
  c.encoder.channels = m.get_u64("encoder.channels", c.encoder.channels);
  c.encoder.dim = m.get_u64("encoder.dim", c.encoder.dim);
  c.encoder.depth = m.get_u64("encoder.depth", c.encoder.depth);
  c.encoder.heads = m.get_u64("encoder.heads", c.encoder.heads);
  c.encoder.mlp_ratio = m.get_f64("encoder.mlp_ratio", c.encoder.mlp_ratio);

  c.pretrain.epochs = m.get_u64("pretrain.epochs", c.pretrain.epochs);
  c.pretrain.batch = m.get_u64("pretrain.batch", c.pretrain.batch);
  c.pretrain.lr = m.get_f64("pretrain.lr", c.pretrain.lr);
  c.pretrain.warmup_frac = m.get_f64("pretrain.warmup", c.pretrain.warmup_frac);
  c.pretrain.mask_ratio = m.get_f64("pretrain.mask_ratio", c.pretrain.mask_ratio);

  c.data_kind = m.get_str("data.kind", c.data_kind);
  c.data_n = m.get_u64("data.n", c.data_n);
  c.data_split = m.get_f64("data.split", c.data_split);
  c.modality.resolution = m.get_u64("data.resolution", c.modality.resolution);
  c.modality.blob_min = m.get_u64("data.blob_min", c.modality.blob_min);
  c.modality.blob_max = m.get_u64("data.blob_max", c.modality.blob_max);
  c.modality.blob_sigma_min = m.get_f64("data.sigma_min", c.modality.blob_sigma_min);
  c.modality.blob_sigma_max = m.get_f64("data.sigma_max", c.modality.blob_sigma_max);
  c.modality.freq_min = m.get_u64("data.freq_min", c.modality.freq_min);
  c.modality.freq_max = m.get_u64("data.freq_max", c.modality.freq_max);
  c.modality.cell_min = m.get_u64("data.cell_min", c.modality.cell_min);
  c.modality.cell_max = m.get_u64("data.cell_max", c.modality.cell_max);
  c.modality.noise_scale = m.get_f64("data.noise", c.modality.noise_scale);

  c.generator.latent_dim = m.get_u64("generator.latent", c.generator.latent_dim);
  c.generator.bottleneck_hw = m.get_u64("generator.bottleneck", c.generator.bottleneck_hw);
  {
    std::vector<std::string> defaults;
    for (size_t ch : c.generator.channels) defaults.push_back(std::to_string(ch));
    std::vector<std::string> chs = m.get_list("generator.channels", defaults);
    c.generator.channels.clear();
    for (const auto& s : chs) c.generator.channels.push_back(std::stoull(s));
  }
  c.generator.norm = norm_from_name(m.get_str("generator.norm", norm_name(c.generator.norm)));
  c.generator.act = act_from_name(m.get_str("generator.act", act_name(c.generator.act)));
  c.generator.upsample =
      upsample_from_name(m.get_str("generator.upsample", upsample_name(c.generator.upsample)));
  c.generator.leaky_slope = m.get_f64("generator.leaky_slope", c.generator.leaky_slope);
  c.generator.proj_layer_norm = m.get_bool("generator.proj_layer_norm", c.generator.proj_layer_norm);
  c.generator.proj_gelu = m.get_bool("generator.proj_gelu", c.generator.proj_gelu);
  c.generator.memory_cache = m.get_bool("generator.memory_cache", c.generator.memory_cache);
  c.generator.out_channels = c.encoder.channels;
  c.generator.out_hw = c.encoder.image;

  c.inversion.alpha_norm = m.get_f64("inversion.alpha_norm", c.inversion.alpha_norm);
  c.inversion.alpha_img = m.get_f64("inversion.alpha_img", c.inversion.alpha_img);
  c.inversion.alpha_rep = m.get_f64("inversion.alpha_rep", c.inversion.alpha_rep);
  c.inversion.steps = m.get_u64("inversion.steps", c.inversion.steps);
  c.inversion.batch = m.get_u64("inversion.batch", c.inversion.batch);
  c.inversion.count = m.get_u64("inversion.count", c.inversion.count);
  c.inversion.g_lr = m.get_f64("inversion.g_lr", c.inversion.g_lr);
  c.inversion.z_lr = m.get_f64("inversion.z_lr", c.inversion.z_lr);
  c.inversion.reinit_every = m.get_u64("inversion.reinit_every", c.inversion.reinit_every);
  c.inversion.mask_ratio = m.get_f64("inversion.mask_ratio", c.inversion.mask_ratio);

  std::string regime = m.get_str("continual.regime", regime_name(c.regime));
  c.regime = regime_from_name(regime);
  c.stage.epochs = m.get_u64("continual.epochs", c.stage.epochs);
  c.stage.batch = m.get_u64("continual.batch", c.stage.batch);
  c.stage.lr = m.get_f64("continual.lr", c.stage.lr);
  c.stage.warmup_frac = m.get_f64("continual.warmup", c.stage.warmup_frac);
  c.stage.mask_ratio = m.get_f64("continual.mask_ratio", c.stage.mask_ratio);
  c.stage.buffer_ratio = m.get_f64("continual.ratio", c.stage.buffer_ratio);
  c.stage.kd_weight = m.get_f64("continual.kd_weight", c.stage.kd_weight);
  c.stage.replay_weight = m.get_f64("continual.replay_weight", c.stage.replay_weight);
  c.task_kinds = m.get_list("continual.tasks", c.task_kinds);
  c.task_n = m.get_u64("continual.n", c.task_n);
  c.split_ratio = m.get_f64("continual.split", c.split_ratio);
  c.eval_mask_ratio = m.get_f64("continual.eval_mask_ratio", c.eval_mask_ratio);
  c.stats_batch = m.get_u64("continual.stats_batch", c.stats_batch);

  m.reject_unknown();
  return c;
}

FullConfig load_config(const std::string& path) {
  ConfigMap m = ConfigMap::parse_file(path);
  return config_from_map(m);
}

std::string echo_config(const FullConfig& c) {
  std::ostringstream o;
  o << "[run]\n";
  o << "seed = " << c.seed << "\n\n";
  o << "[encoder]\n";
  o << "image = " << c.encoder.image << "\n";
  o << "patch = " << c.encoder.patch << "\n";
  o << "channels = " << c.encoder.channels << "\n";
  o << "dim = " << c.encoder.dim << "\n";
  o << "depth = " << c.encoder.depth << "\n";
  o << "heads = " << c.encoder.heads << "\n";
  o << "mlp_ratio = " << fmt(c.encoder.mlp_ratio) << "\n\n";
  o << "[pretrain]\n";
  o << "epochs = " << c.pretrain.epochs << "\n";
  o << "batch = " << c.pretrain.batch << "\n";
  o << "lr = " << fmt(c.pretrain.lr) << "\n";
  o << "warmup = " << fmt(c.pretrain.warmup_frac) << "\n";
  o << "mask_ratio = " << fmt(c.pretrain.mask_ratio) << "\n\n";
  o << "[data]\n";
  o << "kind = " << c.data_kind << "\n";
  o << "n = " << c.data_n << "\n";
  o << "split = " << fmt(c.data_split) << "\n";
  o << "resolution = " << c.modality.resolution << "\n";
  o << "blob_min = " << c.modality.blob_min << "\n";
  o << "blob_max = " << c.modality.blob_max << "\n";
  o << "sigma_min = " << fmt(c.modality.blob_sigma_min) << "\n";
  o << "sigma_max = " << fmt(c.modality.blob_sigma_max) << "\n";
  o << "freq_min = " << c.modality.freq_min << "\n";
  o << "freq_max = " << c.modality.freq_max << "\n";
  o << "cell_min = " << c.modality.cell_min << "\n";
  o << "cell_max = " << c.modality.cell_max << "\n";
  o << "noise = " << fmt(c.modality.noise_scale) << "\n\n";
  o << "[generator]\n";
  o << "latent = " << c.generator.latent_dim << "\n";
  o << "bottleneck = " << c.generator.bottleneck_hw << "\n";
  o << "channels = ";
  for (size_t i = 0; i < c.generator.channels.size(); ++i) {
    o << (i ? "," : "") << c.generator.channels[i];
  }
  o << "\n";
  o << "norm = " << norm_name(c.generator.norm) << "\n";
  o << "act = " << act_name(c.generator.act) << "\n";
  o << "upsample = " << upsample_name(c.generator.upsample) << "\n";
  o << "leaky_slope = " << fmt(c.generator.leaky_slope) << "\n";
  o << "proj_layer_norm = " << (c.generator.proj_layer_norm ? "true" : "false") << "\n";
  o << "proj_gelu = " << (c.generator.proj_gelu ? "true" : "false") << "\n";
  o << "memory_cache = " << (c.generator.memory_cache ? "true" : "false") << "\n\n";
  o << "[inversion]\n";
  o << "alpha_norm = " << fmt(c.inversion.alpha_norm) << "\n";
  o << "alpha_img = " << fmt(c.inversion.alpha_img) << "\n";
  o << "alpha_rep = " << fmt(c.inversion.alpha_rep) << "\n";
  o << "steps = " << c.inversion.steps << "\n";
  o << "batch = " << c.inversion.batch << "\n";
  o << "count = " << c.inversion.count << "\n";
  o << "g_lr = " << fmt(c.inversion.g_lr) << "\n";
  o << "z_lr = " << fmt(c.inversion.z_lr) << "\n";
  o << "reinit_every = " << c.inversion.reinit_every << "\n";
  o << "mask_ratio = " << fmt(c.inversion.mask_ratio) << "\n\n";
  o << "[continual]\n";
  o << "regime = " << regime_name(c.regime) << "\n";
  o << "epochs = " << c.stage.epochs << "\n";
  o << "batch = " << c.stage.batch << "\n";
  o << "lr = " << fmt(c.stage.lr) << "\n";
  o << "warmup = " << fmt(c.stage.warmup_frac) << "\n";
  o << "mask_ratio = " << fmt(c.stage.mask_ratio) << "\n";
  o << "ratio = " << fmt(c.stage.buffer_ratio) << "\n";
  o << "kd_weight = " << fmt(c.stage.kd_weight) << "\n";
  o << "replay_weight = " << fmt(c.stage.replay_weight) << "\n";
  o << "tasks = ";
  for (size_t i = 0; i < c.task_kinds.size(); ++i) o << (i ? "," : "") << c.task_kinds[i];
  o << "\n";
  o << "n = " << c.task_n << "\n";
  o << "split = " << fmt(c.split_ratio) << "\n";
  o << "eval_mask_ratio = " << fmt(c.eval_mask_ratio) << "\n";
  o << "stats_batch = " << c.stats_batch << "\n";
  return o.str();
}

ModalitySpec task_modality(const FullConfig& c, const std::string& kind) {
  ModalitySpec spec = c.modality;
  spec.kind = modality_from_name(kind);
  return spec;
}

SequenceConfig to_sequence_config(const FullConfig& c) {
  SequenceConfig s;
  s.encoder = c.encoder;
  s.stage = c.stage;
  s.inversion = c.inversion;
  s.generator = c.generator;
  s.regime = c.regime;
  s.split_ratio = c.split_ratio;
  s.eval_mask_ratio = c.eval_mask_ratio;
  s.seed = c.seed;
  s.stats_batch = c.stats_batch;
  for (size_t i = 0; i < c.task_kinds.size(); ++i) {
    TaskSpec t;
    t.id = "t" + std::to_string(i + 1) + "." + c.task_kinds[i];
    t.modality = task_modality(c, c.task_kinds[i]);
    t.n = c.task_n;
    s.tasks.push_back(std::move(t));
  }
  return s;
}

}  // namespace invcoss
