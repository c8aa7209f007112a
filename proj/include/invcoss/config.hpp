#pragma once

#include <map>
#include <string>
#include <vector>

#include "invcoss/pipeline.hpp"

namespace invcoss {

// Line-oriented key/value text with [section] headers and '#' comments.
// Every key must be consumed by the schema; leftovers are config errors.
class ConfigMap {
 public:
  static ConfigMap parse_text(const std::string& text, const std::string& origin = "<string>");
  static ConfigMap parse_file(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& fallback);
  uint64_t get_u64(const std::string& key, uint64_t fallback);
  double get_f64(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback);

  void reject_unknown() const;  // throws ConfigError naming leftover keys

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> consumed_;
  std::string origin_;
};

// All sections resolved against defaults; commands use the parts they need.
struct FullConfig {
  uint64_t seed = 1;

  MimConfig encoder;
  PretrainSchedule pretrain;

  // single-task data section (cmd_pretrain)
  std::string data_kind = "blobs";
  size_t data_n = 400;
  double data_split = 0.8;
  ModalitySpec modality;  // ranges shared by all toy modalities

  GeneratorConfig generator;
  InversionConfig inversion;

  Regime regime = Regime::invcoss;
  StageConfig stage;
  std::vector<std::string> task_kinds = {"blobs", "stripes", "checker"};
  size_t task_n = 400;
  double split_ratio = 0.8;
  double eval_mask_ratio = 0.75;
  size_t stats_batch = 32;
};

FullConfig config_from_map(ConfigMap& m);
FullConfig load_config(const std::string& path);

// Canonical echo of the effective configuration; parsing it back yields the
// same configuration.
std::string echo_config(const FullConfig& c);

ModalitySpec task_modality(const FullConfig& c, const std::string& kind);
SequenceConfig to_sequence_config(const FullConfig& c);

}  // namespace invcoss
