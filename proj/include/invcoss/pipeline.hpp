#pragma once

#include <optional>
#include <string>
#include <vector>

#include "invcoss/continual.hpp"
#include "invcoss/evalkit.hpp"

namespace invcoss {

// Everything a multi-task run needs, resolved and validated.
struct SequenceConfig {
  MimConfig encoder;
  StageConfig stage;
  InversionConfig inversion;
  GeneratorConfig generator;
  std::vector<TaskSpec> tasks;
  Regime regime = Regime::invcoss;
  double split_ratio = 0.8;
  double eval_mask_ratio = 0.75;
  uint64_t seed = 1;
  size_t stats_batch = 32;

  void validate() const;
};

// Per-task data is regenerated from (spec, master seed, task index) so that
// later stages never need the raw arrays of earlier tasks.
ToyDataset task_dataset(const SequenceConfig& cfg, size_t task_idx);
std::pair<ToyDataset, ToyDataset> task_split(const SequenceConfig& cfg, size_t task_idx);

struct StageRecord {
  std::string task_id;
  MimModel<float> model;
  StatsArchive<float> archive;
  SyntheticBuffer buffer;  // buffer used during this stage (empty when none)
  std::vector<double> epoch_losses;
};

struct SequenceResult {
  std::vector<StageRecord> stages;  // joint regime: single entry
};

// One stage, given only the previous checkpoint and previous artifacts.
// Stage randomness derives from (seed, stage index) alone, so a stage can be
// replayed from serialized artifacts bit-exactly.
StageRecord run_stage(const SequenceConfig& cfg, size_t stage_idx,
                      const MimModel<float>* prev_model,
                      const std::vector<PrevTaskArtifacts<float>>& prev_artifacts,
                      const ToyDataset& current_train);

SequenceResult run_sequence(const SequenceConfig& cfg);

RetentionMatrix evaluate_sequence(const SequenceConfig& cfg, const SequenceResult& result);

// Retention matrices for invcoss runs at several buffer ratios (shared seed).
std::vector<std::pair<double, RetentionMatrix>> sample_size_sweep(
    const SequenceConfig& base, const std::vector<double>& ratios);

// ---------------------------------------------------------------------------
// Checkpoint container bindings
// ---------------------------------------------------------------------------

Bundle checkpoint_to_bundle(const MimModel<float>& model);
MimModel<float> model_from_bundle(const Bundle& b);

void buffer_to_bundle(const SyntheticBuffer& buf, Bundle& b);
SyntheticBuffer buffer_from_bundle(const Bundle& b);

std::string buffer_manifest_csv(const SyntheticBuffer& buf);

}  // namespace invcoss
