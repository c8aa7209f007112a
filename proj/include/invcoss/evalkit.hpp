#pragma once

#include <string>
#include <vector>

#include "invcoss/data.hpp"
#include "invcoss/encoder.hpp"

namespace invcoss {

// Stage x task held-out MIM losses. Cells with stage < task are still
// evaluated (the model simply has not seen that task yet).
struct RetentionMatrix {
  size_t stages = 0, tasks = 0;
  std::vector<std::string> task_ids;
  std::vector<double> loss;  // stage-major

  double at(size_t stage, size_t task) const { return loss[stage * tasks + task]; }
  double& at(size_t stage, size_t task) { return loss[stage * tasks + task]; }
};

// Exact dataset-level masked loss: total masked squared error over total
// masked pixels, batched for throughput; the mask stream depends only on
// (mask_seed, task index), so cells are comparable across stages.
double heldout_mim_loss(const MimModel<float>& model, const ToyDataset& heldout,
                        double mask_ratio, uint64_t mask_seed, uint64_t task_index,
                        size_t batch = 32);

RetentionMatrix retention_eval(const std::vector<const MimModel<float>*>& stage_models,
                               const std::vector<const ToyDataset*>& heldout,
                               const std::vector<std::string>& task_ids, double mask_ratio,
                               uint64_t mask_seed, size_t batch = 32);

// Mean squared cosine similarity over unordered row pairs.
double diversity(const float* rows, size_t n, size_t dim);

struct StorageReport {
  struct Row {
    std::string task;
    uint64_t stats_bytes = 0;
    uint64_t raw_buffer_bytes = 0;
    double ratio = 0.0;  // raw / stats
  };
  std::vector<Row> rows;
};

struct StorageItem {
  std::string task;
  std::string stats_path;
  std::string raw_buffer_path;
};

// Byte counts come from the files themselves, never estimates.
StorageReport storage_report(const std::vector<StorageItem>& items);

// Logistic-regression probe on fixed feature rows; returns test accuracy.
// Labels are binary {0,1}.
double linear_probe_accuracy(const std::vector<float>& train_feats,
                             const std::vector<int>& train_labels,
                             const std::vector<float>& test_feats,
                             const std::vector<int>& test_labels, size_t dim,
                             size_t iters = 300, double lr = 0.5);

std::string retention_csv(const RetentionMatrix& m, const std::string& regime);
std::string storage_csv(const StorageReport& r);

}  // namespace invcoss
