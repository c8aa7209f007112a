#include "invcoss/evalkit.hpp"

#include <cmath>
#include <cstdio>

#include "invcoss/bundle.hpp"

namespace invcoss {

double heldout_mim_loss(const MimModel<float>& model, const ToyDataset& heldout,
                        double mask_ratio, uint64_t mask_seed, uint64_t task_index,
                        size_t batch) {
  if (heldout.n == 0) throw MissingArtifactError("heldout_mim_loss: empty held-out split");
  const MimConfig& cfg = model.config();
  NoGradGuard guard;
  Rng mask_rng = Rng(mask_seed).child("cell", task_index);
  double sum_sq = 0.0;
  double masked_px = 0.0;
  for (size_t lo = 0; lo < heldout.n; lo += batch) {
    size_t hi = std::min(heldout.n, lo + batch);
    std::vector<size_t> idx(hi - lo);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = lo + i;
    Tensor<float> x = image_batch<float>(heldout.images, cfg.channels, cfg.image, cfg.image, idx);
    PatchMask m = sample_mask(cfg.grid(), cfg.grid(), mask_ratio, mask_rng);
    auto loss = mim_forward(model, x, m);
    sum_sq += static_cast<double>(loss.loss_sum.item());
    masked_px += static_cast<double>(m.count() * cfg.patch * cfg.patch * cfg.channels * idx.size());
  }
  return masked_px > 0 ? sum_sq / masked_px : 0.0;
}

RetentionMatrix retention_eval(const std::vector<const MimModel<float>*>& stage_models,
                               const std::vector<const ToyDataset*>& heldout,
                               const std::vector<std::string>& task_ids, double mask_ratio,
                               uint64_t mask_seed, size_t batch) {
  RetentionMatrix m;
  m.stages = stage_models.size();
  m.tasks = heldout.size();
  m.task_ids = task_ids;
  m.loss.assign(m.stages * m.tasks, 0.0);
  for (size_t s = 0; s < m.stages; ++s) {
    for (size_t t = 0; t < m.tasks; ++t) {
      m.at(s, t) =
          heldout_mim_loss(*stage_models[s], *heldout[t], mask_ratio, mask_seed, t, batch);
    }
  }
  return m;
}

double diversity(const float* rows, size_t n, size_t dim) {
  if (n < 2) throw ConfigError("diversity: need at least 2 rows");
  std::vector<double> norms(n);
  for (size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      double v = rows[i * dim + j];
      acc += v * v;
    }
    if (acc == 0.0) throw NumericError("diversity: zero-norm row " + std::to_string(i));
    norms[i] = std::sqrt(acc);
  }
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < dim; ++k) {
        dot += static_cast<double>(rows[i * dim + k]) * rows[j * dim + k];
      }
      double c = dot / (norms[i] * norms[j]);
      total += c * c;
    }
  }
  double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  return total / pairs;
}

StorageReport storage_report(const std::vector<StorageItem>& items) {
  StorageReport rep;
  for (const auto& it : items) {
    StorageReport::Row row;
    row.task = it.task;
    row.stats_bytes = file_size_bytes(it.stats_path);
    row.raw_buffer_bytes = file_size_bytes(it.raw_buffer_path);
    row.ratio = row.stats_bytes > 0
                    ? static_cast<double>(row.raw_buffer_bytes) / static_cast<double>(row.stats_bytes)
                    : 0.0;
    rep.rows.push_back(row);
  }
  return rep;
}

double linear_probe_accuracy(const std::vector<float>& train_feats,
                             const std::vector<int>& train_labels,
                             const std::vector<float>& test_feats,
                             const std::vector<int>& test_labels, size_t dim, size_t iters,
                             double lr) {
  size_t n = train_labels.size();
  std::vector<double> w(dim, 0.0);
  double b = 0.0;
  for (size_t it = 0; it < iters; ++it) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double z = b;
      for (size_t j = 0; j < dim; ++j) z += w[j] * train_feats[i * dim + j];
      double p = 1.0 / (1.0 + std::exp(-z));
      double err = p - static_cast<double>(train_labels[i]);
      for (size_t j = 0; j < dim; ++j) gw[j] += err * train_feats[i * dim + j];
      gb += err;
    }
    for (size_t j = 0; j < dim; ++j) w[j] -= lr * gw[j] / static_cast<double>(n);
    b -= lr * gb / static_cast<double>(n);
  }
  size_t correct = 0;
  for (size_t i = 0; i < test_labels.size(); ++i) {
    double z = b;
    for (size_t j = 0; j < dim; ++j) z += w[j] * test_feats[i * dim + j];
    if ((z > 0.0) == (test_labels[i] == 1)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_labels.size());
}

std::string retention_csv(const RetentionMatrix& m, const std::string& regime) {
  std::string out = "regime,stage,task,task_id,mim_loss\n";
  char buf[160];
  for (size_t s = 0; s < m.stages; ++s) {
    for (size_t t = 0; t < m.tasks; ++t) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%s,%.9g\n", regime.c_str(), s + 1, t + 1,
                    m.task_ids[t].c_str(), m.at(s, t));
      out += buf;
    }
  }
  return out;
}

std::string storage_csv(const StorageReport& r) {
  std::string out = "task,stats_bytes,raw_buffer_bytes,ratio\n";
  char buf[160];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%llu,%.9g\n", row.task.c_str(),
                  static_cast<unsigned long long>(row.stats_bytes),
                  static_cast<unsigned long long>(row.raw_buffer_bytes), row.ratio);
    out += buf;
  }
  return out;
}

}  // namespace invcoss
