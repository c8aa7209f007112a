#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "invcoss/bundle.hpp"
#include "invcoss/encoder.hpp"
#include "invcoss/ops.hpp"

namespace invcoss {

// Running mean/variance matrices for one block's [L,d] features,
// population convention, pooled batch-by-batch.
template <typename T>
struct LayerStats {
  size_t rows = 0, cols = 0;
  uint64_t count = 0;
  std::vector<T> mean, var;

  LayerStats() = default;
  LayerStats(size_t r, size_t c)
      : rows(r), cols(c), mean(r * c, T(0)), var(r * c, T(0)) {}
};

// Pooled-moments update: first batch adopts the batch statistics; later
// batches combine pooled and batch moments with the cross term
// (N_prev * n / N^2) (mu_prev - mu_b)^2.
template <typename T>
void welford_merge(LayerStats<T>& state, const T* feats, size_t n, size_t rows, size_t cols) {
  if (n == 0) throw ConfigError("welford_merge: empty batch");
  if (state.rows != rows || state.cols != cols) {
    throw ShapeError("welford_merge: state " + std::to_string(state.rows) + "x" +
                     std::to_string(state.cols) + " vs batch " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  size_t m = rows * cols;
  std::vector<T> bmean(m, T(0)), bvar(m, T(0));
  for (size_t i = 0; i < n; ++i) {
    const T* f = feats + i * m;
    for (size_t j = 0; j < m; ++j) bmean[j] += f[j];
  }
  T invn = T(1) / static_cast<T>(n);
  for (size_t j = 0; j < m; ++j) bmean[j] *= invn;
  for (size_t i = 0; i < n; ++i) {
    const T* f = feats + i * m;
    for (size_t j = 0; j < m; ++j) {
      T d = f[j] - bmean[j];
      bvar[j] += d * d;
    }
  }
  for (size_t j = 0; j < m; ++j) bvar[j] *= invn;

  if (state.count == 0) {
    state.mean = std::move(bmean);
    state.var = std::move(bvar);
    state.count = n;
    return;
  }
  double n_prev = static_cast<double>(state.count);
  double nb = static_cast<double>(n);
  double n_tot = n_prev + nb;
  T w_prev = static_cast<T>(n_prev / n_tot);
  T w_b = static_cast<T>(nb / n_tot);
  T w_cross = static_cast<T>(n_prev * nb / (n_tot * n_tot));
  for (size_t j = 0; j < m; ++j) {
    T dmu = state.mean[j] - bmean[j];
    state.mean[j] = w_prev * state.mean[j] + w_b * bmean[j];
    state.var[j] = w_prev * state.var[j] + w_b * bvar[j] + w_cross * dmu * dmu;
  }
  state.count += n;
}

template <typename T>
void welford_merge(LayerStats<T>& state, const Tensor<T>& batch_feats) {
  if (batch_feats.ndim() != 3) {
    throw ShapeError("welford_merge: expected [n,L,d], got " + shape_str(batch_feats.shape()));
  }
  welford_merge(state, batch_feats.data(), batch_feats.shape()[0], batch_feats.shape()[1],
                batch_feats.shape()[2]);
}

// Per-task retained statistics: one LayerStats per encoder block plus the
// config fingerprint of the checkpoint they were captured from.
template <typename T>
struct StatsArchive {
  uint64_t fingerprint = 0;
  std::string task;
  std::vector<LayerStats<T>> blocks;

  uint64_t count() const { return blocks.empty() ? 0 : blocks[0].count; }
};

// One evaluation-mode pass over the dataset in index order.
template <typename T>
StatsArchive<T> capture_stats(const MimModel<T>& model, const std::vector<float>& images,
                              size_t n, size_t batch_size, const std::string& task_id) {
  if (n == 0) throw ConfigError("capture_stats: empty dataset");
  if (batch_size == 0) throw ConfigError("capture_stats: batch_size must be >= 1");
  const MimConfig& cfg = model.config();
  StatsArchive<T> archive;
  archive.fingerprint = cfg.fingerprint();
  archive.task = task_id;
  archive.blocks.assign(cfg.depth, LayerStats<T>(cfg.tokens(), cfg.dim));
  NoGradGuard guard;
  for (size_t lo = 0; lo < n; lo += batch_size) {
    size_t hi = std::min(n, lo + batch_size);
    std::vector<size_t> idx(hi - lo);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = lo + i;
    Tensor<T> x = image_batch<T>(images, cfg.channels, cfg.image, cfg.image, idx);
    auto fwd = model.forward(x);
    for (size_t b = 0; b < cfg.depth; ++b) {
      welford_merge(archive.blocks[b], fwd.blocks[b]);
    }
  }
  return archive;
}

// Statistics-matching loss: per block, the Frobenius distance between the
// synthetic batch's per-position mean/variance and the archived ones,
// summed over blocks. Differentiable w.r.t. the features.
template <typename T>
Tensor<T> norm_loss(const std::vector<Tensor<T>>& block_feats, const StatsArchive<T>& archive) {
  if (block_feats.size() != archive.blocks.size()) {
    throw ShapeError("norm_loss: " + std::to_string(block_feats.size()) + " feature blocks vs " +
                     std::to_string(archive.blocks.size()) + " archived");
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (size_t b = 0; b < block_feats.size(); ++b) {
    const Tensor<T>& f = block_feats[b];
    const LayerStats<T>& st = archive.blocks[b];
    if (f.ndim() != 3 || f.shape()[1] != st.rows || f.shape()[2] != st.cols) {
      throw ShapeError("norm_loss: block " + std::to_string(b) + " features " +
                       shape_str(f.shape()) + " vs archive " + std::to_string(st.rows) + "x" +
                       std::to_string(st.cols));
    }
    Tensor<T> mu = mean(f, {0});                                   // [L,d]
    Tensor<T> ex2 = mean(square(f), {0});
    Tensor<T> var = sub(ex2, square(mu));                          // population
    Tensor<T> tmean = Tensor<T>::from({st.rows, st.cols}, st.mean);
    Tensor<T> tvar = Tensor<T>::from({st.rows, st.cols}, st.var);
    Tensor<T> dm = sqrt(sum(square(sub(mu, tmean))));
    Tensor<T> dv = sqrt(sum(square(sub(var, tvar))));
    total = add(total, reshape(add(dm, dv), {}));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Serialization into the checkpoint container
// ---------------------------------------------------------------------------

inline std::string fingerprint_hex(uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return std::string(buf);
}

template <typename T>
void stats_to_bundle(const StatsArchive<T>& a, Bundle& b) {
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    const auto& st = a.blocks[i];
    std::vector<float> mean(st.mean.size()), var(st.var.size());
    for (size_t j = 0; j < mean.size(); ++j) mean[j] = static_cast<float>(st.mean[j]);
    for (size_t j = 0; j < var.size(); ++j) var[j] = static_cast<float>(st.var[j]);
    b.add("block" + std::to_string(i) + ".mean", {st.rows, st.cols}, std::move(mean));
    b.add("block" + std::to_string(i) + ".var", {st.rows, st.cols}, std::move(var));
  }
  b.add_scalar("count", static_cast<float>(a.count()));
  b.add_string("fingerprint", fingerprint_hex(a.fingerprint));
  b.add_string("task.id", a.task);
}

template <typename T>
StatsArchive<T> stats_from_bundle(const Bundle& b) {
  StatsArchive<T> a;
  a.fingerprint = std::stoull(b.get_string("fingerprint"), nullptr, 16);
  a.task = b.get_string("task.id");
  uint64_t count = static_cast<uint64_t>(b.get("count").data[0]);
  for (size_t i = 0;; ++i) {
    std::string mname = "block" + std::to_string(i) + ".mean";
    if (!b.has(mname)) break;
    const auto& mrec = b.get(mname);
    const auto& vrec = b.get("block" + std::to_string(i) + ".var");
    LayerStats<T> st(static_cast<size_t>(mrec.dims[0]), static_cast<size_t>(mrec.dims[1]));
    st.count = count;
    for (size_t j = 0; j < mrec.data.size(); ++j) st.mean[j] = static_cast<T>(mrec.data[j]);
    for (size_t j = 0; j < vrec.data.size(); ++j) st.var[j] = static_cast<T>(vrec.data[j]);
    a.blocks.push_back(std::move(st));
  }
  if (a.blocks.empty()) throw FormatError("stats bundle: no block records");
  return a;
}

}  // namespace invcoss
