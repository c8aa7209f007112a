#pragma once

#include <memory>
#include <string>
#include <vector>

#include "invcoss/adam.hpp"
#include "invcoss/encoder.hpp"
#include "invcoss/invunet.hpp"
#include "invcoss/stats.hpp"

namespace invcoss {

// Total-variation image prior: per image, sum over channels of absolute
// vertical and horizontal neighbor differences; mean over the batch.
template <typename T>
Tensor<T> tv_loss(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("tv_loss: expected [B,c,H,W], got " + shape_str(x.shape()));
  size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  double acc = 0.0;
  for (size_t bc = 0; bc < b * c; ++bc) {
    const T* p = x.data() + bc * h * w;
    for (size_t y = 0; y + 1 < h; ++y) {
      for (size_t z = 0; z < w; ++z) acc += std::abs(static_cast<double>(p[(y + 1) * w + z] - p[y * w + z]));
    }
    for (size_t y = 0; y < h; ++y) {
      for (size_t z = 0; z + 1 < w; ++z) acc += std::abs(static_cast<double>(p[y * w + z + 1] - p[y * w + z]));
    }
  }
  T scale = T(1) / static_cast<T>(b);
  auto px = x.node();
  return detail::op_result<T>(
      "tv_loss", {}, {static_cast<T>(acc / static_cast<double>(b))}, {px},
      [px, b, c, h, w, scale](Node<T>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        T g = self.grad[0] * scale;
        auto sgn = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
        for (size_t bc = 0; bc < b * c; ++bc) {
          const T* p = px->value.data() + bc * h * w;
          T* d = px->grad.data() + bc * h * w;
          for (size_t y = 0; y + 1 < h; ++y) {
            for (size_t z = 0; z < w; ++z) {
              T s = sgn(p[(y + 1) * w + z] - p[y * w + z]) * g;
              d[(y + 1) * w + z] += s;
              d[y * w + z] -= s;
            }
          }
          for (size_t y = 0; y < h; ++y) {
            for (size_t z = 0; z + 1 < w; ++z) {
              T s = sgn(p[y * w + z + 1] - p[y * w + z]) * g;
              d[y * w + z + 1] += s;
              d[y * w + z] -= s;
            }
          }
        }
      });
}

// Detached frozen-encoder features of already-emitted synthetic samples.
// Rows are stored unit-normalized; capacity matches the synthesis target.
class FeaturePool {
 public:
  FeaturePool() = default;
  FeaturePool(size_t dim, size_t capacity) : dim_(dim), capacity_(capacity) {}

  size_t size() const { return rows_; }
  size_t dim() const { return dim_; }
  size_t capacity() const { return capacity_; }
  bool empty() const { return rows_ == 0; }
  const std::vector<float>& normalized_rows() const { return data_; }

  void append(const float* row) {
    if (rows_ >= capacity_) throw Error("feature pool: capacity exceeded");
    double norm = 0.0;
    for (size_t j = 0; j < dim_; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("feature pool: non-finite feature");
      norm += static_cast<double>(row[j]) * row[j];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      throw NumericError("feature pool: zero-norm feature row " + std::to_string(rows_));
    }
    for (size_t j = 0; j < dim_; ++j) {
      data_.push_back(static_cast<float>(row[j] / norm));
    }
    ++rows_;
  }

 private:
  size_t dim_ = 0, capacity_ = 0, rows_ = 0;
  std::vector<float> data_;
};

// Mean squared cosine similarity between batch features and the pool.
// Zero for an empty pool; pool entries never carry gradient.
template <typename T>
Tensor<T> repulsive_loss(const Tensor<T>& feats, const FeaturePool& pool) {
  if (feats.ndim() != 2) {
    throw ShapeError("repulsive_loss: expected [B,D] features, got " + shape_str(feats.shape()));
  }
  size_t bsz = feats.shape()[0], dim = feats.shape()[1];
  if (pool.empty()) return Tensor<T>::scalar(T(0));
  if (dim != pool.dim()) {
    throw ShapeError("repulsive_loss: feature dim " + std::to_string(dim) + " vs pool dim " +
                     std::to_string(pool.dim()));
  }
  for (size_t i = 0; i < bsz; ++i) {
    double norm = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      double v = feats.data()[i * dim + j];
      norm += v * v;
    }
    if (norm == 0.0) {
      throw NumericError("repulsive_loss: zero-norm feature row " + std::to_string(i));
    }
  }
  // cos_ij = (h_i / |h_i|) . p_j with p_j pre-normalized
  Tensor<T> sq = sum(square(feats), {1});                 // [B]
  Tensor<T> inv_norm = reciprocal(sqrt(sq));              // [B]
  Tensor<T> hn = scale_rows(feats, inv_norm);             // [B,D]
  std::vector<T> pn(pool.size() * dim);
  for (size_t i = 0; i < pn.size(); ++i) pn[i] = static_cast<T>(pool.normalized_rows()[i]);
  // [D, P] layout so a single matmul produces [B, P]
  std::vector<T> pt(dim * pool.size());
  for (size_t r = 0; r < pool.size(); ++r) {
    for (size_t j = 0; j < dim; ++j) pt[j * pool.size() + r] = pn[r * dim + j];
  }
  Tensor<T> pool_t = Tensor<T>::from({dim, pool.size()}, std::move(pt));
  Tensor<T> cos = matmul(hn, pool_t);  // [B,P]
  return mean(square(cos));
}

struct InversionConfig {
  double alpha_norm = 1.0;
  double alpha_img = 0.1;
  double alpha_rep = 0.1;
  size_t steps = 300;
  size_t batch = 32;
  size_t count = 100;     // N_t, synthetic samples to emit
  double g_lr = 2e-4;
  double z_lr = 0.05;
  size_t reinit_every = 1;  // batches between generator re-inits
  double mask_ratio = 0.75;
  bool ablate_img = false;
  bool ablate_rep = false;
  bool ablate_cache = false;

  void validate() const {
    if (alpha_norm < 0 || alpha_img < 0 || alpha_rep < 0) {
      throw ConfigError("inversion: loss weights must be >= 0");
    }
    if (steps == 0 || batch == 0 || count == 0) {
      throw ConfigError("inversion: steps, batch and count must be >= 1");
    }
    if (reinit_every == 0) throw ConfigError("inversion: reinit_every must be >= 1");
  }
};

template <typename T>
struct ObjectiveTerms {
  Tensor<T> total;
  double task = 0, norm = 0, img = 0, rep = 0;
};

// Mean token-pooled final-block features: [B,L,d] -> [B,d].
template <typename T>
Tensor<T> pooled_features(const Tensor<T>& block) {
  return mean(block, {1});
}

// Four-term objective on G(z): masked-reconstruction task loss through the
// frozen model, statistics matching against the archive, total variation,
// and repulsion against the pool. The frozen model receives no gradient.
template <typename T>
ObjectiveTerms<T> inversion_objective(const InvUNet<T>& g, const Tensor<T>& z,
                                      const MimModel<T>& frozen, const StatsArchive<T>& archive,
                                      const FeaturePool& pool, const InversionConfig& cfg,
                                      const PatchMask& mask) {
  if (archive.fingerprint != frozen.config().fingerprint()) {
    throw FingerprintError("inversion: archive fingerprint " + fingerprint_hex(archive.fingerprint) +
                           " does not match model " + fingerprint_hex(frozen.config().fingerprint()));
  }
  Tensor<T> images = g.generate(z);
  ObjectiveTerms<T> terms;

  auto task = mim_forward(frozen, images, mask);
  terms.task = static_cast<double>(task.loss.item());
  Tensor<T> total = task.loss;

  auto fwd = frozen.forward(images);  // evaluation pass, no mask
  Tensor<T> lnorm = norm_loss(fwd.blocks, archive);
  terms.norm = static_cast<double>(lnorm.item());
  total = add(total, mul_scalar(lnorm, static_cast<T>(cfg.alpha_norm)));

  if (!cfg.ablate_img) {
    Tensor<T> limg = tv_loss(images);
    terms.img = static_cast<double>(limg.item());
    total = add(total, mul_scalar(limg, static_cast<T>(cfg.alpha_img)));
  }
  if (!cfg.ablate_rep && !pool.empty()) {
    Tensor<T> lrep = repulsive_loss(pooled_features(fwd.blocks.back()), pool);
    terms.rep = static_cast<double>(lrep.item());
    total = add(total, mul_scalar(lrep, static_cast<T>(cfg.alpha_rep)));
  }
  for (double v : {terms.task, terms.norm, terms.img, terms.rep}) {
    if (!std::isfinite(v)) throw NumericError("inversion: non-finite loss term");
  }
  terms.total = total;
  return terms;
}

struct InversionTraceRow {
  size_t step, batch;
  double task, norm, img, rep, total;
};

struct SyntheticDataset {
  size_t channels = 0, height = 0, width = 0;
  std::vector<float> images;          // [N,c,H,W]
  std::vector<size_t> batch_index;    // synthesis batch per image
  std::vector<float> pool_rows;       // normalized frozen-encoder features [N,d]
  size_t feature_dim = 0;
  std::vector<InversionTraceRow> trace;
  std::vector<double> initial_norm_per_batch, final_norm_per_batch;

  size_t size() const { return batch_index.size(); }
};

// Stage-1 synthesis for one finished task: optimize (theta_G, z) per batch,
// emit the generated images, bank their frozen-encoder features in the pool.
template <typename T>
SyntheticDataset invert_task(const MimModel<T>& frozen_in, const StatsArchive<T>& archive,
                             const InversionConfig& cfg, GeneratorConfig gcfg, Rng rng) {
  cfg.validate();
  gcfg.memory_cache = !cfg.ablate_cache;
  gcfg.validate();
  MimModel<T> frozen = frozen_in.clone();
  frozen.set_requires_grad(false);
  const MimConfig& mc = frozen.config();
  if (gcfg.out_hw != mc.image || gcfg.out_channels != mc.channels) {
    throw ConfigError("invert_task: generator output does not match encoder input");
  }

  SyntheticDataset out;
  out.channels = mc.channels;
  out.height = mc.image;
  out.width = mc.image;
  out.feature_dim = mc.dim;
  FeaturePool pool(mc.dim, cfg.count);

  Rng init_rng = rng.child("init");
  Rng mask_rng = rng.child("mask");

  size_t emitted = 0, batch_idx = 0;
  std::unique_ptr<InvUNet<T>> g;
  std::unique_ptr<Adam<T>> opt_g;
  while (emitted < cfg.count) {
    size_t bsz = std::min(cfg.batch, cfg.count - emitted);
    if (!g || batch_idx % cfg.reinit_every == 0) {
      Rng r = init_rng.child("batch", batch_idx);
      g = std::make_unique<InvUNet<T>>(gcfg, r);
      opt_g = std::make_unique<Adam<T>>(g->parameters(), cfg.g_lr);
    }
    Rng zr = init_rng.child("latents", batch_idx);
    Tensor<T> z = sample_latents<T>(bsz, gcfg.latent_dim, zr);
    Adam<T> opt_z({{"z", z}}, cfg.z_lr);

    double first_norm = 0, last_norm = 0;
    for (size_t step = 0; step < cfg.steps; ++step) {
      PatchMask mask = sample_mask(mc.grid(), mc.grid(), cfg.mask_ratio, mask_rng);
      ObjectiveTerms<T> terms;
      try {
        terms = inversion_objective(*g, z, frozen, archive, pool, cfg, mask);
      } catch (const NumericError& e) {
        throw NumericError("invert_task: batch " + std::to_string(batch_idx) + " step " +
                           std::to_string(step) + ": " + e.what());
      }
      double total = static_cast<double>(terms.total.item());
      if (!std::isfinite(total)) {
        throw NumericError("invert_task: non-finite objective at batch " +
                           std::to_string(batch_idx) + " step " + std::to_string(step) +
                           " (task=" + std::to_string(terms.task) +
                           " norm=" + std::to_string(terms.norm) +
                           " img=" + std::to_string(terms.img) +
                           " rep=" + std::to_string(terms.rep) + ")");
      }
      if (step == 0) first_norm = terms.norm;
      last_norm = terms.norm;
      out.trace.push_back({step, batch_idx, terms.task, terms.norm, terms.img, terms.rep, total});
      opt_g->zero_grad();
      opt_z.zero_grad();
      backward(terms.total);
      opt_g->step();
      opt_z.step();
    }
    out.initial_norm_per_batch.push_back(first_norm);
    out.final_norm_per_batch.push_back(last_norm);

    // Emit this batch and bank features for the repulsion pool.
    NoGradGuard guard;
    Tensor<T> images = g->generate(z);
    Tensor<T> feats = pooled_features(frozen.forward(images).blocks.back());
    for (size_t i = 0; i < bsz; ++i) {
      const T* img = images.data() + i * out.channels * out.height * out.width;
      for (size_t j = 0; j < out.channels * out.height * out.width; ++j) {
        out.images.push_back(static_cast<float>(img[j]));
      }
      out.batch_index.push_back(batch_idx);
      std::vector<float> row(mc.dim);
      for (size_t j = 0; j < mc.dim; ++j) row[j] = static_cast<float>(feats.data()[i * mc.dim + j]);
      pool.append(row.data());
    }
    emitted += bsz;
    ++batch_idx;
  }
  out.pool_rows = pool.normalized_rows();
  return out;
}

// Desk-default generator sized to the frozen encoder's input.
template <typename T>
SyntheticDataset invert_task(const MimModel<T>& frozen, const StatsArchive<T>& archive,
                             const InversionConfig& cfg, Rng rng) {
  GeneratorConfig gcfg = GeneratorConfig::desk();
  gcfg.out_hw = frozen.config().image;
  gcfg.out_channels = frozen.config().channels;
  return invert_task(frozen, archive, cfg, gcfg, rng);
}

}  // namespace invcoss
