#pragma once

#include <string>
#include <vector>

#include "invcoss/data.hpp"
#include "invcoss/inversion.hpp"

namespace invcoss {

enum class Regime { invcoss, seqssl, joint };

inline Regime regime_from_name(const std::string& s) {
  if (s == "invcoss") return Regime::invcoss;
  if (s == "seqssl") return Regime::seqssl;
  if (s == "joint") return Regime::joint;
  throw ConfigError("regime: unknown '" + s + "'");
}

inline std::string regime_name(Regime r) {
  switch (r) {
    case Regime::invcoss:
      return "invcoss";
    case Regime::seqssl:
      return "seqssl";
    case Regime::joint:
      return "joint";
  }
  return "?";
}

struct StageConfig {
  size_t epochs = 12;
  size_t batch = 32;
  double lr = 1e-3;
  double warmup_frac = 0.05;
  double mask_ratio = 0.75;
  double buffer_ratio = 0.05;
  double kd_weight = 0.1;
  double replay_weight = 1.0;

  void validate() const {
    if (buffer_ratio < 0.0 || buffer_ratio > 1.0) {
      throw ConfigError("stage: buffer ratio outside [0,1]");
    }
    if (epochs == 0 || batch == 0) throw ConfigError("stage: epochs and batch must be >= 1");
  }
};

struct TaskSpec {
  std::string id;
  ModalitySpec modality;
  size_t n = 400;

  void validate() const {
    if (n == 0) throw ConfigError("task '" + id + "': dataset size must be >= 1");
    modality.validate();
  }
};

// Union of per-task synthetic datasets, tagged by source task.
struct SyntheticBuffer {
  struct Part {
    std::string task_id;
    size_t count = 0;
    std::vector<float> images;      // [count,c,H,W]
    std::vector<float> pool_rows;   // normalized features [count,d]
    size_t feature_dim = 0;
  };
  size_t channels = 0, height = 0, width = 0;
  std::vector<Part> parts;

  size_t total() const {
    size_t n = 0;
    for (const auto& p : parts) n += p.count;
    return n;
  }
  bool empty() const { return total() == 0; }
  size_t pixels() const { return channels * height * width; }
  const float* image(size_t flat) const {
    for (const auto& p : parts) {
      if (flat < p.count) return p.images.data() + flat * pixels();
      flat -= p.count;
    }
    throw Error("buffer: image index out of range");
  }
  uint64_t content_hash() const {
    uint64_t h = kFnvOffset;
    for (const auto& p : parts) {
      h = fnv1a(p.task_id, h);
      h = fnv1a(p.images.data(), p.images.size() * sizeof(float), h);
    }
    return h;
  }
};

inline size_t round_half_up(double v) {
  return static_cast<size_t>(std::floor(v + 0.5));
}

// Checkpoint + archive of a finished task: the only inputs Stage 1 may see.
template <typename T>
struct PrevTaskArtifacts {
  MimModel<T> model;
  StatsArchive<T> archive;
};

// Builds B_T from previous tasks' checkpoints and statistics alone. A task
// whose target count rounds to zero is skipped without consuming any
// randomness, so ratio 0 reproduces the no-buffer regime exactly.
template <typename T>
SyntheticBuffer build_buffer(const std::vector<PrevTaskArtifacts<T>>& prev, double ratio,
                             const InversionConfig& inv_cfg, const GeneratorConfig& gen_cfg,
                             Rng rng) {
  SyntheticBuffer buf;
  for (size_t t = 0; t < prev.size(); ++t) {
    const auto& art = prev[t];
    if (art.archive.fingerprint != art.model.config().fingerprint()) {
      throw FingerprintError("build_buffer: task '" + art.archive.task +
                             "' archive does not match its checkpoint");
    }
    buf.channels = art.model.config().channels;
    buf.height = buf.width = art.model.config().image;
    size_t target = round_half_up(ratio * static_cast<double>(art.archive.count()));
    if (target == 0) continue;
    InversionConfig cfg = inv_cfg;
    cfg.count = target;
    SyntheticDataset syn =
        invert_task(art.model, art.archive, cfg, gen_cfg, rng.child("invert", t));
    SyntheticBuffer::Part part;
    part.task_id = art.archive.task;
    part.count = syn.size();
    part.images = std::move(syn.images);
    part.pool_rows = std::move(syn.pool_rows);
    part.feature_dim = syn.feature_dim;
    buf.parts.push_back(std::move(part));
  }
  return buf;
}

// Mean squared distance between final-block features of the current and the
// frozen previous model on synthetic inputs; the frozen side is detached.
template <typename T>
Tensor<T> kd_loss(const MimModel<T>& current, const MimModel<T>& frozen_prev, const Tensor<T>& x) {
  if (!(current.config() == frozen_prev.config())) {
    throw ConfigError("kd_loss: model architectures differ");
  }
  Tensor<T> target;
  {
    NoGradGuard guard;
    target = frozen_prev.forward(x).blocks.back().detach();
  }
  Tensor<T> cur = current.forward(x).blocks.back();
  return mean(square(sub(cur, target)));
}

template <typename T>
struct StageResult {
  MimModel<T> model;
  std::vector<double> epoch_losses;
};

// One continual-training stage: f_T starts from f_prev and jointly minimizes
// the current-task masked-reconstruction loss plus, when a buffer exists,
// replay reconstruction and feature distillation on synthetic samples.
template <typename T>
StageResult<T> continual_stage(const MimModel<T>& f_prev, const std::vector<float>& train_images,
                               size_t train_n, const SyntheticBuffer& buffer,
                               const StageConfig& cfg, Rng rng) {
  cfg.validate();
  if (train_n == 0) throw ConfigError("continual_stage: empty current dataset");
  const MimConfig& mc = f_prev.config();
  MimModel<T> model = f_prev.clone();
  MimModel<T> frozen = f_prev.clone();
  frozen.set_requires_grad(false);

  Adam<T> opt(model.parameters(), cfg.lr);
  size_t steps_per_epoch = (train_n + cfg.batch - 1) / cfg.batch;
  size_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<size_t> order(train_n);
  for (size_t i = 0; i < train_n; ++i) order[i] = i;
  Rng shuffle_rng = rng.child("shuffle");
  Rng mask_rng = rng.child("mask");
  Rng replay_rng = rng.child("replay");

  size_t syn_bs = 0;
  if (!buffer.empty()) {
    syn_bs = std::max<size_t>(1, round_half_up(cfg.buffer_ratio * static_cast<double>(cfg.batch)));
  }

  StageResult<T> out{std::move(model), {}};
  size_t step_idx = 0;
  for (size_t e = 0; e < cfg.epochs; ++e) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_sum = 0.0;
    for (size_t s = 0; s < steps_per_epoch; ++s, ++step_idx) {
      size_t lo = s * cfg.batch, hi = std::min(train_n, lo + cfg.batch);
      std::vector<size_t> idx(order.begin() + lo, order.begin() + hi);
      Tensor<T> x = image_batch<T>(train_images, mc.channels, mc.image, mc.image, idx);
      PatchMask m = sample_mask(mc.grid(), mc.grid(), cfg.mask_ratio, mask_rng);
      Tensor<T> loss = mim_forward(out.model, x, m).loss;

      if (syn_bs > 0) {
        std::vector<T> sv(syn_bs * buffer.pixels());
        for (size_t i = 0; i < syn_bs; ++i) {
          const float* img = buffer.image(replay_rng.below(buffer.total()));
          for (size_t j = 0; j < buffer.pixels(); ++j) sv[i * buffer.pixels() + j] = static_cast<T>(img[j]);
        }
        Tensor<T> x_syn =
            Tensor<T>::from({syn_bs, buffer.channels, buffer.height, buffer.width}, std::move(sv));
        PatchMask ms = sample_mask(mc.grid(), mc.grid(), cfg.mask_ratio, mask_rng);
        Tensor<T> replay = mim_forward(out.model, x_syn, ms).loss;
        Tensor<T> kd = kd_loss(out.model, frozen, x_syn);
        loss = add(loss, add(mul_scalar(replay, static_cast<T>(cfg.replay_weight)),
                             mul_scalar(kd, static_cast<T>(cfg.kd_weight))));
      }
      double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("continual_stage: non-finite loss at epoch " + std::to_string(e) +
                           " step " + std::to_string(s));
      }
      opt.zero_grad();
      backward(loss);
      opt.set_lr(lr_schedule(cfg.lr, step_idx, total_steps, cfg.warmup_frac));
      opt.step();
      epoch_sum += lv;
    }
    out.epoch_losses.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
  }
  return out;
}

}  // namespace invcoss
