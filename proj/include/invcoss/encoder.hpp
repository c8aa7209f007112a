#pragma once

#include <string>
#include <utility>
#include <vector>

#include "invcoss/adam.hpp"
#include "invcoss/ops.hpp"
#include "invcoss/rng.hpp"

namespace invcoss {

struct MimConfig {
  size_t image = 32;
  size_t patch = 4;
  size_t channels = 1;
  size_t dim = 64;
  size_t depth = 4;
  size_t heads = 4;
  double mlp_ratio = 4.0;

  size_t grid() const { return image / patch; }
  size_t tokens() const { return grid() * grid(); }
  size_t patch_numel() const { return patch * patch * channels; }
  size_t head_dim() const { return dim / heads; }
  size_t mlp_hidden() const { return static_cast<size_t>(mlp_ratio * static_cast<double>(dim)); }

  void validate() const {
    if (image == 0 || patch == 0 || image % patch != 0) {
      throw ConfigError("encoder: image " + std::to_string(image) + " not divisible by patch " +
                        std::to_string(patch));
    }
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw ConfigError("encoder: dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (depth == 0) throw ConfigError("encoder: depth must be >= 1");
  }

  std::string canonical() const {
    return "mim:image=" + std::to_string(image) + ",patch=" + std::to_string(patch) +
           ",channels=" + std::to_string(channels) + ",dim=" + std::to_string(dim) +
           ",depth=" + std::to_string(depth) + ",heads=" + std::to_string(heads) +
           ",mlp=" + std::to_string(mlp_hidden());
  }

  uint64_t fingerprint() const { return fnv1a(canonical()); }

  bool operator==(const MimConfig&) const = default;
};

// Binary mask over the patch grid. popcount = floor(ratio * tokens).
struct PatchMask {
  size_t rows = 0, cols = 0;
  double ratio = 0.0;
  std::vector<uint8_t> grid;  // 1 = masked

  size_t count() const {
    size_t n = 0;
    for (auto v : grid) n += v;
    return n;
  }
};

inline PatchMask sample_mask(size_t rows, size_t cols, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0) {
    throw ConfigError("sample_mask: ratio " + std::to_string(ratio) + " outside [0,1]");
  }
  size_t total = rows * cols;
  size_t k = static_cast<size_t>(ratio * static_cast<double>(total));
  if (k > total) k = total;
  std::vector<size_t> idx(total);
  for (size_t i = 0; i < total; ++i) idx[i] = i;
  // partial Fisher-Yates: first k entries are a uniform sample w/o replacement
  for (size_t i = 0; i < k; ++i) {
    size_t j = i + static_cast<size_t>(rng.below(total - i));
    std::swap(idx[i], idx[j]);
  }
  PatchMask m{rows, cols, ratio, std::vector<uint8_t>(total, 0)};
  for (size_t i = 0; i < k; ++i) m.grid[idx[i]] = 1;
  return m;
}

// Pixel-space {0,1} mask [c,H,W] from a patch mask.
template <typename T>
Tensor<T> pixel_mask(const PatchMask& m, size_t channels, size_t patch) {
  size_t h = m.rows * patch, w = m.cols * patch;
  std::vector<T> v(channels * h * w);
  for (size_t c = 0; c < channels; ++c) {
    for (size_t y = 0; y < h; ++y) {
      for (size_t x = 0; x < w; ++x) {
        v[(c * h + y) * w + x] = static_cast<T>(m.grid[(y / patch) * m.cols + x / patch]);
      }
    }
  }
  return Tensor<T>::from({channels, h, w}, std::move(v));
}

namespace detail {

template <typename T>
Tensor<T> init_linear(size_t fan_in, size_t fan_out, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from({fan_in, fan_out}, std::move(v), true);
}

}  // namespace detail

// Masked-image-modeling transformer: patch embedding, learned positional
// embeddings, pre-LN blocks, linear reconstruction head back to pixels.
// Block outputs are the statistics tap points.
template <typename T>
class MimModel {
 public:
  struct BlockParams {
    Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;
  };

  MimModel(MimConfig cfg, Rng rng) : cfg_(cfg) {
    cfg_.validate();
    size_t d = cfg_.dim, pn = cfg_.patch_numel(), hid = cfg_.mlp_hidden();
    patch_w_ = detail::init_linear<T>(pn, d, rng);
    patch_b_ = Tensor<T>::zeros({d}, true);
    std::vector<T> pos(cfg_.tokens() * d);
    for (auto& x : pos) x = static_cast<T>(rng.normal() * 0.02);
    pos_ = Tensor<T>::from({cfg_.tokens(), d}, std::move(pos), true);
    for (size_t b = 0; b < cfg_.depth; ++b) {
      BlockParams blk;
      blk.ln1_g = Tensor<T>::full({d}, T(1), true);
      blk.ln1_b = Tensor<T>::zeros({d}, true);
      blk.wq = detail::init_linear<T>(d, d, rng);
      blk.bq = Tensor<T>::zeros({d}, true);
      blk.wk = detail::init_linear<T>(d, d, rng);
      blk.bk = Tensor<T>::zeros({d}, true);
      blk.wv = detail::init_linear<T>(d, d, rng);
      blk.bv = Tensor<T>::zeros({d}, true);
      blk.wo = detail::init_linear<T>(d, d, rng);
      blk.bo = Tensor<T>::zeros({d}, true);
      blk.ln2_g = Tensor<T>::full({d}, T(1), true);
      blk.ln2_b = Tensor<T>::zeros({d}, true);
      blk.w1 = detail::init_linear<T>(d, hid, rng);
      blk.b1 = Tensor<T>::zeros({hid}, true);
      blk.w2 = detail::init_linear<T>(hid, d, rng);
      blk.b2 = Tensor<T>::zeros({d}, true);
      blocks_.push_back(std::move(blk));
    }
    lnf_g_ = Tensor<T>::full({d}, T(1), true);
    lnf_b_ = Tensor<T>::zeros({d}, true);
    head_w_ = detail::init_linear<T>(d, pn, rng);
    head_b_ = Tensor<T>::zeros({pn}, true);
  }

  const MimConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("patch.w", patch_w_);
    out.emplace_back("patch.b", patch_b_);
    out.emplace_back("pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      std::string p = "blk" + std::to_string(i) + ".";
      out.emplace_back(p + "ln1.g", b.ln1_g);
      out.emplace_back(p + "ln1.b", b.ln1_b);
      out.emplace_back(p + "wq", b.wq);
      out.emplace_back(p + "bq", b.bq);
      out.emplace_back(p + "wk", b.wk);
      out.emplace_back(p + "bk", b.bk);
      out.emplace_back(p + "wv", b.wv);
      out.emplace_back(p + "bv", b.bv);
      out.emplace_back(p + "wo", b.wo);
      out.emplace_back(p + "bo", b.bo);
      out.emplace_back(p + "ln2.g", b.ln2_g);
      out.emplace_back(p + "ln2.b", b.ln2_b);
      out.emplace_back(p + "mlp.w1", b.w1);
      out.emplace_back(p + "mlp.b1", b.b1);
      out.emplace_back(p + "mlp.w2", b.w2);
      out.emplace_back(p + "mlp.b2", b.b2);
    }
    out.emplace_back("lnf.g", lnf_g_);
    out.emplace_back("lnf.b", lnf_b_);
    out.emplace_back("head.w", head_w_);
    out.emplace_back("head.b", head_b_);
    return out;
  }

  void set_requires_grad(bool b) {
    for (auto& [name, p] : parameters()) p.set_requires_grad(b);
  }

  MimModel clone() const {
    MimModel copy(cfg_, Rng(0));
    auto src = parameters();
    auto dst = copy.parameters();
    for (size_t i = 0; i < src.size(); ++i) dst[i].second.values() = src[i].second.values();
    return copy;
  }

  template <typename U>
  MimModel<U> cast() const {
    MimModel<U> copy(cfg_, Rng(0));
    auto src = parameters();
    auto dst = copy.parameters();
    for (size_t i = 0; i < src.size(); ++i) {
      auto& dv = dst[i].second.values();
      const auto& sv = src[i].second.values();
      for (size_t j = 0; j < sv.size(); ++j) dv[j] = static_cast<U>(sv[j]);
    }
    return copy;
  }

  struct ForwardResult {
    Tensor<T> recon;                 // [B,c,H,W]
    std::vector<Tensor<T>> blocks;   // depth x [B,L,d]
  };

  ForwardResult forward(const Tensor<T>& x) const {
    check_input(x);
    size_t bsz = x.shape()[0];
    size_t L = cfg_.tokens(), d = cfg_.dim, h = cfg_.heads, hd = cfg_.head_dim();
    Tensor<T> tok = patchify(x, cfg_.patch);                        // [B,L,pn]
    Tensor<T> e2 = linear(reshape(tok, {bsz * L, cfg_.patch_numel()}), patch_w_, patch_b_);
    Tensor<T> z = add_bias(reshape(e2, {bsz, L, d}), pos_);         // [B,L,d]

    ForwardResult res;
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (const auto& blk : blocks_) {
      Tensor<T> n1 = layer_norm(z, blk.ln1_g, blk.ln1_b);
      Tensor<T> flat = reshape(n1, {bsz * L, d});
      auto heads_of = [&](const Tensor<T>& m) {
        // [B*L,d] -> [B,L,h,hd] -> [B,h,L,hd] -> [B*h,L,hd]
        return reshape(transpose(reshape(m, {bsz, L, h, hd}), {0, 2, 1, 3}), {bsz * h, L, hd});
      };
      Tensor<T> q = heads_of(linear(flat, blk.wq, blk.bq));
      Tensor<T> k = heads_of(linear(flat, blk.wk, blk.bk));
      Tensor<T> v = heads_of(linear(flat, blk.wv, blk.bv));
      Tensor<T> att = softmax(mul_scalar(bmm(q, transpose(k, {0, 2, 1})), scale));
      Tensor<T> ctx = bmm(att, v);  // [B*h,L,hd]
      Tensor<T> merged =
          reshape(transpose(reshape(ctx, {bsz, h, L, hd}), {0, 2, 1, 3}), {bsz * L, d});
      Tensor<T> attn_out = linear(merged, blk.wo, blk.bo);
      z = add(z, reshape(attn_out, {bsz, L, d}));

      Tensor<T> n2 = layer_norm(z, blk.ln2_g, blk.ln2_b);
      Tensor<T> m1 = gelu(linear(reshape(n2, {bsz * L, d}), blk.w1, blk.b1));
      Tensor<T> m2 = linear(m1, blk.w2, blk.b2);
      z = add(z, reshape(m2, {bsz, L, d}));
      res.blocks.push_back(z);
    }
    Tensor<T> nf = layer_norm(z, lnf_g_, lnf_b_);
    Tensor<T> out = linear(reshape(nf, {bsz * L, d}), head_w_, head_b_);
    res.recon = unpatchify(reshape(out, {bsz, L, cfg_.patch_numel()}), cfg_.channels, cfg_.image,
                           cfg_.image, cfg_.patch);
    return res;
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.shape()[1] != cfg_.channels || x.shape()[2] != cfg_.image ||
        x.shape()[3] != cfg_.image) {
      throw ShapeError("encoder: input " + shape_str(x.shape()) + " does not match config [B," +
                       std::to_string(cfg_.channels) + "," + std::to_string(cfg_.image) + "," +
                       std::to_string(cfg_.image) + "]");
    }
  }

  MimConfig cfg_;
  Tensor<T> patch_w_, patch_b_, pos_;
  std::vector<BlockParams> blocks_;
  Tensor<T> lnf_g_, lnf_b_, head_w_, head_b_;
};

template <typename T>
struct MimLoss {
  Tensor<T> loss;       // masked MSE / masked pixel count (batch total)
  Tensor<T> loss_sum;   // unnormalized squared norm
  Tensor<T> recon;
};

// Literal masked-reconstruction objective: the network sees x with masked
// patches zeroed in pixel space; the error counts only masked pixels.
template <typename T>
MimLoss<T> mim_forward(const MimModel<T>& model, const Tensor<T>& x, const PatchMask& m) {
  const MimConfig& cfg = model.config();
  if (m.rows != cfg.grid() || m.cols != cfg.grid()) {
    throw ShapeError("mim_forward: mask grid " + std::to_string(m.rows) + "x" +
                     std::to_string(m.cols) + " does not match model grid " +
                     std::to_string(cfg.grid()));
  }
  size_t masked = m.count();
  if (masked == 0 && m.ratio > 0.0) {
    throw ConfigError("mim_forward: mask has zero patches for requested ratio " +
                      std::to_string(m.ratio));
  }
  Tensor<T> mask_px = pixel_mask<T>(m, cfg.channels, cfg.patch);
  std::vector<T> inv(mask_px.numel());
  for (size_t i = 0; i < inv.size(); ++i) inv[i] = T(1) - mask_px.data()[i];
  Tensor<T> keep_px = Tensor<T>::from(mask_px.shape(), std::move(inv));

  Tensor<T> x_in = mul_bcast(x, keep_px);
  auto fwd = model.forward(x_in);
  Tensor<T> diff = mul_bcast(sub(fwd.recon, x), mask_px);
  Tensor<T> sum_sq = sum(square(diff));
  size_t bsz = x.shape()[0];
  size_t masked_px = masked * cfg.patch * cfg.patch * cfg.channels * bsz;
  MimLoss<T> out;
  out.loss_sum = sum_sq;
  out.loss = masked_px > 0 ? mul_scalar(sum_sq, static_cast<T>(1.0 / static_cast<double>(masked_px)))
                           : mul_scalar(sum_sq, T(0));
  out.recon = fwd.recon;
  return out;
}

// Evaluation-mode per-block features (no mask). Detached copies.
template <typename T>
std::vector<Tensor<T>> block_features(const MimModel<T>& model, const Tensor<T>& x) {
  NoGradGuard guard;
  auto fwd = model.forward(x);
  std::vector<Tensor<T>> out;
  out.reserve(fwd.blocks.size());
  for (auto& b : fwd.blocks) out.push_back(b.detach());
  return out;
}

struct PretrainSchedule {
  size_t epochs = 12;
  size_t batch = 32;
  double lr = 1e-3;
  double warmup_frac = 0.05;
  double mask_ratio = 0.75;
};

struct TraceRow {
  size_t epoch, step;
  double lr, loss;
};

// Dataset views are plain row-major image buffers [N,c,H,W].
template <typename T>
Tensor<T> image_batch(const std::vector<float>& store, size_t c, size_t h, size_t w,
                      const std::vector<size_t>& indices) {
  size_t px = c * h * w;
  std::vector<T> v(indices.size() * px);
  for (size_t i = 0; i < indices.size(); ++i) {
    const float* src = store.data() + indices[i] * px;
    T* dst = v.data() + i * px;
    for (size_t j = 0; j < px; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return Tensor<T>::from({indices.size(), c, h, w}, std::move(v));
}

// Masked-image pretraining with Adam and warmup+cosine schedule.
// Deterministic for a fixed seed; epoch mean losses returned, per-step
// rows appended to `trace` when provided.
template <typename T>
std::vector<double> pretrain(MimModel<T>& model, const std::vector<float>& images, size_t n,
                             const PretrainSchedule& sched, Rng rng,
                             std::vector<TraceRow>* trace = nullptr) {
  if (n == 0) throw ConfigError("pretrain: empty dataset");
  const MimConfig& cfg = model.config();
  Adam<T> opt(model.parameters(), sched.lr);
  size_t steps_per_epoch = (n + sched.batch - 1) / sched.batch;
  size_t total_steps = steps_per_epoch * sched.epochs;
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng shuffle_rng = rng.child("shuffle");
  Rng mask_rng = rng.child("mask");

  std::vector<double> epoch_losses;
  size_t step_idx = 0;
  for (size_t e = 0; e < sched.epochs; ++e) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_sum = 0.0;
    for (size_t s = 0; s < steps_per_epoch; ++s, ++step_idx) {
      size_t lo = s * sched.batch;
      size_t hi = std::min(n, lo + sched.batch);
      std::vector<size_t> idx(order.begin() + lo, order.begin() + hi);
      Tensor<T> x = image_batch<T>(images, cfg.channels, cfg.image, cfg.image, idx);
      PatchMask m = sample_mask(cfg.grid(), cfg.grid(), sched.mask_ratio, mask_rng);
      auto lossv = mim_forward(model, x, m);
      double lv = static_cast<double>(lossv.loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(e) + " step " +
                           std::to_string(s));
      }
      opt.zero_grad();
      backward(lossv.loss);
      opt.set_lr(lr_schedule(sched.lr, step_idx, total_steps, sched.warmup_frac));
      opt.step();
      epoch_sum += lv;
      if (trace) trace->push_back({e, s, opt.lr(), lv});
    }
    epoch_losses.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
  }
  return epoch_losses;
}

}  // namespace invcoss
