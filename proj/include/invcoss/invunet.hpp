#pragma once

#include <string>
#include <utility>
#include <vector>

#include "invcoss/ops.hpp"
#include "invcoss/rng.hpp"

namespace invcoss {

enum class NormKind { batch, instance, none };
enum class ActKind { leaky_relu, relu, gelu };
enum class UpsampleKind { bilinear, nearest };

struct GeneratorConfig {
  size_t latent_dim = 128;
  size_t bottleneck_hw = 4;
  // Decoder-path channel list, output side first; the last entry is the
  // bottleneck width. Stage count = size - 1.
  std::vector<size_t> channels = {16, 32, 64, 128};
  size_t out_hw = 32;
  size_t out_channels = 1;
  UpsampleKind upsample = UpsampleKind::bilinear;
  NormKind norm = NormKind::batch;
  ActKind act = ActKind::leaky_relu;
  double leaky_slope = 0.2;
  bool proj_layer_norm = true;  // noise projector: linear + LN + GELU
  bool proj_gelu = true;
  bool memory_cache = true;  // ablation hook: false = pure bottom-to-top

  size_t stages() const { return channels.empty() ? 0 : channels.size() - 1; }
  size_t bottleneck_channels() const { return channels.back(); }

  void validate() const {
    if (channels.size() < 2) {
      throw ConfigError("generator: channel list needs stage count + 1 entries");
    }
    if (latent_dim == 0 || bottleneck_hw == 0 || out_channels == 0) {
      throw ConfigError("generator: zero-sized dimension");
    }
    if (out_hw != (bottleneck_hw << stages())) {
      throw ConfigError("generator: output " + std::to_string(out_hw) + " != bottleneck " +
                        std::to_string(bottleneck_hw) + " x 2^" + std::to_string(stages()));
    }
  }

  static GeneratorConfig desk() { return GeneratorConfig{}; }

  // The 224x224 3-channel layout from the reference architecture table.
  static GeneratorConfig paper_2d() {
    GeneratorConfig c;
    c.latent_dim = 128;
    c.bottleneck_hw = 14;
    c.channels = {16, 32, 64, 128, 256};
    c.out_hw = 224;
    c.out_channels = 3;
    return c;
  }
};

// Dual-stream generator: a Noise Projector injects z at the bottleneck; the
// memory-cache branch upsamples to produce multi-scale priors; the inversion
// branch upsamples in lockstep, concatenating each prior before its convs;
// a final conv + sigmoid produces images in (0,1).
template <typename T>
class InvUNet {
 public:
  struct Conv {
    Tensor<T> w, b;        // [cout,cin,3,3], [cout]
    Tensor<T> ng, nb;      // norm affine, defined unless norm == none
  };
  struct Stage {
    Conv c1, c2;
  };

  InvUNet(GeneratorConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    size_t bc = cfg_.bottleneck_channels();
    size_t bn = bc * cfg_.bottleneck_hw * cfg_.bottleneck_hw;
    proj_w_ = detail::init_linear<T>(cfg_.latent_dim, bn, rng);
    proj_b_ = Tensor<T>::zeros({bn}, true);
    if (cfg_.proj_layer_norm) {
      proj_ln_g_ = Tensor<T>::full({bn}, T(1), true);
      proj_ln_b_ = Tensor<T>::zeros({bn}, true);
    }
    size_t s = cfg_.stages();
    for (size_t i = 1; i <= s; ++i) {
      size_t cin = cfg_.channels[cfg_.channels.size() - i];       // previous stage / bottleneck
      size_t cout = cfg_.channels[cfg_.channels.size() - 1 - i];  // this stage
      if (cfg_.memory_cache) {
        mc_.push_back(make_stage(cin, cout, rng));
        inv_.push_back(make_stage(cin + cout, cout, rng));
      } else {
        inv_.push_back(make_stage(cin, cout, rng));
      }
    }
    final_w_ = make_conv_weight(cfg_.out_channels, cfg_.channels.front(), rng);
    final_b_ = Tensor<T>::zeros({cfg_.out_channels}, true);
  }

  const GeneratorConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("proj.w", proj_w_);
    out.emplace_back("proj.b", proj_b_);
    if (cfg_.proj_layer_norm) {
      out.emplace_back("proj.ln.g", proj_ln_g_);
      out.emplace_back("proj.ln.b", proj_ln_b_);
    }
    auto add_stage = [&](const std::string& prefix, const Stage& st) {
      auto add_conv = [&](const std::string& cp, const Conv& c) {
        out.emplace_back(cp + ".w", c.w);
        out.emplace_back(cp + ".b", c.b);
        if (c.ng.defined()) {
          out.emplace_back(cp + ".n.g", c.ng);
          out.emplace_back(cp + ".n.b", c.nb);
        }
      };
      add_conv(prefix + ".conv1", st.c1);
      add_conv(prefix + ".conv2", st.c2);
    };
    for (size_t i = 0; i < mc_.size(); ++i) add_stage("mc" + std::to_string(i + 1), mc_[i]);
    for (size_t i = 0; i < inv_.size(); ++i) add_stage("inv" + std::to_string(i + 1), inv_[i]);
    out.emplace_back("final.w", final_w_);
    out.emplace_back("final.b", final_b_);
    return out;
  }

  // Forward pass from a batch of latents [B, latent_dim] to images.
  Tensor<T> generate(const Tensor<T>& z) const {
    if (z.ndim() != 2 || z.shape()[1] != cfg_.latent_dim) {
      throw ShapeError("generate: latent " + shape_str(z.shape()) + " does not match dim " +
                       std::to_string(cfg_.latent_dim));
    }
    size_t bsz = z.shape()[0];
    if (bsz == 1 && cfg_.norm == NormKind::batch) {
      throw ConfigError("generate: batch size 1 with batch normalization; use instance or none");
    }
    Tensor<T> h = linear(z, proj_w_, proj_b_);
    if (cfg_.proj_layer_norm) h = layer_norm(h, proj_ln_g_, proj_ln_b_);
    if (cfg_.proj_gelu) h = gelu(h);
    size_t bc = cfg_.bottleneck_channels();
    Tensor<T> bottleneck =
        reshape(h, {bsz, bc, cfg_.bottleneck_hw, cfg_.bottleneck_hw});

    std::vector<Tensor<T>> priors;
    if (cfg_.memory_cache) {
      Tensor<T> m = bottleneck;
      for (const auto& st : mc_) {
        m = run_stage(st, upsample(m));
        priors.push_back(m);
      }
    }
    Tensor<T> x = bottleneck;
    for (size_t i = 0; i < inv_.size(); ++i) {
      Tensor<T> up = upsample(x);
      if (cfg_.memory_cache) up = concat<T>({up, priors[i]}, 1);
      x = run_stage(inv_[i], up);
    }
    return sigmoid(conv2d(x, final_w_, final_b_, 1));
  }

 private:
  Tensor<T> make_conv_weight(size_t cout, size_t cin, Rng& rng) const {
    double bound = 1.0 / std::sqrt(static_cast<double>(cin * 9));
    std::vector<T> v(cout * cin * 9);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from({cout, cin, 3, 3}, std::move(v), true);
  }

  Conv make_conv(size_t cin, size_t cout, Rng& rng) const {
    Conv c;
    c.w = make_conv_weight(cout, cin, rng);
    c.b = Tensor<T>::zeros({cout}, true);
    if (cfg_.norm != NormKind::none) {
      c.ng = Tensor<T>::full({cout}, T(1), true);
      c.nb = Tensor<T>::zeros({cout}, true);
    }
    return c;
  }

  Stage make_stage(size_t cin, size_t cout, Rng& rng) const {
    return Stage{make_conv(cin, cout, rng), make_conv(cout, cout, rng)};
  }

  Tensor<T> upsample(const Tensor<T>& x) const {
    return cfg_.upsample == UpsampleKind::bilinear ? upsample2x_bilinear(x)
                                                   : upsample2x_nearest(x);
  }

  Tensor<T> activate(const Tensor<T>& x) const {
    switch (cfg_.act) {
      case ActKind::leaky_relu:
        return leaky_relu(x, static_cast<T>(cfg_.leaky_slope));
      case ActKind::relu:
        return relu(x);
      case ActKind::gelu:
        return gelu(x);
    }
    throw ConfigError("generator: unknown activation");
  }

  Tensor<T> run_conv(const Conv& c, const Tensor<T>& x) const {
    Tensor<T> y = conv2d(x, c.w, c.b, 1);
    switch (cfg_.norm) {
      case NormKind::batch:
        y = batch_norm2d(y, c.ng, c.nb);
        break;
      case NormKind::instance:
        y = instance_norm2d(y, c.ng, c.nb);
        break;
      case NormKind::none:
        break;
    }
    return activate(y);
  }

  Tensor<T> run_stage(const Stage& st, const Tensor<T>& x) const {
    return run_conv(st.c2, run_conv(st.c1, x));
  }

  GeneratorConfig cfg_;
  Tensor<T> proj_w_, proj_b_, proj_ln_g_, proj_ln_b_;
  std::vector<Stage> mc_, inv_;
  Tensor<T> final_w_, final_b_;
};

template <typename T>
InvUNet<T> build_generator(const GeneratorConfig& cfg, Rng& rng) {
  return InvUNet<T>(cfg, rng);
}

// Fresh standard-normal latents [batch, latent_dim].
template <typename T>
Tensor<T> sample_latents(size_t batch, size_t latent_dim, Rng& rng) {
  std::vector<T> v(batch * latent_dim);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>::from({batch, latent_dim}, std::move(v), true);
}

// Fresh generator parameters and latents; any external feature pool is
// untouched by design.
template <typename T>
std::pair<InvUNet<T>, Tensor<T>> reinit(const GeneratorConfig& cfg, size_t batch, Rng& rng) {
  InvUNet<T> g(cfg, rng);
  Tensor<T> z = sample_latents<T>(batch, cfg.latent_dim, rng);
  return {std::move(g), std::move(z)};
}

}  // namespace invcoss
