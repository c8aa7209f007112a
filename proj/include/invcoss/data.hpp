#pragma once

#include <string>
#include <vector>

#include "invcoss/bundle.hpp"
#include "invcoss/errors.hpp"
#include "invcoss/rng.hpp"

namespace invcoss {

enum class ModalityKind { blobs, stripes, checker_noise };

ModalityKind modality_from_name(const std::string& name);
std::string modality_name(ModalityKind k);

// Procedural toy imaging modality with controllable, distinct statistics:
// smooth gaussian bumps, oriented sinusoidal gratings, and noisy
// checkerboards.
struct ModalitySpec {
  ModalityKind kind = ModalityKind::blobs;
  size_t resolution = 32;
  size_t channels = 1;
  size_t blob_min = 1, blob_max = 3;
  double blob_sigma_min = 2.0, blob_sigma_max = 4.0;
  size_t freq_min = 2, freq_max = 6;
  size_t cell_min = 4, cell_max = 8;
  double noise_scale = 0.1;
  uint64_t seed = 0;

  void validate() const {
    if (resolution == 0 || channels == 0) throw ConfigError("modality: zero-sized images");
    if (blob_min < 1 || blob_max < blob_min) throw ConfigError("modality: bad blob count range");
    if (blob_sigma_max < blob_sigma_min || blob_sigma_min <= 0) {
      throw ConfigError("modality: bad blob sigma range");
    }
    if (freq_min < 1 || freq_max < freq_min) throw ConfigError("modality: bad frequency range");
    if (cell_min < 1 || cell_max < cell_min) throw ConfigError("modality: bad cell range");
    if (noise_scale < 0) throw ConfigError("modality: negative noise scale");
  }
};

// Images in [0,1] plus per-sample latent labels (generator parameters) used
// only by evaluation probes, never by training.
struct ToyDataset {
  size_t n = 0, channels = 0, height = 0, width = 0;
  std::vector<float> images;  // [n,c,H,W]
  std::vector<float> labels;  // one scalar per sample

  size_t pixels() const { return channels * height * width; }
  const float* image(size_t i) const { return images.data() + i * pixels(); }
  uint64_t content_hash() const { return fnv1a(images.data(), images.size() * sizeof(float)); }
};

ToyDataset make_modality(const ModalitySpec& spec, size_t n);

// Disjoint exhaustive split by shuffled index; train size = floor(ratio * n).
std::pair<ToyDataset, ToyDataset> split(const ToyDataset& d, double ratio, uint64_t seed);

void dataset_to_bundle(const ToyDataset& d, Bundle& b, const std::string& prefix = "");
ToyDataset dataset_from_bundle(const Bundle& b, const std::string& prefix = "");

// 8-bit PGM preview, [0,1] quantized round-half-up.
void write_pgm(const std::string& path, const float* img, size_t h, size_t w);

}  // namespace invcoss
