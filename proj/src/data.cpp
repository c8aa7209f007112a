#include "invcoss/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace invcoss {

ModalityKind modality_from_name(const std::string& name) {
  if (name == "blobs") return ModalityKind::blobs;
  if (name == "stripes") return ModalityKind::stripes;
  if (name == "checker" || name == "checker-noise" || name == "checker_noise") {
    return ModalityKind::checker_noise;
  }
  throw ConfigError("modality: unknown kind '" + name + "'");
}

std::string modality_name(ModalityKind k) {
  switch (k) {
    case ModalityKind::blobs:
      return "blobs";
    case ModalityKind::stripes:
      return "stripes";
    case ModalityKind::checker_noise:
      return "checker";
  }
  return "?";
}

namespace {

void render_blobs(const ModalitySpec& s, Rng& rng, float* img, float* label) {
  size_t res = s.resolution;
  size_t k = s.blob_min + static_cast<size_t>(rng.below(s.blob_max - s.blob_min + 1));
  std::fill(img, img + res * res, 0.0f);
  double margin = static_cast<double>(res) * 0.15;
  for (size_t b = 0; b < k; ++b) {
    double cx = rng.uniform(margin, static_cast<double>(res) - margin);
    double cy = rng.uniform(margin, static_cast<double>(res) - margin);
    double sigma = rng.uniform(s.blob_sigma_min, s.blob_sigma_max);
    double amp = rng.uniform(0.7, 1.0);
    double inv = 1.0 / (2.0 * sigma * sigma);
    for (size_t y = 0; y < res; ++y) {
      for (size_t x = 0; x < res; ++x) {
        double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        img[y * res + x] += static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) * inv));
      }
    }
  }
  for (size_t i = 0; i < res * res; ++i) img[i] = std::min(1.0f, img[i]);
  *label = static_cast<float>(k);
}

void render_stripes(const ModalitySpec& s, Rng& rng, float* img, float* label) {
  size_t res = s.resolution;
  size_t f = s.freq_min + static_cast<size_t>(rng.below(s.freq_max - s.freq_min + 1));
  double theta = rng.uniform(0.0, 3.14159265358979323846);
  double phase = rng.uniform(0.0, 6.283185307179586477);
  double ct = std::cos(theta), st = std::sin(theta);
  double two_pi_f = 6.283185307179586477 * static_cast<double>(f);
  for (size_t y = 0; y < res; ++y) {
    for (size_t x = 0; x < res; ++x) {
      double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) /
                 static_cast<double>(res);
      img[y * res + x] = static_cast<float>(0.5 + 0.45 * std::sin(two_pi_f * u + phase));
    }
  }
  *label = static_cast<float>(f);
}

void render_checker(const ModalitySpec& s, Rng& rng, float* img, float* label) {
  size_t res = s.resolution;
  // cell size drawn from powers-of-two-ish range [cell_min, cell_max]
  size_t span = s.cell_max - s.cell_min + 1;
  size_t cell = s.cell_min + static_cast<size_t>(rng.below(span));
  size_t ox = static_cast<size_t>(rng.below(cell));
  size_t oy = static_cast<size_t>(rng.below(cell));
  double lo = rng.uniform(0.15, 0.3), hi = rng.uniform(0.7, 0.85);
  for (size_t y = 0; y < res; ++y) {
    for (size_t x = 0; x < res; ++x) {
      bool on = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 0;
      double v = (on ? hi : lo) + rng.uniform(-s.noise_scale, s.noise_scale);
      img[y * res + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  *label = static_cast<float>(cell);
}

}  // namespace

ToyDataset make_modality(const ModalitySpec& spec, size_t n) {
  spec.validate();
  if (n == 0) throw ConfigError("make_modality: n must be >= 1");
  if (spec.channels != 1) throw ConfigError("make_modality: only grayscale is generated");
  ToyDataset d;
  d.n = n;
  d.channels = spec.channels;
  d.height = spec.resolution;
  d.width = spec.resolution;
  d.images.resize(n * d.pixels());
  d.labels.resize(n);
  Rng rng = Rng(spec.seed).child("modality." + modality_name(spec.kind));
  for (size_t i = 0; i < n; ++i) {
    Rng r = rng.child("sample", i);
    float* img = d.images.data() + i * d.pixels();
    switch (spec.kind) {
      case ModalityKind::blobs:
        render_blobs(spec, r, img, &d.labels[i]);
        break;
      case ModalityKind::stripes:
        render_stripes(spec, r, img, &d.labels[i]);
        break;
      case ModalityKind::checker_noise:
        render_checker(spec, r, img, &d.labels[i]);
        break;
    }
  }
  return d;
}

std::pair<ToyDataset, ToyDataset> split(const ToyDataset& d, double ratio, uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) {
    throw ConfigError("split: ratio " + std::to_string(ratio) + " outside (0,1)");
  }
  size_t train_n = static_cast<size_t>(ratio * static_cast<double>(d.n));
  if (train_n == 0 || train_n == d.n) throw ConfigError("split: degenerate split sizes");
  std::vector<size_t> idx(d.n);
  for (size_t i = 0; i < d.n; ++i) idx[i] = i;
  Rng rng = Rng(seed).child("split");
  rng.shuffle(idx.begin(), idx.end());

  auto take = [&](size_t lo, size_t hi) {
    ToyDataset out;
    out.n = hi - lo;
    out.channels = d.channels;
    out.height = d.height;
    out.width = d.width;
    out.images.reserve(out.n * d.pixels());
    out.labels.reserve(out.n);
    for (size_t i = lo; i < hi; ++i) {
      const float* src = d.image(idx[i]);
      out.images.insert(out.images.end(), src, src + d.pixels());
      out.labels.push_back(d.labels[idx[i]]);
    }
    return out;
  };
  return {take(0, train_n), take(train_n, d.n)};
}

void dataset_to_bundle(const ToyDataset& d, Bundle& b, const std::string& prefix) {
  b.add(prefix + "images", {d.n, d.channels, d.height, d.width}, d.images);
  b.add(prefix + "labels", {d.n}, d.labels);
}

ToyDataset dataset_from_bundle(const Bundle& b, const std::string& prefix) {
  const auto& rec = b.get(prefix + "images");
  if (rec.dims.size() != 4) throw FormatError("dataset bundle: images must be [N,c,H,W]");
  ToyDataset d;
  d.n = static_cast<size_t>(rec.dims[0]);
  d.channels = static_cast<size_t>(rec.dims[1]);
  d.height = static_cast<size_t>(rec.dims[2]);
  d.width = static_cast<size_t>(rec.dims[3]);
  d.images = rec.data;
  d.labels = b.get(prefix + "labels").data;
  return d;
}

void write_pgm(const std::string& path, const float* img, size_t h, size_t w) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("write_pgm: cannot open " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (size_t i = 0; i < h * w; ++i) {
    double v = std::clamp(static_cast<double>(img[i]), 0.0, 1.0);
    // round half up
    int q = static_cast<int>(std::floor(v * 255.0 + 0.5));
    f.put(static_cast<char>(std::clamp(q, 0, 255)));
  }
}

}  // namespace invcoss
