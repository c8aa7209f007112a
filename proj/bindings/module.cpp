// Python bindings for the main operations: toy modalities, masked-image
// pretraining, statistics capture and matching, the dual-stream generator,
// inversion losses, and the checkpoint container.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "invcoss/config.hpp"

namespace py = pybind11;
using namespace invcoss;

namespace {

Tensor<float> tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<size_t>(a.shape(i));
  std::vector<float> v(a.data(), a.data() + a.size());
  return Tensor<float>::from(std::move(shape), std::move(v));
}

py::array_t<float> array_from_values(const std::vector<float>& v, const std::vector<size_t>& shape) {
  std::vector<py::ssize_t> s(shape.begin(), shape.end());
  py::array_t<float> out(s);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<float> array_from_tensor(const Tensor<float>& t) {
  return array_from_values(t.values(), t.shape());
}

class PyEncoder {
 public:
  PyEncoder(size_t image, size_t patch, size_t channels, size_t dim, size_t depth, size_t heads,
            uint64_t seed)
      : model_(make_config(image, patch, channels, dim, depth, heads), Rng(seed).child("init")) {}

  static MimConfig make_config(size_t image, size_t patch, size_t channels, size_t dim,
                               size_t depth, size_t heads) {
    MimConfig c;
    c.image = image;
    c.patch = patch;
    c.channels = channels;
    c.dim = dim;
    c.depth = depth;
    c.heads = heads;
    c.validate();
    return c;
  }

  double mim_loss(const py::array_t<float>& x, double ratio, uint64_t mask_seed) const {
    NoGradGuard guard;
    Rng rng(mask_seed);
    PatchMask m = sample_mask(model_.config().grid(), model_.config().grid(), ratio, rng);
    return static_cast<double>(mim_forward(model_, tensor_from_array(x), m).loss.item());
  }

  py::array_t<float> reconstruct(const py::array_t<float>& x) const {
    NoGradGuard guard;
    return array_from_tensor(model_.forward(tensor_from_array(x)).recon);
  }

  std::vector<py::array_t<float>> features(const py::array_t<float>& x) const {
    std::vector<py::array_t<float>> out;
    for (const auto& b : block_features(model_, tensor_from_array(x))) {
      out.push_back(array_from_tensor(b));
    }
    return out;
  }

  std::vector<double> fit(const py::array_t<float>& images, size_t epochs, size_t batch,
                          double lr, double mask_ratio, uint64_t seed) {
    if (images.ndim() != 4) throw ShapeError("fit: images must be [N,c,H,W]");
    std::vector<float> store(images.data(), images.data() + images.size());
    PretrainSchedule sched;
    sched.epochs = epochs;
    sched.batch = batch;
    sched.lr = lr;
    sched.mask_ratio = mask_ratio;
    return pretrain(model_, store, static_cast<size_t>(images.shape(0)), sched, Rng(seed));
  }

  std::pair<std::vector<py::array_t<float>>, std::vector<py::array_t<float>>> capture(
      const py::array_t<float>& images, size_t batch) const {
    std::vector<float> store(images.data(), images.data() + images.size());
    StatsArchive<float> a =
        capture_stats(model_, store, static_cast<size_t>(images.shape(0)), batch, "py");
    std::vector<py::array_t<float>> means, vars;
    for (const auto& b : a.blocks) {
      means.push_back(array_from_values(
          std::vector<float>(b.mean.begin(), b.mean.end()), {b.rows, b.cols}));
      vars.push_back(array_from_values(std::vector<float>(b.var.begin(), b.var.end()),
                                       {b.rows, b.cols}));
    }
    return {means, vars};
  }

  uint64_t fingerprint() const { return model_.config().fingerprint(); }

 private:
  MimModel<float> model_;
};

class PyGenerator {
 public:
  PyGenerator(size_t latent, size_t bottleneck, std::vector<size_t> channels, size_t out_hw,
              size_t out_channels, bool memory_cache, uint64_t seed)
      : rng_(Rng(seed).child("gen")), cfg_(make_config(latent, bottleneck, std::move(channels),
                                                       out_hw, out_channels, memory_cache)),
        g_(cfg_, rng_) {}

  static GeneratorConfig make_config(size_t latent, size_t bottleneck,
                                     std::vector<size_t> channels, size_t out_hw,
                                     size_t out_channels, bool memory_cache) {
    GeneratorConfig c;
    c.latent_dim = latent;
    c.bottleneck_hw = bottleneck;
    c.channels = std::move(channels);
    c.out_hw = out_hw;
    c.out_channels = out_channels;
    c.memory_cache = memory_cache;
    c.validate();
    return c;
  }

  py::array_t<float> generate(const py::array_t<float>& z) const {
    NoGradGuard guard;
    return array_from_tensor(g_.generate(tensor_from_array(z)));
  }

 private:
  Rng rng_;
  GeneratorConfig cfg_;
  InvUNet<float> g_;
};

class PyRunningStats {
 public:
  PyRunningStats(size_t rows, size_t cols) : state_(rows, cols) {}

  void update(const py::array_t<float, py::array::c_style | py::array::forcecast>& batch) {
    if (batch.ndim() != 3) throw ShapeError("update: expected [n,L,d]");
    welford_merge(state_, batch.data(), static_cast<size_t>(batch.shape(0)),
                  static_cast<size_t>(batch.shape(1)), static_cast<size_t>(batch.shape(2)));
  }

  py::array_t<float> mean() const {
    return array_from_values(state_.mean, {state_.rows, state_.cols});
  }
  py::array_t<float> var() const {
    return array_from_values(state_.var, {state_.rows, state_.cols});
  }
  uint64_t count() const { return state_.count; }

 private:
  LayerStats<float> state_;
};

double py_tv_loss(const py::array_t<float>& x) {
  NoGradGuard guard;
  return static_cast<double>(tv_loss(tensor_from_array(x)).item());
}

double py_repulsive_loss(const py::array_t<float>& feats, const py::array_t<float>& pool_rows) {
  NoGradGuard guard;
  if (pool_rows.ndim() != 2) throw ShapeError("repulsive_loss: pool must be [P,D]");
  FeaturePool pool(static_cast<size_t>(pool_rows.shape(1)),
                   static_cast<size_t>(pool_rows.shape(0)));
  for (py::ssize_t i = 0; i < pool_rows.shape(0); ++i) {
    pool.append(pool_rows.data() + i * pool_rows.shape(1));
  }
  return static_cast<double>(repulsive_loss(tensor_from_array(feats), pool).item());
}

double py_diversity(const py::array_t<float, py::array::c_style | py::array::forcecast>& rows) {
  if (rows.ndim() != 2) throw ShapeError("diversity: expected [n,d]");
  return diversity(rows.data(), static_cast<size_t>(rows.shape(0)),
                   static_cast<size_t>(rows.shape(1)));
}

py::array_t<uint8_t> py_sample_mask(size_t rows, size_t cols, double ratio, uint64_t seed) {
  Rng rng(seed);
  PatchMask m = sample_mask(rows, cols, ratio, rng);
  py::array_t<uint8_t> out({rows, cols});
  std::copy(m.grid.begin(), m.grid.end(), out.mutable_data());
  return out;
}

std::pair<py::array_t<float>, py::array_t<float>> py_make_modality(const std::string& kind,
                                                                   size_t n, uint64_t seed,
                                                                   size_t resolution) {
  ModalitySpec spec;
  spec.kind = modality_from_name(kind);
  spec.resolution = resolution;
  spec.seed = seed;
  ToyDataset d = make_modality(spec, n);
  return {array_from_values(d.images, {d.n, d.channels, d.height, d.width}),
          array_from_values(d.labels, {d.n})};
}

void py_bundle_write(const std::string& path, const py::dict& records) {
  Bundle b;
  for (auto item : records) {
    auto name = item.first.cast<std::string>();
    auto arr = item.second.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>();
    std::vector<uint64_t> dims(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) dims[i] = static_cast<uint64_t>(arr.shape(i));
    b.add(name, std::move(dims), std::vector<float>(arr.data(), arr.data() + arr.size()));
  }
  b.write(path);
}

py::dict py_bundle_read(const std::string& path) {
  Bundle b = Bundle::read(path);
  py::dict out;
  for (const auto& r : b.records()) {
    std::vector<size_t> shape(r.dims.begin(), r.dims.end());
    out[py::str(r.name)] = array_from_values(r.data, shape);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Inversion-driven continual self-supervised learning lab";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "CoreConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "CoreNumericError", PyExc_ArithmeticError);

  m.def("tv_loss", &py_tv_loss, py::arg("images"),
        "Total-variation prior: batch mean of absolute neighbor differences");
  m.def("repulsive_loss", &py_repulsive_loss, py::arg("features"), py::arg("pool"),
        "Mean squared cosine similarity between feature rows and pool rows");
  m.def("diversity", &py_diversity, py::arg("rows"),
        "Mean pairwise squared cosine similarity over rows");
  m.def("sample_mask", &py_sample_mask, py::arg("rows"), py::arg("cols"), py::arg("ratio"),
        py::arg("seed"), "Uniform patch mask with floor(ratio * rows * cols) ones");
  m.def("make_modality", &py_make_modality, py::arg("kind"), py::arg("n"), py::arg("seed") = 0,
        py::arg("resolution") = 32, "Procedural toy dataset: (images, labels)");
  m.def("bundle_write", &py_bundle_write, py::arg("path"), py::arg("records"));
  m.def("bundle_read", &py_bundle_read, py::arg("path"));

  py::class_<PyRunningStats>(m, "RunningStats")
      .def(py::init<size_t, size_t>(), py::arg("rows"), py::arg("cols"))
      .def("update", &PyRunningStats::update, py::arg("batch"))
      .def_property_readonly("mean", &PyRunningStats::mean)
      .def_property_readonly("var", &PyRunningStats::var)
      .def_property_readonly("count", &PyRunningStats::count);

  py::class_<PyEncoder>(m, "Encoder")
      .def(py::init<size_t, size_t, size_t, size_t, size_t, size_t, uint64_t>(),
           py::arg("image") = 32, py::arg("patch") = 4, py::arg("channels") = 1,
           py::arg("dim") = 64, py::arg("depth") = 4, py::arg("heads") = 4, py::arg("seed") = 0)
      .def("mim_loss", &PyEncoder::mim_loss, py::arg("images"), py::arg("ratio") = 0.75,
           py::arg("mask_seed") = 0)
      .def("reconstruct", &PyEncoder::reconstruct, py::arg("images"))
      .def("features", &PyEncoder::features, py::arg("images"))
      .def("fit", &PyEncoder::fit, py::arg("images"), py::arg("epochs") = 1,
           py::arg("batch") = 32, py::arg("lr") = 1e-3, py::arg("mask_ratio") = 0.75,
           py::arg("seed") = 0)
      .def("capture", &PyEncoder::capture, py::arg("images"), py::arg("batch") = 32)
      .def_property_readonly("fingerprint", &PyEncoder::fingerprint);

  py::class_<PyGenerator>(m, "Generator")
      .def(py::init<size_t, size_t, std::vector<size_t>, size_t, size_t, bool, uint64_t>(),
           py::arg("latent") = 128, py::arg("bottleneck") = 4,
           py::arg("channels") = std::vector<size_t>{16, 32, 64, 128}, py::arg("out_hw") = 32,
           py::arg("out_channels") = 1, py::arg("memory_cache") = true, py::arg("seed") = 0)
      .def("generate", &PyGenerator::generate, py::arg("z"));
}
