#include "invcoss/pipeline.hpp"

#include <cstdio>

namespace invcoss {

void SequenceConfig::validate() const {
  encoder.validate();
  stage.validate();
  inversion.validate();
  generator.validate();
  if (tasks.empty()) throw ConfigError("sequence: at least one task required");
  for (const auto& t : tasks) t.validate();
  if (split_ratio <= 0.0 || split_ratio >= 1.0) throw ConfigError("sequence: bad split ratio");
  if (generator.out_hw != encoder.image || generator.out_channels != encoder.channels) {
    throw ConfigError("sequence: generator output does not match encoder input");
  }
}

ToyDataset task_dataset(const SequenceConfig& cfg, size_t task_idx) {
  if (task_idx >= cfg.tasks.size()) throw ConfigError("task index out of range");
  ModalitySpec spec = cfg.tasks[task_idx].modality;
  // Data depends on the master seed and the task id, never on order or regime.
  spec.seed = Rng(cfg.seed).child("data." + cfg.tasks[task_idx].id).seed();
  return make_modality(spec, cfg.tasks[task_idx].n);
}

std::pair<ToyDataset, ToyDataset> task_split(const SequenceConfig& cfg, size_t task_idx) {
  ToyDataset full = task_dataset(cfg, task_idx);
  uint64_t s = Rng(cfg.seed).child("split." + cfg.tasks[task_idx].id).seed();
  return split(full, cfg.split_ratio, s);
}

StageRecord run_stage(const SequenceConfig& cfg, size_t stage_idx,
                      const MimModel<float>* prev_model,
                      const std::vector<PrevTaskArtifacts<float>>& prev_artifacts,
                      const ToyDataset& current_train) {
  cfg.validate();
  if (stage_idx >= cfg.tasks.size()) throw ConfigError("run_stage: stage index out of range");
  Rng stage_rng = Rng(cfg.seed).child("stage", stage_idx);

  StageConfig sc = cfg.stage;
  SyntheticBuffer buffer;
  if (cfg.regime == Regime::invcoss && stage_idx > 0) {
    if (prev_artifacts.size() != stage_idx) {
      throw MissingArtifactError("run_stage: stage " + std::to_string(stage_idx + 1) + " needs " +
                                 std::to_string(stage_idx) + " previous artifacts, got " +
                                 std::to_string(prev_artifacts.size()));
    }
    buffer = build_buffer(prev_artifacts, sc.buffer_ratio, cfg.inversion, cfg.generator,
                          stage_rng.child("buffer"));
  }

  StageResult<float> trained = [&] {
    if (stage_idx == 0) {
      MimModel<float> fresh(cfg.encoder, Rng(cfg.seed).child("init"));
      return continual_stage(fresh, current_train.images, current_train.n, SyntheticBuffer{}, sc,
                             stage_rng.child("train"));
    }
    if (!prev_model) throw MissingArtifactError("run_stage: missing previous checkpoint");
    return continual_stage(*prev_model, current_train.images, current_train.n, buffer, sc,
                           stage_rng.child("train"));
  }();

  StageRecord rec{cfg.tasks[stage_idx].id, std::move(trained.model), {}, std::move(buffer),
                  std::move(trained.epoch_losses)};
  rec.archive = capture_stats(rec.model, current_train.images, current_train.n, cfg.stats_batch,
                              rec.task_id);
  return rec;
}

SequenceResult run_sequence(const SequenceConfig& cfg) {
  cfg.validate();
  SequenceResult result;

  if (cfg.regime == Regime::joint) {
    // Single training run over the concatenation of all task datasets.
    std::vector<float> images;
    size_t n = 0;
    for (size_t t = 0; t < cfg.tasks.size(); ++t) {
      ToyDataset train = task_split(cfg, t).first;
      images.insert(images.end(), train.images.begin(), train.images.end());
      n += train.n;
    }
    MimModel<float> model(cfg.encoder, Rng(cfg.seed).child("init"));
    StageResult<float> trained = continual_stage(model, images, n, SyntheticBuffer{}, cfg.stage,
                                                 Rng(cfg.seed).child("stage", 0).child("train"));
    StageRecord rec{"joint", std::move(trained.model), {}, {}, std::move(trained.epoch_losses)};
    rec.archive =
        capture_stats(rec.model, images, n, cfg.stats_batch, rec.task_id);
    result.stages.push_back(std::move(rec));
    return result;
  }

  std::vector<PrevTaskArtifacts<float>> artifacts;
  const MimModel<float>* prev = nullptr;
  for (size_t t = 0; t < cfg.tasks.size(); ++t) {
    ToyDataset train = task_split(cfg, t).first;
    StageRecord rec = run_stage(cfg, t, prev, artifacts, train);
    artifacts.push_back({rec.model.clone(), rec.archive});
    result.stages.push_back(std::move(rec));
    prev = &result.stages.back().model;
  }
  return result;
}

RetentionMatrix evaluate_sequence(const SequenceConfig& cfg, const SequenceResult& result) {
  std::vector<ToyDataset> heldouts;
  heldouts.reserve(cfg.tasks.size());
  for (size_t t = 0; t < cfg.tasks.size(); ++t) heldouts.push_back(task_split(cfg, t).second);
  std::vector<const ToyDataset*> hp;
  std::vector<std::string> ids;
  for (size_t t = 0; t < cfg.tasks.size(); ++t) {
    hp.push_back(&heldouts[t]);
    ids.push_back(cfg.tasks[t].id);
  }
  std::vector<const MimModel<float>*> models;
  for (const auto& s : result.stages) models.push_back(&s.model);
  uint64_t mask_seed = Rng(cfg.seed).child("eval.mask").seed();
  return retention_eval(models, hp, ids, cfg.eval_mask_ratio, mask_seed, cfg.stage.batch);
}

std::vector<std::pair<double, RetentionMatrix>> sample_size_sweep(
    const SequenceConfig& base, const std::vector<double>& ratios) {
  std::vector<std::pair<double, RetentionMatrix>> out;
  for (double r : ratios) {
    if (r <= 0.0 || r > 1.0) throw ConfigError("sweep: ratio outside (0,1]");
    SequenceConfig cfg = base;
    cfg.regime = Regime::invcoss;
    cfg.stage.buffer_ratio = r;
    SequenceResult res = run_sequence(cfg);
    out.emplace_back(r, evaluate_sequence(cfg, res));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

Bundle checkpoint_to_bundle(const MimModel<float>& model) {
  const MimConfig& c = model.config();
  Bundle b;
  b.add("config",
        {7},
        {static_cast<float>(c.image), static_cast<float>(c.patch), static_cast<float>(c.channels),
         static_cast<float>(c.dim), static_cast<float>(c.depth), static_cast<float>(c.heads),
         static_cast<float>(c.mlp_hidden())});
  b.add_string("fingerprint", fingerprint_hex(c.fingerprint()));
  for (const auto& [name, p] : model.parameters()) {
    std::vector<uint64_t> dims;
    for (size_t d : p.shape()) dims.push_back(d);
    if (dims.empty()) dims.push_back(1);
    b.add("param." + name, std::move(dims), p.values());
  }
  return b;
}

MimModel<float> model_from_bundle(const Bundle& b) {
  const auto& cr = b.get("config");
  if (cr.data.size() != 7) throw FormatError("checkpoint: bad config record");
  MimConfig c;
  c.image = static_cast<size_t>(cr.data[0]);
  c.patch = static_cast<size_t>(cr.data[1]);
  c.channels = static_cast<size_t>(cr.data[2]);
  c.dim = static_cast<size_t>(cr.data[3]);
  c.depth = static_cast<size_t>(cr.data[4]);
  c.heads = static_cast<size_t>(cr.data[5]);
  c.mlp_ratio = static_cast<double>(cr.data[6]) / static_cast<double>(c.dim);
  MimModel<float> model(c, Rng(0));
  uint64_t fp = std::stoull(b.get_string("fingerprint"), nullptr, 16);
  if (fp != c.fingerprint()) throw FingerprintError("checkpoint: fingerprint mismatch");
  for (auto& [name, p] : model.parameters()) {
    const auto& rec = b.get("param." + name);
    if (rec.data.size() != p.numel()) {
      throw FormatError("checkpoint: parameter '" + name + "' size mismatch");
    }
    p.values() = rec.data;
  }
  return model;
}

void buffer_to_bundle(const SyntheticBuffer& buf, Bundle& b) {
  b.add_scalar("parts", static_cast<float>(buf.parts.size()));
  for (size_t i = 0; i < buf.parts.size(); ++i) {
    const auto& p = buf.parts[i];
    std::string prefix = "part" + std::to_string(i) + ".";
    b.add_string(prefix + "task", p.task_id);
    b.add(prefix + "images", {p.count, buf.channels, buf.height, buf.width}, p.images);
    b.add(prefix + "features", {p.count, p.feature_dim}, p.pool_rows);
  }
}

SyntheticBuffer buffer_from_bundle(const Bundle& b) {
  SyntheticBuffer buf;
  size_t parts = static_cast<size_t>(b.get("parts").data[0]);
  for (size_t i = 0; i < parts; ++i) {
    std::string prefix = "part" + std::to_string(i) + ".";
    const auto& imgs = b.get(prefix + "images");
    SyntheticBuffer::Part p;
    p.task_id = b.get_string(prefix + "task");
    p.count = static_cast<size_t>(imgs.dims[0]);
    buf.channels = static_cast<size_t>(imgs.dims[1]);
    buf.height = static_cast<size_t>(imgs.dims[2]);
    buf.width = static_cast<size_t>(imgs.dims[3]);
    p.images = imgs.data;
    const auto& feats = b.get(prefix + "features");
    p.feature_dim = static_cast<size_t>(feats.dims[1]);
    p.pool_rows = feats.data;
    buf.parts.push_back(std::move(p));
  }
  return buf;
}

std::string buffer_manifest_csv(const SyntheticBuffer& buf) {
  std::string out = "task_id,count,content_hash\n";
  char line[128];
  for (const auto& p : buf.parts) {
    uint64_t h = fnv1a(p.images.data(), p.images.size() * sizeof(float));
    std::snprintf(line, sizeof line, "%s,%zu,%016llx\n", p.task_id.c_str(), p.count,
                  static_cast<unsigned long long>(h));
    out += line;
  }
  return out;
}

}  // namespace invcoss
