// Command-line surface for the continual pre-training lab: per-task
// pretraining with statistics capture, data-free synthesis from a
// checkpoint+archive pair, multi-task sequences, and report generation.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "invcoss/config.hpp"

namespace fs = std::filesystem;
using namespace invcoss;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitFingerprint = 4;
constexpr int kExitMissing = 5;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write " + path.string());
  f << text;
}

// Run-directory lifecycle: advisory lock plus a FAILED sentinel that is
// removed only on success.
class RunDir {
 public:
  explicit RunDir(const std::string& out) : dir_(out) {
    if (out.empty()) throw ConfigError("--out directory is required");
    fs::create_directories(dir_);
    lock_ = dir_ / ".lock";
    if (fs::exists(lock_)) {
      throw ConfigError("run directory is locked by another command: " + dir_.string());
    }
    write_text(lock_, "locked\n");
    write_text(dir_ / "FAILED", "incomplete run\n");
  }

  ~RunDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }

  void succeed() {
    std::error_code ec;
    fs::remove(dir_ / "FAILED", ec);
  }

  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
  fs::path lock_;
};

struct CommonFlags {
  std::string config_path;
  std::string out;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string regime;
  double ratio = -1.0;
  bool ratio_set = false;
  std::vector<std::string> ablate;
};

FullConfig load_with_overrides(const CommonFlags& f) {
  FullConfig cfg = load_config(f.config_path);
  if (f.seed_set) cfg.seed = f.seed;
  if (!f.regime.empty()) cfg.regime = regime_from_name(f.regime);
  if (f.ratio_set) cfg.stage.buffer_ratio = f.ratio;
  for (const auto& a : f.ablate) {
    if (a == "img") {
      cfg.inversion.ablate_img = true;
    } else if (a == "rep") {
      cfg.inversion.ablate_rep = true;
    } else if (a == "cache") {
      cfg.inversion.ablate_cache = true;
    } else {
      throw ConfigError("--ablate: unknown axis '" + a + "' (expected img, rep or cache)");
    }
  }
  return cfg;
}

std::string pretrain_trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "epoch,step,lr,loss\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", r.epoch + 1, r.step, r.lr, r.loss);
    out += buf;
  }
  return out;
}

std::string inversion_trace_csv(const std::vector<InversionTraceRow>& rows) {
  std::string out = "step,batch,L_task,L_norm,L_img,L_rep,total\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.batch, r.task,
                  r.norm, r.img, r.rep, r.total);
    out += buf;
  }
  return out;
}

std::string stage_loss_csv(const std::vector<double>& epoch_losses) {
  std::string out = "epoch,mean_loss\n";
  char buf[64];
  for (size_t i = 0; i < epoch_losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, epoch_losses[i]);
    out += buf;
  }
  return out;
}

void write_previews(const fs::path& dir, const std::vector<float>& images, size_t count,
                    size_t channels, size_t h, size_t w, size_t cap) {
  size_t n = std::min(count, cap);
  for (size_t i = 0; i < n; ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "preview_%03zu.pgm", i);
    // grayscale previews use the first channel
    write_pgm((dir / name).string(), images.data() + i * channels * h * w, h, w);
  }
}

int cmd_pretrain(const CommonFlags& flags) {
  FullConfig cfg = load_with_overrides(flags);
  RunDir run(flags.out);
  write_text(run.path() / "config.echo.txt", echo_config(cfg));

  ModalitySpec spec = task_modality(cfg, cfg.data_kind);
  spec.seed = Rng(cfg.seed).child("data." + cfg.data_kind).seed();
  ToyDataset full = make_modality(spec, cfg.data_n);
  auto [train, heldout] = split(full, cfg.data_split, Rng(cfg.seed).child("split").seed());

  MimModel<float> model(cfg.encoder, Rng(cfg.seed).child("init"));
  std::vector<TraceRow> trace;
  pretrain(model, train.images, train.n, cfg.pretrain, Rng(cfg.seed).child("pretrain"), &trace);
  StatsArchive<float> archive =
      capture_stats(model, train.images, train.n, cfg.stats_batch, cfg.data_kind);

  checkpoint_to_bundle(model).write((run.path() / "checkpoint.ivcs").string());
  Bundle sb;
  stats_to_bundle(archive, sb);
  sb.write((run.path() / "stats.ivcs").string());
  write_text(run.path() / "loss.csv", pretrain_trace_csv(trace));
  Bundle db;
  dataset_to_bundle(train, db);
  db.write((run.path() / "train_data.ivcs").string());

  run.succeed();
  return 0;
}

int cmd_invert(const CommonFlags& flags, const std::string& checkpoint_path,
               const std::string& stats_path, size_t preview_cap) {
  FullConfig cfg = load_with_overrides(flags);
  RunDir run(flags.out);
  write_text(run.path() / "config.echo.txt", echo_config(cfg));

  MimModel<float> model = model_from_bundle(Bundle::read(checkpoint_path));
  StatsArchive<float> archive = stats_from_bundle<float>(Bundle::read(stats_path));
  if (archive.fingerprint != model.config().fingerprint()) {
    throw FingerprintError("stats archive was not captured from this checkpoint");
  }
  GeneratorConfig gcfg = cfg.generator;
  gcfg.out_hw = model.config().image;
  gcfg.out_channels = model.config().channels;
  SyntheticDataset syn =
      invert_task(model, archive, cfg.inversion, gcfg, Rng(cfg.seed).child("invert"));

  Bundle out;
  out.add("images", {syn.size(), syn.channels, syn.height, syn.width}, syn.images);
  out.add("features", {syn.size(), syn.feature_dim}, syn.pool_rows);
  out.add_string("task.id", archive.task);
  out.write((run.path() / "synthetic.ivcs").string());
  write_text(run.path() / "trace.csv", inversion_trace_csv(syn.trace));
  write_previews(run.path(), syn.images, syn.size(), syn.channels, syn.height, syn.width,
                 preview_cap);

  run.succeed();
  return 0;
}

int cmd_continual(const CommonFlags& flags) {
  FullConfig cfg = load_with_overrides(flags);
  RunDir run(flags.out);
  write_text(run.path() / "config.echo.txt", echo_config(cfg));

  SequenceConfig seq = to_sequence_config(cfg);
  SequenceResult result = run_sequence(seq);

  for (size_t s = 0; s < result.stages.size(); ++s) {
    const StageRecord& rec = result.stages[s];
    fs::path sd = run.path() / ("stage" + std::to_string(s + 1));
    fs::create_directories(sd);
    checkpoint_to_bundle(rec.model).write((sd / "checkpoint.ivcs").string());
    Bundle sb;
    stats_to_bundle(rec.archive, sb);
    sb.write((sd / "stats.ivcs").string());
    write_text(sd / "loss.csv", stage_loss_csv(rec.epoch_losses));
    if (!rec.buffer.empty()) {
      Bundle bb;
      buffer_to_bundle(rec.buffer, bb);
      bb.write((sd / "buffer.ivcs").string());
      write_text(sd / "buffer_manifest.csv", buffer_manifest_csv(rec.buffer));
    }
    if (seq.regime != Regime::joint) {
      // Replay-equivalent raw buffer, serialized for storage accounting.
      ToyDataset train = task_split(seq, s).first;
      size_t keep = round_half_up(seq.stage.buffer_ratio * static_cast<double>(train.n));
      keep = std::max<size_t>(1, std::min(keep, train.n));
      ToyDataset ref;
      ref.n = keep;
      ref.channels = train.channels;
      ref.height = train.height;
      ref.width = train.width;
      ref.images.assign(train.images.begin(),
                        train.images.begin() + static_cast<long>(keep * train.pixels()));
      ref.labels.assign(train.labels.begin(), train.labels.begin() + static_cast<long>(keep));
      Bundle rb;
      dataset_to_bundle(ref, rb);
      rb.write((sd / "raw_buffer_ref.ivcs").string());
    }
  }

  RetentionMatrix retention = evaluate_sequence(seq, result);
  write_text(run.path() / "retention.csv", retention_csv(retention, regime_name(seq.regime)));

  if (seq.regime != Regime::joint) {
    std::vector<StorageItem> items;
    for (size_t s = 0; s < result.stages.size(); ++s) {
      fs::path sd = run.path() / ("stage" + std::to_string(s + 1));
      items.push_back({result.stages[s].task_id, (sd / "stats.ivcs").string(),
                       (sd / "raw_buffer_ref.ivcs").string()});
    }
    write_text(run.path() / "storage.csv", storage_csv(storage_report(items)));
  }

  run.succeed();
  return 0;
}

int cmd_eval(const std::string& run_dir) {
  fs::path dir(run_dir);
  if (!fs::exists(dir / "config.echo.txt")) {
    throw MissingArtifactError("eval: missing config echo in " + run_dir);
  }
  FullConfig cfg = load_config((dir / "config.echo.txt").string());
  SequenceConfig seq = to_sequence_config(cfg);

  std::vector<MimModel<float>> models;
  for (size_t s = 1;; ++s) {
    fs::path ck = dir / ("stage" + std::to_string(s)) / "checkpoint.ivcs";
    if (!fs::exists(ck)) break;
    models.push_back(model_from_bundle(Bundle::read(ck.string())));
  }
  if (models.empty()) throw MissingArtifactError("eval: no stage checkpoints in " + run_dir);

  std::vector<ToyDataset> heldouts;
  std::vector<const ToyDataset*> hp;
  std::vector<std::string> ids;
  for (size_t t = 0; t < seq.tasks.size(); ++t) {
    heldouts.push_back(task_split(seq, t).second);
  }
  for (size_t t = 0; t < seq.tasks.size(); ++t) {
    hp.push_back(&heldouts[t]);
    ids.push_back(seq.tasks[t].id);
  }
  std::vector<const MimModel<float>*> mp;
  for (const auto& m : models) mp.push_back(&m);
  uint64_t mask_seed = Rng(seq.seed).child("eval.mask").seed();
  RetentionMatrix matrix =
      retention_eval(mp, hp, ids, seq.eval_mask_ratio, mask_seed, seq.stage.batch);
  write_text(dir / "retention.csv", retention_csv(matrix, regime_name(seq.regime)));
  return 0;
}

int cmd_storage_report(const std::string& run_dir) {
  fs::path dir(run_dir);
  std::vector<StorageItem> items;
  for (size_t s = 1;; ++s) {
    fs::path sd = dir / ("stage" + std::to_string(s));
    if (!fs::exists(sd)) break;
    std::string task = "stage" + std::to_string(s);
    fs::path stats = sd / "stats.ivcs";
    fs::path raw = sd / "raw_buffer_ref.ivcs";
    if (!fs::exists(stats) || !fs::exists(raw)) {
      throw MissingArtifactError("storage-report: missing artifacts in " + sd.string());
    }
    items.push_back({task, stats.string(), raw.string()});
  }
  if (items.empty()) {
    throw MissingArtifactError("storage-report: no stage artifacts in " + run_dir);
  }
  write_text(dir / "storage.csv", storage_csv(storage_report(items)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inversion-driven continual self-supervised learning lab"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint_path, stats_path, run_dir;
  size_t preview_cap = 16;

  auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
    cmd->add_option("--config", flags.config_path, "Run configuration file")->required();
    if (needs_out) cmd->add_option("--out", flags.out, "Run directory")->required();
    cmd->add_option_function<uint64_t>(
        "--seed", [&](uint64_t v) { flags.seed = v; flags.seed_set = true; },
        "Override the config seed");
  };

  CLI::App* pre = app.add_subcommand("pretrain", "Train one task and capture its statistics");
  add_common(pre);

  CLI::App* inv = app.add_subcommand("invert", "Synthesize a task from checkpoint + statistics");
  add_common(inv);
  inv->add_option("--checkpoint", checkpoint_path, "Checkpoint bundle")->required();
  inv->add_option("--stats", stats_path, "Statistics archive bundle")->required();
  inv->add_option("--previews", preview_cap, "Preview image cap");
  inv->add_option("--ablate", flags.ablate, "Disable a term: img, rep or cache");

  CLI::App* cont = app.add_subcommand("continual", "Run a multi-task sequence");
  add_common(cont);
  cont->add_option("--regime", flags.regime, "invcoss, seqssl or joint");
  cont->add_option_function<double>(
      "--ratio", [&](double v) { flags.ratio = v; flags.ratio_set = true; },
      "Buffer ratio override");
  cont->add_option("--ablate", flags.ablate, "Disable a term: img, rep or cache");

  CLI::App* ev = app.add_subcommand("eval", "Recompute retention for a finished run");
  ev->add_option("--run", run_dir, "Run directory")->required();

  CLI::App* sr = app.add_subcommand("storage-report", "Measure stats vs raw-buffer bytes");
  sr->add_option("--run", run_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(flags);
    if (inv->parsed()) return cmd_invert(flags, checkpoint_path, stats_path, preview_cap);
    if (cont->parsed()) return cmd_continual(flags);
    if (ev->parsed()) return cmd_eval(run_dir);
    if (sr->parsed()) return cmd_storage_report(run_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FingerprintError& e) {
    std::cerr << "fingerprint error: " << e.what() << "\n";
    return kExitFingerprint;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
