// Command line front end: data generation/import, pre-training, fine-tuning,
// evaluation and exports. Every invocation snapshots its effective
// configuration so runs can be reproduced bitwise from the snapshot alone.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "psgmae/checkpoint.hpp"
#include "psgmae/evaluation.hpp"
#include "psgmae/training.hpp"

namespace fs = std::filesystem;
using namespace psgmae;
using ordered = nlohmann::ordered_json;

namespace {

// 0 success, 2 invalid arguments, 3 missing/corrupt input,
// 4 configuration mismatch, 5 numerical divergence.
int exit_code_for(ErrKind kind) {
  switch (kind) {
    case ErrKind::InvalidConfig:
    case ErrKind::NotStochastic:
    case ErrKind::NonDivisibleLength:
    case ErrKind::TooFewPatches:
    case ErrKind::TooFewChannels:
      return 2;
    case ErrKind::IoFailure:
    case ErrKind::FormatViolation:
    case ErrKind::ChecksumMismatch:
    case ErrKind::TooFewEpochs:
    case ErrKind::TooFewSubjects:
    case ErrKind::MissingCategory:
    case ErrKind::LabelOutOfRange:
    case ErrKind::LengthMismatch:
    case ErrKind::EmptyChannel:
    case ErrKind::EmptyMatrix:
      return 3;
    case ErrKind::ConfigMismatch:
    case ErrKind::LabelModeMismatch:
    case ErrKind::DimensionMismatch:
    case ErrKind::ShapeMismatch:
      return 4;
    case ErrKind::NonFiniteActivation:
    case ErrKind::DivergenceDetected:
      return 5;
  }
  return 1;
}

// One run directory per invocation; concurrent runs must use distinct
// directories. The lock file is removed when the invocation ends.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        fail(ErrKind::IoFailure, "output directory is in use; remove " +
                                     path_.string() + " if the run is stale");
      fail(ErrKind::IoFailure, "cannot create lock file " + path_.string());
    }
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail(ErrKind::IoFailure, "cannot write " + path.string());
}

// The section header lets the top-level --config loader route the values
// back into the same subcommand on replay.
void write_snapshot(CLI::App* sub, const fs::path& out_dir) {
  write_text(out_dir / "snapshot.ini",
             "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false));
}

// Environment overrides (PSGMAE_<OPTION>, dashes as underscores) plus
// captured defaults so the snapshot INI round-trips every option.
void finalize_options(CLI::App* sub) {
  for (CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    opt->capture_default_str();
    std::string env = "PSGMAE_";
    for (const char ch : name)
      env += ch == '-' ? '_' : static_cast<char>(std::toupper(ch));
    opt->envname(env);
  }
}

ordered metrics_json(const MetricReport& rep) {
  ordered j;
  j["accuracy"] = rep.accuracy;
  j["macro_f1"] = rep.macro_f1;
  j["precision"] = std::vector<double>(rep.precision.begin(), rep.precision.end());
  j["recall"] = std::vector<double>(rep.recall.begin(), rep.recall.end());
  j["f1"] = std::vector<double>(rep.f1.begin(), rep.f1.end());
  std::vector<std::vector<int>> cm;
  for (long r = 0; r < rep.cm.counts.rows(); ++r) {
    std::vector<int> row;
    for (long c = 0; c < rep.cm.counts.cols(); ++c)
      row.push_back(rep.cm.counts(r, c));
    cm.push_back(std::move(row));
  }
  j["confusion"] = cm;
  return j;
}

std::vector<EpochRef> all_refs(const std::vector<Recording>& recs) {
  std::vector<EpochRef> refs;
  for (size_t r = 0; r < recs.size(); ++r)
    for (long e = 0; e < recs[r].epoch_count(); ++e)
      refs.push_back({static_cast<int>(r), e});
  return refs;
}

const std::vector<EpochRef>& pick_split(const Dataset& ds, const std::string& name,
                                        std::vector<EpochRef>& all_storage) {
  if (name == "train") return ds.split.train;
  if (name == "val") return ds.split.val;
  if (name == "test") return ds.split.test;
  if (name == "all") {
    all_storage = all_refs(ds.recordings);
    return all_storage;
  }
  fail(ErrKind::InvalidConfig, "unknown split '" + name + "'");
}

void require_labels(LabelMode mode, Task task) {
  const bool ok = mode == LabelMode::both ||
                  (task == Task::staging && mode == LabelMode::staging5) ||
                  (task == Task::osa && mode == LabelMode::osa2);
  require(ok, ErrKind::LabelModeMismatch,
          std::string("dataset labels do not cover the ") + task_name(task) +
              " task (label_mode=" + label_mode_name(mode) + ")");
}

// ---------------------------------------------------------------------------
// Shared option bundles
// ---------------------------------------------------------------------------

struct ModelOpts {
  int n_patch = 10;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int ff = 128;
  int dec_hidden = 128;
  std::vector<int> kernels{3, 5, 7};
  int head_channels = 32;
  int head_mlp_hidden = 64;
  double dropout = 0.1;

  void attach(CLI::App* sub) {
    sub->add_option("--n-patch", n_patch, "Subsegments per epoch");
    sub->add_option("--d-model", d_model, "Transformer width");
    sub->add_option("--layers", layers, "Encoder layers");
    sub->add_option("--heads", heads, "Attention heads");
    sub->add_option("--ff", ff, "Feed-forward width");
    sub->add_option("--dec-hidden", dec_hidden, "Decoder hidden width");
    sub->add_option("--kernels", kernels, "Head conv kernel sizes")->delimiter(',');
    sub->add_option("--head-channels", head_channels, "Channels per conv branch");
    sub->add_option("--head-mlp-hidden", head_mlp_hidden, "Head MLP hidden width");
    sub->add_option("--dropout", dropout, "Dropout probability");
  }

  ModelConfig to_config(int channels, long epoch_length) const {
    require(n_patch > 0 && epoch_length % n_patch == 0, ErrKind::NonDivisibleLength,
            "epoch length " + std::to_string(epoch_length) +
                " is not divisible by n_patch " + std::to_string(n_patch));
    ModelConfig cfg;
    cfg.c = channels;
    cfg.n_patch = n_patch;
    cfg.l_prime = static_cast<int>(epoch_length / n_patch);
    cfg.d_model = d_model;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.d_ff = ff;
    cfg.dec_hidden = dec_hidden;
    cfg.kernels = kernels;
    cfg.head_channels = head_channels;
    cfg.head_mlp_hidden = head_mlp_hidden;
    cfg.dropout = dropout;
    cfg.validate();
    return cfg;
  }
};

struct TrainOpts {
  std::string optimizer = "adam";
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.9;
  double clip_norm = 5.0;
  int batch_size = 32;
  long steps = 2000;
  long val_interval = 100;
  int patience = 0;
  double divergence_threshold = 1e6;
  long checkpoint_every = 0;
  uint64_t seed = 0;

  void attach(CLI::App* sub) {
    sub->add_option("--optimizer", optimizer, "adam or sgd");
    sub->add_option("--lr", lr, "Learning rate");
    sub->add_option("--beta1", beta1, "Adam beta1");
    sub->add_option("--beta2", beta2, "Adam beta2");
    sub->add_option("--adam-eps", adam_eps, "Adam epsilon");
    sub->add_option("--momentum", momentum, "SGD momentum");
    sub->add_option("--clip-norm", clip_norm, "Global gradient norm clip (0 = off)");
    sub->add_option("--batch-size", batch_size, "Epochs per optimizer step");
    sub->add_option("--steps", steps, "Optimizer steps");
    sub->add_option("--val-interval", val_interval, "Steps between validations");
    sub->add_option("--patience", patience,
                    "Stop after this many non-improving validations (0 = off)");
    sub->add_option("--divergence-threshold", divergence_threshold,
                    "Absolute loss bound before a run is flagged divergent");
    sub->add_option("--checkpoint-every", checkpoint_every,
                    "Also save step-NNNNNN.psgc every N steps (0 = off)");
    sub->add_option("--seed", seed, "Root seed for the run");
  }

  TrainConfig to_config() const {
    TrainConfig cfg;
    cfg.optimizer = optimizer_from_name(optimizer);
    cfg.lr = lr;
    cfg.beta1 = beta1;
    cfg.beta2 = beta2;
    cfg.adam_eps = adam_eps;
    cfg.momentum = momentum;
    cfg.clip_norm = clip_norm;
    cfg.batch_size = batch_size;
    cfg.max_steps = steps;
    cfg.val_interval = val_interval;
    cfg.patience = patience;
    cfg.divergence_threshold = divergence_threshold;
    cfg.checkpoint_every = checkpoint_every;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GenDataCmd {
  std::string out_dir;
  int subjects = 20;
  int epochs = 200;
  int channels = 5;
  int sampling_hz = 100;
  int epoch_seconds = 30;
  double event_rate = 0.1;
  std::string label_mode = "both";
  uint64_t seed = 0;

  int run(CLI::App* sub) const {
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    std::vector<Recording> recs;
    for (int s = 0; s < subjects; ++s) {
      SynthConfig cfg;
      cfg.channel_count = channels;
      cfg.epoch_count = epochs;
      cfg.sampling_hz = sampling_hz;
      cfg.epoch_seconds = epoch_seconds;
      cfg.event_rate = event_rate;
      cfg.label_mode = label_mode_from_name(label_mode);
      cfg.seed = derive_seed(seed, "subject", static_cast<uint64_t>(s));
      char id[32];
      std::snprintf(id, sizeof(id), "synth-%03d", s);
      cfg.subject_id = id;
      recs.push_back(generate_synthetic(cfg));
    }
    write_recording_set(recs, out_dir);
    std::cout << "wrote " << recs.size() << " recordings ("
              << recs.size() * static_cast<size_t>(epochs) << " epochs) to "
              << out_dir << "\n";
    return 0;
  }
};

struct ImportCmd {
  std::string sidecar;
  std::string out_dir;

  int run(CLI::App* sub) const {
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    const Recording rec = import_text_recording(sidecar);
    std::string name = rec.subject_id;
    for (char& ch : name)
      if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
    const fs::path out = fs::path(out_dir) / (name + ".psgr");
    write_recording(rec, out);
    std::cout << "imported " << rec.subject_id << ": " << rec.channels()
              << " channels, " << rec.epoch_count() << " epochs -> " << out
              << "\n";
    return 0;
  }
};

struct PretrainCmd {
  std::string data_dir;
  std::string out_dir;
  ModelOpts model;
  TrainOpts train;
  std::string center = "median";
  std::string recon_target = "visible";
  double margin_alpha = 1.0;
  bool no_iccl = false;
  double train_frac = 0.8;
  double val_frac = 0.1;

  int run(CLI::App* sub) const {
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    const CenterMode mode = center_mode_from_name(center);
    std::vector<Recording> recs = read_recording_set(data_dir);
    TrainConfig tcfg = train.to_config();
    Dataset ds = make_dataset(std::move(recs), mode, train_frac, val_frac,
                              derive_seed(tcfg.seed, "split"));
    const ModelConfig mcfg = model.to_config(ds.channels(), ds.epoch_length());
    tcfg.recon_target = recon_target_from_name(recon_target);
    tcfg.margin_alpha = margin_alpha;
    tcfg.use_iccl = !no_iccl;
    tcfg.log_path = fs::path(out_dir) / "run.ndjson";
    if (tcfg.checkpoint_every > 0) tcfg.checkpoint_dir = out_dir;

    const PretrainResult res = pretrain(mcfg, ds, tcfg);
    save_checkpoint(make_checkpoint(res.best_params, "pretrain", mode,
                                    tcfg.recon_target, margin_alpha, tcfg.seed),
                    fs::path(out_dir) / "best.psgc");
    save_checkpoint(make_checkpoint(res.params, "pretrain", mode,
                                    tcfg.recon_target, margin_alpha, tcfg.seed),
                    fs::path(out_dir) / "last.psgc");
    ordered report;
    report["steps_run"] = res.steps_run;
    report["final_train_loss"] = res.final_train_loss;
    report["best_val_loss"] = res.best_val;
    report["best_step"] = res.best_step;
    report["diverged"] = res.diverged;
    write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    if (res.diverged)
      fail(ErrKind::DivergenceDetected,
           "pre-training diverged at step " + std::to_string(res.steps_run));
    return 0;
  }
};

struct FinetuneCmd {
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  std::string task_str;
  TrainOpts train;
  bool freeze_encoder = false;
  int folds = 0;
  double train_frac = 0.8;
  double val_frac = 0.1;

  int run(CLI::App* sub) const {
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    const Task task = task_from_name(task_str);
    const Checkpoint ck = load_checkpoint(checkpoint);
    const ModelParams encoder = params_from_checkpoint(ck);
    std::vector<Recording> recs = read_recording_set(data_dir);
    require(!recs.empty(), ErrKind::TooFewEpochs, "no recordings in " + data_dir);
    require_labels(recs.front().label_mode, task);
    TrainConfig tcfg = train.to_config();

    ordered report;
    if (folds > 0) {
      tcfg.log_path = fs::path(out_dir) / "run.ndjson";
      const CvAggregate agg =
          finetune_cv(encoder, std::move(recs), ck.center_mode, task, tcfg,
                      freeze_encoder, folds, derive_seed(tcfg.seed, "folds"));
      report["task"] = task_name(task);
      report["folds"] = folds;
      report["mean_accuracy"] = agg.mean_accuracy;
      report["std_accuracy"] = agg.std_accuracy;
      report["mean_macro_f1"] = agg.mean_macro_f1;
      report["std_macro_f1"] = agg.std_macro_f1;
      ordered fold_list = ordered::array();
      for (const MetricReport& rep : agg.folds) fold_list.push_back(metrics_json(rep));
      report["per_fold"] = fold_list;
    } else {
      Dataset ds = make_dataset(std::move(recs), ck.center_mode, train_frac,
                                val_frac, derive_seed(tcfg.seed, "split"));
      tcfg.log_path = fs::path(out_dir) / "run.ndjson";
      if (tcfg.checkpoint_every > 0) tcfg.checkpoint_dir = out_dir;
      const FinetuneResult res = finetune(encoder, ds, task, tcfg, freeze_encoder);
      save_checkpoint(make_checkpoint(res.best_params, task_name(task),
                                      ck.center_mode, ck.recon_target,
                                      ck.margin_alpha, tcfg.seed),
                      fs::path(out_dir) / "best.psgc");
      save_checkpoint(make_checkpoint(res.params, task_name(task), ck.center_mode,
                                      ck.recon_target, ck.margin_alpha, tcfg.seed),
                      fs::path(out_dir) / "last.psgc");
      report["task"] = task_name(task);
      report["steps_run"] = res.steps_run;
      report["best_step"] = res.best_step;
      report["best_val_macro_f1"] = res.best_val_mf1;
      report["diverged"] = res.diverged;
      report["validation"] = metrics_json(res.best_report);
      write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
      std::cout << report.dump(2) << "\n";
      if (res.diverged)
        fail(ErrKind::DivergenceDetected,
             "fine-tuning diverged at step " + std::to_string(res.steps_run));
      return 0;
    }
    write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
  }
};

struct EvaluateCmd {
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  std::string task_str;  // empty: use the checkpoint's task
  std::string split = "all";
  uint64_t mask_seed = 0;
  uint64_t split_seed = 0;
  double train_frac = 0.8;
  double val_frac = 0.1;
  int batch_size = 32;

  int run(CLI::App* sub) const {
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    const Checkpoint ck = load_checkpoint(checkpoint);
    const ModelParams params = params_from_checkpoint(ck);
    std::vector<Recording> recs = read_recording_set(data_dir);
    Dataset ds = make_dataset(std::move(recs), ck.center_mode, train_frac,
                              val_frac, derive_seed(split_seed, "split"));
    std::vector<EpochRef> all_storage;
    const std::vector<EpochRef>& refs = pick_split(ds, split, all_storage);
    const std::string task = task_str.empty() ? ck.task : task_str;

    ordered report;
    report["checkpoint_task"] = ck.task;
    report["split"] = split;
    report["epochs"] = refs.size();
    if (task == "pretrain") {
      const ReconReport rep = reconstruction_report(params, ds, refs,
                                                    ck.recon_target, mask_seed,
                                                    batch_size);
      report["model_mse"] = rep.model_mse;
      report["baseline_mse"] = rep.baseline_mse;
      report["per_channel_model"] =
          std::vector<double>(rep.per_channel_model.begin(),
                              rep.per_channel_model.end());
      report["per_channel_baseline"] =
          std::vector<double>(rep.per_channel_baseline.begin(),
                              rep.per_channel_baseline.end());
      report["cells"] = rep.cells;
    } else {
      const Task t = task_from_name(task);
      require_labels(ds.label_mode(), t);
      report["metrics"] = metrics_json(
          evaluate_classifier(params, ds, refs, t, batch_size));
    }
    write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
  }
};

struct ReconstructCmd {
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  int recording_index = 0;
  long epoch_index = 0;
  uint64_t mask_seed = 0;

  int run(CLI::App* sub) const {
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    const Checkpoint ck = load_checkpoint(checkpoint);
    const ModelParams params = params_from_checkpoint(ck);
    std::vector<Recording> recs = read_recording_set(data_dir);
    require(recording_index >= 0 &&
                recording_index < static_cast<int>(recs.size()),
            ErrKind::InvalidConfig, "recording index out of range");
    require(epoch_index >= 0 &&
                epoch_index < recs[static_cast<size_t>(recording_index)].epoch_count(),
            ErrKind::InvalidConfig, "epoch index out of range");
    Dataset ds = make_dataset(std::move(recs), ck.center_mode, 1.0, 0.0,
                              derive_seed(0, "split"));
    const fs::path out = fs::path(out_dir) / "trace.csv";
    export_trace_csv(params, ds, {recording_index, epoch_index}, mask_seed, out);
    std::cout << "wrote " << out << "\n";
    return 0;
  }
};

struct GradcheckCmd {
  uint64_t seed = 0;
  double fd_step = 1e-5;
  double tolerance = 1e-3;
  int per_tensor = 3;
  std::string out_dir;

  int run(CLI::App* sub) const {
    const GradCheckReport report = run_gradcheck(seed, fd_step, tolerance, per_tensor);
    std::printf("checked %ld coordinates, max relative error %.3e (tolerance %.1e)\n",
                report.checked, report.max_rel_err, tolerance);
    for (const GradCheckEntry& e : report.worst)
      std::printf("  %-24s [%4ld]  analytic % .6e  numeric % .6e  rel %.3e\n",
                  e.tensor.c_str(), e.coordinate, e.analytic, e.numeric, e.rel_err);
    std::printf("%s\n", report.pass ? "PASS" : "FAIL");
    if (!out_dir.empty()) {
      DirLock lock(out_dir);
      write_snapshot(sub, out_dir);
      ordered j;
      j["checked"] = report.checked;
      j["max_rel_err"] = report.max_rel_err;
      j["tolerance"] = tolerance;
      j["pass"] = report.pass;
      write_text(fs::path(out_dir) / "report.json", j.dump(2) + "\n");
    }
    return report.pass ? 0 : 1;
  }
};

struct ExportCmd {
  std::string out_dir;
  std::string log;         // ndjson -> loss.csv
  std::string checkpoint;  // + data-dir + task -> features.csv
  std::string data_dir;
  std::string task_str = "staging";
  int batch_size = 32;

  int run(CLI::App* sub) const {
    require(log.empty() != checkpoint.empty(), ErrKind::InvalidConfig,
            "choose exactly one of --log or --checkpoint");
    DirLock lock(out_dir);
    write_snapshot(sub, out_dir);
    if (!log.empty()) {
      const fs::path out = fs::path(out_dir) / "loss.csv";
      export_loss_csv(log, out);
      std::cout << "wrote " << out << "\n";
      return 0;
    }
    require(!data_dir.empty(), ErrKind::InvalidConfig,
            "--checkpoint export needs --data-dir");
    const Checkpoint ck = load_checkpoint(checkpoint);
    const ModelParams params = params_from_checkpoint(ck);
    std::vector<Recording> recs = read_recording_set(data_dir);
    Dataset ds = make_dataset(std::move(recs), ck.center_mode, 1.0, 0.0,
                              derive_seed(0, "split"));
    const std::vector<EpochRef> refs = all_refs(ds.recordings);
    const fs::path out = fs::path(out_dir) / "features.csv";
    export_feature_csv(params, ds, refs, task_from_name(task_str), out, batch_size);
    std::cout << "wrote " << out << "\n";
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised pre-training toolkit for multichannel "
               "polysomnography epochs"};
  app.require_subcommand(1);
  int rc = 0;

  GenDataCmd gen;
  CLI::App* gen_sub = app.add_subcommand("gen-data", "Generate a synthetic recording set");
  gen_sub->add_option("--out-dir", gen.out_dir, "Run directory")->required();
  gen_sub->add_option("--subjects", gen.subjects, "Number of subjects");
  gen_sub->add_option("--epochs", gen.epochs, "Epochs per subject");
  gen_sub->add_option("--channels", gen.channels, "Channels per recording");
  gen_sub->add_option("--sampling-hz", gen.sampling_hz, "Sampling rate");
  gen_sub->add_option("--epoch-seconds", gen.epoch_seconds, "Epoch duration");
  gen_sub->add_option("--event-rate", gen.event_rate, "Event epoch probability");
  gen_sub->add_option("--label-mode", gen.label_mode,
                      "none | staging5 | osa2 | both");
  gen_sub->add_option("--seed", gen.seed, "Root seed");
  gen_sub->callback([&] { rc = gen.run(gen_sub); });

  ImportCmd imp;
  CLI::App* imp_sub = app.add_subcommand("import", "Convert a CSV sidecar into a recording");
  imp_sub->add_option("--sidecar", imp.sidecar, "Sidecar JSON path")->required();
  imp_sub->add_option("--out-dir", imp.out_dir, "Run directory")->required();
  imp_sub->callback([&] { rc = imp.run(imp_sub); });

  PretrainCmd pre;
  CLI::App* pre_sub = app.add_subcommand("pretrain", "Masked pre-training on a recording set");
  pre_sub->add_option("--data-dir", pre.data_dir, "Recording set directory")->required();
  pre_sub->add_option("--out-dir", pre.out_dir, "Run directory")->required();
  pre.model.attach(pre_sub);
  pre.train.attach(pre_sub);
  pre_sub->add_option("--center", pre.center, "median or mean");
  pre_sub->add_option("--recon-target", pre.recon_target, "visible | hidden | all");
  pre_sub->add_option("--margin-alpha", pre.margin_alpha, "Contrastive margin");
  pre_sub->add_flag("--no-iccl", pre.no_iccl, "Drop the contrastive term");
  pre_sub->add_option("--train-frac", pre.train_frac, "Train fraction");
  pre_sub->add_option("--val-frac", pre.val_frac, "Validation fraction");
  pre_sub->callback([&] { rc = pre.run(pre_sub); });

  FinetuneCmd fin;
  CLI::App* fin_sub = app.add_subcommand("finetune", "Fine-tune a classifier head");
  fin_sub->add_option("--data-dir", fin.data_dir, "Recording set directory")->required();
  fin_sub->add_option("--out-dir", fin.out_dir, "Run directory")->required();
  fin_sub->add_option("--checkpoint", fin.checkpoint, "Encoder checkpoint")->required();
  fin_sub->add_option("--task", fin.task_str, "staging or osa")->required();
  fin.train.attach(fin_sub);
  fin_sub->add_flag("--freeze-encoder", fin.freeze_encoder,
                    "Train only the classification head");
  fin_sub->add_option("--folds", fin.folds,
                      "Subject-wise cross-validation folds (0 = single split)");
  fin_sub->add_option("--train-frac", fin.train_frac, "Train fraction (single split)");
  fin_sub->add_option("--val-frac", fin.val_frac, "Validation fraction (single split)");
  fin_sub->callback([&] { rc = fin.run(fin_sub); });

  EvaluateCmd eva;
  CLI::App* eva_sub = app.add_subcommand("evaluate", "Evaluate a checkpoint on a recording set");
  eva_sub->add_option("--data-dir", eva.data_dir, "Recording set directory")->required();
  eva_sub->add_option("--out-dir", eva.out_dir, "Run directory")->required();
  eva_sub->add_option("--checkpoint", eva.checkpoint, "Checkpoint path")->required();
  eva_sub->add_option("--task", eva.task_str,
                      "pretrain | staging | osa (default: checkpoint task)");
  eva_sub->add_option("--split", eva.split, "train | val | test | all");
  eva_sub->add_option("--mask-seed", eva.mask_seed, "Mask stream for reconstruction");
  eva_sub->add_option("--split-seed", eva.split_seed, "Split shuffle seed");
  eva_sub->add_option("--train-frac", eva.train_frac, "Train fraction");
  eva_sub->add_option("--val-frac", eva.val_frac, "Validation fraction");
  eva_sub->add_option("--batch-size", eva.batch_size, "Evaluation batch size");
  eva_sub->callback([&] { rc = eva.run(eva_sub); });

  ReconstructCmd rec;
  CLI::App* rec_sub = app.add_subcommand(
      "reconstruct", "Export original/masked/reconstructed traces for one epoch");
  rec_sub->add_option("--data-dir", rec.data_dir, "Recording set directory")->required();
  rec_sub->add_option("--out-dir", rec.out_dir, "Run directory")->required();
  rec_sub->add_option("--checkpoint", rec.checkpoint, "Checkpoint path")->required();
  rec_sub->add_option("--recording-index", rec.recording_index, "Recording index");
  rec_sub->add_option("--epoch-index", rec.epoch_index, "Epoch index");
  rec_sub->add_option("--mask-seed", rec.mask_seed, "Mask stream seed");
  rec_sub->callback([&] { rc = rec.run(rec_sub); });

  GradcheckCmd grad;
  CLI::App* grad_sub = app.add_subcommand(
      "gradcheck", "Verify analytic gradients against finite differences");
  grad_sub->add_option("--seed", grad.seed, "Instance seed");
  grad_sub->add_option("--step", grad.fd_step, "Finite-difference step");
  grad_sub->add_option("--tolerance", grad.tolerance, "Relative error bound");
  grad_sub->add_option("--per-tensor", grad.per_tensor, "Coordinates per tensor");
  grad_sub->add_option("--out-dir", grad.out_dir, "Optional run directory");
  grad_sub->callback([&] { rc = grad.run(grad_sub); });

  ExportCmd exp;
  CLI::App* exp_sub = app.add_subcommand("export", "Export logs or pooled features as CSV");
  exp_sub->add_option("--out-dir", exp.out_dir, "Run directory")->required();
  exp_sub->add_option("--log", exp.log, "Training log (ndjson) to flatten");
  exp_sub->add_option("--checkpoint", exp.checkpoint, "Checkpoint for feature export");
  exp_sub->add_option("--data-dir", exp.data_dir, "Recording set directory");
  exp_sub->add_option("--task", exp.task_str, "Head task for feature export");
  exp_sub->add_option("--batch-size", exp.batch_size, "Evaluation batch size");
  exp_sub->callback([&] { rc = exp.run(exp_sub); });

  app.set_config("--config", "", "Read options from an INI snapshot");
  for (CLI::App* sub : app.get_subcommands({})) {
    sub->fallthrough(true);
    finalize_options(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const PsgError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
