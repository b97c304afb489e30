#pragma once

#include <filesystem>

#include "psgmae/checkpoint.hpp"
#include "psgmae/evaluation.hpp"
#include "psgmae/losses.hpp"
#include "psgmae/runlog.hpp"

namespace psgmae {

enum class OptimizerKind { adam, sgd };

const char* optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& name);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.9;  // SGD only
  double clip_norm = 5.0;  // global-norm clip; 0 disables
  int batch_size = 32;
  long max_steps = 2000;
  long val_interval = 100;
  int patience = 0;  // validations without improvement before stopping; 0 = off
  double divergence_threshold = 1e6;
  ReconTarget recon_target = ReconTarget::visible;
  double margin_alpha = 1.0;
  bool use_iccl = true;
  uint64_t seed = 0;
  std::filesystem::path log_path;  // empty disables the ndjson log
  long checkpoint_every = 0;  // periodic step checkpoints; 0 disables
  std::filesystem::path checkpoint_dir;  // destination for periodic saves

  void validate() const;
};

// Adam or momentum-SGD over the flat parameter vector, with optional
// global-norm gradient clipping applied first.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, size_t n_params);
  // Updates params in place; returns true when the gradient was clipped.
  bool step(std::vector<double>& params, std::vector<double>& grads);
  double last_grad_norm() const { return last_norm_; }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_, momentum_, clip_;
  std::vector<double> m_, v_;
  long t_ = 0;
  double last_norm_ = 0.0;
};

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

// One forward (and optionally backward) pass over an explicit batch: each
// epoch is masked by both sides of its pair, reconstructed with shared
// weights, and scored with the reconstruction and contrastive terms. The
// returned breakdown is the mean over epochs. When grads is non-null the
// parameter gradient of breakdown.total is accumulated into it.
LossBreakdown pretrain_batch(const ModelParams& params,
                             const std::vector<EpochMatrix>& epochs,
                             const std::vector<MaskPair>& masks,
                             ReconTarget target, const IcclConfig& iccl,
                             bool use_iccl, bool train, Rng* dropout_rng,
                             GradBuffer* grads);

struct PretrainResult {
  ModelParams params;       // parameters after the last executed step
  ModelParams best_params;  // lowest validation total loss
  double best_val = 0.0;
  long best_step = -1;
  double final_train_loss = 0.0;
  bool diverged = false;
  long steps_run = 0;
};

// Trains on data.split.train with a fresh mask pair per epoch per step;
// validates on data.split.val with fixed per-epoch masks.
PretrainResult pretrain(const ModelConfig& mcfg, const Dataset& data,
                        const TrainConfig& tcfg);

// Mean pre-training loss over the given epochs with fixed per-epoch masks
// (deterministic in mask_seed), evaluation mode.
LossBreakdown pretrain_eval_loss(const ModelParams& params, const Dataset& data,
                                 const std::vector<EpochRef>& refs,
                                 ReconTarget target, const IcclConfig& iccl,
                                 bool use_iccl, uint64_t mask_seed,
                                 int batch_size);

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

// Classification loss over an explicit batch of epochs (full signal, no
// masking): weighted cross entropy for staging, weighted binary cross
// entropy for osa (positive_weight used only there).
double classify_batch(const ModelParams& params, const Dataset& data,
                      const std::vector<EpochRef>& refs, Task task,
                      const Vec& class_weight_vec, double positive_weight,
                      bool train, Rng* dropout_rng, GradBuffer* grads);

struct FinetuneResult {
  ModelParams params;
  ModelParams best_params;  // highest validation macro F1
  double best_val_mf1 = -1.0;
  long best_step = -1;
  MetricReport best_report;  // validation report at the best step
  bool diverged = false;
  long steps_run = 0;
};

// Copies the shared trunk from `encoder`, attaches a freshly initialized
// task head, and trains on the labeled epochs of data.split.train. When
// freeze_encoder is set, only head parameters receive updates.
FinetuneResult finetune(const ModelParams& encoder, const Dataset& data,
                        Task task, const TrainConfig& tcfg, bool freeze_encoder);

// Subject-wise k-fold protocol: for every fold, fine-tune on the other
// subjects' epochs (train/val split within) and score the held-out subjects'
// test epochs. Returns per-fold test metrics and their aggregate.
CvAggregate finetune_cv(const ModelParams& encoder,
                        std::vector<Recording> recordings, CenterMode mode,
                        Task task, const TrainConfig& tcfg, bool freeze_encoder,
                        int k, uint64_t split_seed);

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string tensor;  // "<path>:<tensor name>"
  long coordinate = 0;
  double analytic = 0.0, numeric = 0.0, rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  long checked = 0;
  bool pass = false;
  std::vector<GradCheckEntry> worst;  // up to 8 largest errors
};

// Central finite differences against the analytic gradients on small model
// instances, covering the pre-training path and both classification paths.
// Instances whose contrastive hinge sits within fd_step of its kink are
// re-rolled before checking.
GradCheckReport run_gradcheck(uint64_t seed, double fd_step = 1e-5,
                              double tolerance = 1e-3, int per_tensor = 3);

// ---------------------------------------------------------------------------
// Contrastive-term ablation
// ---------------------------------------------------------------------------

struct AblationRun {
  uint64_t seed = 0;
  double mse_with = 0.0;     // compare-channel mean reconstruction MSE, ICCL on
  double mse_without = 0.0;  // same seed, ICCL off
  Vec per_channel_with;      // full per-channel MSE, one entry per channel
  Vec per_channel_without;
  bool win = false;  // mse_with < mse_without
};

struct AblationOutcome {
  std::vector<AblationRun> runs;
  int wins = 0;
};

// Paired runs per seed (identical except use_iccl), scored on eval_refs over
// compare_channels. eval_target picks which cells the score covers; hidden
// isolates cross-channel transfer, which the recon term alone never scores
// when training with ReconTarget::visible.
AblationOutcome run_iccl_ablation(const ModelConfig& mcfg, const Dataset& data,
                                  const std::vector<EpochRef>& eval_refs,
                                  ReconTarget eval_target,
                                  const TrainConfig& base,
                                  const std::vector<uint64_t>& seeds,
                                  const std::vector<int>& compare_channels);

}  // namespace psgmae
