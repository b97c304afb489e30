#include "psgmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace psgmae {

const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  fail(ErrKind::InvalidConfig, "unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  require(lr > 0.0, ErrKind::InvalidConfig, "lr must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          ErrKind::InvalidConfig, "betas must lie in [0, 1)");
  require(adam_eps > 0.0, ErrKind::InvalidConfig, "adam_eps must be positive");
  require(momentum >= 0.0 && momentum < 1.0, ErrKind::InvalidConfig,
          "momentum must lie in [0, 1)");
  require(clip_norm >= 0.0, ErrKind::InvalidConfig, "clip_norm must be >= 0");
  require(batch_size > 0, ErrKind::InvalidConfig, "batch_size must be positive");
  require(max_steps >= 0, ErrKind::InvalidConfig, "max_steps must be >= 0");
  require(val_interval > 0, ErrKind::InvalidConfig, "val_interval must be positive");
  require(patience >= 0, ErrKind::InvalidConfig, "patience must be >= 0");
  require(checkpoint_every >= 0, ErrKind::InvalidConfig,
          "checkpoint_every must be >= 0");
  require(divergence_threshold > 0.0, ErrKind::InvalidConfig,
          "divergence_threshold must be positive");
  require(margin_alpha >= 0.0, ErrKind::InvalidConfig, "margin_alpha must be >= 0");
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Optimizer::Optimizer(const TrainConfig& cfg, size_t n_params)
    : kind_(cfg.optimizer),
      lr_(cfg.lr),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      momentum_(cfg.momentum),
      clip_(cfg.clip_norm) {
  cfg.validate();
  m_.assign(n_params, 0.0);
  if (kind_ == OptimizerKind::adam) v_.assign(n_params, 0.0);
}

bool Optimizer::step(std::vector<double>& params, std::vector<double>& grads) {
  require(params.size() == m_.size() && grads.size() == m_.size(),
          ErrKind::DimensionMismatch, "optimizer state size mismatch");
  double ss = 0.0;
  for (double g : grads) ss += g * g;
  last_norm_ = std::sqrt(ss);
  require(std::isfinite(last_norm_), ErrKind::DivergenceDetected,
          "gradient norm is not finite");
  bool clipped = false;
  if (clip_ > 0.0 && last_norm_ > clip_) {
    const double scale = clip_ / last_norm_;
    for (double& g : grads) g *= scale;
    clipped = true;
  }
  if (kind_ == OptimizerKind::adam) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
      params[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
    }
  } else {
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = momentum_ * m_[i] + grads[i];
      params[i] -= lr_ * m_[i];
    }
  }
  return clipped;
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

namespace {

SegmentedEpoch zero_like(const SegmentedEpoch& s) {
  SegmentedEpoch z = s;
  for (Mat& m : z.segments) m.setZero();
  return z;
}

void scatter_rows(const SegmentedEpoch& grad, long row0, Mat& dy) {
  const int c = grad.channels();
  for (int i = 0; i < grad.n_patch; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < grad.l_prime; ++t)
        dy(row0 + i, static_cast<long>(ch) * grad.l_prime + t) =
            grad.segments[static_cast<size_t>(i)](ch, t);
}

// Periodic step checkpoints, written when checkpoint_every/checkpoint_dir ask
// for them.
void maybe_step_checkpoint(const TrainConfig& tcfg, const ModelParams& params,
                           const std::string& task, CenterMode mode, long step) {
  if (tcfg.checkpoint_every <= 0 || tcfg.checkpoint_dir.empty() ||
      step % tcfg.checkpoint_every != 0)
    return;
  char name[32];
  std::snprintf(name, sizeof(name), "step-%06ld.psgc", step);
  std::filesystem::create_directories(tcfg.checkpoint_dir);
  save_checkpoint(make_checkpoint(params, task, mode, tcfg.recon_target,
                                  tcfg.margin_alpha, tcfg.seed),
                  tcfg.checkpoint_dir / name);
}

}  // namespace

LossBreakdown pretrain_batch(const ModelParams& params,
                             const std::vector<EpochMatrix>& epochs,
                             const std::vector<MaskPair>& masks,
                             ReconTarget target, const IcclConfig& iccl,
                             bool use_iccl, bool train, Rng* dropout_rng,
                             GradBuffer* grads) {
  const ModelConfig& cfg = params.cfg;
  const int np = cfg.n_patch;
  const int lp = cfg.l_prime;
  const int c = cfg.c;
  require(!epochs.empty() && epochs.size() == masks.size(),
          ErrKind::DimensionMismatch, "epoch and mask counts differ");
  const long B = static_cast<long>(epochs.size());

  std::vector<SegmentedEpoch> targets;
  std::vector<SegmentedEpoch> inputs;  // B side-A epochs, then B side-B epochs
  targets.reserve(epochs.size());
  inputs.reserve(2 * epochs.size());
  for (size_t e = 0; e < epochs.size(); ++e) {
    require(epochs[e].channels() == c && epochs[e].length() == np * lp,
            ErrKind::ConfigMismatch, "epoch shape does not match the model");
    require(masks[e].c == c && masks[e].n_patch == np, ErrKind::DimensionMismatch,
            "mask shape does not match the model");
    targets.push_back(segment_epoch(epochs[e], np));
    inputs.push_back(segment_epoch(apply_mask(epochs[e], masks[e].m), np));
  }
  for (size_t e = 0; e < epochs.size(); ++e)
    inputs.push_back(segment_epoch(apply_mask(epochs[e], masks[e].complement()), np));

  const Mat tokens = batch_tokens(inputs);
  ForwardTrace trace;
  ForwardTrace* tp = grads ? &trace : nullptr;
  const Mat encoded = model_encode(params, tokens, train, dropout_rng, tp);
  const Mat decoded = model_decode(params, encoded, tp);

  Mat dy;
  if (grads) dy = Mat::Zero(decoded.rows(), decoded.cols());

  LossBreakdown mean;
  mean.per_channel_cos = Vec::Zero(c);
  mean.per_channel_mse = Vec::Zero(c);
  for (long e = 0; e < B; ++e) {
    const SegmentedEpoch recon_a =
        segments_from_rows(decoded, e * np, c, np, lp);
    const SegmentedEpoch recon_b =
        segments_from_rows(decoded, (B + e) * np, c, np, lp);
    const MaskTable table_a = loss_table(masks[static_cast<size_t>(e)].m, target);
    const MaskTable table_b =
        loss_table(MaskTable(masks[static_cast<size_t>(e)].complement()), target);
    const SegmentedEpoch& tgt = targets[static_cast<size_t>(e)];
    const ChannelLoss cos_a = cosine_recon_loss(recon_a, tgt, table_a);
    const ChannelLoss mse_a = mse_recon_loss(recon_a, tgt, table_a);
    const ChannelLoss cos_b = cosine_recon_loss(recon_b, tgt, table_b);
    const ChannelLoss mse_b = mse_recon_loss(recon_b, tgt, table_b);
    // The contrastive term is always computed for the log; when disabled it
    // is excluded from the objective (and from the gradients below).
    const double l_cl = iccl_loss(recon_a, recon_b, iccl);
    LossBreakdown bd =
        total_pretrain_loss(cos_a, mse_a, cos_b, mse_b, use_iccl ? l_cl : 0.0);
    bd.l_cl = l_cl;
    mean.l_cos += bd.l_cos;
    mean.l_mse += bd.l_mse;
    mean.l_recon += bd.l_recon;
    mean.l_cl += bd.l_cl;
    mean.total += bd.total;
    mean.per_channel_cos += bd.per_channel_cos;
    mean.per_channel_mse += bd.per_channel_mse;

    if (grads) {
      SegmentedEpoch grad_a = zero_like(recon_a);
      SegmentedEpoch grad_b = zero_like(recon_b);
      const double half = 0.5 / static_cast<double>(B);
      cosine_recon_loss_backward(recon_a, tgt, table_a, half, grad_a);
      mse_recon_loss_backward(recon_a, tgt, table_a, half, grad_a);
      cosine_recon_loss_backward(recon_b, tgt, table_b, half, grad_b);
      mse_recon_loss_backward(recon_b, tgt, table_b, half, grad_b);
      if (use_iccl)
        iccl_loss_backward(recon_a, recon_b, iccl, 1.0 / static_cast<double>(B),
                           grad_a, grad_b);
      scatter_rows(grad_a, e * np, dy);
      scatter_rows(grad_b, (B + e) * np, dy);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  mean.l_cos *= inv_b;
  mean.l_mse *= inv_b;
  mean.l_recon *= inv_b;
  mean.l_cl *= inv_b;
  mean.total *= inv_b;
  mean.per_channel_cos *= inv_b;
  mean.per_channel_mse *= inv_b;

  if (grads) {
    Mat d_encoded;
    model_decode_backward(params, trace, dy, *grads, d_encoded);
    model_encode_backward(params, trace, d_encoded, *grads, nullptr);
  }
  return mean;
}

LossBreakdown pretrain_eval_loss(const ModelParams& params, const Dataset& data,
                                 const std::vector<EpochRef>& refs,
                                 ReconTarget target, const IcclConfig& iccl,
                                 bool use_iccl, uint64_t mask_seed,
                                 int batch_size) {
  require(!refs.empty(), ErrKind::TooFewEpochs, "no epochs to evaluate");
  require(batch_size > 0, ErrKind::InvalidConfig, "batch_size must be positive");
  LossBreakdown agg;
  agg.per_channel_cos = Vec::Zero(params.cfg.c);
  agg.per_channel_mse = Vec::Zero(params.cfg.c);
  double total_count = 0.0;
  for (size_t first = 0; first < refs.size();
       first += static_cast<size_t>(batch_size)) {
    const size_t count =
        std::min(static_cast<size_t>(batch_size), refs.size() - first);
    std::vector<EpochMatrix> epochs;
    std::vector<MaskPair> masks;
    epochs.reserve(count);
    masks.reserve(count);
    for (size_t i = 0; i < count; ++i) {
      epochs.push_back(data.normalized_epoch(refs[first + i]));
      masks.push_back(generate_mask_pair(
          params.cfg.c, params.cfg.n_patch,
          derive_seed(mask_seed, "val-mask", static_cast<uint64_t>(first + i))));
    }
    const LossBreakdown bd = pretrain_batch(params, epochs, masks, target, iccl,
                                            use_iccl, false, nullptr, nullptr);
    const double w = static_cast<double>(count);
    agg.l_cos += bd.l_cos * w;
    agg.l_mse += bd.l_mse * w;
    agg.l_recon += bd.l_recon * w;
    agg.l_cl += bd.l_cl * w;
    agg.total += bd.total * w;
    agg.per_channel_cos += bd.per_channel_cos * w;
    agg.per_channel_mse += bd.per_channel_mse * w;
    total_count += w;
  }
  agg.l_cos /= total_count;
  agg.l_mse /= total_count;
  agg.l_recon /= total_count;
  agg.l_cl /= total_count;
  agg.total /= total_count;
  agg.per_channel_cos /= total_count;
  agg.per_channel_mse /= total_count;
  return agg;
}

PretrainResult pretrain(const ModelConfig& mcfg, const Dataset& data,
                        const TrainConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  require(data.channels() == mcfg.c, ErrKind::ConfigMismatch,
          "dataset channel count does not match the model");
  require(data.epoch_length() ==
              static_cast<long>(mcfg.n_patch) * mcfg.l_prime,
          ErrKind::ConfigMismatch,
          "epoch length does not equal n_patch * l_prime");
  require(!data.split.train.empty(), ErrKind::TooFewEpochs, "empty train split");
  require(!data.split.val.empty(), ErrKind::TooFewEpochs, "empty val split");

  ModelParams params = ModelParams::init(mcfg, derive_seed(tcfg.seed, "model-init"));
  Optimizer opt(tcfg, params.flat.size());
  Rng sample_rng(derive_seed(tcfg.seed, "sample"));
  Rng dropout_rng(derive_seed(tcfg.seed, "dropout"));
  RunLog log = tcfg.log_path.empty() ? RunLog() : RunLog(tcfg.log_path);
  GradBuffer grads(params.index);
  const IcclConfig iccl{tcfg.margin_alpha};
  const uint64_t val_mask_root = derive_seed(tcfg.seed, "val-masks");

  PretrainResult res;
  res.best_val = std::numeric_limits<double>::infinity();
  int stale_validations = 0;

  for (long step = 1; step <= tcfg.max_steps; ++step) {
    std::vector<EpochMatrix> epochs;
    std::vector<MaskPair> masks;
    epochs.reserve(static_cast<size_t>(tcfg.batch_size));
    masks.reserve(static_cast<size_t>(tcfg.batch_size));
    for (int j = 0; j < tcfg.batch_size; ++j) {
      const size_t idx = static_cast<size_t>(
          sample_rng.uniform_int(data.split.train.size()));
      epochs.push_back(data.normalized_epoch(data.split.train[idx]));
      masks.push_back(generate_mask_pair(
          mcfg.c, mcfg.n_patch,
          derive_seed(tcfg.seed, "mask",
                      static_cast<uint64_t>(step - 1) * tcfg.batch_size + j)));
    }
    grads.reset();
    LossBreakdown bd;
    try {
      bd = pretrain_batch(params, epochs, masks, tcfg.recon_target, iccl,
                          tcfg.use_iccl, true, &dropout_rng, &grads);
    } catch (const PsgError& e) {
      if (e.kind() == ErrKind::NonFiniteActivation) {
        log.event("divergence", e.what());
        res.diverged = true;
        res.steps_run = step;
        break;
      }
      throw;
    }
    if (!std::isfinite(bd.total) ||
        std::abs(bd.total) > tcfg.divergence_threshold) {
      log.event("divergence",
                "loss " + std::to_string(bd.total) + " at step " +
                    std::to_string(step));
      res.diverged = true;
      res.steps_run = step;
      break;
    }
    const bool clipped = opt.step(params.flat, grads.flat);
    log.pretrain_step({step, bd.l_cos, bd.l_mse, bd.l_recon, bd.l_cl, bd.total,
                       tcfg.lr, clipped});
    res.final_train_loss = bd.total;
    res.steps_run = step;
    maybe_step_checkpoint(tcfg, params, "pretrain", data.center_mode, step);

    if (step % tcfg.val_interval == 0 || step == tcfg.max_steps) {
      const LossBreakdown v =
          pretrain_eval_loss(params, data, data.split.val, tcfg.recon_target,
                             iccl, tcfg.use_iccl, val_mask_root, tcfg.batch_size);
      log.validation({step, "total", v.total});
      if (v.total < res.best_val) {
        res.best_val = v.total;
        res.best_step = step;
        res.best_params = params;
        stale_validations = 0;
      } else if (tcfg.patience > 0 && ++stale_validations >= tcfg.patience) {
        log.event("early-stop", "no improvement for " +
                                    std::to_string(stale_validations) +
                                    " validations");
        break;
      }
    }
  }
  res.params = params;
  if (res.best_step < 0) {  // never validated: zero-step run or early divergence
    res.best_params = params;
    res.best_val = res.final_train_loss;
  }
  log.flush();
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

double classify_batch(const ModelParams& params, const Dataset& data,
                      const std::vector<EpochRef>& refs, Task task,
                      const Vec& class_weight_vec, double positive_weight,
                      bool train, Rng* dropout_rng, GradBuffer* grads) {
  const ModelConfig& cfg = params.cfg;
  require(cfg.num_classes == task_num_classes(task), ErrKind::ConfigMismatch,
          "model head width does not match the task");
  require(!refs.empty(), ErrKind::TooFewEpochs, "empty classification batch");
  const int B = static_cast<int>(refs.size());

  std::vector<int> labels;
  std::vector<SegmentedEpoch> segs;
  labels.reserve(refs.size());
  segs.reserve(refs.size());
  for (const EpochRef& ref : refs) {
    const int y = task_label(task, data.label(ref));
    require(y >= 0, ErrKind::LabelOutOfRange,
            "unlabeled epoch in classification batch");
    labels.push_back(y);
    segs.push_back(segment_epoch(data.normalized_epoch(ref), cfg.n_patch));
  }
  const Mat tokens = batch_tokens(segs);
  ForwardTrace trace;
  ForwardTrace* tp = grads ? &trace : nullptr;
  const Mat encoded = model_encode(params, tokens, train, dropout_rng, tp);
  const Mat logits = model_head(params, encoded, B, train, dropout_rng, tp);

  double loss = 0.0;
  Mat dlogits;
  if (task == Task::staging) {
    const Mat probs = softmax_rows(logits);
    Mat onehot = Mat::Zero(B, kStageCount);
    for (int i = 0; i < B; ++i) onehot(i, labels[static_cast<size_t>(i)]) = 1.0;
    loss = weighted_ce_loss(probs, onehot, class_weight_vec);
    if (grads) {
      const Mat dprobs = weighted_ce_loss_grad(probs, onehot, class_weight_vec);
      dlogits = softmax_backward(probs, dprobs);
    }
  } else {
    const Vec p = sigmoid_vec(logits.col(0));
    Vec y(B);
    for (int i = 0; i < B; ++i) y[i] = labels[static_cast<size_t>(i)];
    loss = weighted_bce_loss(p, y, positive_weight);
    if (grads) {
      const Vec dp = weighted_bce_loss_grad(p, y, positive_weight);
      dlogits.resize(B, 1);
      for (int i = 0; i < B; ++i) dlogits(i, 0) = dp[i] * p[i] * (1.0 - p[i]);
    }
  }
  if (grads) {
    Mat d_encoded;
    model_head_backward(params, trace, dlogits, *grads, d_encoded);
    model_encode_backward(params, trace, d_encoded, *grads, nullptr);
  }
  return loss;
}

FinetuneResult finetune(const ModelParams& encoder, const Dataset& data,
                        Task task, const TrainConfig& tcfg, bool freeze_encoder) {
  tcfg.validate();
  ModelConfig cfg = encoder.cfg;
  cfg.num_classes = task_num_classes(task);
  cfg.validate();
  require(data.channels() == cfg.c, ErrKind::ConfigMismatch,
          "dataset channel count does not match the model");
  require(data.epoch_length() == static_cast<long>(cfg.n_patch) * cfg.l_prime,
          ErrKind::ConfigMismatch, "epoch length does not equal n_patch * l_prime");

  ModelParams params = ModelParams::init(cfg, derive_seed(tcfg.seed, "head-init"));
  for (const TensorSpec& spec : encoder.index.tensors) {
    auto it = params.index.by_name.find(spec.name);
    if (it == params.index.by_name.end()) continue;
    const TensorSpec& dst = params.index.tensors[static_cast<size_t>(it->second)];
    if (dst.rows != spec.rows || dst.cols != spec.cols) continue;
    std::copy(encoder.flat.begin() + spec.offset,
              encoder.flat.begin() + spec.offset + spec.size(),
              params.flat.begin() + dst.offset);
  }

  std::vector<EpochRef> train_refs;
  std::vector<int> train_labels;
  for (const EpochRef& ref : data.split.train) {
    const int y = task_label(task, data.label(ref));
    if (y < 0) continue;
    train_refs.push_back(ref);
    train_labels.push_back(y);
  }
  require(!train_refs.empty(), ErrKind::TooFewEpochs,
          "no labeled training epochs for this task");
  require(!data.split.val.empty(), ErrKind::TooFewEpochs, "empty val split");

  Vec weights;
  double positive_weight = 1.0;
  if (task == Task::staging) {
    weights = class_weights(train_labels, kStageCount);
  } else {
    long n_pos = 0;
    for (int y : train_labels) n_pos += y;
    const long n_neg = static_cast<long>(train_labels.size()) - n_pos;
    require(n_pos > 0 && n_neg > 0, ErrKind::MissingCategory,
            "training split needs both osa classes");
    positive_weight = static_cast<double>(n_neg) / static_cast<double>(n_pos);
  }

  // Parameters never updated under freeze_encoder: everything outside head.*
  std::vector<std::pair<long, long>> frozen;
  if (freeze_encoder)
    for (const TensorSpec& spec : params.index.tensors)
      if (!spec.name.starts_with("head.")) frozen.emplace_back(spec.offset, spec.size());

  Optimizer opt(tcfg, params.flat.size());
  Rng sample_rng(derive_seed(tcfg.seed, "sample"));
  Rng dropout_rng(derive_seed(tcfg.seed, "dropout"));
  RunLog log = tcfg.log_path.empty() ? RunLog() : RunLog(tcfg.log_path);
  GradBuffer grads(params.index);

  FinetuneResult res;
  int stale_validations = 0;

  for (long step = 1; step <= tcfg.max_steps; ++step) {
    std::vector<EpochRef> batch;
    batch.reserve(static_cast<size_t>(tcfg.batch_size));
    for (int j = 0; j < tcfg.batch_size; ++j)
      batch.push_back(
          train_refs[static_cast<size_t>(sample_rng.uniform_int(train_refs.size()))]);
    grads.reset();
    double loss = 0.0;
    try {
      loss = classify_batch(params, data, batch, task, weights, positive_weight,
                            true, &dropout_rng, &grads);
    } catch (const PsgError& e) {
      if (e.kind() == ErrKind::NonFiniteActivation) {
        log.event("divergence", e.what());
        res.diverged = true;
        res.steps_run = step;
        break;
      }
      throw;
    }
    if (!std::isfinite(loss) || std::abs(loss) > tcfg.divergence_threshold) {
      log.event("divergence", "loss " + std::to_string(loss) + " at step " +
                                  std::to_string(step));
      res.diverged = true;
      res.steps_run = step;
      break;
    }
    if (freeze_encoder)
      for (const auto& [off, len] : frozen)
        std::fill(grads.flat.begin() + off, grads.flat.begin() + off + len, 0.0);
    const bool clipped = opt.step(params.flat, grads.flat);
    log.finetune_step(step, loss, tcfg.lr, clipped);
    res.steps_run = step;
    maybe_step_checkpoint(tcfg, params, task_name(task), data.center_mode, step);

    if (step % tcfg.val_interval == 0 || step == tcfg.max_steps) {
      const MetricReport rep =
          evaluate_classifier(params, data, data.split.val, task, tcfg.batch_size);
      log.validation({step, "macro_f1", rep.macro_f1});
      if (rep.macro_f1 > res.best_val_mf1) {
        res.best_val_mf1 = rep.macro_f1;
        res.best_step = step;
        res.best_params = params;
        res.best_report = rep;
        stale_validations = 0;
      } else if (tcfg.patience > 0 && ++stale_validations >= tcfg.patience) {
        log.event("early-stop", "no improvement for " +
                                    std::to_string(stale_validations) +
                                    " validations");
        break;
      }
    }
  }
  res.params = params;
  if (res.best_step < 0) res.best_params = params;
  log.flush();
  return res;
}

CvAggregate finetune_cv(const ModelParams& encoder,
                        std::vector<Recording> recordings, CenterMode mode,
                        Task task, const TrainConfig& tcfg, bool freeze_encoder,
                        int k, uint64_t split_seed) {
  const SplitPlan plan = make_subject_folds(recordings, k, split_seed);
  std::vector<MetricReport> folds;
  for (int fold = 0; fold < k; ++fold) {
    Dataset ds = make_fold_dataset(
        recordings, mode, plan, fold,
        derive_seed(split_seed, "fold-epochs", static_cast<uint64_t>(fold)));
    TrainConfig fold_cfg = tcfg;
    fold_cfg.seed = derive_seed(tcfg.seed, "fold", static_cast<uint64_t>(fold));
    if (!tcfg.log_path.empty()) {
      std::filesystem::path p = tcfg.log_path;
      fold_cfg.log_path =
          p.parent_path() / (p.stem().string() + "-fold" + std::to_string(fold) +
                             p.extension().string());
    }
    FinetuneResult fr = finetune(encoder, ds, task, fold_cfg, freeze_encoder);
    require(!fr.diverged, ErrKind::DivergenceDetected,
            "fine-tuning diverged in fold " + std::to_string(fold));
    folds.push_back(
        evaluate_classifier(fr.best_params, ds, ds.split.test, task, tcfg.batch_size));
  }
  return cv_aggregate(std::move(folds));
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

namespace {

struct CheckCollector {
  GradCheckReport report;
  double tolerance;

  void add(const std::string& tensor, long coord, double analytic, double numeric) {
    const double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
    GradCheckEntry entry{tensor, coord, analytic, numeric,
                         std::abs(analytic - numeric) / denom};
    report.max_rel_err = std::max(report.max_rel_err, entry.rel_err);
    ++report.checked;
    report.worst.push_back(std::move(entry));
    std::sort(report.worst.begin(), report.worst.end(),
              [](const GradCheckEntry& a, const GradCheckEntry& b) {
                return a.rel_err > b.rel_err;
              });
    if (report.worst.size() > 8) report.worst.resize(8);
  }
};

std::vector<long> pick_coords(const TensorSpec& spec, int per_tensor, Rng& rng) {
  std::vector<long> coords;
  if (spec.size() <= per_tensor) {
    for (long i = 0; i < spec.size(); ++i) coords.push_back(i);
    return coords;
  }
  while (static_cast<int>(coords.size()) < per_tensor) {
    const long c = static_cast<long>(rng.uniform_int(static_cast<uint64_t>(spec.size())));
    if (std::find(coords.begin(), coords.end(), c) == coords.end())
      coords.push_back(c);
  }
  return coords;
}

ModelConfig gradcheck_config() {
  ModelConfig cfg;
  cfg.c = 3;
  cfg.n_patch = 4;
  cfg.l_prime = 8;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.dec_hidden = 12;
  cfg.kernels = {3};
  cfg.head_channels = 4;
  cfg.head_mlp_hidden = 6;
  cfg.num_classes = 0;
  cfg.dropout = 0.0;  // finite differences need a deterministic forward
  return cfg;
}

std::vector<EpochMatrix> gradcheck_epochs(const ModelConfig& cfg, uint64_t seed,
                                          int batch) {
  Rng rng(seed);
  std::vector<EpochMatrix> epochs;
  const int len = cfg.n_patch * cfg.l_prime;
  for (int b = 0; b < batch; ++b) {
    Mat m(cfg.c, len);
    for (int ch = 0; ch < cfg.c; ++ch)
      for (int t = 0; t < len; ++t) m(ch, t) = rng.normal();
    epochs.push_back(EpochMatrix::create(std::move(m), len / 2, 2));
  }
  return epochs;
}

// The contrastive hinge is non-differentiable where a margin crosses zero and
// where two subsegments coincide; reject instances near those sets.
bool iccl_well_conditioned(const ModelParams& params,
                           const std::vector<EpochMatrix>& epochs,
                           const std::vector<MaskPair>& masks, double alpha,
                           double guard) {
  const ModelConfig& cfg = params.cfg;
  const long B = static_cast<long>(epochs.size());
  std::vector<SegmentedEpoch> inputs;
  for (size_t e = 0; e < epochs.size(); ++e)
    inputs.push_back(segment_epoch(apply_mask(epochs[e], masks[e].m), cfg.n_patch));
  for (size_t e = 0; e < epochs.size(); ++e)
    inputs.push_back(
        segment_epoch(apply_mask(epochs[e], masks[e].complement()), cfg.n_patch));
  const Mat encoded =
      model_encode(params, batch_tokens(inputs), false, nullptr, nullptr);
  const Mat decoded = model_decode(params, encoded, nullptr);
  for (long e = 0; e < B; ++e) {
    const SegmentedEpoch a =
        segments_from_rows(decoded, e * cfg.n_patch, cfg.c, cfg.n_patch, cfg.l_prime);
    const SegmentedEpoch b = segments_from_rows(decoded, (B + e) * cfg.n_patch,
                                                cfg.c, cfg.n_patch, cfg.l_prime);
    const int n = cfg.n_patch;
    for (int i = 0; i < n; ++i) {
      const double d_pos = (a.segments[i] - b.segments[i]).norm();
      if (d_pos < guard) return false;
      double neg_sum = 0.0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const double d = (a.segments[i] - a.segments[j]).norm();
        if (d < guard) return false;
        neg_sum += d;
      }
      const double margin = d_pos - neg_sum / (n - 1) + alpha;
      if (std::abs(margin) < guard) return false;
    }
  }
  return true;
}

}  // namespace

GradCheckReport run_gradcheck(uint64_t seed, double fd_step, double tolerance,
                              int per_tensor) {
  require(fd_step > 0.0 && tolerance > 0.0 && per_tensor > 0,
          ErrKind::InvalidConfig, "bad gradcheck settings");
  CheckCollector collector;
  collector.tolerance = tolerance;
  const int batch = 2;
  const IcclConfig iccl{1.0};

  // --- pre-training path ---
  {
    const ModelConfig cfg = gradcheck_config();
    ModelParams params = ModelParams::init(cfg, derive_seed(seed, "gc-params"));
    std::vector<EpochMatrix> epochs;
    std::vector<MaskPair> masks;
    for (uint64_t attempt = 0;; ++attempt) {
      require(attempt < 64, ErrKind::InvalidConfig,
              "could not find a well-conditioned gradcheck instance");
      const uint64_t ds = derive_seed(seed, "gc-data", attempt);
      epochs = gradcheck_epochs(cfg, ds, batch);
      masks.clear();
      for (int e = 0; e < batch; ++e)
        masks.push_back(generate_mask_pair(
            cfg.c, cfg.n_patch, derive_seed(ds, "gc-mask", static_cast<uint64_t>(e))));
      if (iccl_well_conditioned(params, epochs, masks, iccl.margin_alpha,
                                50.0 * fd_step))
        break;
    }
    GradBuffer grads(params.index);
    pretrain_batch(params, epochs, masks, ReconTarget::visible, iccl, true, false,
                   nullptr, &grads);
    Rng coord_rng(derive_seed(seed, "gc-coords"));
    for (const TensorSpec& spec : params.index.tensors) {
      for (long coord : pick_coords(spec, per_tensor, coord_rng)) {
        const long flat_idx = spec.offset + coord;
        const double saved = params.flat[static_cast<size_t>(flat_idx)];
        params.flat[static_cast<size_t>(flat_idx)] = saved + fd_step;
        const double lp = pretrain_batch(params, epochs, masks, ReconTarget::visible,
                                         iccl, true, false, nullptr, nullptr)
                              .total;
        params.flat[static_cast<size_t>(flat_idx)] = saved - fd_step;
        const double lm = pretrain_batch(params, epochs, masks, ReconTarget::visible,
                                         iccl, true, false, nullptr, nullptr)
                              .total;
        params.flat[static_cast<size_t>(flat_idx)] = saved;
        collector.add("pretrain:" + spec.name, coord,
                      grads.flat[static_cast<size_t>(flat_idx)],
                      (lp - lm) / (2.0 * fd_step));
      }
    }
  }

  // --- classification paths (softmax cross entropy, sigmoid binary) ---
  for (int path = 0; path < 2; ++path) {
    ModelConfig cfg = gradcheck_config();
    cfg.num_classes = path == 0 ? kStageCount : 1;
    ModelParams params =
        ModelParams::init(cfg, derive_seed(seed, path == 0 ? "gc-ce" : "gc-bce"));
    const std::vector<EpochMatrix> epochs =
        gradcheck_epochs(cfg, derive_seed(seed, "gc-cls-data", path), batch);
    std::vector<SegmentedEpoch> segs;
    for (const auto& e : epochs) segs.push_back(segment_epoch(e, cfg.n_patch));
    const Mat tokens = batch_tokens(segs);
    Vec weights(kStageCount);
    weights << 1.2, 0.8, 1.0, 1.1, 0.9;
    const std::vector<int> labels{0, path == 0 ? 3 : 1};
    const double positive_weight = 2.5;

    auto loss_of = [&](const ModelParams& p, GradBuffer* grads) {
      ForwardTrace trace;
      ForwardTrace* tp = grads ? &trace : nullptr;
      const Mat encoded = model_encode(p, tokens, false, nullptr, tp);
      const Mat logits = model_head(p, encoded, batch, false, nullptr, tp);
      double loss = 0.0;
      Mat dlogits;
      if (path == 0) {
        const Mat probs = softmax_rows(logits);
        Mat onehot = Mat::Zero(batch, kStageCount);
        for (int i = 0; i < batch; ++i) onehot(i, labels[static_cast<size_t>(i)]) = 1.0;
        loss = weighted_ce_loss(probs, onehot, weights);
        if (grads)
          dlogits = softmax_backward(probs, weighted_ce_loss_grad(probs, onehot, weights));
      } else {
        const Vec p_sig = sigmoid_vec(logits.col(0));
        Vec y(batch);
        for (int i = 0; i < batch; ++i) y[i] = labels[static_cast<size_t>(i)];
        loss = weighted_bce_loss(p_sig, y, positive_weight);
        if (grads) {
          const Vec dp = weighted_bce_loss_grad(p_sig, y, positive_weight);
          dlogits.resize(batch, 1);
          for (int i = 0; i < batch; ++i)
            dlogits(i, 0) = dp[i] * p_sig[i] * (1.0 - p_sig[i]);
        }
      }
      if (grads) {
        Mat d_encoded;
        model_head_backward(p, trace, dlogits, *grads, d_encoded);
        model_encode_backward(p, trace, d_encoded, *grads, nullptr);
      }
      return loss;
    };

    GradBuffer grads(params.index);
    loss_of(params, &grads);
    Rng coord_rng(derive_seed(seed, "gc-cls-coords", path));
    const std::string prefix = path == 0 ? "staging:" : "osa:";
    for (const TensorSpec& spec : params.index.tensors) {
      for (long coord : pick_coords(spec, per_tensor, coord_rng)) {
        const long flat_idx = spec.offset + coord;
        const double saved = params.flat[static_cast<size_t>(flat_idx)];
        params.flat[static_cast<size_t>(flat_idx)] = saved + fd_step;
        const double lp = loss_of(params, nullptr);
        params.flat[static_cast<size_t>(flat_idx)] = saved - fd_step;
        const double lm = loss_of(params, nullptr);
        params.flat[static_cast<size_t>(flat_idx)] = saved;
        collector.add(prefix + spec.name, coord,
                      grads.flat[static_cast<size_t>(flat_idx)],
                      (lp - lm) / (2.0 * fd_step));
      }
    }
  }

  collector.report.pass = collector.report.max_rel_err < tolerance;
  return collector.report;
}

// ---------------------------------------------------------------------------
// Contrastive-term ablation
// ---------------------------------------------------------------------------

AblationOutcome run_iccl_ablation(const ModelConfig& mcfg, const Dataset& data,
                                  const std::vector<EpochRef>& eval_refs,
                                  ReconTarget eval_target,
                                  const TrainConfig& base,
                                  const std::vector<uint64_t>& seeds,
                                  const std::vector<int>& compare_channels) {
  require(!seeds.empty(), ErrKind::InvalidConfig, "no ablation seeds");
  require(!compare_channels.empty(), ErrKind::InvalidConfig,
          "no channels to compare");
  for (int ch : compare_channels)
    require(ch >= 0 && ch < mcfg.c, ErrKind::DimensionMismatch,
            "compare channel out of range");
  AblationOutcome outcome;
  for (uint64_t seed : seeds) {
    auto channel_mse = [&](const ModelParams& params, uint64_t eval_seed,
                           Vec& per_channel) {
      const ReconReport rep = reconstruction_report(
          params, data, eval_refs, eval_target, eval_seed, base.batch_size);
      per_channel = rep.per_channel_model;
      double sum = 0.0;
      for (int ch : compare_channels) sum += rep.per_channel_model[ch];
      return sum / static_cast<double>(compare_channels.size());
    };
    const uint64_t eval_seed = derive_seed(seed, "ablation-eval");
    AblationRun run;
    run.seed = seed;
    for (int variant = 0; variant < 2; ++variant) {
      TrainConfig t = base;
      t.seed = seed;
      t.use_iccl = variant == 0;
      if (!base.log_path.empty()) {
        std::filesystem::path p = base.log_path;
        t.log_path = p.parent_path() /
                     (p.stem().string() + "-" + std::to_string(seed) +
                      (t.use_iccl ? "-iccl" : "-noiccl") + p.extension().string());
      }
      const PretrainResult res = pretrain(mcfg, data, t);
      require(!res.diverged, ErrKind::DivergenceDetected,
              "ablation run diverged (seed " + std::to_string(seed) + ")");
      (variant == 0 ? run.mse_with : run.mse_without) = channel_mse(
          res.best_params, eval_seed,
          variant == 0 ? run.per_channel_with : run.per_channel_without);
    }
    run.win = run.mse_with < run.mse_without;
    outcome.wins += run.win ? 1 : 0;
    outcome.runs.push_back(run);
  }
  return outcome;
}

}  // namespace psgmae
