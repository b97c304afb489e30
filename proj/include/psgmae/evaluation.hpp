#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "psgmae/dataio.hpp"
#include "psgmae/masking.hpp"
#include "psgmae/model.hpp"

namespace psgmae {

enum class Task { staging, osa };

const char* task_name(Task t);
Task task_from_name(const std::string& name);
int task_num_classes(Task t);  // model head width: 5 for staging, 1 for osa
// Categories for metrics: 5 for staging, 2 for osa.
int task_num_categories(Task t);
// Extracts the task's label from an epoch annotation; -1 when absent.
int task_label(Task t, const EpochLabel& label);

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
  Eigen::MatrixXi counts;  // rows: true class, cols: predicted class
  long total() const { return counts.sum(); }
};

ConfusionMatrix confusion(const std::vector<int>& truth,
                          const std::vector<int>& predicted, int num_categories);

// Per-class precision/recall/F1 with the 0/0 := 0 convention, accuracy, and
// macro F1 (unweighted mean of per-class F1).
struct MetricReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  Vec precision, recall, f1;
  ConfusionMatrix cm;
};

MetricReport metrics_from_confusion(const ConfusionMatrix& cm);

// Mean and population standard deviation of accuracy and macro F1 across
// folds.
struct CvAggregate {
  double mean_accuracy = 0.0, std_accuracy = 0.0;
  double mean_macro_f1 = 0.0, std_macro_f1 = 0.0;
  std::vector<MetricReport> folds;
};

CvAggregate cv_aggregate(std::vector<MetricReport> folds);

// Runs the classifier over the given epochs in evaluation mode (no dropout)
// and scores predictions against the task's labels. Epochs without a label
// for the task are skipped.
MetricReport evaluate_classifier(const ModelParams& params, const Dataset& data,
                                 const std::vector<EpochRef>& refs, Task task,
                                 int batch_size = 32);

// Predicted class per epoch (argmax for staging, probability > 0.5 for osa).
std::vector<int> predict_classes(const ModelParams& params, const Dataset& data,
                                 const std::vector<EpochRef>& refs, Task task,
                                 int batch_size = 32);

// ---------------------------------------------------------------------------
// Reconstruction quality
// ---------------------------------------------------------------------------

// Per-cell squared reconstruction error over the scored cells of both mask
// sides, against the always-zero baseline. Masks are derived deterministically
// from mask_seed and the epoch's position in refs.
struct ReconReport {
  double model_mse = 0.0;
  double baseline_mse = 0.0;
  Vec per_channel_model;    // per-channel means
  Vec per_channel_baseline;
  long cells = 0;           // scalar samples scored
};

ReconReport reconstruction_report(const ModelParams& params, const Dataset& data,
                                  const std::vector<EpochRef>& refs,
                                  ReconTarget target, uint64_t mask_seed,
                                  int batch_size = 32);

// ---------------------------------------------------------------------------
// Plot-data exports (plain CSV, one header row)
// ---------------------------------------------------------------------------

// step,l_cos,l_mse,l_recon,l_cl,total,lr,clipped — from a pretraining ndjson
// run log (validation/event lines are skipped).
void export_loss_csv(const std::filesystem::path& ndjson_log,
                     const std::filesystem::path& csv_out);

// t,<ch>_orig,<ch>_masked,<ch>_recon per channel for one epoch and one mask
// side.
void export_trace_csv(const ModelParams& params, const Dataset& data,
                      const EpochRef& ref, uint64_t mask_seed,
                      const std::filesystem::path& csv_out);

// Pooled head features plus labels, one row per epoch.
void export_feature_csv(const ModelParams& params, const Dataset& data,
                        const std::vector<EpochRef>& refs, Task task,
                        const std::filesystem::path& csv_out,
                        int batch_size = 32);

}  // namespace psgmae
