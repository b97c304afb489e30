#include "psgmae/evaluation.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace psgmae {

using nlohmann::json;

const char* task_name(Task t) { return t == Task::staging ? "staging" : "osa"; }

Task task_from_name(const std::string& name) {
  if (name == "staging") return Task::staging;
  if (name == "osa") return Task::osa;
  fail(ErrKind::InvalidConfig, "unknown task '" + name + "'");
}

int task_num_classes(Task t) { return t == Task::staging ? kStageCount : 1; }
int task_num_categories(Task t) { return t == Task::staging ? kStageCount : 2; }

int task_label(Task t, const EpochLabel& label) {
  return t == Task::staging ? label.stage : label.osa;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

ConfusionMatrix confusion(const std::vector<int>& truth,
                          const std::vector<int>& predicted, int num_categories) {
  require(num_categories >= 2, ErrKind::InvalidConfig,
          "need at least 2 categories");
  require(truth.size() == predicted.size(), ErrKind::LengthMismatch,
          "truth and prediction counts differ");
  require(!truth.empty(), ErrKind::EmptyMatrix, "no predictions to score");
  ConfusionMatrix cm;
  cm.counts = Eigen::MatrixXi::Zero(num_categories, num_categories);
  for (size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && truth[i] < num_categories, ErrKind::LabelOutOfRange,
            "true label " + std::to_string(truth[i]) + " outside [0, " +
                std::to_string(num_categories) + ")");
    require(predicted[i] >= 0 && predicted[i] < num_categories,
            ErrKind::LabelOutOfRange,
            "predicted label " + std::to_string(predicted[i]) + " outside [0, " +
                std::to_string(num_categories) + ")");
    ++cm.counts(truth[i], predicted[i]);
  }
  return cm;
}

MetricReport metrics_from_confusion(const ConfusionMatrix& cm) {
  const long k = cm.counts.rows();
  require(k >= 2 && cm.counts.cols() == k, ErrKind::DimensionMismatch,
          "confusion matrix must be square with k >= 2");
  require((cm.counts.array() >= 0).all(), ErrKind::InvalidConfig,
          "confusion matrix has negative counts");
  const long total = cm.total();
  require(total > 0, ErrKind::EmptyMatrix, "empty confusion matrix");
  MetricReport report;
  report.cm = cm;
  report.precision = Vec::Zero(k);
  report.recall = Vec::Zero(k);
  report.f1 = Vec::Zero(k);
  long correct = 0;
  double f1_sum = 0.0;
  for (long j = 0; j < k; ++j) {
    const long tp = cm.counts(j, j);
    const long fp = cm.counts.col(j).sum() - tp;
    const long fn = cm.counts.row(j).sum() - tp;
    correct += tp;
    const double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    report.precision[j] = prec;
    report.recall[j] = rec;
    report.f1[j] = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    f1_sum += report.f1[j];
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  report.macro_f1 = f1_sum / static_cast<double>(k);
  return report;
}

CvAggregate cv_aggregate(std::vector<MetricReport> folds) {
  require(!folds.empty(), ErrKind::EmptyMatrix, "no folds to aggregate");
  CvAggregate agg;
  const double n = static_cast<double>(folds.size());
  double acc_sum = 0.0, mf1_sum = 0.0;
  for (const auto& f : folds) {
    acc_sum += f.accuracy;
    mf1_sum += f.macro_f1;
  }
  agg.mean_accuracy = acc_sum / n;
  agg.mean_macro_f1 = mf1_sum / n;
  double acc_ss = 0.0, mf1_ss = 0.0;
  for (const auto& f : folds) {
    acc_ss += (f.accuracy - agg.mean_accuracy) * (f.accuracy - agg.mean_accuracy);
    mf1_ss += (f.macro_f1 - agg.mean_macro_f1) * (f.macro_f1 - agg.mean_macro_f1);
  }
  agg.std_accuracy = std::sqrt(acc_ss / n);
  agg.std_macro_f1 = std::sqrt(mf1_ss / n);
  agg.folds = std::move(folds);
  return agg;
}

// ---------------------------------------------------------------------------
// Classifier evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<SegmentedEpoch> segment_refs(const Dataset& data,
                                         const std::vector<EpochRef>& refs,
                                         size_t first, size_t count, int n_patch) {
  std::vector<SegmentedEpoch> segs;
  segs.reserve(count);
  for (size_t i = first; i < first + count; ++i)
    segs.push_back(segment_epoch(data.normalized_epoch(refs[i]), n_patch));
  return segs;
}

}  // namespace

std::vector<int> predict_classes(const ModelParams& params, const Dataset& data,
                                 const std::vector<EpochRef>& refs, Task task,
                                 int batch_size) {
  require(params.cfg.num_classes == task_num_classes(task), ErrKind::ConfigMismatch,
          "model head width does not match the task");
  require(batch_size > 0, ErrKind::InvalidConfig, "batch_size must be positive");
  std::vector<int> out;
  out.reserve(refs.size());
  for (size_t first = 0; first < refs.size();
       first += static_cast<size_t>(batch_size)) {
    const size_t count =
        std::min(static_cast<size_t>(batch_size), refs.size() - first);
    const Mat tokens =
        batch_tokens(segment_refs(data, refs, first, count, params.cfg.n_patch));
    const Mat encoded = model_encode(params, tokens, false, nullptr, nullptr);
    const Mat logits = model_head(params, encoded, static_cast<int>(count), false,
                                  nullptr, nullptr);
    for (long r = 0; r < logits.rows(); ++r) {
      if (task == Task::staging) {
        long best = 0;
        logits.row(r).maxCoeff(&best);
        out.push_back(static_cast<int>(best));
      } else {
        out.push_back(logits(r, 0) > 0.0 ? 1 : 0);  // sigmoid(x) > 0.5 <=> x > 0
      }
    }
  }
  return out;
}

MetricReport evaluate_classifier(const ModelParams& params, const Dataset& data,
                                 const std::vector<EpochRef>& refs, Task task,
                                 int batch_size) {
  std::vector<EpochRef> labeled;
  std::vector<int> truth;
  for (const EpochRef& ref : refs) {
    const int y = task_label(task, data.label(ref));
    if (y < 0) continue;
    labeled.push_back(ref);
    truth.push_back(y);
  }
  require(!labeled.empty(), ErrKind::TooFewEpochs,
          "no epochs carry a label for this task");
  const std::vector<int> preds =
      predict_classes(params, data, labeled, task, batch_size);
  return metrics_from_confusion(
      confusion(truth, preds, task_num_categories(task)));
}

// ---------------------------------------------------------------------------
// Reconstruction quality
// ---------------------------------------------------------------------------

ReconReport reconstruction_report(const ModelParams& params, const Dataset& data,
                                  const std::vector<EpochRef>& refs,
                                  ReconTarget target, uint64_t mask_seed,
                                  int batch_size) {
  require(!refs.empty(), ErrKind::TooFewEpochs, "no epochs to reconstruct");
  require(batch_size > 0, ErrKind::InvalidConfig, "batch_size must be positive");
  const int np = params.cfg.n_patch;
  const int c = params.cfg.c;
  const int lp = params.cfg.l_prime;
  require(data.channels() == c, ErrKind::ConfigMismatch,
          "dataset channel count does not match the model");

  Vec model_se = Vec::Zero(c), base_se = Vec::Zero(c);
  Eigen::VectorXd counts = Vec::Zero(c);

  for (size_t first = 0; first < refs.size();
       first += static_cast<size_t>(batch_size)) {
    const size_t count =
        std::min(static_cast<size_t>(batch_size), refs.size() - first);
    std::vector<SegmentedEpoch> targets;
    std::vector<MaskPair> masks;
    std::vector<SegmentedEpoch> inputs;  // side A then side B, interleaved later
    targets.reserve(count);
    masks.reserve(count);
    for (size_t i = 0; i < count; ++i) {
      const EpochMatrix epoch = data.normalized_epoch(refs[first + i]);
      targets.push_back(segment_epoch(epoch, np));
      masks.push_back(generate_mask_pair(c, np,
                                         derive_seed(mask_seed, "eval-mask",
                                                     static_cast<uint64_t>(first + i))));
      inputs.push_back(segment_epoch(apply_mask(epoch, masks.back().m), np));
    }
    for (size_t i = 0; i < count; ++i) {
      const EpochMatrix epoch = data.normalized_epoch(refs[first + i]);
      inputs.push_back(
          segment_epoch(apply_mask(epoch, masks[i].complement()), np));
    }
    const Mat tokens = batch_tokens(inputs);
    const Mat encoded = model_encode(params, tokens, false, nullptr, nullptr);
    const Mat decoded = model_decode(params, encoded, nullptr);
    for (size_t i = 0; i < count; ++i) {
      for (int side = 0; side < 2; ++side) {
        const long row0 = (static_cast<long>(side) * count + i) * np;
        const SegmentedEpoch recon = segments_from_rows(decoded, row0, c, np, lp);
        const MaskTable table =
            loss_table(side == 0 ? MaskTable(masks[i].m)
                                 : MaskTable(masks[i].complement()),
                       target);
        for (int ch = 0; ch < c; ++ch) {
          for (int seg = 0; seg < np; ++seg) {
            if (!table(seg, ch)) continue;
            for (int t = 0; t < lp; ++t) {
              const double x = targets[i].segments[seg](ch, t);
              const double r = recon.segments[seg](ch, t);
              model_se[ch] += (r - x) * (r - x);
              base_se[ch] += x * x;
            }
            counts[ch] += lp;
          }
        }
      }
    }
  }

  ReconReport report;
  report.per_channel_model = Vec::Zero(c);
  report.per_channel_baseline = Vec::Zero(c);
  double total_model = 0.0, total_base = 0.0, total_count = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    if (counts[ch] > 0) {
      report.per_channel_model[ch] = model_se[ch] / counts[ch];
      report.per_channel_baseline[ch] = base_se[ch] / counts[ch];
    }
    total_model += model_se[ch];
    total_base += base_se[ch];
    total_count += counts[ch];
  }
  require(total_count > 0, ErrKind::EmptyMatrix, "no cells were scored");
  report.model_mse = total_model / total_count;
  report.baseline_mse = total_base / total_count;
  report.cells = static_cast<long>(total_count);
  return report;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

void export_loss_csv(const std::filesystem::path& ndjson_log,
                     const std::filesystem::path& csv_out) {
  std::ifstream in(ndjson_log);
  require(in.good(), ErrKind::IoFailure, "cannot open " + ndjson_log.string());
  std::ofstream out(csv_out, std::ios::trunc);
  require(out.good(), ErrKind::IoFailure, "cannot open " + csv_out.string());
  out << "step,l_cos,l_mse,l_recon,l_cl,total,lr,clipped\n";
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrKind::FormatViolation, ndjson_log.string() + ":" +
                                         std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("l_cos")) continue;  // validation / event lines
    out << j.at("step").dump() << ',' << j.at("l_cos").dump() << ','
        << j.at("l_mse").dump() << ',' << j.at("l_recon").dump() << ','
        << j.at("l_cl").dump() << ',' << j.at("total").dump() << ','
        << j.at("lr").dump() << ',' << (j.at("clipped").get<bool>() ? 1 : 0)
        << '\n';
  }
  require(out.good(), ErrKind::IoFailure, "write failed for " + csv_out.string());
}

void export_trace_csv(const ModelParams& params, const Dataset& data,
                      const EpochRef& ref, uint64_t mask_seed,
                      const std::filesystem::path& csv_out) {
  const int np = params.cfg.n_patch;
  const int c = params.cfg.c;
  require(data.channels() == c, ErrKind::ConfigMismatch,
          "dataset channel count does not match the model");
  const EpochMatrix epoch = data.normalized_epoch(ref);
  const MaskPair pair =
      generate_mask_pair(c, np, derive_seed(mask_seed, "eval-mask", 0));
  const EpochMatrix masked = apply_mask(epoch, pair.m);
  const Mat tokens = epoch_tokens(segment_epoch(masked, np));
  const Mat encoded = model_encode(params, tokens, false, nullptr, nullptr);
  const Mat decoded = model_decode(params, encoded, nullptr);
  const Mat recon =
      segments_from_rows(decoded, 0, c, np, params.cfg.l_prime).concat();

  std::ofstream out(csv_out, std::ios::trunc);
  require(out.good(), ErrKind::IoFailure, "cannot open " + csv_out.string());
  out << "t";
  for (int ch = 0; ch < c; ++ch) {
    const std::string& name = data.recordings[0].channel_names[ch];
    out << ',' << name << "_orig," << name << "_masked," << name << "_recon";
  }
  out << '\n';
  out.precision(9);
  for (long t = 0; t < epoch.length(); ++t) {
    out << t;
    for (int ch = 0; ch < c; ++ch)
      out << ',' << epoch.data(ch, t) << ',' << masked.data(ch, t) << ','
          << recon(ch, t);
    out << '\n';
  }
  require(out.good(), ErrKind::IoFailure, "write failed for " + csv_out.string());
}

void export_feature_csv(const ModelParams& params, const Dataset& data,
                        const std::vector<EpochRef>& refs, Task task,
                        const std::filesystem::path& csv_out, int batch_size) {
  require(params.cfg.num_classes > 0, ErrKind::InvalidConfig,
          "feature export needs a model with a head");
  require(!refs.empty(), ErrKind::TooFewEpochs, "no epochs to export");
  std::ofstream out(csv_out, std::ios::trunc);
  require(out.good(), ErrKind::IoFailure, "cannot open " + csv_out.string());
  out << "recording,epoch,label";
  for (int f = 0; f < params.cfg.head_channels; ++f) out << ",f" << f;
  out << '\n';
  out.precision(9);
  for (size_t first = 0; first < refs.size();
       first += static_cast<size_t>(batch_size)) {
    const size_t count =
        std::min(static_cast<size_t>(batch_size), refs.size() - first);
    const Mat tokens =
        batch_tokens(segment_refs(data, refs, first, count, params.cfg.n_patch));
    const Mat encoded = model_encode(params, tokens, false, nullptr, nullptr);
    ForwardTrace trace;
    model_head(params, encoded, static_cast<int>(count), false, nullptr, &trace);
    for (size_t i = 0; i < count; ++i) {
      const EpochRef& ref = refs[first + i];
      out << ref.recording << ',' << ref.epoch << ','
          << task_label(task, data.label(ref));
      for (int f = 0; f < params.cfg.head_channels; ++f)
        out << ',' << trace.pooled(static_cast<long>(i), f);
      out << '\n';
    }
  }
  require(out.good(), ErrKind::IoFailure, "write failed for " + csv_out.string());
}

}  // namespace psgmae
