#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "helpers.hpp"
#include "psgmae/evaluation.hpp"
#include "psgmae/runlog.hpp"

using namespace psgmae;
using psgmae::test::kind_of;
namespace stdfs = std::filesystem;

namespace {

// Brute-force per-class metrics straight from the definitions.
void oracle_metrics(const std::vector<int>& truth, const std::vector<int>& pred,
                    int k, double& acc, double& mf1) {
  long correct = 0;
  for (size_t i = 0; i < truth.size(); ++i) correct += truth[i] == pred[i];
  acc = static_cast<double>(correct) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
      if (pred[i] == c && truth[i] == c) ++tp;
      if (pred[i] == c && truth[i] != c) ++fp;
      if (pred[i] != c && truth[i] == c) ++fn;
    }
    const double p = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
    const double r = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    f1_sum += p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
  mf1 = f1_sum / k;
}

int count_lines(const stdfs::path& p) {
  std::ifstream in(p);
  int n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("task helpers map names, widths and labels") {
  CHECK(task_from_name("staging") == Task::staging);
  CHECK(task_from_name("osa") == Task::osa);
  CHECK(kind_of([] { task_from_name("apnea"); }) == ErrKind::InvalidConfig);
  CHECK(task_num_classes(Task::staging) == 5);
  CHECK(task_num_classes(Task::osa) == 1);
  CHECK(task_num_categories(Task::osa) == 2);
  EpochLabel l;
  l.stage = 3;
  l.osa = 1;
  CHECK(task_label(Task::staging, l) == 3);
  CHECK(task_label(Task::osa, l) == 1);
  l.stage = -1;
  CHECK(task_label(Task::staging, l) == -1);
}

TEST_CASE("confusion matrix counts the hand case") {
  const ConfusionMatrix cm = confusion({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
  CHECK(cm.counts(0, 0) == 1);
  CHECK(cm.counts(0, 1) == 1);
  CHECK(cm.counts(1, 0) == 0);
  CHECK(cm.counts(1, 1) == 2);
  CHECK(cm.total() == 4);
  CHECK(kind_of([] { confusion({0, 2}, {0, 0}, 2); }) == ErrKind::LabelOutOfRange);
  CHECK(kind_of([] { confusion({0}, {0, 1}, 2); }) == ErrKind::LengthMismatch);
}

TEST_CASE("metrics reproduce the derived hand values") {
  const ConfusionMatrix cm = confusion({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
  const MetricReport rep = metrics_from_confusion(cm);
  CHECK(std::abs(rep.accuracy - 0.75) <= 1e-9);
  CHECK(std::abs(rep.precision[0] - 1.0) <= 1e-9);
  CHECK(std::abs(rep.recall[0] - 0.5) <= 1e-9);
  CHECK(std::abs(rep.f1[0] - 2.0 / 3.0) <= 1e-9);
  CHECK(std::abs(rep.precision[1] - 2.0 / 3.0) <= 1e-9);
  CHECK(std::abs(rep.recall[1] - 1.0) <= 1e-9);
  CHECK(std::abs(rep.f1[1] - 0.8) <= 1e-9);
  CHECK(std::abs(rep.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0) <= 1e-9);
  CHECK(std::abs(rep.macro_f1 - 0.7333) <= 5e-5);
}

TEST_CASE("degenerate all-majority predictions score as derived") {
  // balanced two-class truth, every prediction class 1
  const ConfusionMatrix cm = confusion({0, 0, 1, 1}, {1, 1, 1, 1}, 2);
  const MetricReport rep = metrics_from_confusion(cm);
  CHECK(std::abs(rep.accuracy - 0.5) <= 1e-12);
  CHECK(rep.precision[0] == 0.0);  // never predicted: 0/0 scored as 0
  CHECK(rep.recall[0] == 0.0);
  CHECK(rep.f1[0] == 0.0);
  CHECK(std::abs(rep.macro_f1 - (0.0 + 2.0 / 3.0) / 2.0) <= 1e-12);
}

TEST_CASE("metrics agree with a brute-force oracle on one thousand instances") {
  Rng rng(404);
  for (int rep = 0; rep < 1000; ++rep) {
    const int k = 2 + static_cast<int>(rng.uniform_int(5));
    const int n = 1 + static_cast<int>(rng.uniform_int(40));
    std::vector<int> truth, pred;
    for (int i = 0; i < n; ++i) {
      truth.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(k))));
      pred.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(k))));
    }
    const MetricReport got = metrics_from_confusion(confusion(truth, pred, k));
    double acc = 0.0, mf1 = 0.0;
    oracle_metrics(truth, pred, k, acc, mf1);
    CHECK(got.accuracy == acc);
    CHECK(std::abs(got.macro_f1 - mf1) <= 1e-12);
  }
}

TEST_CASE("cross-validation aggregation uses population statistics") {
  MetricReport a, b;
  a.accuracy = 0.8;
  a.macro_f1 = 0.7;
  b.accuracy = 0.6;
  b.macro_f1 = 0.5;
  const CvAggregate agg = cv_aggregate({a, b});
  CHECK(agg.mean_accuracy == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(agg.std_accuracy == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(agg.mean_macro_f1 == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(agg.std_macro_f1 == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(agg.folds.size() == 2);
  CHECK(kind_of([] { cv_aggregate({}); }) == ErrKind::EmptyMatrix);
}

namespace {

ModelConfig eval_config(int num_classes) {
  ModelConfig cfg;
  cfg.c = 5;
  cfg.n_patch = 4;
  cfg.l_prime = 10;  // 40-sample epochs: 20 Hz * 2 s
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.dec_hidden = 12;
  cfg.kernels = {3};
  cfg.head_channels = 4;
  cfg.head_mlp_hidden = 6;
  cfg.num_classes = num_classes;
  cfg.dropout = 0.0;
  return cfg;
}

Dataset eval_dataset(LabelMode mode, int epochs) {
  SynthConfig cfg;
  cfg.epoch_count = epochs;
  cfg.sampling_hz = 20;
  cfg.epoch_seconds = 2;
  cfg.label_mode = mode;
  cfg.seed = 77;
  std::vector<Recording> recs{generate_synthetic(cfg)};
  return make_dataset(std::move(recs), CenterMode::median, 0.6, 0.2, 5);
}

}  // namespace

TEST_CASE("class prediction takes the argmax or thresholds the logit") {
  const Dataset ds = eval_dataset(LabelMode::both, 12);
  const ModelParams staging = ModelParams::init(eval_config(5), 3);
  std::vector<EpochRef> refs;
  for (long e = 0; e < 12; ++e) refs.push_back({0, e});
  const std::vector<int> pred = predict_classes(staging, ds, refs, Task::staging, 5);
  REQUIRE(pred.size() == refs.size());
  // cross-check against a direct forward pass
  for (size_t i = 0; i < refs.size(); ++i) {
    const Mat tokens =
        batch_tokens({segment_epoch(ds.normalized_epoch(refs[i]), 4)});
    const Mat enc = model_encode(staging, tokens, false, nullptr, nullptr);
    const Mat logits = model_head(staging, enc, 1, false, nullptr, nullptr);
    int arg = 0;
    logits.row(0).maxCoeff(&arg);
    CHECK(pred[i] == arg);
  }
  const ModelParams osa = ModelParams::init(eval_config(1), 4);
  const std::vector<int> pb = predict_classes(osa, ds, refs, Task::osa, 7);
  for (size_t i = 0; i < refs.size(); ++i) {
    const Mat tokens =
        batch_tokens({segment_epoch(ds.normalized_epoch(refs[i]), 4)});
    const Mat enc = model_encode(osa, tokens, false, nullptr, nullptr);
    const Mat logits = model_head(osa, enc, 1, false, nullptr, nullptr);
    CHECK(pb[i] == (logits(0, 0) > 0.0 ? 1 : 0));
  }
}

TEST_CASE("classifier evaluation skips unlabeled epochs") {
  Dataset ds = eval_dataset(LabelMode::both, 10);
  ds.recordings[0].labels[2].stage = -1;
  ds.recordings[0].labels[5].stage = -1;
  std::vector<EpochRef> refs;
  for (long e = 0; e < 10; ++e) refs.push_back({0, e});
  const ModelParams params = ModelParams::init(eval_config(5), 3);
  const MetricReport rep = evaluate_classifier(params, ds, refs, Task::staging, 4);
  CHECK(rep.cm.total() == 8);
  for (EpochLabel& l : ds.recordings[0].labels) l.stage = -1;
  CHECK(kind_of([&] { evaluate_classifier(params, ds, refs, Task::staging, 4); }) ==
        ErrKind::TooFewEpochs);
}

TEST_CASE("an all-zero model reconstructs at exactly the baseline") {
  const Dataset ds = eval_dataset(LabelMode::none, 8);
  ModelParams params = ModelParams::init(eval_config(0), 1);
  for (double& v : params.flat) v = 0.0;
  std::vector<EpochRef> refs;
  for (long e = 0; e < 8; ++e) refs.push_back({0, e});
  const ReconReport rep =
      reconstruction_report(params, ds, refs, ReconTarget::visible, 11, 4);
  CHECK(rep.cells > 0);
  CHECK(rep.model_mse == rep.baseline_mse);  // output is identically zero
  for (int ch = 0; ch < 5; ++ch)
    CHECK(rep.per_channel_model[ch] == rep.per_channel_baseline[ch]);
  // z-scored signals put the predict-zero baseline near unit variance
  CHECK(rep.baseline_mse == doctest::Approx(1.0).epsilon(0.25));

  const ReconReport again =
      reconstruction_report(params, ds, refs, ReconTarget::visible, 11, 4);
  CHECK(again.model_mse == rep.model_mse);  // deterministic in the mask seed
  const ReconReport hidden =
      reconstruction_report(params, ds, refs, ReconTarget::hidden, 11, 4);
  CHECK(hidden.cells == rep.cells);  // complementary halves have equal area
}

TEST_CASE("csv exports are well formed") {
  const stdfs::path dir = stdfs::temp_directory_path() / "psgmae-test-eval";
  stdfs::remove_all(dir);
  stdfs::create_directories(dir);

  {
    RunLog log(dir / "run.ndjson");
    for (int s = 1; s <= 5; ++s)
      log.pretrain_step({s, 0.1, 0.2, 0.3, 0.05, 0.35, 1e-3, false});
    log.validation({5, "total", 0.33});
    log.flush();
  }
  export_loss_csv(dir / "run.ndjson", dir / "loss.csv");
  CHECK(count_lines(dir / "loss.csv") == 6);  // header + 5 step rows
  {
    std::ifstream in(dir / "loss.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,l_cos,l_mse,l_recon,l_cl,total,lr,clipped");
  }

  const Dataset ds = eval_dataset(LabelMode::both, 6);
  const ModelParams enc_params = ModelParams::init(eval_config(0), 2);
  export_trace_csv(enc_params, ds, {0, 1}, 9, dir / "trace.csv");
  CHECK(count_lines(dir / "trace.csv") == 41);  // header + epoch length rows
  {
    std::ifstream in(dir / "trace.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("t,", 0) == 0);
    std::string first_col = header.substr(0, header.find(','));
    CHECK(first_col == "t");
  }

  const ModelParams cls = ModelParams::init(eval_config(5), 3);
  std::vector<EpochRef> refs;
  for (long e = 0; e < 6; ++e) refs.push_back({0, e});
  export_feature_csv(cls, ds, refs, Task::staging, dir / "features.csv", 4);
  CHECK(count_lines(dir / "features.csv") == 7);

  // fixed inputs re-export byte for byte
  auto slurp = [](const stdfs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string trace_once = slurp(dir / "trace.csv");
  const std::string features_once = slurp(dir / "features.csv");
  export_trace_csv(enc_params, ds, {0, 1}, 9, dir / "trace.csv");
  export_feature_csv(cls, ds, refs, Task::staging, dir / "features.csv", 4);
  CHECK(slurp(dir / "trace.csv") == trace_once);
  CHECK(slurp(dir / "features.csv") == features_once);
  stdfs::remove_all(dir);
}
