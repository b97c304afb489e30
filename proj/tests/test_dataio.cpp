#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "helpers.hpp"
#include "psgmae/dataio.hpp"

using namespace psgmae;
using psgmae::test::kind_of;
namespace stdfs = std::filesystem;

namespace {

stdfs::path fresh_dir(const std::string& tag) {
  const stdfs::path p = stdfs::temp_directory_path() / ("psgmae-test-" + tag);
  stdfs::remove_all(p);
  stdfs::create_directories(p);
  return p;
}

Recording random_recording(Rng& rng, LabelMode mode) {
  Recording rec;
  rec.subject_id = "subj-" + std::to_string(rng.uniform_int(1000));
  const int c = 2 + static_cast<int>(rng.uniform_int(3));
  for (int ch = 0; ch < c; ++ch) rec.channel_names.push_back("ch" + std::to_string(ch));
  rec.sampling_hz = 10;
  rec.epoch_seconds = 2;
  const long epochs = 1 + static_cast<long>(rng.uniform_int(5));
  const long total = epochs * rec.epoch_length();
  rec.samples.resize(static_cast<size_t>(c * total));
  for (float& v : rec.samples) v = static_cast<float>(rng.normal());
  rec.label_mode = mode;
  if (mode != LabelMode::none) {
    rec.labels.resize(static_cast<size_t>(epochs));
    for (EpochLabel& l : rec.labels) {
      if (mode == LabelMode::staging5 || mode == LabelMode::both)
        l.stage = rng.uniform() < 0.2
                      ? int8_t{-1}
                      : static_cast<int8_t>(rng.uniform_int(kStageCount));
      if (mode == LabelMode::osa2 || mode == LabelMode::both)
        l.osa = rng.uniform() < 0.2 ? int8_t{-1}
                                    : static_cast<int8_t>(rng.uniform_int(2));
    }
  }
  return rec;
}

}  // namespace

TEST_CASE("label metadata names round-trip") {
  for (LabelMode m : {LabelMode::none, LabelMode::staging5, LabelMode::osa2,
                      LabelMode::both})
    CHECK(label_mode_from_name(label_mode_name(m)) == m);
  CHECK(kind_of([] { label_mode_from_name("labels"); }) == ErrKind::InvalidConfig);
  CHECK(stage_name(0) == std::string("W"));
  CHECK(stage_name(4) == std::string("R"));
  for (int s = 0; s < kStageCount; ++s) CHECK(stage_from_name(stage_name(s)) == s);
  CHECK(stage_from_name("-") == -1);
}

TEST_CASE("recording validation catches malformed inputs") {
  Rng rng(11);
  Recording good = random_recording(rng, LabelMode::both);
  CHECK_NOTHROW(validate_recording(good));

  Recording bad = good;
  bad.channel_names.resize(1);
  CHECK(kind_of([&] { validate_recording(bad); }) == ErrKind::TooFewChannels);

  bad = good;
  bad.samples.pop_back();
  CHECK(kind_of([&] { validate_recording(bad); }) == ErrKind::LengthMismatch);

  bad = good;
  bad.labels.pop_back();
  CHECK(kind_of([&] { validate_recording(bad); }) == ErrKind::LabelModeMismatch);

  bad = good;
  bad.labels[0].stage = 5;
  CHECK(kind_of([&] { validate_recording(bad); }) == ErrKind::LabelOutOfRange);

  bad = good;
  bad.label_mode = LabelMode::none;
  CHECK(kind_of([&] { validate_recording(bad); }) == ErrKind::LabelModeMismatch);

  bad = good;
  bad.subject_id.clear();
  CHECK(kind_of([&] { validate_recording(bad); }) == ErrKind::InvalidConfig);
}

TEST_CASE("recordings round-trip bitwise through the binary container") {
  Rng rng(21);
  const LabelMode modes[] = {LabelMode::none, LabelMode::staging5, LabelMode::osa2,
                             LabelMode::both};
  for (int rep = 0; rep < 100; ++rep) {
    const Recording rec = random_recording(rng, modes[rep % 4]);
    const std::vector<uint8_t> bytes = encode_recording(rec);
    const Recording back = decode_recording(bytes);
    CHECK(back == rec);
    CHECK(encode_recording(back) == bytes);  // stable re-encoding
  }
}

TEST_CASE("file round-trip preserves the recording") {
  const stdfs::path dir = fresh_dir("file-roundtrip");
  Rng rng(22);
  const Recording rec = random_recording(rng, LabelMode::both);
  write_recording(rec, dir / "a.psgr");
  CHECK(read_recording(dir / "a.psgr") == rec);
  CHECK(kind_of([&] { read_recording(dir / "missing.psgr"); }) == ErrKind::IoFailure);
  stdfs::remove_all(dir);
}

TEST_CASE("truncated containers fail with a located format violation") {
  Rng rng(23);
  const Recording rec = random_recording(rng, LabelMode::osa2);
  const std::vector<uint8_t> bytes = encode_recording(rec);
  for (size_t cut : {size_t{0}, size_t{3}, size_t{5}, size_t{9}, bytes.size() / 2,
                     bytes.size() - 1}) {
    const std::span<const uint8_t> prefix(bytes.data(), cut);
    try {
      decode_recording(prefix);
      FAIL("decode accepted a truncated container of ", cut, " bytes");
    } catch (const PsgError& e) {
      CHECK(e.kind() == ErrKind::FormatViolation);
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }
}

TEST_CASE("trailing bytes are rejected, not ignored") {
  Rng rng(24);
  const Recording rec = random_recording(rng, LabelMode::none);
  std::vector<uint8_t> bytes = encode_recording(rec);
  bytes.push_back(0x00);
  try {
    decode_recording(bytes);
    FAIL("decode accepted trailing garbage");
  } catch (const PsgError& e) {
    CHECK(e.kind() == ErrKind::FormatViolation);
    CHECK(std::string(e.what()).find("trailing garbage") != std::string::npos);
  }
}

TEST_CASE("single bit flips are caught by the checksum or structure checks") {
  Rng rng(25);
  const Recording rec = random_recording(rng, LabelMode::both);
  const std::vector<uint8_t> clean = encode_recording(rec);
  int caught = 0;
  for (int rep = 0; rep < 250; ++rep) {
    std::vector<uint8_t> bytes = clean;
    const size_t pos = static_cast<size_t>(rng.uniform_int(bytes.size()));
    bytes[pos] ^= static_cast<uint8_t>(1 + rng.uniform_int(255));
    try {
      decode_recording(bytes);
      FAIL("mutation at byte ", pos, " decoded silently");
    } catch (const PsgError& e) {
      CHECK((e.kind() == ErrKind::FormatViolation ||
             e.kind() == ErrKind::ChecksumMismatch));
      ++caught;
    }
  }
  CHECK(caught == 250);
}

TEST_CASE("synthetic generation is deterministic and seed-sensitive") {
  SynthConfig cfg;
  cfg.epoch_count = 6;
  cfg.sampling_hz = 20;
  cfg.seed = 99;
  const Recording a = generate_synthetic(cfg);
  const Recording b = generate_synthetic(cfg);
  CHECK(a == b);
  cfg.seed = 100;
  const Recording c = generate_synthetic(cfg);
  CHECK(a.samples != c.samples);
  CHECK_NOTHROW(validate_recording(a));
  CHECK(a.channels() == 5);
  CHECK(a.epoch_count() == 6);
  CHECK(a.total_length() == 6L * 20 * 30);
}

TEST_CASE("synthetic labels follow the configured mode and rate") {
  SynthConfig cfg;
  cfg.epoch_count = 400;
  cfg.sampling_hz = 10;
  cfg.event_rate = 0.25;
  cfg.seed = 7;
  cfg.label_mode = LabelMode::both;
  const Recording rec = generate_synthetic(cfg);
  long events = 0;
  std::set<int> stages_seen;
  for (const EpochLabel& l : rec.labels) {
    CHECK(l.stage >= 0);
    CHECK(l.stage < kStageCount);
    CHECK(l.osa >= 0);
    CHECK(l.osa <= 1);
    events += l.osa;
    stages_seen.insert(l.stage);
  }
  CHECK(static_cast<double>(events) / cfg.epoch_count ==
        doctest::Approx(0.25).epsilon(0.3));
  CHECK(stages_seen.size() == 5);  // every latent class appears in 400 epochs

  // a balanced rate over 1000 epochs stays inside the binomial 99% band
  cfg.epoch_count = 1000;
  cfg.event_rate = 0.5;
  cfg.label_mode = LabelMode::osa2;
  const Recording big = generate_synthetic(cfg);
  long half_events = 0;
  for (const EpochLabel& l : big.labels) half_events += l.osa;
  const double frac = static_cast<double>(half_events) / 1000.0;
  CHECK(frac >= 0.45);
  CHECK(frac <= 0.55);

  cfg.event_rate = 0.0;
  const Recording quiet = generate_synthetic(cfg);
  for (const EpochLabel& l : quiet.labels) CHECK(l.osa == 0);
}

TEST_CASE("epoch-wise split honors the fractions and covers every epoch") {
  std::vector<Recording> recs;
  SynthConfig cfg;
  cfg.epoch_count = 20;
  cfg.sampling_hz = 10;
  for (int r = 0; r < 10; ++r) {
    cfg.seed = static_cast<uint64_t>(r);
    cfg.subject_id = "s" + std::to_string(r);
    recs.push_back(generate_synthetic(cfg));
  }
  const EpochSplit split = make_split(recs, 0.8, 0.1, 5);
  CHECK(split.train.size() == 160);
  CHECK(split.val.size() == 20);
  CHECK(split.test.size() == 20);
  std::set<std::pair<int, long>> seen;
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (const EpochRef& ref : *part) seen.insert({ref.recording, ref.epoch});
  CHECK(seen.size() == 200);
  // deterministic in the seed
  const EpochSplit again = make_split(recs, 0.8, 0.1, 5);
  CHECK(again.train == split.train);
  CHECK(again.val == split.val);
  CHECK(kind_of([&] { make_split(recs, 0.999, 0.0009, 5); }) ==
        ErrKind::TooFewEpochs);
}

TEST_CASE("subject folds are balanced and exhaustive") {
  std::vector<Recording> recs;
  SynthConfig cfg;
  cfg.epoch_count = 4;
  cfg.sampling_hz = 10;
  for (int r = 0; r < 7; ++r) {
    cfg.seed = static_cast<uint64_t>(r);
    cfg.subject_id = "subject-" + std::to_string(r);
    recs.push_back(generate_synthetic(cfg));
  }
  const SplitPlan plan = make_subject_folds(recs, 3, 17);
  CHECK(plan.fold_count == 3);
  CHECK(plan.assignments.size() == 7);
  std::vector<int> sizes(3, 0);
  for (const auto& [subject, fold] : plan.assignments) {
    CHECK(fold >= 0);
    CHECK(fold < 3);
    ++sizes[static_cast<size_t>(fold)];
  }
  CHECK(*std::max_element(sizes.begin(), sizes.end()) -
            *std::min_element(sizes.begin(), sizes.end()) <=
        1);
  CHECK(kind_of([&] { make_subject_folds(recs, 8, 17); }) == ErrKind::TooFewSubjects);

  for (int fold = 0; fold < 3; ++fold) {
    const EpochSplit split = materialize_fold(recs, plan, fold, 23);
    std::set<int> test_recs, trainval_recs;
    for (const EpochRef& ref : split.test) test_recs.insert(ref.recording);
    for (const EpochRef& ref : split.train) trainval_recs.insert(ref.recording);
    for (const EpochRef& ref : split.val) trainval_recs.insert(ref.recording);
    // subject-wise: no recording appears on both sides of the fold boundary
    for (int r : test_recs) {
      CHECK(trainval_recs.count(r) == 0);
      CHECK(plan.assignments.at(recs[static_cast<size_t>(r)].subject_id) == fold);
    }
    CHECK(split.train.size() + split.val.size() + split.test.size() == 28);
  }
}

TEST_CASE("class weights follow N over K times n_j") {
  const Vec w = class_weights({0, 1, 2, 2}, 3);
  CHECK(w[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(w[2] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  // weighted sample count is preserved: sum_j w_j * n_j == N
  CHECK(w[0] * 1 + w[1] * 1 + w[2] * 2 == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(kind_of([] { class_weights({0, 0, 2}, 3); }) == ErrKind::MissingCategory);
  CHECK(kind_of([] { class_weights({0, 1, 3}, 3); }) == ErrKind::LabelOutOfRange);
}

TEST_CASE("label csv round-trips stage and osa columns") {
  const stdfs::path dir = fresh_dir("labelcsv");
  {
    std::ofstream out(dir / "labels.csv");
    out << "epoch_index,stage,osa\n";
    out << "0,W,0\n";
    out << "2,N2,1\n";
    out << "1,R,-\n";
  }
  const std::vector<EpochLabel> labels = read_label_csv(dir / "labels.csv", 4);
  REQUIRE(labels.size() == 4);
  CHECK(labels[0].stage == 0);
  CHECK(labels[0].osa == 0);
  CHECK(labels[1].stage == 4);
  CHECK(labels[1].osa == -1);
  CHECK(labels[2].stage == 2);
  CHECK(labels[2].osa == 1);
  CHECK(labels[3].stage == -1);
  CHECK(labels[3].osa == -1);

  {
    std::ofstream out(dir / "dup.csv");
    out << "epoch_index,stage,osa\n0,W,0\n0,R,1\n";
  }
  CHECK(kind_of([&] { read_label_csv(dir / "dup.csv", 2); }) ==
        ErrKind::FormatViolation);
  {
    std::ofstream out(dir / "badhead.csv");
    out << "epoch,stage,osa\n0,W,0\n";
  }
  CHECK(kind_of([&] { read_label_csv(dir / "badhead.csv", 2); }) ==
        ErrKind::FormatViolation);
  stdfs::remove_all(dir);
}

TEST_CASE("text import builds a recording from sidecar and csv columns") {
  const stdfs::path dir = fresh_dir("import");
  // 25 samples at 10 Hz / 2 s epochs -> one whole epoch, 5 samples trimmed
  for (const char* name : {"eeg.csv", "eog.csv"}) {
    std::ofstream out(dir / name);
    out << "value\n";
    for (int i = 0; i < 25; ++i)
      out << (name[0] == 'e' && name[1] == 'e' ? 0.5 * i : -0.25 * i) << "\n";
  }
  {
    std::ofstream out(dir / "labels.csv");
    out << "epoch_index,stage,osa\n0,N1,1\n";
  }
  {
    std::ofstream out(dir / "rec.json");
    out << R"({"subject_id":"imported-1","sampling_hz":10,"epoch_seconds":2,)"
        << R"("channels":[{"name":"EEG","file":"eeg.csv"},{"name":"EOG","file":"eog.csv"}],)"
        << R"("labels_csv":"labels.csv","label_mode":"both"})";
  }
  const Recording rec = import_text_recording(dir / "rec.json");
  CHECK(rec.subject_id == "imported-1");
  CHECK(rec.channels() == 2);
  CHECK(rec.total_length() == 20);
  CHECK(rec.epoch_count() == 1);
  CHECK(rec.samples[0] == 0.0f);
  CHECK(rec.samples[1] == 0.5f);
  CHECK(rec.samples[20] == 0.0f);
  CHECK(rec.samples[21] == -0.25f);
  REQUIRE(rec.labels.size() == 1);
  CHECK(rec.labels[0].stage == 1);
  CHECK(rec.labels[0].osa == 1);

  // unequal channel lengths are rejected
  {
    std::ofstream out(dir / "short.csv");
    out << "value\n1\n2\n3\n";
  }
  {
    std::ofstream out(dir / "bad.json");
    out << R"({"subject_id":"x","sampling_hz":10,"epoch_seconds":2,)"
        << R"("channels":[{"name":"A","file":"eeg.csv"},{"name":"B","file":"short.csv"}]})";
  }
  CHECK(kind_of([&] { import_text_recording(dir / "bad.json"); }) ==
        ErrKind::LengthMismatch);
  stdfs::remove_all(dir);
}

TEST_CASE("dataset normalizes per recording with its own statistics") {
  SynthConfig cfg;
  cfg.epoch_count = 8;
  cfg.sampling_hz = 10;
  std::vector<Recording> recs;
  for (int r = 0; r < 2; ++r) {
    cfg.seed = 40 + static_cast<uint64_t>(r);
    cfg.subject_id = "n" + std::to_string(r);
    recs.push_back(generate_synthetic(cfg));
  }
  const Dataset ds = make_dataset(recs, CenterMode::median, 0.7, 0.15, 3);
  REQUIRE(ds.recordings.size() == 2);
  REQUIRE(ds.stats.size() == 2);
  CHECK(ds.total_epochs() == 16);
  CHECK(ds.split.train.size() + ds.split.val.size() + ds.split.test.size() == 16);

  // check one value against a from-scratch computation
  const EpochRef ref{1, 3};
  const EpochMatrix z = ds.normalized_epoch(ref);
  const Recording& rec = recs[1];
  for (int ch = 0; ch < rec.channels(); ++ch) {
    const std::span<const float> chan = rec.channel(ch);
    std::vector<double> vals(chan.begin(), chan.end());
    std::sort(vals.begin(), vals.end());
    const size_t n = vals.size();
    const double median = n % 2 == 1
                              ? vals[n / 2]
                              : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
    double sum = 0.0;
    for (const float v : chan) sum += v;
    const double mu = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const float v : chan) ss += (v - mu) * (v - mu);
    const double sigma = std::sqrt(ss / static_cast<double>(n));
    const long t0 = ref.epoch * rec.epoch_length();
    for (long t = 0; t < 5; ++t) {
      const double raw = rec.samples[static_cast<size_t>(ch * rec.total_length() +
                                                         t0 + t)];
      CHECK(z.data(ch, t) ==
            doctest::Approx((raw - median) / std::max(sigma, 1e-8)).epsilon(1e-9));
    }
  }
  CHECK(ds.label(ref) == rec.labels[3]);
}

TEST_CASE("recording sets round-trip through a directory with manifest") {
  const stdfs::path dir = fresh_dir("recset");
  SynthConfig cfg;
  cfg.epoch_count = 3;
  cfg.sampling_hz = 10;
  std::vector<Recording> recs;
  for (int r = 0; r < 3; ++r) {
    cfg.seed = 60 + static_cast<uint64_t>(r);
    cfg.subject_id = "set-" + std::to_string(r);
    recs.push_back(generate_synthetic(cfg));
  }
  write_recording_set(recs, dir);
  CHECK(stdfs::exists(dir / "manifest.json"));
  const std::vector<Recording> back = read_recording_set(dir);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) CHECK(back[i] == recs[i]);

  // corrupt one container: the set read must fail loudly
  std::vector<stdfs::path> files;
  for (const auto& entry : stdfs::directory_iterator(dir))
    if (entry.path().extension() == ".psgr") files.push_back(entry.path());
  REQUIRE(files.size() == 3);
  std::sort(files.begin(), files.end());
  {
    std::fstream f(files[1], std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    char b = 0;
    f.read(&b, 1);
    f.seekp(40);
    b = static_cast<char>(b ^ 0x10);
    f.write(&b, 1);
  }
  try {
    read_recording_set(dir);
    FAIL("corrupted set was read silently");
  } catch (const PsgError& e) {
    CHECK((e.kind() == ErrKind::ChecksumMismatch ||
           e.kind() == ErrKind::FormatViolation));
  }
  stdfs::remove_all(dir);
}

TEST_CASE("per-epoch energy profiles separate the stages linearly") {
  // A bias-term logistic fit on per-channel RMS must already beat 80% held-out
  // accuracy; the deep staging results rest on this generator property.
  std::vector<Recording> recs;
  SynthConfig cfg;
  cfg.epoch_count = 100;
  cfg.sampling_hz = 20;
  cfg.epoch_seconds = 2;
  cfg.label_mode = LabelMode::staging5;
  for (int r = 0; r < 4; ++r) {
    cfg.seed = 300 + static_cast<uint64_t>(r);
    cfg.subject_id = "lin" + std::to_string(r);
    recs.push_back(generate_synthetic(cfg));
  }
  const Dataset ds = make_dataset(std::move(recs), CenterMode::median, 0.8, 0.1, 17);
  const int c = ds.channels();
  auto features = [&](const std::vector<EpochRef>& refs, Mat& x, std::vector<int>& y) {
    x.resize(static_cast<long>(refs.size()), c + 1);
    y.clear();
    for (size_t i = 0; i < refs.size(); ++i) {
      const EpochMatrix ep = ds.normalized_epoch(refs[i]);
      for (int ch = 0; ch < c; ++ch)
        x(static_cast<long>(i), ch) =
            std::sqrt(ep.data.row(ch).squaredNorm() / static_cast<double>(ep.length()));
      x(static_cast<long>(i), c) = 1.0;
      y.push_back(ds.label(refs[i]).stage);
    }
  };
  Mat xtr, xte;
  std::vector<int> ytr, yte;
  features(ds.split.train, xtr, ytr);
  features(ds.split.test, xte, yte);

  Mat w = Mat::Zero(c + 1, kStageCount);
  auto probs_of = [](const Mat& x, const Mat& w) {
    Mat z = x * w;
    for (long r = 0; r < z.rows(); ++r) {
      const double m = z.row(r).maxCoeff();
      z.row(r) = (z.row(r).array() - m).exp().matrix();
      z.row(r) /= z.row(r).sum();
    }
    return z;
  };
  const double n = static_cast<double>(xtr.rows());
  for (int it = 0; it < 400; ++it) {
    Mat g = probs_of(xtr, w);
    for (long r = 0; r < g.rows(); ++r) g(r, ytr[static_cast<size_t>(r)]) -= 1.0;
    w -= (0.5 / n) * (xtr.transpose() * g);
  }
  const Mat pte = probs_of(xte, w);
  long hits = 0;
  for (long r = 0; r < pte.rows(); ++r) {
    long arg = 0;
    pte.row(r).maxCoeff(&arg);
    hits += arg == yte[static_cast<size_t>(r)];
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(pte.rows()) > 0.8);
}
