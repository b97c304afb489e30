#include "psgmae/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace psgmae {

using nlohmann::json;

namespace {
constexpr char kMagic[4] = {'P', 'S', 'G', 'R'};
constexpr uint16_t kVersion = 1;
constexpr uint8_t kAbsentLabel = 0xff;
constexpr double kTau = 2.0 * std::numbers::pi;
}  // namespace

const char* label_mode_name(LabelMode m) {
  switch (m) {
    case LabelMode::none: return "none";
    case LabelMode::staging5: return "staging5";
    case LabelMode::osa2: return "osa2";
    case LabelMode::both: return "both";
  }
  return "?";
}

LabelMode label_mode_from_name(const std::string& name) {
  if (name == "none") return LabelMode::none;
  if (name == "staging5") return LabelMode::staging5;
  if (name == "osa2") return LabelMode::osa2;
  if (name == "both") return LabelMode::both;
  fail(ErrKind::InvalidConfig, "unknown label mode '" + name + "'");
}

const char* stage_name(int stage) {
  switch (stage) {
    case 0: return "W";
    case 1: return "N1";
    case 2: return "N2";
    case 3: return "N3";
    case 4: return "R";
  }
  return "-";
}

int stage_from_name(const std::string& name) {
  for (int s = 0; s < kStageCount; ++s)
    if (name == stage_name(s)) return s;
  if (name == "-") return -1;
  // Tolerate numeric stages from external exports.
  if (!name.empty() && name.find_first_not_of("0123456789") == std::string::npos) {
    int v = std::stoi(name);
    if (v >= 0 && v < kStageCount) return v;
  }
  fail(ErrKind::LabelOutOfRange, "unknown stage label '" + name + "'");
}

std::span<const float> Recording::channel(int c) const {
  require(c >= 0 && c < channels(), ErrKind::DimensionMismatch,
          "channel index out of range");
  const long n = total_length();
  return std::span<const float>(samples.data() + static_cast<size_t>(c) * n, n);
}

EpochMatrix Recording::epoch(long index) const {
  const long n = total_length();
  const long len = epoch_length();
  require(index >= 0 && index < epoch_count(), ErrKind::DimensionMismatch,
          "epoch index out of range");
  Mat m(channels(), len);
  for (int c = 0; c < channels(); ++c) {
    const float* src = samples.data() + static_cast<size_t>(c) * n + index * len;
    for (long t = 0; t < len; ++t) m(c, t) = static_cast<double>(src[t]);
  }
  return EpochMatrix::create(std::move(m), sampling_hz, epoch_seconds);
}

void validate_recording(const Recording& rec) {
  require(!rec.subject_id.empty(), ErrKind::InvalidConfig, "empty subject_id");
  require(rec.channels() >= 2, ErrKind::TooFewChannels,
          "recording needs at least 2 channels, got " +
              std::to_string(rec.channels()));
  for (const auto& name : rec.channel_names)
    require(!name.empty(), ErrKind::InvalidConfig, "empty channel name");
  for (size_t i = 0; i < rec.channel_names.size(); ++i)
    for (size_t j = i + 1; j < rec.channel_names.size(); ++j)
      require(rec.channel_names[i] != rec.channel_names[j], ErrKind::InvalidConfig,
              "duplicate channel name '" + rec.channel_names[i] + "'");
  require(rec.sampling_hz > 0, ErrKind::InvalidConfig, "sampling_hz must be positive");
  require(rec.epoch_seconds > 0, ErrKind::InvalidConfig,
          "epoch_seconds must be positive");
  require(rec.samples.size() % rec.channels() == 0, ErrKind::LengthMismatch,
          "sample count not divisible by channel count");
  const long len = rec.epoch_length();
  require(rec.total_length() % len == 0, ErrKind::LengthMismatch,
          "total length " + std::to_string(rec.total_length()) +
              " not a whole number of epochs of length " + std::to_string(len));
  require(rec.epoch_count() >= 1, ErrKind::TooFewEpochs,
          "recording holds no complete epoch");
  if (rec.label_mode == LabelMode::none) {
    require(rec.labels.empty(), ErrKind::LabelModeMismatch,
            "labels present but label_mode is none");
    return;
  }
  require(static_cast<long>(rec.labels.size()) == rec.epoch_count(),
          ErrKind::LabelModeMismatch,
          "label count " + std::to_string(rec.labels.size()) +
              " does not match epoch count " + std::to_string(rec.epoch_count()));
  const bool want_stage =
      rec.label_mode == LabelMode::staging5 || rec.label_mode == LabelMode::both;
  const bool want_osa =
      rec.label_mode == LabelMode::osa2 || rec.label_mode == LabelMode::both;
  for (size_t i = 0; i < rec.labels.size(); ++i) {
    const EpochLabel& lb = rec.labels[i];
    require(lb.stage >= -1 && lb.stage < kStageCount, ErrKind::LabelOutOfRange,
            "stage label out of range at epoch " + std::to_string(i));
    require(lb.osa >= -1 && lb.osa <= 1, ErrKind::LabelOutOfRange,
            "osa label out of range at epoch " + std::to_string(i));
    if (!want_stage)
      require(lb.stage == -1, ErrKind::LabelModeMismatch,
              "stage label present under mode " +
                  std::string(label_mode_name(rec.label_mode)));
    if (!want_osa)
      require(lb.osa == -1, ErrKind::LabelModeMismatch,
              "osa label present under mode " +
                  std::string(label_mode_name(rec.label_mode)));
  }
}

// ---------------------------------------------------------------------------
// .psgr encode/decode
// ---------------------------------------------------------------------------

std::vector<uint8_t> encode_recording(const Recording& rec) {
  validate_recording(rec);
  json header;
  header["subject_id"] = rec.subject_id;
  header["channel_names"] = rec.channel_names;
  header["sampling_hz"] = rec.sampling_hz;
  header["epoch_seconds"] = rec.epoch_seconds;
  header["total_length"] = rec.total_length();
  header["label_mode"] = label_mode_name(rec.label_mode);
  const std::string header_str = header.dump();

  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put_u16(kVersion);
  w.put_u32(static_cast<uint32_t>(header_str.size()));
  w.put_bytes(header_str.data(), header_str.size());
  for (float v : rec.samples) w.put_f32(v);
  const bool has_stage =
      rec.label_mode == LabelMode::staging5 || rec.label_mode == LabelMode::both;
  const bool has_osa =
      rec.label_mode == LabelMode::osa2 || rec.label_mode == LabelMode::both;
  if (has_stage)
    for (const auto& lb : rec.labels)
      w.put_u8(lb.stage < 0 ? kAbsentLabel : static_cast<uint8_t>(lb.stage));
  if (has_osa)
    for (const auto& lb : rec.labels)
      w.put_u8(lb.osa < 0 ? kAbsentLabel : static_cast<uint8_t>(lb.osa));
  w.put_u32(crc32(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Recording decode_recording(std::span<const uint8_t> bytes) {
  // Structural pass first so truncation and malformed headers surface as
  // FormatViolation with a byte offset; CRC verification comes after.
  ByteReader r(bytes.data(), bytes.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrKind::FormatViolation, "bad magic at byte offset 0 (not a PSGR file)");
  const uint16_t version = r.get_u16();
  if (version != kVersion)
    fail(ErrKind::FormatViolation,
         "unsupported PSGR version " + std::to_string(version) +
             " at byte offset 4");
  const uint32_t header_len = r.get_u32();
  const size_t header_off = r.offset();
  if (bytes.size() - header_off < header_len)
    fail(ErrKind::FormatViolation,
         "unexpected end of data at byte offset " + std::to_string(bytes.size()) +
             " (header of " + std::to_string(header_len) + " bytes expected)");
  json header;
  try {
    header = json::parse(bytes.begin() + header_off,
                         bytes.begin() + header_off + header_len);
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         "malformed header JSON at byte offset " + std::to_string(header_off) +
             ": " + e.what());
  }

  Recording rec;
  try {
    rec.subject_id = header.at("subject_id").get<std::string>();
    rec.channel_names = header.at("channel_names").get<std::vector<std::string>>();
    rec.sampling_hz = header.at("sampling_hz").get<int>();
    rec.epoch_seconds = header.at("epoch_seconds").get<int>();
    rec.label_mode = label_mode_from_name(header.at("label_mode").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         std::string("header field missing or mistyped: ") + e.what());
  } catch (const PsgError& e) {
    fail(ErrKind::FormatViolation, std::string("invalid header field: ") + e.what());
  }
  long total = 0;
  try {
    total = header.at("total_length").get<long>();
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         std::string("header field missing or mistyped: ") + e.what());
  }
  const int c = static_cast<int>(rec.channel_names.size());
  if (c < 2 || rec.sampling_hz <= 0 || rec.epoch_seconds <= 0 || total <= 0)
    fail(ErrKind::FormatViolation, "header describes an impossible recording");
  const long epoch_len = rec.epoch_length();
  if (total % epoch_len != 0)
    fail(ErrKind::FormatViolation,
         "header total_length " + std::to_string(total) +
             " is not a whole number of epochs");
  const long epochs = total / epoch_len;
  const size_t sample_bytes = sizeof(float) * static_cast<size_t>(c) * total;
  const int label_kinds = rec.label_mode == LabelMode::none ? 0
                          : rec.label_mode == LabelMode::both ? 2
                                                              : 1;
  const size_t expected = header_off + header_len + sample_bytes +
                          static_cast<size_t>(label_kinds) * epochs + 4;
  if (bytes.size() < expected)
    fail(ErrKind::FormatViolation,
         "unexpected end of data at byte offset " + std::to_string(bytes.size()) +
             " (file should span " + std::to_string(expected) + " bytes)");
  if (bytes.size() > expected)
    fail(ErrKind::FormatViolation,
         "trailing garbage at byte offset " + std::to_string(expected));

  const uint32_t stored = static_cast<uint32_t>(bytes[expected - 4]) |
                          static_cast<uint32_t>(bytes[expected - 3]) << 8 |
                          static_cast<uint32_t>(bytes[expected - 2]) << 16 |
                          static_cast<uint32_t>(bytes[expected - 1]) << 24;
  const uint32_t actual = crc32(bytes.data(), expected - 4);
  if (stored != actual) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "CRC mismatch: stored 0x%08x, computed 0x%08x",
                  stored, actual);
    fail(ErrKind::ChecksumMismatch, buf);
  }

  ByteReader body(bytes.data(), expected - 4);
  body.skip(header_off + header_len);
  rec.samples.resize(static_cast<size_t>(c) * total);
  for (auto& v : rec.samples) v = body.get_f32();
  if (label_kinds > 0) {
    rec.labels.resize(epochs);
    const bool has_stage = rec.label_mode != LabelMode::osa2;
    const bool has_osa = rec.label_mode != LabelMode::staging5;
    if (has_stage)
      for (long e = 0; e < epochs; ++e) {
        const uint8_t b = body.get_u8();
        if (b != kAbsentLabel && b >= kStageCount)
          fail(ErrKind::FormatViolation,
               "stage byte " + std::to_string(b) + " out of range at epoch " +
                   std::to_string(e));
        rec.labels[e].stage = b == kAbsentLabel ? -1 : static_cast<int8_t>(b);
      }
    if (has_osa)
      for (long e = 0; e < epochs; ++e) {
        const uint8_t b = body.get_u8();
        if (b != kAbsentLabel && b > 1)
          fail(ErrKind::FormatViolation,
               "osa byte " + std::to_string(b) + " out of range at epoch " +
                   std::to_string(e));
        rec.labels[e].osa = b == kAbsentLabel ? -1 : static_cast<int8_t>(b);
      }
  }
  validate_recording(rec);
  return rec;
}

void write_recording(const Recording& rec, const fs::path& path) {
  write_file_bytes(path.string(), encode_recording(rec));
}

Recording read_recording(const fs::path& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path.string());
  return decode_recording(bytes);
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

std::vector<SynthChannelProfile> SynthConfig::default_channels(int channel_count,
                                                               int sampling_hz) {
  // Roles loosely modeled on a reduced PSG montage. The two EEG roles stand
  // for homologous electrode sites: same carrier, and generate_synthetic
  // gives them a shared per-epoch phase, so either one is recoverable from
  // the other (up to gain, offset and sensor noise). That is what makes
  // cross-channel reconstruction of a hidden EEG lead a solvable task.
  static const SynthChannelProfile roles[5] = {
      {"EEG_C3", 10.0, 0.01, 1.0, 0.10},
      {"EEG_C4", 10.0, 0.01, 1.0, 0.10},
      {"EOG", 0.8, 0.02, 0.8, 0.10},
      {"EMG", 25.0, 0.01, 0.6, 0.15},
      {"AIRFLOW", 0.25, 0.02, 1.2, 0.08},
  };
  std::vector<SynthChannelProfile> out;
  out.reserve(channel_count);
  const double nyquist_cap = 0.4 * sampling_hz;
  for (int c = 0; c < channel_count; ++c) {
    SynthChannelProfile p = roles[c % 5];
    if (c >= 5) p.name += "_" + std::to_string(c / 5 + 1);
    p.base_freq_hz = std::min(p.base_freq_hz, nyquist_cap);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Per-(stage, role) amplitude and frequency scaling. Rows W..R, columns cycle
// through the five montage roles. Chosen so per-channel RMS alone separates
// the stages.
constexpr double kStageAmp[kStageCount][5] = {
    {1.0, 1.0, 1.2, 1.5, 1.0},  // W
    {0.7, 0.7, 0.9, 0.8, 1.0},  // N1
    {1.3, 1.3, 0.6, 0.5, 1.0},  // N2
    {2.0, 2.0, 0.4, 0.3, 1.1},  // N3
    {0.9, 0.9, 1.5, 0.2, 0.9},  // R
};
constexpr double kStageFreq[kStageCount][5] = {
    {1.0, 1.0, 1.0, 1.0, 1.0},
    {0.8, 0.8, 0.9, 1.0, 1.0},
    {0.6, 0.6, 0.8, 1.0, 0.9},
    {0.3, 0.3, 0.7, 1.0, 0.8},
    {0.9, 0.9, 1.3, 1.0, 1.1},
};

}  // namespace

Recording generate_synthetic(const SynthConfig& cfg) {
  require(cfg.channel_count >= 2, ErrKind::TooFewChannels,
          "synthetic recording needs at least 2 channels");
  require(cfg.epoch_count >= 1, ErrKind::TooFewEpochs,
          "epoch_count must be positive");
  require(cfg.sampling_hz > 0 && cfg.epoch_seconds > 0, ErrKind::InvalidConfig,
          "sampling_hz and epoch_seconds must be positive");
  require(cfg.event_rate >= 0.0 && cfg.event_rate <= 1.0, ErrKind::InvalidConfig,
          "event_rate must lie in [0, 1]");
  std::vector<SynthChannelProfile> profiles =
      cfg.channels.empty()
          ? SynthConfig::default_channels(cfg.channel_count, cfg.sampling_hz)
          : cfg.channels;
  require(static_cast<int>(profiles.size()) == cfg.channel_count,
          ErrKind::InvalidConfig, "channel profile count != channel_count");

  const int C = cfg.channel_count;
  const long L = static_cast<long>(cfg.sampling_hz) * cfg.epoch_seconds;
  const long total = L * cfg.epoch_count;
  const double nyquist_cap = 0.4 * cfg.sampling_hz;
  const bool gen_stage =
      cfg.label_mode == LabelMode::staging5 || cfg.label_mode == LabelMode::both;
  const bool gen_osa =
      cfg.label_mode == LabelMode::osa2 || cfg.label_mode == LabelMode::both;

  Recording rec;
  rec.subject_id = cfg.subject_id;
  rec.sampling_hz = cfg.sampling_hz;
  rec.epoch_seconds = cfg.epoch_seconds;
  rec.label_mode = cfg.label_mode;
  for (const auto& p : profiles) rec.channel_names.push_back(p.name);
  rec.samples.assign(static_cast<size_t>(C) * total, 0.0f);
  if (cfg.label_mode != LabelMode::none) rec.labels.resize(cfg.epoch_count);

  // Subject-level character: mild gain, per-channel DC offset and gain so the
  // normalization stage has real work to do.
  Rng subject_rng(derive_seed(cfg.seed, "subject"));
  const double subject_gain = subject_rng.uniform(0.9, 1.1);
  std::vector<double> dc(C), gain(C);
  for (int c = 0; c < C; ++c) {
    dc[c] = subject_rng.normal(0.0, 0.5);
    gain[c] = subject_rng.uniform(0.95, 1.05);
  }

  std::vector<double> phase1(C), phase2(C), fjit(C);
  std::vector<int> burst_order(C);
  const int n_burst = C >= 3 ? std::max(3, (3 * C) / 5) : C;

  for (int e = 0; e < cfg.epoch_count; ++e) {
    Rng rng(derive_seed(cfg.seed, "epoch", static_cast<uint64_t>(e)));
    // Fixed draw order keeps the generator reproducible across refactors:
    // stage, event flag, per-channel carrier params, burst params, noise.
    const int stage = gen_stage ? rng.uniform_int(kStageCount) : -1;
    const bool event = gen_osa && rng.uniform() < cfg.event_rate;
    for (int c = 0; c < C; ++c) {
      phase1[c] = rng.uniform(0.0, kTau);
      phase2[c] = rng.uniform(0.0, kTau);
      fjit[c] = rng.uniform(-1.0, 1.0);
    }
    // The EEG pair models homologous electrode sites: the second lead reuses
    // the first one's carrier phase and jitter, so its waveform is a gained
    // copy plus sensor noise. Every draw above still happens, which keeps the
    // stream position (and thus all later draws) independent of this rule.
    for (int c = 1; c < C; ++c)
      if (c % 5 == 1) {
        phase1[c] = phase1[c - 1];
        phase2[c] = phase2[c - 1];
        fjit[c] = fjit[c - 1];
      }
    double burst_center = 0, burst_width = 0, burst_freq = 0, burst_phase = 0;
    if (event) {
      burst_center = rng.uniform(0.2, 0.8) * L;
      burst_width = rng.uniform(0.25, 0.35) * L;
      burst_freq = std::min(rng.uniform(2.0, 4.0), nyquist_cap);
      burst_phase = rng.uniform(0.0, kTau);
      for (int c = 0; c < C; ++c) burst_order[c] = c;
      rng.shuffle(burst_order);
    }

    const long base = static_cast<long>(e) * L;
    for (int c = 0; c < C; ++c) {
      const SynthChannelProfile& p = profiles[c];
      const int role = c % 5;
      const double amp = subject_gain * gain[c] * p.amplitude *
                         (stage >= 0 ? kStageAmp[stage][role] : 1.0);
      double freq = p.base_freq_hz * (stage >= 0 ? kStageFreq[stage][role] : 1.0);
      freq = std::min(freq * (1.0 + p.freq_jitter * fjit[c]), nyquist_cap);
      const double w1 = kTau * freq / cfg.sampling_hz;
      const double w2 = 2.0 * w1;
      const bool bursty =
          event && std::find(burst_order.begin(), burst_order.begin() + n_burst,
                             c) != burst_order.begin() + n_burst;
      float* out = rec.samples.data() + static_cast<size_t>(c) * total + base;
      for (long t = 0; t < L; ++t) {
        double v = amp * (std::sin(w1 * t + phase1[c]) +
                          0.3 * std::sin(w2 * t + phase2[c]));
        if (bursty) {
          const double u = (t - burst_center) / burst_width;
          if (u > -0.5 && u < 0.5) {
            const double env = 0.5 * (1.0 + std::cos(kTau * u));  // Hann bump
            v += 2.0 * env *
                 std::sin(kTau * burst_freq * t / cfg.sampling_hz + burst_phase);
          }
        }
        v = dc[c] + v + p.noise_level * rng.normal();
        out[t] = static_cast<float>(v);
      }
    }
    if (gen_stage) rec.labels[e].stage = static_cast<int8_t>(stage);
    if (gen_osa) rec.labels[e].osa = event ? 1 : 0;
  }
  validate_recording(rec);
  return rec;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

namespace {

std::vector<EpochRef> all_epochs(const std::vector<Recording>& recordings) {
  std::vector<EpochRef> refs;
  for (size_t r = 0; r < recordings.size(); ++r)
    for (long e = 0; e < recordings[r].epoch_count(); ++e)
      refs.push_back({static_cast<int>(r), e});
  return refs;
}

}  // namespace

EpochSplit make_split(const std::vector<Recording>& recordings,
                      double train_fraction, double val_fraction, uint64_t seed) {
  require(train_fraction >= 0.0 && val_fraction >= 0.0 &&
              train_fraction + val_fraction <= 1.0 + 1e-12,
          ErrKind::InvalidConfig, "split fractions must be nonnegative and sum <= 1");
  std::vector<EpochRef> refs = all_epochs(recordings);
  const long n = static_cast<long>(refs.size());
  require(n > 0, ErrKind::TooFewEpochs, "no epochs to split");
  Rng rng(derive_seed(seed, "epoch-split"));
  rng.shuffle(refs);
  long n_train = std::llround(train_fraction * n);
  long n_val = std::llround(val_fraction * n);
  if (n_train + n_val > n) n_val = n - n_train;
  const double test_fraction = 1.0 - train_fraction - val_fraction;
  require(!(train_fraction > 0.0 && n_train == 0), ErrKind::TooFewEpochs,
          "train split rounds to zero epochs");
  require(!(val_fraction > 0.0 && n_val == 0), ErrKind::TooFewEpochs,
          "val split rounds to zero epochs");
  require(!(test_fraction > 1e-9 && n - n_train - n_val == 0), ErrKind::TooFewEpochs,
          "test split rounds to zero epochs");
  EpochSplit split;
  split.train.assign(refs.begin(), refs.begin() + n_train);
  split.val.assign(refs.begin() + n_train, refs.begin() + n_train + n_val);
  split.test.assign(refs.begin() + n_train + n_val, refs.end());
  return split;
}

SplitPlan make_subject_folds(const std::vector<Recording>& recordings, int k,
                             uint64_t seed) {
  require(k >= 2, ErrKind::InvalidConfig, "fold count must be at least 2");
  std::vector<std::string> subjects;
  for (const auto& rec : recordings)
    if (std::find(subjects.begin(), subjects.end(), rec.subject_id) ==
        subjects.end())
      subjects.push_back(rec.subject_id);
  require(static_cast<int>(subjects.size()) >= k, ErrKind::TooFewSubjects,
          std::to_string(subjects.size()) + " subjects cannot fill " +
              std::to_string(k) + " folds");
  std::sort(subjects.begin(), subjects.end());
  Rng rng(derive_seed(seed, "subject-folds"));
  rng.shuffle(subjects);
  SplitPlan plan;
  plan.fold_count = k;
  for (size_t i = 0; i < subjects.size(); ++i)
    plan.assignments[subjects[i]] = static_cast<int>(i % k);
  return plan;
}

EpochSplit materialize_fold(const std::vector<Recording>& recordings,
                            const SplitPlan& plan, int fold, uint64_t seed) {
  require(fold >= 0 && fold < plan.fold_count, ErrKind::InvalidConfig,
          "fold index out of range");
  require(plan.train_fraction_within > 0.0 && plan.train_fraction_within < 1.0,
          ErrKind::InvalidConfig, "train_fraction_within must lie in (0, 1)");
  EpochSplit split;
  std::vector<EpochRef> rest;
  for (size_t r = 0; r < recordings.size(); ++r) {
    auto it = plan.assignments.find(recordings[r].subject_id);
    require(it != plan.assignments.end(), ErrKind::ConfigMismatch,
            "subject '" + recordings[r].subject_id + "' missing from fold plan");
    auto& dst = it->second == fold ? split.test : rest;
    for (long e = 0; e < recordings[r].epoch_count(); ++e)
      dst.push_back({static_cast<int>(r), e});
  }
  require(!split.test.empty(), ErrKind::TooFewEpochs, "fold has no test epochs");
  require(!rest.empty(), ErrKind::TooFewEpochs, "fold leaves no training epochs");
  Rng rng(derive_seed(seed, "fold-split", static_cast<uint64_t>(fold)));
  rng.shuffle(rest);
  long n_train = std::llround(plan.train_fraction_within * rest.size());
  n_train = std::clamp<long>(n_train, 1, static_cast<long>(rest.size()) - 1);
  split.train.assign(rest.begin(), rest.begin() + n_train);
  split.val.assign(rest.begin() + n_train, rest.end());
  return split;
}

Vec class_weights(const std::vector<int>& labels, int num_categories) {
  require(num_categories >= 2, ErrKind::InvalidConfig,
          "need at least 2 categories");
  require(!labels.empty(), ErrKind::TooFewEpochs, "no labels to weight");
  std::vector<long> counts(num_categories, 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_categories, ErrKind::LabelOutOfRange,
            "label " + std::to_string(labels[i]) + " at index " +
                std::to_string(i) + " outside [0, " +
                std::to_string(num_categories) + ")");
    ++counts[labels[i]];
  }
  const double n = static_cast<double>(labels.size());
  Vec w(num_categories);
  for (int j = 0; j < num_categories; ++j) {
    require(counts[j] > 0, ErrKind::MissingCategory,
            "category " + std::to_string(j) + " has no examples");
    w[j] = n / (num_categories * static_cast<double>(counts[j]));
  }
  return w;
}

// ---------------------------------------------------------------------------
// CSV / sidecar import
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(trim(cur));
  return fields;
}

}  // namespace

std::vector<EpochLabel> read_label_csv(const fs::path& path, long epoch_count) {
  std::ifstream in(path);
  require(in.good(), ErrKind::IoFailure, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrKind::FormatViolation,
          "label csv is empty: " + path.string());
  {
    auto fields = split_csv(line);
    if (fields.size() != 3 || fields[0] != "epoch_index" || fields[1] != "stage" ||
        fields[2] != "osa")
      fail(ErrKind::FormatViolation,
           "label csv header must be 'epoch_index,stage,osa', got '" + trim(line) +
               "'");
  }
  std::vector<EpochLabel> labels(epoch_count);
  std::vector<bool> seen(epoch_count, false);
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv(line);
    if (fields.size() != 3)
      fail(ErrKind::FormatViolation, "line " + std::to_string(line_no) + " of " +
                                         path.string() + ": expected 3 fields");
    long idx = -1;
    try {
      idx = std::stol(fields[0]);
    } catch (const std::exception&) {
      fail(ErrKind::FormatViolation, "line " + std::to_string(line_no) +
                                         ": bad epoch_index '" + fields[0] + "'");
    }
    require(idx >= 0 && idx < epoch_count, ErrKind::LabelOutOfRange,
            "line " + std::to_string(line_no) + ": epoch_index " +
                std::to_string(idx) + " outside [0, " +
                std::to_string(epoch_count) + ")");
    require(!seen[idx], ErrKind::FormatViolation,
            "line " + std::to_string(line_no) + ": duplicate epoch_index " +
                std::to_string(idx));
    seen[idx] = true;
    labels[idx].stage = static_cast<int8_t>(stage_from_name(fields[1]));
    if (fields[2] == "-") {
      labels[idx].osa = -1;
    } else if (fields[2] == "0" || fields[2] == "1") {
      labels[idx].osa = static_cast<int8_t>(fields[2][0] - '0');
    } else {
      fail(ErrKind::LabelOutOfRange,
           "line " + std::to_string(line_no) + ": osa must be 0, 1 or '-', got '" +
               fields[2] + "'");
    }
  }
  return labels;
}

namespace {

std::vector<float> read_column_csv(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrKind::IoFailure, "cannot open " + path.string());
  std::vector<float> values;
  std::string line;
  long line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    try {
      size_t pos = 0;
      const float v = std::stof(t, &pos);
      if (pos != t.size()) throw std::invalid_argument("trailing characters");
      values.push_back(v);
    } catch (const std::exception&) {
      if (first) {  // tolerate a single header line
        first = false;
        continue;
      }
      fail(ErrKind::FormatViolation, path.string() + ":" + std::to_string(line_no) +
                                         ": not a number: '" + t + "'");
    }
    first = false;
  }
  return values;
}

}  // namespace

Recording import_text_recording(const fs::path& sidecar_json) {
  std::ifstream in(sidecar_json);
  require(in.good(), ErrKind::IoFailure, "cannot open " + sidecar_json.string());
  json side;
  try {
    side = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         "malformed sidecar " + sidecar_json.string() + ": " + e.what());
  }
  Recording rec;
  const fs::path dir = sidecar_json.parent_path();
  try {
    rec.subject_id = side.at("subject_id").get<std::string>();
    rec.sampling_hz = side.at("sampling_hz").get<int>();
    rec.epoch_seconds = side.value("epoch_seconds", 30);
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         std::string("sidecar field missing or mistyped: ") + e.what());
  }
  require(side.contains("channels") && side["channels"].is_array(),
          ErrKind::FormatViolation, "sidecar needs a 'channels' array");

  std::vector<std::vector<float>> columns;
  for (const auto& ch : side["channels"]) {
    require(ch.contains("name") && ch.contains("file"), ErrKind::FormatViolation,
            "each channel entry needs 'name' and 'file'");
    rec.channel_names.push_back(ch["name"].get<std::string>());
    columns.push_back(read_column_csv(dir / ch["file"].get<std::string>()));
  }
  require(columns.size() >= 2, ErrKind::TooFewChannels,
          "sidecar lists fewer than 2 channels");
  for (size_t c = 1; c < columns.size(); ++c)
    require(columns[c].size() == columns[0].size(), ErrKind::LengthMismatch,
            "channel '" + rec.channel_names[c] + "' has " +
                std::to_string(columns[c].size()) + " samples, expected " +
                std::to_string(columns[0].size()));

  const long epoch_len = rec.epoch_length();
  require(epoch_len > 0, ErrKind::InvalidConfig, "bad sampling_hz/epoch_seconds");
  const long total =
      (static_cast<long>(columns[0].size()) / epoch_len) * epoch_len;
  require(total > 0, ErrKind::TooFewEpochs,
          "channel files hold less than one full epoch");
  for (const auto& col : columns)
    for (long t = 0; t < total; ++t) rec.samples.push_back(col[t]);

  if (side.contains("labels_csv")) {
    rec.label_mode = label_mode_from_name(side.value("label_mode", "both"));
    require(rec.label_mode != LabelMode::none, ErrKind::LabelModeMismatch,
            "labels_csv given but label_mode is none");
    rec.labels =
        read_label_csv(dir / side["labels_csv"].get<std::string>(), total / epoch_len);
    const bool want_stage = rec.label_mode != LabelMode::osa2;
    const bool want_osa = rec.label_mode != LabelMode::staging5;
    for (auto& lb : rec.labels) {  // drop kinds outside the declared mode
      if (!want_stage) lb.stage = -1;
      if (!want_osa) lb.osa = -1;
    }
  } else {
    rec.label_mode = LabelMode::none;
  }
  validate_recording(rec);
  return rec;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

namespace {

void check_coherent(const std::vector<Recording>& recordings) {
  require(!recordings.empty(), ErrKind::TooFewEpochs, "dataset has no recordings");
  const Recording& head = recordings.front();
  for (const auto& rec : recordings) {
    validate_recording(rec);
    require(rec.channel_names == head.channel_names, ErrKind::ConfigMismatch,
            "recordings disagree on channel names");
    require(rec.sampling_hz == head.sampling_hz &&
                rec.epoch_seconds == head.epoch_seconds,
            ErrKind::ConfigMismatch, "recordings disagree on sampling layout");
    require(rec.label_mode == head.label_mode, ErrKind::LabelModeMismatch,
            "recordings disagree on label mode");
  }
}

std::vector<NormStats> stats_for(const std::vector<Recording>& recordings,
                                 CenterMode mode) {
  std::vector<NormStats> stats;
  stats.reserve(recordings.size());
  for (const auto& rec : recordings) {
    std::vector<std::span<const float>> chans;
    for (int c = 0; c < rec.channels(); ++c) chans.push_back(rec.channel(c));
    stats.push_back(compute_norm_stats(chans, mode));
  }
  return stats;
}

}  // namespace

int Dataset::channels() const { return recordings.front().channels(); }
long Dataset::epoch_length() const { return recordings.front().epoch_length(); }
LabelMode Dataset::label_mode() const { return recordings.front().label_mode; }

EpochMatrix Dataset::normalized_epoch(const EpochRef& ref, double epsilon) const {
  require(ref.recording >= 0 &&
              ref.recording < static_cast<int>(recordings.size()),
          ErrKind::DimensionMismatch, "recording index out of range");
  return normalize(recordings[ref.recording].epoch(ref.epoch),
                   stats[ref.recording], epsilon);
}

const EpochLabel& Dataset::label(const EpochRef& ref) const {
  require(label_mode() != LabelMode::none, ErrKind::LabelModeMismatch,
          "dataset carries no labels");
  require(ref.recording >= 0 &&
              ref.recording < static_cast<int>(recordings.size()),
          ErrKind::DimensionMismatch, "recording index out of range");
  const Recording& rec = recordings[ref.recording];
  require(ref.epoch >= 0 && ref.epoch < rec.epoch_count(),
          ErrKind::DimensionMismatch, "epoch index out of range");
  return rec.labels[ref.epoch];
}

long Dataset::total_epochs() const {
  long n = 0;
  for (const auto& rec : recordings) n += rec.epoch_count();
  return n;
}

Dataset make_dataset(std::vector<Recording> recordings, CenterMode mode,
                     double train_fraction, double val_fraction, uint64_t seed) {
  check_coherent(recordings);
  Dataset ds;
  ds.center_mode = mode;
  ds.split = make_split(recordings, train_fraction, val_fraction, seed);
  ds.stats = stats_for(recordings, mode);
  ds.recordings = std::move(recordings);
  return ds;
}

Dataset make_fold_dataset(std::vector<Recording> recordings, CenterMode mode,
                          const SplitPlan& plan, int fold, uint64_t seed) {
  check_coherent(recordings);
  Dataset ds;
  ds.center_mode = mode;
  ds.split = materialize_fold(recordings, plan, fold, seed);
  ds.stats = stats_for(recordings, mode);
  ds.recordings = std::move(recordings);
  return ds;
}

// ---------------------------------------------------------------------------
// Recording sets on disk
// ---------------------------------------------------------------------------

namespace {

std::string sanitize_filename(const std::string& s) {
  std::string out;
  for (char ch : s)
    out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_')
               ? ch
               : '_';
  return out.empty() ? std::string("rec") : out;
}

}  // namespace

void write_recording_set(const std::vector<Recording>& recordings,
                         const fs::path& dir) {
  check_coherent(recordings);
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrKind::IoFailure, "cannot create directory " + dir.string());
  json manifest;
  manifest["version"] = 1;
  manifest["sampling_hz"] = recordings.front().sampling_hz;
  manifest["epoch_seconds"] = recordings.front().epoch_seconds;
  manifest["label_mode"] = label_mode_name(recordings.front().label_mode);
  manifest["channel_names"] = recordings.front().channel_names;
  json list = json::array();
  for (size_t i = 0; i < recordings.size(); ++i) {
    char idx[16];
    std::snprintf(idx, sizeof(idx), "%04zu", i);
    const std::string file = std::string("rec_") + idx + "_" +
                             sanitize_filename(recordings[i].subject_id) + ".psgr";
    write_recording(recordings[i], dir / file);
    json entry;
    entry["file"] = file;
    entry["subject_id"] = recordings[i].subject_id;
    entry["epoch_count"] = recordings[i].epoch_count();
    list.push_back(std::move(entry));
  }
  manifest["recordings"] = std::move(list);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  require(out.good(), ErrKind::IoFailure,
          "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
  require(out.good(), ErrKind::IoFailure,
          "write failed for " + (dir / "manifest.json").string());
}

std::vector<Recording> read_recording_set(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), ErrKind::IoFailure,
          "cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         "malformed manifest.json: " + std::string(e.what()));
  }
  require(manifest.value("version", 0) == 1, ErrKind::FormatViolation,
          "unsupported manifest version");
  require(manifest.contains("recordings") && manifest["recordings"].is_array(),
          ErrKind::FormatViolation, "manifest needs a 'recordings' array");
  std::vector<Recording> out;
  for (const auto& entry : manifest["recordings"]) {
    Recording rec = read_recording(dir / entry.at("file").get<std::string>());
    require(rec.subject_id == entry.at("subject_id").get<std::string>(),
            ErrKind::ConfigMismatch,
            "manifest subject_id disagrees with file " +
                entry.at("file").get<std::string>());
    require(rec.epoch_count() == entry.at("epoch_count").get<long>(),
            ErrKind::ConfigMismatch,
            "manifest epoch_count disagrees with file " +
                entry.at("file").get<std::string>());
    out.push_back(std::move(rec));
  }
  check_coherent(out);
  require(out.front().sampling_hz == manifest.at("sampling_hz").get<int>() &&
              out.front().epoch_seconds == manifest.at("epoch_seconds").get<int>(),
          ErrKind::ConfigMismatch, "manifest sampling layout disagrees with files");
  return out;
}

}  // namespace psgmae
