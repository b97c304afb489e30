#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psgmae/common.hpp"
#include "psgmae/signal.hpp"

namespace psgmae {

namespace fs = std::filesystem;

enum class LabelMode { none, staging5, osa2, both };

const char* label_mode_name(LabelMode m);
LabelMode label_mode_from_name(const std::string& name);

inline constexpr int kStageCount = 5;  // W, N1, N2, N3, R
const char* stage_name(int stage);
int stage_from_name(const std::string& name);  // "-" -> -1

// Per-epoch annotation; -1 marks an absent label kind.
struct EpochLabel {
  int8_t stage = -1;  // 0..4
  int8_t osa = -1;    // 0 normal, 1 osa event
  bool operator==(const EpochLabel&) const = default;
};

// One subject-night of C-channel signal plus optional per-epoch labels.
// Samples are stored channel-major (channel 0 fully, then channel 1, ...)
// as 32-bit floats, matching the on-disk layout.
struct Recording {
  std::string subject_id;
  std::vector<std::string> channel_names;
  int sampling_hz = 0;
  int epoch_seconds = 30;
  std::vector<float> samples;  // C * total_length
  LabelMode label_mode = LabelMode::none;
  std::vector<EpochLabel> labels;  // one per epoch when label_mode != none

  int channels() const { return static_cast<int>(channel_names.size()); }
  long total_length() const {
    return channels() == 0 ? 0 : static_cast<long>(samples.size()) / channels();
  }
  long epoch_length() const { return static_cast<long>(sampling_hz) * epoch_seconds; }
  long epoch_count() const { return total_length() / epoch_length(); }
  std::span<const float> channel(int c) const;
  EpochMatrix epoch(long index) const;

  bool operator==(const Recording&) const = default;
};

// Validates the Recording invariants (throws on violation).
void validate_recording(const Recording& rec);

// ---------------------------------------------------------------------------
// Binary container (.psgr): magic "PSGR", u16 version, u32-length-prefixed
// JSON header, channel-major f32 samples, label bytes (all stage bytes, then
// all osa bytes, per the header's label_mode), trailing CRC32 of everything
// before it.
// ---------------------------------------------------------------------------

std::vector<uint8_t> encode_recording(const Recording& rec);
Recording decode_recording(std::span<const uint8_t> bytes);
void write_recording(const Recording& rec, const fs::path& path);
Recording read_recording(const fs::path& path);

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct SynthChannelProfile {
  std::string name;
  double base_freq_hz = 10.0;   // primary oscillation
  double freq_jitter = 0.01;    // relative per-epoch jitter of the carrier
  double amplitude = 1.0;
  double noise_level = 0.1;     // stddev of additive white noise
};

struct SynthConfig {
  int channel_count = 5;
  int epoch_count = 200;
  int sampling_hz = 100;
  int epoch_seconds = 30;
  double event_rate = 0.1;  // probability of a shared-event epoch (osa2 mode)
  uint64_t seed = 0;
  LabelMode label_mode = LabelMode::osa2;
  std::string subject_id = "synth-000";
  std::vector<SynthChannelProfile> channels;  // defaults applied when empty

  // EEG/EEG2/EOG/EMG/airflow-like roles at the given sampling rate.
  static std::vector<SynthChannelProfile> default_channels(int channel_count,
                                                           int sampling_hz);
};

// Deterministic in cfg.seed. Event epochs carry a transient burst shared by
// at least three channels; staging5 mode assigns one of five latent classes,
// each with its own per-channel frequency/amplitude profile.
Recording generate_synthetic(const SynthConfig& cfg);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

// Index of one epoch within a list of recordings.
struct EpochRef {
  int recording = 0;
  long epoch = 0;
  bool operator==(const EpochRef&) const = default;
};

struct EpochSplit {
  std::vector<EpochRef> train, val, test;
};

// Epoch-wise shuffled split with the given train/val fractions (remainder is
// the test set); fractions are honored to within rounding.
EpochSplit make_split(const std::vector<Recording>& recordings,
                      double train_fraction, double val_fraction, uint64_t seed);

// Subject-wise fold assignment: every subject is in exactly one fold, fold
// sizes differ by at most one subject.
struct SplitPlan {
  int fold_count = 0;
  std::map<std::string, int> assignments;  // subject_id -> fold
  double train_fraction_within = 0.8;      // train share of non-test epochs
};

SplitPlan make_subject_folds(const std::vector<Recording>& recordings, int k,
                             uint64_t seed);

// Materializes one fold: test = all epochs of the fold's subjects; the other
// subjects' epochs are shuffled and split train/val by train_fraction_within.
EpochSplit materialize_fold(const std::vector<Recording>& recordings,
                            const SplitPlan& plan, int fold, uint64_t seed);

// ---------------------------------------------------------------------------
// Class weights: w_j = N / (K * n_j)
// ---------------------------------------------------------------------------

Vec class_weights(const std::vector<int>& labels, int num_categories);

// ---------------------------------------------------------------------------
// Text import hooks (converter for external data) and label CSV
// ---------------------------------------------------------------------------

// Reads "epoch_index,stage,osa" rows; stage in {W,N1,N2,N3,R,-}, osa in
// {0,1,-}. Rows may arrive in any order; absent epochs keep both kinds unset.
std::vector<EpochLabel> read_label_csv(const fs::path& path, long epoch_count);

// Builds a Recording from a JSON sidecar naming per-channel single-column
// CSV files. Trailing samples that do not fill a whole epoch are trimmed.
Recording import_text_recording(const fs::path& sidecar_json);

// ---------------------------------------------------------------------------
// Dataset: recordings plus normalization statistics and split membership,
// the unit handed to training and evaluation.
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Recording> recordings;
  std::vector<NormStats> stats;  // one per recording
  CenterMode center_mode = CenterMode::median;
  EpochSplit split;

  int channels() const;
  long epoch_length() const;
  LabelMode label_mode() const;
  EpochMatrix normalized_epoch(const EpochRef& ref, double epsilon = 1e-8) const;
  const EpochLabel& label(const EpochRef& ref) const;
  long total_epochs() const;
};

// Computes per-recording stats and an epoch-wise split.
Dataset make_dataset(std::vector<Recording> recordings, CenterMode mode,
                     double train_fraction, double val_fraction, uint64_t seed);

// Computes per-recording stats and a subject-wise fold split.
Dataset make_fold_dataset(std::vector<Recording> recordings, CenterMode mode,
                          const SplitPlan& plan, int fold, uint64_t seed);

// Directory layout: one .psgr per recording plus manifest.json.
void write_recording_set(const std::vector<Recording>& recordings, const fs::path& dir);
std::vector<Recording> read_recording_set(const fs::path& dir);

}  // namespace psgmae
