#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "psgmae/common.hpp"

namespace psgmae {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// One 30-second (by default) window of C-channel signal, shape (C, L).
struct EpochMatrix {
  Mat data;  // C rows, L columns
  int sampling_hz = 0;
  int epoch_seconds = 0;

  int channels() const { return static_cast<int>(data.rows()); }
  int length() const { return static_cast<int>(data.cols()); }

  // Validates finiteness and L == epoch_seconds * sampling_hz.
  static EpochMatrix create(Mat data, int sampling_hz, int epoch_seconds);
};

// An epoch cut into n_patch contiguous (C, l_prime) time slices.
struct SegmentedEpoch {
  std::vector<Mat> segments;
  int n_patch = 0;
  int l_prime = 0;

  int channels() const {
    return segments.empty() ? 0 : static_cast<int>(segments[0].rows());
  }
  // Reassembles the original (C, L) matrix.
  Mat concat() const;
};

enum class CenterMode { median, mean };

const char* center_mode_name(CenterMode m);
CenterMode center_mode_from_name(const std::string& name);

// Per-channel centering/scaling statistics in signal units.
struct NormStats {
  Vec center;  // length C
  Vec scale;   // length C, entries >= 0
};

// Slices an epoch into n_patch equal time slices. Lossless: concat() of the
// result reproduces the input bitwise.
SegmentedEpoch segment_epoch(const EpochMatrix& epoch, int n_patch);

// Recording-level statistics: center is the per-channel median (or mean),
// scale is the population standard deviation (divisor n).
NormStats compute_norm_stats(const std::vector<std::span<const float>>& channels,
                             CenterMode mode = CenterMode::median);

// x' = (x - center) / max(scale, epsilon), per channel.
EpochMatrix normalize(const EpochMatrix& epoch, const NormStats& stats,
                      double epsilon = 1e-8);

}  // namespace psgmae
