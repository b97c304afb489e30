#include "psgmae/signal.hpp"

#include <algorithm>
#include <cmath>

namespace psgmae {

EpochMatrix EpochMatrix::create(Mat data, int sampling_hz, int epoch_seconds) {
  require(data.rows() > 0 && data.cols() > 0, ErrKind::ShapeMismatch,
          "epoch matrix must be non-empty");
  require(sampling_hz > 0 && epoch_seconds > 0, ErrKind::InvalidConfig,
          "sampling_hz and epoch_seconds must be positive");
  require(data.cols() == static_cast<long>(sampling_hz) * epoch_seconds,
          ErrKind::ShapeMismatch,
          "epoch length " + std::to_string(data.cols()) + " != epoch_seconds * sampling_hz = " +
              std::to_string(static_cast<long>(sampling_hz) * epoch_seconds));
  require(data.allFinite(), ErrKind::ShapeMismatch, "epoch contains non-finite values");
  return EpochMatrix{std::move(data), sampling_hz, epoch_seconds};
}

Mat SegmentedEpoch::concat() const {
  const int c = channels();
  Mat out(c, static_cast<long>(n_patch) * l_prime);
  for (int i = 0; i < n_patch; ++i) {
    out.middleCols(static_cast<long>(i) * l_prime, l_prime) = segments[i];
  }
  return out;
}

const char* center_mode_name(CenterMode m) {
  return m == CenterMode::median ? "median" : "mean";
}

CenterMode center_mode_from_name(const std::string& name) {
  if (name == "median") return CenterMode::median;
  if (name == "mean") return CenterMode::mean;
  fail(ErrKind::InvalidConfig, "unknown center mode '" + name + "'");
}

SegmentedEpoch segment_epoch(const EpochMatrix& epoch, int n_patch) {
  require(n_patch >= 2, ErrKind::TooFewPatches,
          "n_patch must be >= 2, got " + std::to_string(n_patch));
  const long len = epoch.length();
  require(len % n_patch == 0, ErrKind::NonDivisibleLength,
          "epoch length " + std::to_string(len) + " not divisible by n_patch " +
              std::to_string(n_patch));
  const int l_prime = static_cast<int>(len / n_patch);
  SegmentedEpoch out;
  out.n_patch = n_patch;
  out.l_prime = l_prime;
  out.segments.reserve(static_cast<size_t>(n_patch));
  for (int i = 0; i < n_patch; ++i) {
    out.segments.push_back(epoch.data.middleCols(static_cast<long>(i) * l_prime, l_prime));
  }
  return out;
}

namespace {

double median_of(std::vector<double>& scratch) {
  const size_t n = scratch.size();
  const size_t mid = n / 2;
  std::nth_element(scratch.begin(), scratch.begin() + mid, scratch.end());
  double hi = scratch[mid];
  if (n % 2 == 1) return hi;
  // even count: average the two middle order statistics
  double lo = *std::max_element(scratch.begin(), scratch.begin() + mid);
  return 0.5 * (lo + hi);
}

}  // namespace

NormStats compute_norm_stats(const std::vector<std::span<const float>>& channels,
                             CenterMode mode) {
  const int c = static_cast<int>(channels.size());
  require(c > 0, ErrKind::EmptyChannel, "no channels supplied");
  NormStats stats;
  stats.center.resize(c);
  stats.scale.resize(c);
  std::vector<double> scratch;
  for (int ch = 0; ch < c; ++ch) {
    const auto& samples = channels[ch];
    require(samples.size() >= 2, ErrKind::EmptyChannel,
            "channel " + std::to_string(ch) + " has fewer than 2 samples");
    double sum = 0.0;
    for (float v : samples) sum += v;
    const double mean = sum / static_cast<double>(samples.size());
    double ss = 0.0;
    for (float v : samples) {
      const double d = v - mean;
      ss += d * d;
    }
    stats.scale[ch] = std::sqrt(ss / static_cast<double>(samples.size()));
    if (mode == CenterMode::mean) {
      stats.center[ch] = mean;
    } else {
      scratch.assign(samples.begin(), samples.end());
      stats.center[ch] = median_of(scratch);
    }
  }
  return stats;
}

EpochMatrix normalize(const EpochMatrix& epoch, const NormStats& stats, double epsilon) {
  const int c = epoch.channels();
  require(stats.center.size() == c && stats.scale.size() == c, ErrKind::DimensionMismatch,
          "stats dimensioned for " + std::to_string(stats.center.size()) +
              " channels, epoch has " + std::to_string(c));
  require(epsilon > 0.0, ErrKind::InvalidConfig, "epsilon must be positive");
  EpochMatrix out = epoch;
  for (int ch = 0; ch < c; ++ch) {
    const double denom = std::max(stats.scale[ch], epsilon);
    out.data.row(ch) = (epoch.data.row(ch).array() - stats.center[ch]) / denom;
  }
  return out;
}

}  // namespace psgmae
