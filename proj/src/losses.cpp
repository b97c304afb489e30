#include "psgmae/losses.hpp"

#include <cmath>

namespace psgmae {

namespace {

// Below this, a norm product is treated as zero and the cosine defined as 0.
constexpr double kNormFloor = 1e-30;

void check_pair(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                const MaskTable& visible) {
  require(recon.n_patch == target.n_patch && recon.l_prime == target.l_prime &&
              recon.channels() == target.channels(),
          ErrKind::DimensionMismatch, "recon and target shapes differ");
  require(visible.rows() == recon.n_patch && visible.cols() == recon.channels(),
          ErrKind::DimensionMismatch, "visibility table shape mismatch");
}

void check_iccl_pair(const SegmentedEpoch& a, const SegmentedEpoch& b) {
  require(a.n_patch == b.n_patch && a.l_prime == b.l_prime && a.channels() == b.channels(),
          ErrKind::DimensionMismatch, "contrastive inputs have different shapes");
  require(a.n_patch >= 2, ErrKind::TooFewPatches,
          "contrastive loss needs >= 2 subsegments");
}

// Strictly ordered accumulation (channel-major, then time) so results match a
// plain scalar-loop evaluation bit for bit.
double euclidean(const Mat& x, const Mat& y) {
  double acc = 0.0;
  for (long c = 0; c < x.rows(); ++c) {
    for (long t = 0; t < x.cols(); ++t) {
      const double d = x(c, t) - y(c, t);
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

}  // namespace

ChannelLoss cosine_recon_loss(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                              const MaskTable& visible) {
  check_pair(recon, target, visible);
  const int c = recon.channels();
  const int n = recon.n_patch;
  ChannelLoss out;
  out.per_channel = Vec::Zero(c);
  out.visible_count = Eigen::VectorXi::Zero(c);
  double total = 0.0;
  int included = 0;
  for (int ch = 0; ch < c; ++ch) {
    double cos_sum = 0.0;
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (!visible(i, ch)) continue;
      double dot = 0.0, nr = 0.0, nt = 0.0;
      for (int t = 0; t < recon.l_prime; ++t) {
        const double r = recon.segments[i](ch, t);
        const double x = target.segments[i](ch, t);
        dot += r * x;
        nr += r * r;
        nt += x * x;
      }
      const double denom = std::sqrt(nr) * std::sqrt(nt);
      cos_sum += denom < kNormFloor ? 0.0 : dot / denom;
      ++count;
    }
    out.visible_count[ch] = count;
    if (count > 0) {
      out.per_channel[ch] = 1.0 - cos_sum / count;
      total += out.per_channel[ch];
      ++included;
    }
  }
  require(included > 0, ErrKind::DimensionMismatch, "no channel has a visible subsegment");
  out.value = total / included;
  return out;
}

ChannelLoss mse_recon_loss(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                           const MaskTable& visible) {
  check_pair(recon, target, visible);
  const int c = recon.channels();
  const int n = recon.n_patch;
  ChannelLoss out;
  out.per_channel = Vec::Zero(c);
  out.visible_count = Eigen::VectorXi::Zero(c);
  double total = 0.0;
  int included = 0;
  for (int ch = 0; ch < c; ++ch) {
    double sq = 0.0;
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (!visible(i, ch)) continue;
      for (int t = 0; t < recon.l_prime; ++t) {
        const double d = target.segments[i](ch, t) - recon.segments[i](ch, t);
        sq += d * d;
      }
      ++count;
    }
    out.visible_count[ch] = count;
    if (count > 0) {
      out.per_channel[ch] = sq / (static_cast<double>(count) * recon.l_prime);
      total += out.per_channel[ch];
      ++included;
    }
  }
  require(included > 0, ErrKind::DimensionMismatch, "no channel has a visible subsegment");
  out.value = total / included;
  return out;
}

double iccl_loss(const SegmentedEpoch& recon_a, const SegmentedEpoch& recon_b,
                 const IcclConfig& cfg) {
  check_iccl_pair(recon_a, recon_b);
  const int n = recon_a.n_patch;
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d_pos = euclidean(recon_a.segments[i], recon_b.segments[i]);
    double neg_sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      neg_sum += euclidean(recon_a.segments[i], recon_a.segments[j]);
    }
    const double margin = d_pos - neg_sum / (n - 1) + cfg.margin_alpha;
    loss += std::max(0.0, margin);
  }
  return loss / n;
}

LossBreakdown total_pretrain_loss(const ChannelLoss& cos_a, const ChannelLoss& mse_a,
                                  const ChannelLoss& cos_b, const ChannelLoss& mse_b,
                                  double l_cl) {
  const int c = static_cast<int>(cos_a.per_channel.size());
  require(mse_a.per_channel.size() == c && cos_b.per_channel.size() == c &&
              mse_b.per_channel.size() == c,
          ErrKind::DimensionMismatch, "per-channel loss sizes differ");
  LossBreakdown out;
  out.l_cos = 0.5 * (cos_a.value + cos_b.value);
  out.l_mse = 0.5 * (mse_a.value + mse_b.value);
  out.l_recon = out.l_cos + out.l_mse;
  out.l_cl = l_cl;
  out.total = out.l_recon + out.l_cl;
  out.per_channel_cos = Vec::Zero(c);
  out.per_channel_mse = Vec::Zero(c);
  for (int ch = 0; ch < c; ++ch) {
    int sides = 0;
    double cos = 0.0, mse = 0.0;
    if (cos_a.visible_count[ch] > 0) {
      cos += cos_a.per_channel[ch];
      mse += mse_a.per_channel[ch];
      ++sides;
    }
    if (cos_b.visible_count[ch] > 0) {
      cos += cos_b.per_channel[ch];
      mse += mse_b.per_channel[ch];
      ++sides;
    }
    if (sides > 0) {
      out.per_channel_cos[ch] = cos / sides;
      out.per_channel_mse[ch] = mse / sides;
    }
  }
  return out;
}

double weighted_ce_loss(const Mat& probabilities, const Mat& onehot, const Vec& weights) {
  const long n = probabilities.rows();
  const long k = probabilities.cols();
  require(n > 0 && k > 0, ErrKind::DimensionMismatch, "empty probability matrix");
  require(onehot.rows() == n && onehot.cols() == k, ErrKind::DimensionMismatch,
          "labels shape mismatch");
  require(weights.size() == k, ErrKind::DimensionMismatch, "weights length mismatch");
  for (long i = 0; i < n; ++i) {
    double row = 0.0;
    for (long j = 0; j < k; ++j) row += probabilities(i, j);
    require(std::abs(row - 1.0) <= 1e-6, ErrKind::NotStochastic,
            "probability row " + std::to_string(i) + " sums to " + std::to_string(row));
  }
  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < k; ++j) {
      const double p = std::max(probabilities(i, j), kProbEps);
      loss += weights[j] * onehot(i, j) * std::log(p);
    }
  }
  return -loss / static_cast<double>(n);
}

double weighted_bce_loss(const Vec& probabilities, const Vec& labels, double positive_weight) {
  const long n = probabilities.size();
  require(n > 0, ErrKind::DimensionMismatch, "empty probability vector");
  require(labels.size() == n, ErrKind::DimensionMismatch, "labels length mismatch");
  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    const double p = std::min(std::max(probabilities[i], kProbEps), 1.0 - kProbEps);
    loss += positive_weight * labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  return -loss / static_cast<double>(n);
}

void cosine_recon_loss_backward(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                                const MaskTable& visible, double coeff,
                                SegmentedEpoch& grad_recon) {
  check_pair(recon, target, visible);
  const int c = recon.channels();
  const int n = recon.n_patch;
  // channel inclusion must match the forward pass
  std::vector<int> counts(static_cast<size_t>(c), 0);
  int included = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      if (visible(i, ch)) ++counts[static_cast<size_t>(ch)];
    }
    if (counts[static_cast<size_t>(ch)] > 0) ++included;
  }
  require(included > 0, ErrKind::DimensionMismatch, "no channel has a visible subsegment");
  for (int ch = 0; ch < c; ++ch) {
    const int count = counts[static_cast<size_t>(ch)];
    if (count == 0) continue;
    // d(loss)/d(cos_nc) = -1 / (included * count)
    const double scale = -coeff / (static_cast<double>(included) * count);
    for (int i = 0; i < n; ++i) {
      if (!visible(i, ch)) continue;
      double dot = 0.0, nr2 = 0.0, nt2 = 0.0;
      for (int t = 0; t < recon.l_prime; ++t) {
        const double r = recon.segments[i](ch, t);
        const double x = target.segments[i](ch, t);
        dot += r * x;
        nr2 += r * r;
        nt2 += x * x;
      }
      const double nr = std::sqrt(nr2);
      const double nt = std::sqrt(nt2);
      if (nr * nt < kNormFloor) continue;  // cosine pinned to 0 there
      const double inv = 1.0 / (nr * nt);
      const double rproj = dot / (nr2 * nr * nt);
      for (int t = 0; t < recon.l_prime; ++t) {
        const double r = recon.segments[i](ch, t);
        const double x = target.segments[i](ch, t);
        grad_recon.segments[i](ch, t) += scale * (x * inv - r * rproj);
      }
    }
  }
}

void mse_recon_loss_backward(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                             const MaskTable& visible, double coeff,
                             SegmentedEpoch& grad_recon) {
  check_pair(recon, target, visible);
  const int c = recon.channels();
  const int n = recon.n_patch;
  std::vector<int> counts(static_cast<size_t>(c), 0);
  int included = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      if (visible(i, ch)) ++counts[static_cast<size_t>(ch)];
    }
    if (counts[static_cast<size_t>(ch)] > 0) ++included;
  }
  require(included > 0, ErrKind::DimensionMismatch, "no channel has a visible subsegment");
  for (int ch = 0; ch < c; ++ch) {
    const int count = counts[static_cast<size_t>(ch)];
    if (count == 0) continue;
    const double scale =
        2.0 * coeff / (static_cast<double>(included) * count * recon.l_prime);
    for (int i = 0; i < n; ++i) {
      if (!visible(i, ch)) continue;
      for (int t = 0; t < recon.l_prime; ++t) {
        grad_recon.segments[i](ch, t) +=
            scale * (recon.segments[i](ch, t) - target.segments[i](ch, t));
      }
    }
  }
}

void iccl_loss_backward(const SegmentedEpoch& recon_a, const SegmentedEpoch& recon_b,
                        const IcclConfig& cfg, double coeff, SegmentedEpoch& grad_a,
                        SegmentedEpoch& grad_b) {
  check_iccl_pair(recon_a, recon_b);
  const int n = recon_a.n_patch;
  const double inv_neg = 1.0 / (n - 1);
  for (int i = 0; i < n; ++i) {
    const double d_pos = euclidean(recon_a.segments[i], recon_b.segments[i]);
    std::vector<double> d_neg(static_cast<size_t>(n), 0.0);
    double neg_sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      d_neg[static_cast<size_t>(j)] = euclidean(recon_a.segments[i], recon_a.segments[j]);
      neg_sum += d_neg[static_cast<size_t>(j)];
    }
    const double margin = d_pos - neg_sum * inv_neg + cfg.margin_alpha;
    if (margin <= 0.0) continue;  // hinge inactive
    const double w = coeff / n;
    if (d_pos > 0.0) {
      const double s = w / d_pos;
      grad_a.segments[i] += s * (recon_a.segments[i] - recon_b.segments[i]);
      grad_b.segments[i] += s * (recon_b.segments[i] - recon_a.segments[i]);
    }
    for (int j = 0; j < n; ++j) {
      if (j == i || d_neg[static_cast<size_t>(j)] <= 0.0) continue;
      const double s = w * inv_neg / d_neg[static_cast<size_t>(j)];
      Mat diff = recon_a.segments[i] - recon_a.segments[j];
      grad_a.segments[i] -= s * diff;
      grad_a.segments[j] += s * diff;
    }
  }
}

Mat weighted_ce_loss_grad(const Mat& probabilities, const Mat& onehot, const Vec& weights) {
  const long n = probabilities.rows();
  const long k = probabilities.cols();
  require(onehot.rows() == n && onehot.cols() == k, ErrKind::DimensionMismatch,
          "labels shape mismatch");
  require(weights.size() == k, ErrKind::DimensionMismatch, "weights length mismatch");
  Mat grad = Mat::Zero(n, k);
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < k; ++j) {
      if (probabilities(i, j) <= kProbEps) continue;  // clamped region is flat
      grad(i, j) = -weights[j] * onehot(i, j) / (static_cast<double>(n) * probabilities(i, j));
    }
  }
  return grad;
}

Vec weighted_bce_loss_grad(const Vec& probabilities, const Vec& labels, double positive_weight) {
  const long n = probabilities.size();
  require(labels.size() == n, ErrKind::DimensionMismatch, "labels length mismatch");
  Vec grad = Vec::Zero(n);
  for (long i = 0; i < n; ++i) {
    const double p = probabilities[i];
    if (p <= kProbEps || p >= 1.0 - kProbEps) continue;
    grad[i] = -(positive_weight * labels[i] / p - (1.0 - labels[i]) / (1.0 - p)) /
              static_cast<double>(n);
  }
  return grad;
}

}  // namespace psgmae
