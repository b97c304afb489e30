#pragma once

#include <Eigen/Dense>

#include "psgmae/masking.hpp"
#include "psgmae/signal.hpp"

namespace psgmae {

// Margin for the inter-channel contrastive triplet loss.
struct IcclConfig {
  double margin_alpha = 1.0;
};

// One side's channel-level reconstruction loss. per_channel holds the
// channel terms (zero where a channel had no visible subsegment and was
// excluded from the channel average); visible_count says how many
// subsegments contributed per channel.
struct ChannelLoss {
  double value = 0.0;
  Vec per_channel;
  Eigen::VectorXi visible_count;
};

// Full pre-training breakdown. l_recon is the two mask sides' mean,
// total = l_recon + l_cl.
struct LossBreakdown {
  double l_cos = 0.0;
  double l_mse = 0.0;
  double l_recon = 0.0;
  double l_cl = 0.0;
  double total = 0.0;
  Vec per_channel_cos;
  Vec per_channel_mse;
};

// Cosine-similarity reconstruction loss: per channel, one minus the mean
// cosine between reconstructed and target subsegments over the visible
// subsegments; the scalar averages over channels with at least one visible
// subsegment. Zero-norm vectors contribute cosine 0.
ChannelLoss cosine_recon_loss(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                              const MaskTable& visible);

// Squared-error reconstruction loss: per channel, the mean squared
// difference over visible time steps; scalar averages over included channels.
ChannelLoss mse_recon_loss(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                           const MaskTable& visible);

// Triplet loss over flattened subsegments: anchor i from recon_a, positive =
// recon_b's subsegment i, negatives = recon_a's other subsegments. Each term
// hinges the anchor-positive distance against the mean negative distance
// plus the margin; the loss averages terms over subsegments.
double iccl_loss(const SegmentedEpoch& recon_a, const SegmentedEpoch& recon_b,
                 const IcclConfig& cfg);

// Combines both sides' reconstruction terms (mean of sides) with the
// contrastive term into one breakdown.
LossBreakdown total_pretrain_loss(const ChannelLoss& cos_a, const ChannelLoss& mse_a,
                                  const ChannelLoss& cos_b, const ChannelLoss& mse_b,
                                  double l_cl);

// Class-weighted multi-class cross entropy over row-stochastic probabilities
// and one-hot labels; probabilities are clamped to [1e-12, 1] before log.
double weighted_ce_loss(const Mat& probabilities, const Mat& onehot, const Vec& weights);

// Binary cross entropy with a weight on the positive term only.
double weighted_bce_loss(const Vec& probabilities, const Vec& labels, double positive_weight);

// ---------------------------------------------------------------------------
// Analytic gradients. The *_backward functions accumulate
// coeff * d(loss)/d(recon) into the given gradient structure, which must be
// pre-shaped like the corresponding recon argument.
// ---------------------------------------------------------------------------

void cosine_recon_loss_backward(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                                const MaskTable& visible, double coeff,
                                SegmentedEpoch& grad_recon);

void mse_recon_loss_backward(const SegmentedEpoch& recon, const SegmentedEpoch& target,
                             const MaskTable& visible, double coeff,
                             SegmentedEpoch& grad_recon);

void iccl_loss_backward(const SegmentedEpoch& recon_a, const SegmentedEpoch& recon_b,
                        const IcclConfig& cfg, double coeff, SegmentedEpoch& grad_a,
                        SegmentedEpoch& grad_b);

Mat weighted_ce_loss_grad(const Mat& probabilities, const Mat& onehot, const Vec& weights);

Vec weighted_bce_loss_grad(const Vec& probabilities, const Vec& labels, double positive_weight);

// Clamp floor applied to probabilities before taking logs.
inline constexpr double kProbEps = 1e-12;

}  // namespace psgmae
