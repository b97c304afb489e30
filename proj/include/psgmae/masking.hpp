#pragma once

#include <Eigen/Dense>

#include "psgmae/common.hpp"
#include "psgmae/signal.hpp"

namespace psgmae {

// Boolean (n_patch, C) selection: entry (i, c) says whether channel c of
// subsegment i is kept by that mask side. The conceptual (C, L) mask is this
// table expanded over each subsegment's l_prime samples.
using MaskTable = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// A complementary pair of channel masks. `m` selects exactly floor(C/2)
// channels per subsegment; the complement selects the rest.
struct MaskPair {
  MaskTable m;  // n_patch rows, C columns
  int n_patch = 0;
  int c = 0;
  int l_prime = 0;  // bound when the pair is applied to an epoch

  MaskTable complement() const { return !m; }
};

// Uniformly samples a floor(C/2)-subset of channels per subsegment,
// independently across subsegments. Deterministic in rng_seed.
MaskPair generate_mask_pair(int c, int n_patch, uint64_t rng_seed);

// Elementwise product of the epoch with one expanded mask side: masked-out
// cells become exactly zero.
EpochMatrix apply_mask(const EpochMatrix& epoch, const MaskTable& side);

// Which (subsegment, channel) cells the reconstruction loss scores, relative
// to the mask side the encoder saw.
enum class ReconTarget { visible, hidden, all };

const char* recon_target_name(ReconTarget t);
ReconTarget recon_target_from_name(const std::string& name);

// Table of cells to score for an encoder input masked by `side`.
MaskTable loss_table(const MaskTable& side, ReconTarget target);

}  // namespace psgmae
