#include "psgmae/masking.hpp"

#include <numeric>

namespace psgmae {

MaskPair generate_mask_pair(int c, int n_patch, uint64_t rng_seed) {
  require(c >= 2, ErrKind::TooFewChannels,
          "need at least 2 channels for a complementary pair, got " + std::to_string(c));
  require(n_patch >= 2, ErrKind::TooFewPatches,
          "n_patch must be >= 2, got " + std::to_string(n_patch));
  const int keep = c / 2;
  MaskPair pair;
  pair.n_patch = n_patch;
  pair.c = c;
  pair.m = MaskTable::Constant(n_patch, c, false);
  Rng rng(rng_seed);
  std::vector<int> order(static_cast<size_t>(c));
  for (int i = 0; i < n_patch; ++i) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int k = 0; k < keep; ++k) pair.m(i, order[static_cast<size_t>(k)]) = true;
  }
  return pair;
}

const char* recon_target_name(ReconTarget t) {
  switch (t) {
    case ReconTarget::visible: return "visible";
    case ReconTarget::hidden: return "hidden";
    case ReconTarget::all: return "all";
  }
  return "?";
}

ReconTarget recon_target_from_name(const std::string& name) {
  if (name == "visible") return ReconTarget::visible;
  if (name == "hidden") return ReconTarget::hidden;
  if (name == "all") return ReconTarget::all;
  fail(ErrKind::InvalidConfig, "unknown recon target '" + name + "'");
}

MaskTable loss_table(const MaskTable& side, ReconTarget target) {
  switch (target) {
    case ReconTarget::visible: return side;
    case ReconTarget::hidden: return !side;
    case ReconTarget::all: return MaskTable::Constant(side.rows(), side.cols(), true);
  }
  fail(ErrKind::InvalidConfig, "bad recon target");
}

EpochMatrix apply_mask(const EpochMatrix& epoch, const MaskTable& side) {
  const int c = epoch.channels();
  const long len = epoch.length();
  require(side.cols() == c, ErrKind::DimensionMismatch,
          "mask has " + std::to_string(side.cols()) + " channels, epoch has " +
              std::to_string(c));
  const int n_patch = static_cast<int>(side.rows());
  require(n_patch > 0 && len % n_patch == 0, ErrKind::DimensionMismatch,
          "epoch length " + std::to_string(len) + " not divisible into " +
              std::to_string(n_patch) + " subsegments");
  const long l_prime = len / n_patch;
  EpochMatrix out = epoch;
  for (int i = 0; i < n_patch; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      if (!side(i, ch)) out.data.row(ch).segment(i * l_prime, l_prime).setZero();
    }
  }
  return out;
}

}  // namespace psgmae
