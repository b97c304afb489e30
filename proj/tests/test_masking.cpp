#include <doctest.h>

#include <vector>

#include "helpers.hpp"
#include "psgmae/masking.hpp"
#include "psgmae/signal.hpp"

using namespace psgmae;
using psgmae::test::kind_of;

TEST_CASE("mask pair selects floor(C/2) channels per subsegment") {
  for (int c : {2, 3, 5, 8}) {
    const MaskPair pair = generate_mask_pair(c, 10, 123);
    REQUIRE(pair.m.rows() == 10);
    REQUIRE(pair.m.cols() == c);
    for (int i = 0; i < 10; ++i) {
      int count = 0;
      for (int ch = 0; ch < c; ++ch) count += pair.m(i, ch) ? 1 : 0;
      CHECK(count == c / 2);
    }
  }
}

TEST_CASE("complement partitions every subsegment") {
  const MaskPair pair = generate_mask_pair(5, 10, 7);
  const MaskTable other = pair.complement();
  for (int i = 0; i < 10; ++i)
    for (int ch = 0; ch < 5; ++ch) {
      CHECK(pair.m(i, ch) != other(i, ch));       // disjoint
      CHECK((pair.m(i, ch) || other(i, ch)));     // exhaustive
    }
}

TEST_CASE("mask invariants hold over ten thousand random pairs") {
  Rng rng(2024);
  long violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int c = 2 + static_cast<int>(rng.uniform_int(7));
    const int np = 2 + static_cast<int>(rng.uniform_int(11));
    const MaskPair pair = generate_mask_pair(c, np, rng.next_u64());
    const MaskTable other = pair.complement();
    for (int i = 0; i < np; ++i) {
      int count = 0;
      for (int ch = 0; ch < c; ++ch) {
        count += pair.m(i, ch) ? 1 : 0;
        if (pair.m(i, ch) == other(i, ch)) ++violations;
      }
      if (count != c / 2) ++violations;
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("masking is deterministic in the seed") {
  const MaskPair a = generate_mask_pair(5, 10, 99);
  const MaskPair b = generate_mask_pair(5, 10, 99);
  CHECK((a.m == b.m).all());
  bool any_diff = false;
  for (uint64_t s = 0; s < 8 && !any_diff; ++s)
    any_diff = !(generate_mask_pair(5, 10, 100 + s).m == a.m).all();
  CHECK(any_diff);
}

TEST_CASE("each channel is selected at close to the expected frequency") {
  // C=5: each channel appears in the first side with probability 2/5
  const int trials = 4000;
  const int np = 10;
  std::vector<long> hits(5, 0);
  for (int s = 0; s < trials; ++s) {
    const MaskPair pair = generate_mask_pair(5, np, 5000 + static_cast<uint64_t>(s));
    for (int i = 0; i < np; ++i)
      for (int ch = 0; ch < 5; ++ch) hits[static_cast<size_t>(ch)] += pair.m(i, ch);
  }
  for (int ch = 0; ch < 5; ++ch) {
    const double freq =
        static_cast<double>(hits[static_cast<size_t>(ch)]) / (trials * np);
    CHECK(freq == doctest::Approx(0.4).epsilon(0.05));
  }
}

TEST_CASE("apply_mask zeroes exactly the hidden cells") {
  Rng rng(5);
  Mat raw(3, 24);
  for (int ch = 0; ch < 3; ++ch)
    for (int t = 0; t < 24; ++t) raw(ch, t) = 1.0 + rng.uniform();
  const EpochMatrix epoch = EpochMatrix::create(raw, 12, 2);
  const MaskPair pair = generate_mask_pair(3, 4, 77);
  const EpochMatrix masked = apply_mask(epoch, pair.m);
  for (int i = 0; i < 4; ++i)
    for (int ch = 0; ch < 3; ++ch)
      for (int t = 0; t < 6; ++t) {
        const double v = masked.data(ch, i * 6 + t);
        if (pair.m(i, ch))
          CHECK(v == raw(ch, i * 6 + t));
        else
          CHECK(v == 0.0);
      }
  // the two masked views partition the epoch's energy
  const EpochMatrix other = apply_mask(epoch, pair.complement());
  CHECK((masked.data + other.data - raw).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loss table reflects the reconstruction target") {
  const MaskPair pair = generate_mask_pair(5, 6, 3);
  const MaskTable vis = loss_table(pair.m, ReconTarget::visible);
  const MaskTable hid = loss_table(pair.m, ReconTarget::hidden);
  const MaskTable all = loss_table(pair.m, ReconTarget::all);
  for (int i = 0; i < 6; ++i)
    for (int ch = 0; ch < 5; ++ch) {
      CHECK(vis(i, ch) == pair.m(i, ch));
      CHECK(hid(i, ch) == !pair.m(i, ch));
      CHECK(all(i, ch) == true);
    }
  CHECK(recon_target_name(ReconTarget::visible) == std::string("visible"));
  CHECK(recon_target_from_name("hidden") == ReconTarget::hidden);
  CHECK(kind_of([] { recon_target_from_name("both"); }) == ErrKind::InvalidConfig);
}

TEST_CASE("mask generation rejects degenerate shapes") {
  CHECK(kind_of([] { generate_mask_pair(1, 10, 0); }) == ErrKind::TooFewChannels);
  CHECK(kind_of([] { generate_mask_pair(5, 1, 0); }) == ErrKind::TooFewPatches);
}
