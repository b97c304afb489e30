#include <doctest.h>

#include <filesystem>

#include "helpers.hpp"
#include "psgmae/checkpoint.hpp"

using namespace psgmae;
using psgmae::test::kind_of;
namespace stdfs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.c = 3;
  cfg.n_patch = 4;
  cfg.l_prime = 8;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.dec_hidden = 12;
  cfg.kernels = {3, 5};
  cfg.head_channels = 4;
  cfg.head_mlp_hidden = 6;
  cfg.num_classes = 5;
  cfg.dropout = 0.1;
  return cfg;
}

}  // namespace

TEST_CASE("checkpoints round-trip bitwise") {
  const ModelConfig cfg = small_config();
  const ModelParams params = ModelParams::init(cfg, 12345);
  const Checkpoint ckpt = make_checkpoint(params, "staging", CenterMode::mean,
                                          ReconTarget::hidden, 0.75, 42);
  const std::vector<uint8_t> bytes = encode_checkpoint(ckpt);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.task == "staging");
  CHECK(back.center_mode == CenterMode::mean);
  CHECK(back.recon_target == ReconTarget::hidden);
  CHECK(back.margin_alpha == 0.75);
  CHECK(back.seed == 42);
  CHECK(back.config == cfg);
  CHECK(back.flat == ckpt.flat);
  CHECK(encode_checkpoint(back) == bytes);

  // parameters survive the float32 quantization contract
  const ModelParams restored = params_from_checkpoint(back);
  for (size_t i = 0; i < params.flat.size(); ++i)
    CHECK(restored.flat[i] ==
          static_cast<double>(static_cast<float>(params.flat[i])));
}

TEST_CASE("checkpoint files round-trip on disk") {
  const stdfs::path dir = stdfs::temp_directory_path() / "psgmae-test-ckpt";
  stdfs::remove_all(dir);
  stdfs::create_directories(dir);
  const ModelParams params = ModelParams::init(small_config(), 5);
  const Checkpoint ckpt = make_checkpoint(params, "pretrain", CenterMode::median,
                                          ReconTarget::visible, 1.0, 7);
  save_checkpoint(ckpt, dir / "model.psgc");
  const Checkpoint back = load_checkpoint(dir / "model.psgc");
  CHECK(back.flat == ckpt.flat);
  CHECK(kind_of([&] { load_checkpoint(dir / "nope.psgc"); }) == ErrKind::IoFailure);
  stdfs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints never load silently") {
  const ModelParams params = ModelParams::init(small_config(), 31);
  const Checkpoint ckpt = make_checkpoint(params, "osa", CenterMode::median,
                                          ReconTarget::visible, 1.0, 0);
  const std::vector<uint8_t> clean = encode_checkpoint(ckpt);
  Rng rng(2);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<uint8_t> bytes = clean;
    const size_t pos = static_cast<size_t>(rng.uniform_int(bytes.size()));
    bytes[pos] ^= static_cast<uint8_t>(1 + rng.uniform_int(255));
    try {
      decode_checkpoint(bytes);
      FAIL("mutation at byte ", pos, " decoded silently");
    } catch (const PsgError& e) {
      CHECK((e.kind() == ErrKind::FormatViolation ||
             e.kind() == ErrKind::ChecksumMismatch));
    }
  }
  for (size_t cut : {size_t{0}, size_t{2}, size_t{17}, clean.size() - 1}) {
    CHECK(kind_of([&] {
            decode_checkpoint(std::span<const uint8_t>(clean.data(), cut));
          }) == ErrKind::FormatViolation);
  }
  std::vector<uint8_t> longer = clean;
  longer.push_back(7);
  CHECK(kind_of([&] { decode_checkpoint(longer); }) == ErrKind::FormatViolation);
}

TEST_CASE("parameter reconstruction cross-checks the tensor manifest") {
  const ModelParams params = ModelParams::init(small_config(), 8);
  Checkpoint ckpt = make_checkpoint(params, "pretrain", CenterMode::median,
                                    ReconTarget::visible, 1.0, 0);
  ckpt.flat.pop_back();
  CHECK(kind_of([&] { params_from_checkpoint(ckpt); }) == ErrKind::ConfigMismatch);
}
