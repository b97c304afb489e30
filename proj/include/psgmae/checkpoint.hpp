#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "psgmae/masking.hpp"
#include "psgmae/model.hpp"

namespace psgmae {

// Model snapshot plus the run settings needed to use it correctly later.
// Tensor data is stored as little-endian float32; `flat` always holds the
// float32-quantized values so save/load round-trips are byte identical.
struct Checkpoint {
  std::string task = "pretrain";  // pretrain | staging | osa
  ModelConfig config;
  CenterMode center_mode = CenterMode::median;
  ReconTarget recon_target = ReconTarget::visible;
  double margin_alpha = 1.0;
  uint64_t seed = 0;
  std::vector<double> flat;
};

Checkpoint make_checkpoint(const ModelParams& params, const std::string& task,
                           CenterMode center_mode, ReconTarget recon_target,
                           double margin_alpha, uint64_t seed);

ModelParams params_from_checkpoint(const Checkpoint& ckpt);

// Container (.psgc): magic "PSGC", u16 version, u32-length-prefixed JSON
// header (settings, model config, tensor manifest), float32 tensor data in
// manifest order (column-major within each tensor), trailing CRC32.
std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace psgmae
