#include "psgmae/checkpoint.hpp"

#include <cstring>

#include <json.hpp>

#include "psgmae/signal.hpp"

namespace psgmae {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'S', 'G', 'C'};
constexpr uint16_t kVersion = 1;

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["c"] = cfg.c;
  j["n_patch"] = cfg.n_patch;
  j["l_prime"] = cfg.l_prime;
  j["d_model"] = cfg.d_model;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["d_ff"] = cfg.d_ff;
  j["dec_hidden"] = cfg.dec_hidden;
  j["kernels"] = cfg.kernels;
  j["head_channels"] = cfg.head_channels;
  j["head_mlp_hidden"] = cfg.head_mlp_hidden;
  j["num_classes"] = cfg.num_classes;
  j["dropout"] = cfg.dropout;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.c = j.at("c").get<int>();
  cfg.n_patch = j.at("n_patch").get<int>();
  cfg.l_prime = j.at("l_prime").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.dec_hidden = j.at("dec_hidden").get<int>();
  cfg.kernels = j.at("kernels").get<std::vector<int>>();
  cfg.head_channels = j.at("head_channels").get<int>();
  cfg.head_mlp_hidden = j.at("head_mlp_hidden").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  return cfg;
}

bool valid_task(const std::string& task) {
  return task == "pretrain" || task == "staging" || task == "osa";
}

}  // namespace

Checkpoint make_checkpoint(const ModelParams& params, const std::string& task,
                           CenterMode center_mode, ReconTarget recon_target,
                           double margin_alpha, uint64_t seed) {
  require(valid_task(task), ErrKind::InvalidConfig, "unknown task '" + task + "'");
  Checkpoint ckpt;
  ckpt.task = task;
  ckpt.config = params.cfg;
  ckpt.center_mode = center_mode;
  ckpt.recon_target = recon_target;
  ckpt.margin_alpha = margin_alpha;
  ckpt.seed = seed;
  ckpt.flat.resize(params.flat.size());
  // quantize once here so the in-memory values equal what a reload would give
  for (size_t i = 0; i < params.flat.size(); ++i)
    ckpt.flat[i] = static_cast<double>(static_cast<float>(params.flat[i]));
  return ckpt;
}

ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
  ModelParams p;
  p.cfg = ckpt.config;
  p.index = build_index(ckpt.config);
  require(static_cast<long>(ckpt.flat.size()) == p.index.total,
          ErrKind::ConfigMismatch,
          "checkpoint holds " + std::to_string(ckpt.flat.size()) +
              " values, config wants " + std::to_string(p.index.total));
  p.flat = ckpt.flat;
  return p;
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  require(valid_task(ckpt.task), ErrKind::InvalidConfig,
          "unknown task '" + ckpt.task + "'");
  const ModelIndex index = build_index(ckpt.config);
  require(static_cast<long>(ckpt.flat.size()) == index.total,
          ErrKind::ConfigMismatch, "checkpoint flat size does not match config");
  json header;
  header["task"] = ckpt.task;
  header["center_mode"] = center_mode_name(ckpt.center_mode);
  header["recon_target"] = recon_target_name(ckpt.recon_target);
  header["margin_alpha"] = ckpt.margin_alpha;
  header["seed"] = ckpt.seed;
  header["config"] = config_to_json(ckpt.config);
  json tensors = json::array();
  for (const TensorSpec& spec : index.tensors) {
    json t;
    t["name"] = spec.name;
    t["rows"] = spec.rows;
    t["cols"] = spec.cols;
    tensors.push_back(std::move(t));
  }
  header["tensors"] = std::move(tensors);
  const std::string header_str = header.dump();

  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put_u16(kVersion);
  w.put_u32(static_cast<uint32_t>(header_str.size()));
  w.put_bytes(header_str.data(), header_str.size());
  for (double v : ckpt.flat) w.put_f32(static_cast<float>(v));
  w.put_u32(crc32(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes.data(), bytes.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrKind::FormatViolation, "bad magic at byte offset 0 (not a PSGC file)");
  const uint16_t version = r.get_u16();
  if (version != kVersion)
    fail(ErrKind::FormatViolation,
         "unsupported PSGC version " + std::to_string(version) +
             " at byte offset 4");
  const uint32_t header_len = r.get_u32();
  const size_t header_off = r.offset();
  if (bytes.size() - header_off < header_len)
    fail(ErrKind::FormatViolation,
         "unexpected end of data at byte offset " + std::to_string(bytes.size()) +
             " (header of " + std::to_string(header_len) + " bytes expected)");
  json header;
  try {
    header = json::parse(bytes.begin() + header_off,
                         bytes.begin() + header_off + header_len);
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         "malformed header JSON at byte offset " + std::to_string(header_off) +
             ": " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.task = header.at("task").get<std::string>();
    ckpt.center_mode =
        center_mode_from_name(header.at("center_mode").get<std::string>());
    ckpt.recon_target =
        recon_target_from_name(header.at("recon_target").get<std::string>());
    ckpt.margin_alpha = header.at("margin_alpha").get<double>();
    ckpt.seed = header.at("seed").get<uint64_t>();
    ckpt.config = config_from_json(header.at("config"));
  } catch (const json::exception& e) {
    fail(ErrKind::FormatViolation,
         std::string("header field missing or mistyped: ") + e.what());
  } catch (const PsgError& e) {
    fail(ErrKind::FormatViolation, std::string("bad header value: ") + e.what());
  }
  if (!valid_task(ckpt.task))
    fail(ErrKind::FormatViolation, "unknown task '" + ckpt.task + "'");

  ModelIndex index;
  try {
    index = build_index(ckpt.config);
  } catch (const PsgError& e) {
    fail(ErrKind::FormatViolation,
         std::string("header config is not a valid model: ") + e.what());
  }
  require(header.contains("tensors") && header["tensors"].is_array(),
          ErrKind::FormatViolation, "header needs a 'tensors' array");
  const auto& tensors = header["tensors"];
  if (tensors.size() != index.tensors.size())
    fail(ErrKind::FormatViolation,
         "tensor manifest lists " + std::to_string(tensors.size()) +
             " tensors, config wants " + std::to_string(index.tensors.size()));
  for (size_t i = 0; i < index.tensors.size(); ++i) {
    const TensorSpec& spec = index.tensors[i];
    try {
      if (tensors[i].at("name").get<std::string>() != spec.name ||
          tensors[i].at("rows").get<long>() != spec.rows ||
          tensors[i].at("cols").get<long>() != spec.cols)
        fail(ErrKind::FormatViolation,
             "tensor manifest entry " + std::to_string(i) +
                 " disagrees with the model config (expected " + spec.name + ")");
    } catch (const json::exception& e) {
      fail(ErrKind::FormatViolation,
           std::string("tensor manifest entry malformed: ") + e.what());
    }
  }

  const size_t expected =
      header_off + header_len + sizeof(float) * static_cast<size_t>(index.total) + 4;
  if (bytes.size() < expected)
    fail(ErrKind::FormatViolation,
         "unexpected end of data at byte offset " + std::to_string(bytes.size()) +
             " (file should span " + std::to_string(expected) + " bytes)");
  if (bytes.size() > expected)
    fail(ErrKind::FormatViolation,
         "trailing garbage at byte offset " + std::to_string(expected));

  const uint32_t stored = static_cast<uint32_t>(bytes[expected - 4]) |
                          static_cast<uint32_t>(bytes[expected - 3]) << 8 |
                          static_cast<uint32_t>(bytes[expected - 2]) << 16 |
                          static_cast<uint32_t>(bytes[expected - 1]) << 24;
  const uint32_t actual = crc32(bytes.data(), expected - 4);
  if (stored != actual) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "CRC mismatch: stored 0x%08x, computed 0x%08x",
                  stored, actual);
    fail(ErrKind::ChecksumMismatch, buf);
  }

  ByteReader body(bytes.data(), expected - 4);
  body.skip(header_off + header_len);
  ckpt.flat.resize(static_cast<size_t>(index.total));
  for (auto& v : ckpt.flat) v = static_cast<double>(body.get_f32());
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path.string(), encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path.string());
  return decode_checkpoint(bytes);
}

}  // namespace psgmae
