#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace psgmae {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrKind {
  // argument / shape errors
  NonDivisibleLength,
  TooFewPatches,
  TooFewChannels,
  EmptyChannel,
  DimensionMismatch,
  ShapeMismatch,
  NotStochastic,
  InvalidConfig,
  TooFewEpochs,
  TooFewSubjects,
  MissingCategory,
  LabelOutOfRange,
  LengthMismatch,
  EmptyMatrix,
  // file / format errors
  IoFailure,
  FormatViolation,
  ChecksumMismatch,
  // runtime state errors
  ConfigMismatch,
  LabelModeMismatch,
  NonFiniteActivation,
  DivergenceDetected,
};

const char* errkind_name(ErrKind k);

class PsgError : public std::runtime_error {
 public:
  PsgError(ErrKind kind, const std::string& message)
      : std::runtime_error(std::string(errkind_name(kind)) + ": " + message),
        kind_(kind) {}
  ErrKind kind() const { return kind_; }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& message) {
  throw PsgError(kind, message);
}

inline void require(bool cond, ErrKind kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// mt19937_64 is fully specified by the standard; the distribution transforms
// below are hand-rolled so that streams are reproducible across platforms
// (std::normal_distribution et al. are implementation-defined).
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) via rejection sampling.
  uint64_t uniform_int(uint64_t n);

  // Standard normal via Box-Muller, second draw cached.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a root seed and a component tag.
// Adding new tagged components never perturbs existing streams.
uint64_t derive_seed(uint64_t root, std::string_view tag);
uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index);

// ---------------------------------------------------------------------------
// CRC32 (IEEE, reflected, as used by zip/png)
// ---------------------------------------------------------------------------

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

// ---------------------------------------------------------------------------
// Little-endian byte buffer helpers for the container formats
// ---------------------------------------------------------------------------

struct ByteWriter {
  std::vector<uint8_t> bytes;
  void put_u8(uint8_t v) { bytes.push_back(v); }
  void put_u16(uint16_t v);
  void put_u32(uint32_t v);
  void put_u64(uint64_t v);
  void put_f32(float v);
  void put_bytes(const void* data, size_t len);
};

class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t len) : data_(data), len_(len) {}
  size_t offset() const { return pos_; }
  size_t remaining() const { return len_ - pos_; }
  uint8_t get_u8();
  uint16_t get_u16();
  uint32_t get_u32();
  uint64_t get_u64();
  float get_f32();
  void get_bytes(void* out, size_t len);
  void skip(size_t n);

 private:
  void need(size_t n) const;
  const uint8_t* data_;
  size_t len_;
  size_t pos_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace psgmae
