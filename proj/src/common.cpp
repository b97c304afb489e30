#include "psgmae/common.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace psgmae {

const char* errkind_name(ErrKind k) {
  switch (k) {
    case ErrKind::NonDivisibleLength: return "NonDivisibleLength";
    case ErrKind::TooFewPatches: return "TooFewPatches";
    case ErrKind::TooFewChannels: return "TooFewChannels";
    case ErrKind::EmptyChannel: return "EmptyChannel";
    case ErrKind::DimensionMismatch: return "DimensionMismatch";
    case ErrKind::ShapeMismatch: return "ShapeMismatch";
    case ErrKind::NotStochastic: return "NotStochastic";
    case ErrKind::InvalidConfig: return "InvalidConfig";
    case ErrKind::TooFewEpochs: return "TooFewEpochs";
    case ErrKind::TooFewSubjects: return "TooFewSubjects";
    case ErrKind::MissingCategory: return "MissingCategory";
    case ErrKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrKind::LengthMismatch: return "LengthMismatch";
    case ErrKind::EmptyMatrix: return "EmptyMatrix";
    case ErrKind::IoFailure: return "IoFailure";
    case ErrKind::FormatViolation: return "FormatViolation";
    case ErrKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrKind::ConfigMismatch: return "ConfigMismatch";
    case ErrKind::LabelModeMismatch: return "LabelModeMismatch";
    case ErrKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrKind::DivergenceDetected: return "DivergenceDetected";
  }
  return "UnknownError";
}

uint64_t Rng::uniform_int(uint64_t n) {
  if (n == 0) fail(ErrKind::InvalidConfig, "uniform_int with n == 0");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

namespace {

constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr uint64_t kFnvPrime = 0x100000001b3ull;

uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= kFnvPrime;
  }
  return h;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t root, std::string_view tag) {
  return splitmix64(root ^ fnv1a64(tag));
}

uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index) {
  return splitmix64(derive_seed(root, tag) ^ splitmix64(index));
}

namespace {

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    }
    table[i] = c;
  }
  return table;
}

}  // namespace

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
  static const std::array<uint32_t, 256> table = make_crc_table();
  uint32_t c = seed ^ 0xffffffffu;
  for (size_t i = 0; i < len; ++i) {
    c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  }
  return c ^ 0xffffffffu;
}

void ByteWriter::put_u16(uint16_t v) {
  put_u8(static_cast<uint8_t>(v & 0xff));
  put_u8(static_cast<uint8_t>(v >> 8));
}

void ByteWriter::put_u32(uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void ByteWriter::put_u64(uint64_t v) {
  for (int i = 0; i < 8; ++i) put_u8(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void ByteWriter::put_f32(float v) { put_u32(std::bit_cast<uint32_t>(v)); }

void ByteWriter::put_bytes(const void* data, size_t len) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  bytes.insert(bytes.end(), p, p + len);
}

void ByteReader::need(size_t n) const {
  if (pos_ + n > len_) {
    fail(ErrKind::FormatViolation,
         "unexpected end of data at byte offset " + std::to_string(pos_) +
             " (need " + std::to_string(n) + " more of " + std::to_string(len_) + ")");
  }
}

uint8_t ByteReader::get_u8() {
  need(1);
  return data_[pos_++];
}

uint16_t ByteReader::get_u16() {
  need(2);
  uint16_t v = static_cast<uint16_t>(data_[pos_]) |
               static_cast<uint16_t>(data_[pos_ + 1]) << 8;
  pos_ += 2;
  return v;
}

uint32_t ByteReader::get_u32() {
  need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

uint64_t ByteReader::get_u64() {
  need(8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::get_f32() { return std::bit_cast<float>(get_u32()); }

void ByteReader::get_bytes(void* out, size_t len) {
  need(len);
  std::memcpy(out, data_ + pos_, len);
  pos_ += len;
}

void ByteReader::skip(size_t n) {
  need(n);
  pos_ += n;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrKind::IoFailure, "cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) fail(ErrKind::IoFailure, "read failed for " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrKind::IoFailure, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrKind::IoFailure, "write failed for " + path);
}

}  // namespace psgmae
