#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/matrix.hpp"

namespace phenomil {

/// One sample's bag of patch features (M x d) with its subtype label.
/// `planted_saliency` carries ground-truth phenotype proportions for
/// synthetic data.
struct FeatureBag {
  std::string sample_id;
  Matrix features;
  std::size_t label = 0;
  std::optional<std::vector<double>> planted_saliency;

  std::size_t patch_count() const noexcept { return features.rows(); }
  std::size_t dimension() const noexcept { return features.cols(); }

  bool operator==(const FeatureBag&) const = default;
};

// ---------------------------------------------------------------------------
// Little-endian byte codec shared by the bag and checkpoint containers.

namespace io {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str16(const std::string& s) {
    if (s.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("string too long for u16 length: " + s.substr(0, 32));
    le(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw DataError("short write to '" + path + "'");
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data) : data_(std::move(data)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    return ByteReader(std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {}));
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
  }
  std::array<char, 4> magic() {
    need(4, "magic");
    std::array<char, 4> m{};
    std::memcpy(m.data(), data_.data() + pos_, 4);
    pos_ += 4;
    return m;
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str16(const char* what) {
    const auto n = le<std::uint16_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace io

// ---------------------------------------------------------------------------
// Bag file: "PAB1", u32 M, u32 d, u32 label, u8 has_planted,
// [u32 N, N x f32], M*d x f32 row-major, u16 id length, id bytes.

inline constexpr std::array<char, 4> kBagMagic{'P', 'A', 'B', '1'};

inline std::vector<std::uint8_t> encode_bag(const FeatureBag& bag) {
  if (bag.features.rows() == 0) throw ShapeError("bag '" + bag.sample_id + "' has no patches");
  io::ByteWriter w;
  w.bytes(kBagMagic.data(), 4);
  w.le(static_cast<std::uint32_t>(bag.features.rows()));
  w.le(static_cast<std::uint32_t>(bag.features.cols()));
  w.le(static_cast<std::uint32_t>(bag.label));
  w.le(static_cast<std::uint8_t>(bag.planted_saliency ? 1 : 0));
  if (bag.planted_saliency) {
    w.le(static_cast<std::uint32_t>(bag.planted_saliency->size()));
    for (double v : *bag.planted_saliency) w.f32(static_cast<float>(v));
  }
  for (double v : bag.features.values()) w.f32(static_cast<float>(v));
  w.str16(bag.sample_id);
  return w.buffer();
}

inline FeatureBag decode_bag(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.magic() != kBagMagic) throw FormatError("bad bag magic (expected PAB1)", 0);
  const auto m = r.le<std::uint32_t>("patch count");
  const auto d_off = r.offset();
  const auto d = r.le<std::uint32_t>("dimension");
  FeatureBag bag;
  bag.label = r.le<std::uint32_t>("label");
  const auto flag_off = r.offset();
  const auto has_planted = r.le<std::uint8_t>("planted flag");
  if (has_planted > 1) throw FormatError("planted flag must be 0 or 1", flag_off);
  if (has_planted) {
    const auto n_off = r.offset();
    const auto n = r.le<std::uint32_t>("phenotype count");
    if (static_cast<std::uint64_t>(n) * 4 > r.remaining()) throw FormatError("planted saliency overflows payload", n_off);
    std::vector<double> s(n);
    for (auto& v : s) v = r.f32("planted saliency");
    bag.planted_saliency = std::move(s);
  }
  if (m == 0 || d == 0) throw FormatError("bag shape must be at least 1x1", d_off);
  const std::uint64_t count = static_cast<std::uint64_t>(m) * d;
  if (count * 4 > r.remaining()) throw FormatError("feature payload overflows file", r.offset());
  bag.features = Matrix(m, d);
  for (auto& v : bag.features.values()) v = r.f32("features");
  bag.sample_id = r.str16("sample id");
  if (r.remaining() != 0) throw FormatError("trailing bytes after bag", r.offset());
  return bag;
}

inline void write_bag(const FeatureBag& bag, const std::string& path) {
  io::write_file_bytes(encode_bag(bag), path);
}

inline FeatureBag read_bag(const std::string& path) {
  return decode_bag(io::read_file_bytes(path));
}

}  // namespace phenomil
