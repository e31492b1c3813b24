#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coapt/errors.hpp"
#include "coapt/tokenizer.hpp"

// COAPTEMB: named embedding vectors exported from a pretrained model.
//
//   magic "COAPTEMB" | u32 version=1 | u8 kind (0 token, 1 image) | u32 dim | u32 count
//   count × { u16 name_len | name bytes (UTF-8) | dim × f32 }
//
// All integers and floats little-endian.

namespace coapt {

enum class EmbeddingKind : std::uint8_t { token = 0, image = 1 };

struct EmbeddingRecord {
  std::string name;
  std::vector<float> values;
  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct EmbeddingExport {
  EmbeddingKind kind = EmbeddingKind::token;
  std::uint32_t dim = 0;
  std::vector<EmbeddingRecord> records;
};

inline constexpr char kEmbeddingMagic[8] = {'C', 'O', 'A', 'P', 'T', 'E', 'M', 'B'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <class T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > data_.size()) throw FormatError(std::string("truncated ") + what, pos_);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    if (pos_ + n > data_.size()) throw FormatError(std::string("truncated ") + what, pos_);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_embeddings(const EmbeddingExport& e) {
  std::string out(kEmbeddingMagic, sizeof(kEmbeddingMagic));
  detail::put_le<std::uint32_t>(out, kEmbeddingVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.kind));
  detail::put_le<std::uint32_t>(out, e.dim);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.records.size()));
  for (const auto& r : e.records) {
    if (r.name.size() > 0xFFFF) throw FormatError("record name longer than 65535 bytes: " + r.name.substr(0, 32));
    if (r.values.size() != e.dim)
      throw DimensionError("record '" + r.name + "' has " + std::to_string(r.values.size()) + " values, header dim " +
                           std::to_string(e.dim));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    for (float v : r.values) detail::put_le<float>(out, v);
  }
  return out;
}

/// Parses a COAPTEMB image. When `expected_dim` is set, a different header
/// dim is a format error.
inline EmbeddingExport parse_embeddings(std::string_view bytes, std::optional<std::uint32_t> expected_dim = {}) {
  detail::ByteReader in(bytes);
  auto magic = in.bytes(sizeof(kEmbeddingMagic), "magic");
  if (std::memcmp(magic.data(), kEmbeddingMagic, sizeof(kEmbeddingMagic)) != 0)
    throw FormatError("bad magic, not a COAPTEMB file", 0);
  const auto version_at = in.pos();
  const auto version = in.get<std::uint32_t>("version");
  if (version != kEmbeddingVersion)
    throw FormatError("unsupported COAPTEMB version " + std::to_string(version), version_at);
  const auto kind_at = in.pos();
  const auto kind = in.get<std::uint8_t>("kind");
  if (kind > 1) throw FormatError("unknown record kind " + std::to_string(kind), kind_at);
  const auto dim_at = in.pos();
  EmbeddingExport e;
  e.kind = static_cast<EmbeddingKind>(kind);
  e.dim = in.get<std::uint32_t>("dim");
  if (e.dim == 0) throw FormatError("dim must be positive", dim_at);
  if (expected_dim && e.dim != *expected_dim)
    throw FormatError("file dim " + std::to_string(e.dim) + " does not match engine dim " +
                          std::to_string(*expected_dim),
                      dim_at);
  const auto count = in.get<std::uint32_t>("record count");
  e.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    EmbeddingRecord r;
    const auto len = in.get<std::uint16_t>("record name length");
    r.name = std::string(in.bytes(len, "record name"));
    r.values.resize(e.dim);
    for (auto& v : r.values) v = in.get<float>("record values");
    e.records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError("trailing bytes after last record", in.pos());
  return e;
}

inline void write_embeddings(const EmbeddingExport& e, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  const auto bytes = serialize_embeddings(e);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline EmbeddingExport load_embedding_export(const std::string& path, std::optional<std::uint32_t> expected_dim = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_embeddings(bytes, expected_dim);
}

/// Token records as fixed embedding rows keyed by normalized word.
inline std::map<std::string, std::vector<double>> token_rows(const EmbeddingExport& e) {
  if (e.kind != EmbeddingKind::token) throw ConfigError("expected a token embedding export");
  std::map<std::string, std::vector<double>> rows;
  for (const auto& r : e.records) rows[normalize_text(r.name)] = std::vector<double>(r.values.begin(), r.values.end());
  return rows;
}

}  // namespace coapt
