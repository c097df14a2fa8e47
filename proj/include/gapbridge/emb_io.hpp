#pragma once

// EMB1 embedding container, pairing manifests and row normalization.
//
// Layout (all integers little-endian):
//   "EMB1" | version u32 = 1 | count u32 | dim u32 | flags u8
//   count*dim binary32 values, row-major
//   if flags bit1: count x (u32 byte length, UTF-8 bytes)
// flags bit0 marks unit-norm rows.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/errors.hpp"

namespace gapbridge {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr std::array<char, 4> kEmbMagic{'E', 'M', 'B', '1'};
inline constexpr std::uint32_t kEmbVersion = 1;
inline constexpr std::size_t kEmbHeaderBytes = 17;
inline constexpr std::uint8_t kFlagNormalized = 0x1;
inline constexpr std::uint8_t kFlagIds = 0x2;
inline constexpr double kUnitNormTolerance = 1e-4;

/// Dense count x dim matrix of binary32 embedding coordinates.
///
/// Immutable once constructed; every constructor validates the invariants
/// (finite values, unit rows when flagged, id count).
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(std::size_t count, std::size_t dim, std::vector<float> values,
                  bool normalized = false,
                  std::optional<std::vector<std::string>> ids = std::nullopt)
      : count_(count),
        dim_(dim),
        values_(std::move(values)),
        normalized_(normalized),
        ids_(std::move(ids)) {
    validate();
  }

  /// Rounds a binary64 matrix to binary32 storage.
  static EmbeddingMatrix from_matrix(const Mat& m, bool normalized = false,
                                     std::optional<std::vector<std::string>> ids = std::nullopt) {
    std::vector<float> values(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        values[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    return EmbeddingMatrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                           std::move(values), normalized, std::move(ids));
  }

  std::size_t count() const noexcept { return count_; }
  std::size_t dim() const noexcept { return dim_; }
  bool normalized() const noexcept { return normalized_; }
  const std::optional<std::vector<std::string>>& ids() const noexcept { return ids_; }
  std::span<const float> values() const noexcept { return values_; }

  std::span<const float> row(std::size_t i) const noexcept {
    return std::span<const float>(values_).subspan(i * dim_, dim_);
  }
  float at(std::size_t i, std::size_t j) const noexcept { return values_[i * dim_ + j]; }

  /// Widened copy for computation.
  Mat to_matrix() const {
    Mat m(static_cast<Eigen::Index>(count_), static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < count_; ++i)
      for (std::size_t j = 0; j < dim_; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values_[i * dim_ + j];
    return m;
  }

  /// Bitwise comparison, including flags and ids.
  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) noexcept {
    if (a.count_ != b.count_ || a.dim_ != b.dim_ || a.normalized_ != b.normalized_ ||
        a.ids_ != b.ids_ || a.values_.size() != b.values_.size())
      return false;
    return a.values_.empty() ||
           std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
  }

 private:
  void validate() const {
    if (dim_ == 0) throw ValidationError("embedding dim must be positive");
    if (values_.size() != count_ * dim_)
      throw ValidationError("embedding payload has " + std::to_string(values_.size()) +
                            " values, expected " + std::to_string(count_ * dim_));
    for (std::size_t k = 0; k < values_.size(); ++k) {
      if (!std::isfinite(values_[k]))
        throw ValidationError("non-finite value at row " + std::to_string(k / dim_) + ", column " +
                              std::to_string(k % dim_));
    }
    if (ids_ && ids_->size() != count_)
      throw ValidationError("ids list has " + std::to_string(ids_->size()) + " entries, expected " +
                            std::to_string(count_));
    if (normalized_) {
      for (std::size_t i = 0; i < count_; ++i) {
        double sq = 0.0;
        for (float v : row(i)) sq += static_cast<double>(v) * v;
        if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance)
          throw ValidationError("row " + std::to_string(i) +
                                " is flagged normalized but has norm " +
                                std::to_string(std::sqrt(sq)));
      }
    }
  }

  std::size_t count_ = 0;
  std::size_t dim_ = 1;
  std::vector<float> values_;
  bool normalized_ = false;
  std::optional<std::vector<std::string>> ids_;
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) noexcept {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

inline void write_all(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

}  // namespace detail

/// Serialize to an in-memory EMB1 image.
inline std::vector<unsigned char> encode_embeddings(const EmbeddingMatrix& m) {
  if (m.count() > UINT32_MAX || m.dim() > UINT32_MAX)
    throw ValidationError("matrix too large for EMB1 u32 header fields");
  std::vector<unsigned char> out;
  out.reserve(kEmbHeaderBytes + m.values().size() * 4);
  out.insert(out.end(), kEmbMagic.begin(), kEmbMagic.end());
  detail::put_u32(out, kEmbVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.count()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim()));
  std::uint8_t flags = 0;
  if (m.normalized()) flags |= kFlagNormalized;
  if (m.ids()) flags |= kFlagIds;
  out.push_back(flags);
  for (float v : m.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (m.ids()) {
    for (const auto& id : *m.ids()) {
      if (id.size() > UINT32_MAX) throw ValidationError("id too long");
      detail::put_u32(out, static_cast<std::uint32_t>(id.size()));
      out.insert(out.end(), id.begin(), id.end());
    }
  }
  return out;
}

/// Parse an EMB1 image. `origin` only labels error messages.
inline EmbeddingMatrix decode_embeddings(std::span<const unsigned char> bytes,
                                         const std::string& origin = "<memory>") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kEmbMagic.data(), 4) != 0)
    throw FormatError(origin + ": bad magic, not an EMB1 file");
  if (bytes.size() < kEmbHeaderBytes) throw CorruptionError(origin + ": truncated header");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kEmbVersion)
    throw FormatError(origin + ": unsupported EMB1 version " + std::to_string(version));
  const std::uint64_t count = detail::get_u32(bytes.data() + 8);
  const std::uint64_t dim = detail::get_u32(bytes.data() + 12);
  const std::uint8_t flags = bytes[16];
  if (dim == 0) throw FormatError(origin + ": header declares dim 0");
  if ((flags & ~(kFlagNormalized | kFlagIds)) != 0)
    throw FormatError(origin + ": unknown flag bits " + std::to_string(flags));

  if (count > (bytes.size() - kEmbHeaderBytes) / (4 * dim))
    throw CorruptionError(origin + ": payload holds " +
                          std::to_string((bytes.size() - kEmbHeaderBytes) / (4 * dim)) +
                          " rows but header declares " + std::to_string(count));
  std::vector<float> values(count * dim);
  const unsigned char* p = bytes.data() + kEmbHeaderBytes;
  for (std::size_t k = 0; k < values.size(); ++k, p += 4)
    values[k] = std::bit_cast<float>(detail::get_u32(p));

  std::size_t offset = kEmbHeaderBytes + count * dim * 4;
  std::optional<std::vector<std::string>> ids;
  if (flags & kFlagIds) {
    ids.emplace();
    ids->reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      if (bytes.size() - offset < 4) throw CorruptionError(origin + ": truncated id table");
      const std::uint32_t len = detail::get_u32(bytes.data() + offset);
      offset += 4;
      if (bytes.size() - offset < len) throw CorruptionError(origin + ": truncated id table");
      ids->emplace_back(reinterpret_cast<const char*>(bytes.data() + offset), len);
      offset += len;
    }
  }
  if (offset != bytes.size())
    throw CorruptionError(origin + ": " + std::to_string(bytes.size() - offset) +
                          " trailing bytes after declared content");
  return EmbeddingMatrix(count, dim, std::move(values), (flags & kFlagNormalized) != 0,
                         std::move(ids));
}

inline void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  detail::write_all(path, encode_embeddings(m));
}

inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(detail::read_all(path), path.string());
}

/// Scales every row to unit Euclidean norm.
///
/// Rows already within float resolution of unit norm are copied untouched,
/// which makes the operation bitwise idempotent.
inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  std::vector<float> out(m.values().begin(), m.values().end());
  for (std::size_t i = 0; i < m.count(); ++i) {
    double sq = 0.0;
    for (float v : m.row(i)) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw DegenerateInputError("cannot normalize zero-norm row " + std::to_string(i));
    if (std::abs(norm - 1.0) <= 1e-6) continue;
    for (std::size_t j = 0; j < m.dim(); ++j)
      out[i * m.dim() + j] = static_cast<float>(static_cast<double>(m.at(i, j)) / norm);
  }
  return EmbeddingMatrix(m.count(), m.dim(), std::move(out), true, m.ids());
}

/// Two EMB1 files whose rows are paired by index.
struct PairManifest {
  std::filesystem::path image_path;
  std::filesystem::path text_path;
  std::string alignment = "by-index";

  /// Relative paths are resolved against the manifest's directory.
  static PairManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    PairManifest m;
    try {
      m.image_path = j.at("image_path").get<std::string>();
      m.text_path = j.at("text_path").get<std::string>();
      m.alignment = j.value("alignment", std::string("by-index"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    if (m.alignment != "by-index")
      throw ValidationError("unsupported alignment '" + m.alignment + "'");
    const auto base = path.parent_path();
    if (m.image_path.is_relative()) m.image_path = base / m.image_path;
    if (m.text_path.is_relative()) m.text_path = base / m.text_path;
    return m;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json j{{"image_path", image_path.string()},
                     {"text_path", text_path.string()},
                     {"alignment", alignment}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
  }
};

inline void check_paired(const EmbeddingMatrix& images, const EmbeddingMatrix& texts) {
  if (images.count() != texts.count())
    throw PairingError("pair count mismatch: " + std::to_string(images.count()) + " images vs " +
                       std::to_string(texts.count()) + " texts");
  if (images.dim() != texts.dim())
    throw PairingError("pair dim mismatch: " + std::to_string(images.dim()) + " vs " +
                       std::to_string(texts.dim()));
}

inline std::pair<EmbeddingMatrix, EmbeddingMatrix> load_paired(const PairManifest& manifest) {
  auto images = read_embeddings(manifest.image_path);
  auto texts = read_embeddings(manifest.text_path);
  check_paired(images, texts);
  return {std::move(images), std::move(texts)};
}

}  // namespace gapbridge
