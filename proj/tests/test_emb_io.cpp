#include <cstring>
#include <limits>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace gapbridge;

namespace {

std::vector<unsigned char> header_bytes(const char magic[4], std::uint32_t version, std::uint32_t count,
                                        std::uint32_t dim, std::uint8_t flags) {
  std::vector<unsigned char> out(magic, magic + 4);
  for (std::uint32_t v : {version, count, dim})
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>(v >> (8 * k)));
  out.push_back(flags);
  return out;
}

void append_float(std::vector<unsigned char>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>(bits >> (8 * k)));
}

}  // namespace

TEST(EmbIo, EmptyMatrixIsHeaderOnly) {
  const EmbeddingMatrix m(0, 4, {});
  const auto bytes = encode_embeddings(m);
  // magic 4 + version 4 + count 4 + dim 4 + flags 1
  EXPECT_EQ(bytes.size(), 4u + 4u + 4u + 4u + 1u);
  EXPECT_EQ(decode_embeddings(bytes), m);
}

TEST(EmbIo, IdentityRoundTripsBitwise) {
  const EmbeddingMatrix m(2, 2, {1.f, 0.f, 0.f, 1.f}, true);
  const auto dir = gbtest::fresh_dir("emb_identity");
  write_embeddings(m, dir / "m.emb");
  const auto back = read_embeddings(dir / "m.emb");
  EXPECT_EQ(back, m);
  EXPECT_TRUE(back.normalized());
}

TEST(EmbIo, FileSizeWithIds) {
  const EmbeddingMatrix m(2, 2, {1.f, 2.f, 3.f, 4.f}, false, std::vector<std::string>{"a", "bc"});
  const auto bytes = encode_embeddings(m);
  const std::size_t header = 4 + 4 + 4 + 4 + 1;
  EXPECT_EQ(bytes.size(), header + 2 * 2 * 4 + (4 + 1) + (4 + 2));
  EXPECT_EQ(bytes.size(), 44u);
  EXPECT_EQ(decode_embeddings(bytes), m);
}

TEST(EmbIo, HeaderLayoutIsLittleEndian) {
  const EmbeddingMatrix m(3, 2, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f}, false, std::vector<std::string>{"x", "y", "z"});
  const auto bytes = encode_embeddings(m);
  const auto expected = header_bytes("EMB1", 1, 3, 2, 0x2);
  ASSERT_GE(bytes.size(), expected.size());
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), bytes.begin()));
  float first;
  std::memcpy(&first, bytes.data() + 17, 4);
  EXPECT_EQ(first, 1.f);
}

TEST(EmbIo, BadMagicIsFormatError) {
  auto bytes = header_bytes("XXXX", 1, 0, 4, 0);
  EXPECT_THROW(decode_embeddings(bytes), FormatError);
}

TEST(EmbIo, BadVersionIsFormatError) {
  auto bytes = header_bytes("EMB1", 2, 0, 4, 0);
  EXPECT_THROW(decode_embeddings(bytes), FormatError);
}

TEST(EmbIo, UnknownFlagsAndZeroDimAreFormatErrors) {
  EXPECT_THROW(decode_embeddings(header_bytes("EMB1", 1, 0, 4, 0x4)), FormatError);
  EXPECT_THROW(decode_embeddings(header_bytes("EMB1", 1, 0, 0, 0)), FormatError);
}

TEST(EmbIo, TruncatedPayloadIsCorruption) {
  auto bytes = header_bytes("EMB1", 1, 3, 2, 0);
  for (int i = 0; i < 4; ++i) append_float(bytes, 0.5f);  // two rows of three
  EXPECT_THROW(decode_embeddings(bytes), CorruptionError);
}

TEST(EmbIo, TrailingBytesAreCorruption) {
  auto bytes = encode_embeddings(EmbeddingMatrix(1, 2, {1.f, 2.f}));
  bytes.push_back(0);
  EXPECT_THROW(decode_embeddings(bytes), CorruptionError);
}

TEST(EmbIo, TruncatedIdsAreCorruption) {
  auto bytes = encode_embeddings(EmbeddingMatrix(1, 1, {1.f}, false, std::vector<std::string>{"abc"}));
  bytes.pop_back();
  EXPECT_THROW(decode_embeddings(bytes), CorruptionError);
}

TEST(EmbIo, NanPayloadIsValidationError) {
  auto bytes = header_bytes("EMB1", 1, 1, 2, 0);
  append_float(bytes, 1.f);
  append_float(bytes, std::numeric_limits<float>::quiet_NaN());
  try {
    decode_embeddings(bytes);
    FAIL() << "expected a validation error";
  } catch (const ValidationError&) {
  } catch (const IoError&) {
    FAIL() << "NaN must surface as a validation error";
  }
}

TEST(EmbIo, MissingFileIsIoError) {
  EXPECT_THROW(read_embeddings("/nonexistent/definitely/missing.emb"), IoError);
}

TEST(EmbIo, InvariantsCheckedOnConstruction) {
  EXPECT_THROW(EmbeddingMatrix(1, 2, {1.f}), ValidationError);
  EXPECT_THROW(EmbeddingMatrix(1, 2, {1.f, 1.f}, true), ValidationError);
  EXPECT_THROW(EmbeddingMatrix(2, 1, {1.f, 1.f}, false, std::vector<std::string>{"a"}), ValidationError);
  EXPECT_THROW(EmbeddingMatrix(1, 1, {std::numeric_limits<float>::infinity()}), ValidationError);
  EXPECT_NO_THROW(EmbeddingMatrix(1, 2, {0.6f, 0.8f}, true));
}

TEST(EmbIo, RoundTripProperty) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const auto count = static_cast<Eigen::Index>(rng.below(12));
    const auto dim = static_cast<Eigen::Index>(1 + rng.below(9));
    const bool normalized = rng.bernoulli(0.5) && count > 0;
    Mat x = normalized ? gbtest::random_unit_rows(count, dim, rng) : gbtest::random_matrix(count, dim, rng, 10.0);
    std::optional<std::vector<std::string>> ids;
    if (rng.bernoulli(0.5)) {
      ids.emplace();
      for (Eigen::Index i = 0; i < count; ++i) ids->push_back(std::string(rng.below(5), 'a' + static_cast<char>(i % 26)));
    }
    const auto m = EmbeddingMatrix::from_matrix(x, normalized, ids);
    EXPECT_EQ(decode_embeddings(encode_embeddings(m)), m);
  }
}

TEST(EmbIo, NormalizeExamples) {
  const auto n = l2_normalize(EmbeddingMatrix(2, 2, {3.f, 4.f, 1.f, 0.f}));
  EXPECT_TRUE(n.normalized());
  EXPECT_FLOAT_EQ(n.at(0, 0), 0.6f);
  EXPECT_FLOAT_EQ(n.at(0, 1), 0.8f);
  EXPECT_EQ(n.at(1, 0), 1.f);
  EXPECT_EQ(n.at(1, 1), 0.f);
}

TEST(EmbIo, NormalizeZeroRowNamesIndex) {
  try {
    l2_normalize(EmbeddingMatrix(3, 2, {1.f, 0.f, 1.f, 1.f, 0.f, 0.f}));
    FAIL() << "expected DegenerateInputError";
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos);
  }
}

TEST(EmbIo, NormalizeIsIdempotentBitwise) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = EmbeddingMatrix::from_matrix(gbtest::random_matrix(20, 7, rng, 3.0));
    const auto once = l2_normalize(m);
    EXPECT_EQ(l2_normalize(once), once);
    for (std::size_t i = 0; i < once.count(); ++i) {
      double sq = 0;
      for (float v : once.row(i)) sq += double(v) * v;
      EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
    }
  }
}

TEST(EmbIo, LoadPairedChecksShapes) {
  Rng rng(1);
  const auto dir = gbtest::fresh_dir("emb_pairs");
  write_embeddings(EmbeddingMatrix::from_matrix(gbtest::random_matrix(5, 8, rng)), dir / "a.emb");
  write_embeddings(EmbeddingMatrix::from_matrix(gbtest::random_matrix(5, 8, rng)), dir / "b.emb");
  write_embeddings(EmbeddingMatrix::from_matrix(gbtest::random_matrix(4, 8, rng)), dir / "c.emb");
  write_embeddings(EmbeddingMatrix::from_matrix(gbtest::random_matrix(5, 16, rng)), dir / "d.emb");

  PairManifest{"a.emb", "b.emb", "by-index"}.save(dir / "ok.json");
  const auto [images, texts] = load_paired(PairManifest::load(dir / "ok.json"));
  EXPECT_EQ(images.count(), 5u);
  EXPECT_EQ(texts.dim(), 8u);

  PairManifest{"a.emb", "c.emb", "by-index"}.save(dir / "count.json");
  EXPECT_THROW(load_paired(PairManifest::load(dir / "count.json")), PairingError);
  PairManifest{"a.emb", "d.emb", "by-index"}.save(dir / "dim.json");
  EXPECT_THROW(load_paired(PairManifest::load(dir / "dim.json")), PairingError);
}

TEST(EmbIo, ManifestRejectsOtherAlignments) {
  const auto dir = gbtest::fresh_dir("emb_manifest");
  gbtest::spit(dir / "m.json", R"({"image_path": "a", "text_path": "b", "alignment": "by-id"})");
  EXPECT_THROW(PairManifest::load(dir / "m.json"), ValidationError);
  gbtest::spit(dir / "bad.json", "{not json");
  EXPECT_THROW(PairManifest::load(dir / "bad.json"), FormatError);
}
