#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "coapt/embedding_io.hpp"
#include "coapt/encoders.hpp"

using namespace coapt;

namespace {

struct Fixture {
  EncoderDims dims;
  FrozenEncoders enc;
  SoftPromptBank bank;

  explicit Fixture(ImageMode mode = ImageMode::passthrough, std::size_t vision = 0) {
    dims.dim = 16;
    dims.heads = 2;
    dims.ctx_len = 24;
    dims.image_dim = 8;
    auto table = TokenTable::build(build_vocab({{"goldfish", "aquatic", "fish", "ornamental", "pet", "bowl"}}), 16, 5);
    enc = build_frozen_encoders(9, dims, std::move(table), mode);
    bank = init_soft_prompts(PromptInit::gaussian, 16, 4, 3, std::nullopt, nullptr, vision, 8);
  }

  AssembledQuery query(std::vector<std::string> attrs = {"aquatic", "pet"}, std::size_t ctx = 24) const {
    return assemble_text_query("goldfish", attrs, bank, enc.text.table, ctx);
  }
};

}  // namespace

TEST(EncodeText, RepeatableBitwise) {
  Fixture f;
  auto q = f.query();
  EXPECT_TRUE(bitwise_equal(encode_text(q, f.enc.text, f.bank), encode_text(q, f.enc.text, f.bank)));
}

TEST(EncodeText, PaddingLengthDoesNotMatter) {
  Fixture f;
  auto short_q = f.query({"aquatic", "pet"}, 12);
  auto long_q = f.query({"aquatic", "pet"}, 24);
  ASSERT_NE(short_q.pad_count(), long_q.pad_count());
  auto a = encode_text(short_q, f.enc.text, f.bank);
  auto b = encode_text(long_q, f.enc.text, f.bank);
  for (std::size_t j = 0; j < a.numel(); ++j) EXPECT_NEAR(a.data()[j], b.data()[j], 1e-12);
}

TEST(EncodeText, OutputIgnoresRowsAfterEos) {
  Fixture f;
  auto q = f.query();
  auto altered = q;
  auto rows = q.frozen_rows.values();
  for (std::size_t i = q.used_length() * 16; i < rows.size(); ++i) rows[i] = 7.0;
  altered.frozen_rows = Tensor(q.frozen_rows.shape(), rows);
  EXPECT_TRUE(bitwise_equal(encode_text(q, f.enc.text, f.bank), encode_text(altered, f.enc.text, f.bank)));
}

TEST(EncodeText, SoftRowsReceiveNonzeroGradient) {
  Fixture f;
  auto q = f.query();
  GradTape tape;
  Gradients g;
  {
    TapeScope scope(tape);
    g = backward(ops::sum(encode_text(q, f.enc.text, f.bank)));
  }
  ASSERT_TRUE(g.contains(f.bank.text));
  double norm = 0.0;
  for (double v : g.at(f.bank.text).data()) norm += v * v;
  EXPECT_GT(norm, 1e-12);

  // finite-difference probe on one coordinate
  const double h = 1e-6;
  auto probe = [&](double delta) {
    auto bank = f.bank.clone();
    bank.text.mutable_data()[5] += delta;
    return ops::sum(encode_text(q, f.enc.text, bank)).item();
  };
  const double numeric = (probe(h) - probe(-h)) / (2 * h);
  EXPECT_NEAR(numeric, g.at(f.bank.text).data()[5], 1e-6 * std::max(1.0, std::abs(numeric)));
  EXPECT_GT(std::abs(numeric), 0.0);
}

TEST(EncodeText, NothingFrozenGetsAGradient) {
  Fixture f;
  auto q = f.query();
  GradTape tape;
  TapeScope scope(tape);
  auto g = backward(ops::sum(encode_text(q, f.enc.text, f.bank)));
  EXPECT_EQ(g.size(), 1u);
  for (const auto& t : f.enc.text.tensors()) EXPECT_FALSE(g.contains(t));
}

TEST(EncodeText, WidthMismatchIsDimensionError) {
  Fixture f;
  auto other = TokenTable::build(build_vocab({{"goldfish"}}), 8, 1);
  auto bank = init_soft_prompts(PromptInit::gaussian, 8, 4, 3);
  auto q = assemble_text_query("goldfish", {}, bank, other, 24);
  EXPECT_THROW(encode_text(q, f.enc.text, bank), DimensionError);
}

TEST(EncodeImage, PassthroughReturnsInput) {
  Fixture f;
  Rng rng(2);
  auto v = rng.normal_matrix(1, 16, 1.0);
  EXPECT_TRUE(bitwise_equal(encode_image(v, f.enc.image, f.bank), v));
}

TEST(EncodeImage, PassthroughRejectsVisionPrompts) {
  Fixture f(ImageMode::passthrough, 2);
  EXPECT_THROW(encode_image(Tensor::zeros({1, 16}), f.enc.image, f.bank), ConfigError);
}

TEST(EncodeImage, ToyModeIsReproducible) {
  Fixture a(ImageMode::toy), b(ImageMode::toy);
  Rng rng(4);
  auto x = rng.normal_matrix(5, 8, 1.0);
  auto fa = encode_image(x, a.enc.image, a.bank);
  EXPECT_EQ(fa.shape(), (Shape{1, 16}));
  EXPECT_TRUE(bitwise_equal(fa, encode_image(x, b.enc.image, b.bank)));
}

TEST(EncodeImage, VisionPromptsChangeTheFeature) {
  Fixture plain(ImageMode::toy), prompted(ImageMode::toy, 2);
  Rng rng(4);
  auto x = rng.normal_matrix(5, 8, 1.0);
  EXPECT_FALSE(bitwise_equal(encode_image(x, plain.enc.image, plain.bank),
                             encode_image(x, prompted.enc.image, prompted.bank)));
}

TEST(EncodeImage, OnlyVisionPromptsGetGradients) {
  Fixture f(ImageMode::toy, 2);
  Rng rng(4);
  auto x = rng.normal_matrix(5, 8, 1.0);
  GradTape tape;
  TapeScope scope(tape);
  auto g = backward(ops::sum(encode_image(x, f.enc.image, f.bank)));
  EXPECT_EQ(g.size(), 1u);
  EXPECT_TRUE(g.contains(f.bank.vision));
}

TEST(BuildFrozenEncoders, SameSeedSameChecksums) {
  Fixture a(ImageMode::toy), b(ImageMode::toy);
  EXPECT_EQ(a.enc.text.checksum(), b.enc.text.checksum());
  EXPECT_EQ(a.enc.image.checksum(), b.enc.image.checksum());
}

TEST(BuildFrozenEncoders, DepthControlsBlockCount) {
  auto table = TokenTable::build(build_vocab({{"x"}}), 16, 1);
  EncoderDims dims;
  dims.dim = 16;
  dims.depth = 3;
  EXPECT_EQ(build_frozen_encoders(1, dims, table).text.blocks.size(), 3u);
  dims.depth = 1;
  EXPECT_EQ(build_frozen_encoders(1, dims, table).text.blocks.size(), 1u);
}

TEST(BuildFrozenEncoders, RecordedDefaults) {
  EncoderDims dims;
  EXPECT_EQ(dims.dim, 64u);
  EXPECT_EQ(dims.depth, 2u);
  EXPECT_EQ(dims.heads, 4u);
  EXPECT_EQ(dims.ctx_len, 77u);
}

TEST(BuildFrozenEncoders, WeightScaleIsInverseSqrtD) {
  auto table = TokenTable::build(build_vocab({{"x"}}), 64, 1);
  auto enc = build_frozen_encoders(3, EncoderDims{}, table);
  const auto& w = enc.text.blocks[0].wq;
  double s2 = 0.0;
  for (double v : w.data()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / static_cast<double>(w.numel())), 1.0 / 8.0, 0.01);
}

TEST(BuildFrozenEncoders, EverythingIsFrozen) {
  Fixture f(ImageMode::toy);
  for (auto t : f.enc.text.tensors()) EXPECT_THROW(t.mutable_data(), FrozenError);
  for (auto t : f.enc.image.tensors()) EXPECT_THROW(t.mutable_data(), FrozenError);
}

TEST(BuildFrozenEncoders, RejectsIndivisibleHeads) {
  auto table = TokenTable::build(build_vocab({{"x"}}), 10, 1);
  EncoderDims dims;
  dims.dim = 10;
  dims.heads = 4;
  EXPECT_THROW(build_frozen_encoders(1, dims, table), ParameterError);
}

// --- COAPTEMB ---------------------------------------------------------------

namespace {

// Hand-assembled little-endian file: one token record "cat" = (1.0f, -2.0f).
std::string cat_bytes() {
  std::string b = "COAPTEMB";
  b += std::string("\x01\x00\x00\x00", 4);  // version
  b += std::string("\x00", 1);              // kind = token
  b += std::string("\x02\x00\x00\x00", 4);  // dim
  b += std::string("\x01\x00\x00\x00", 4);  // count
  b += std::string("\x03\x00", 2) + "cat";
  b += std::string("\x00\x00\x80\x3f", 4);  // 1.0f
  b += std::string("\x00\x00\x00\xc0", 4);  // -2.0f
  return b;
}

}  // namespace

TEST(EmbeddingExportFormat, ParsesHandWrittenBytes) {
  auto e = parse_embeddings(cat_bytes());
  EXPECT_EQ(e.kind, EmbeddingKind::token);
  EXPECT_EQ(e.dim, 2u);
  ASSERT_EQ(e.records.size(), 1u);
  EXPECT_EQ(e.records[0].name, "cat");
  EXPECT_EQ(e.records[0].values, (std::vector<float>{1.0f, -2.0f}));
}

TEST(EmbeddingExportFormat, SerializeMatchesHandWrittenBytes) {
  EmbeddingExport e{EmbeddingKind::token, 2, {{"cat", {1.0f, -2.0f}}}};
  EXPECT_EQ(serialize_embeddings(e), cat_bytes());
}

TEST(EmbeddingExportFormat, FileRoundTripIsBitwise) {
  Rng rng(8);
  EmbeddingExport e{EmbeddingKind::image, 5, {}};
  for (int i = 0; i < 6; ++i) {
    EmbeddingRecord r{"class" + std::to_string(i % 2) + "/img" + std::to_string(i), {}};
    for (int j = 0; j < 5; ++j) r.values.push_back(static_cast<float>(rng.normal()));
    e.records.push_back(r);
  }
  auto path = std::filesystem::temp_directory_path() / "coapt_emb_roundtrip.bin";
  write_embeddings(e, path.string());
  auto back = load_embedding_export(path.string(), 5);
  std::filesystem::remove(path);
  EXPECT_EQ(back.kind, e.kind);
  EXPECT_EQ(back.records, e.records);
}

TEST(EmbeddingExportFormat, EmptyRecordListIsValid) {
  EmbeddingExport e{EmbeddingKind::token, 3, {}};
  auto back = parse_embeddings(serialize_embeddings(e), 3);
  EXPECT_TRUE(back.records.empty());
  EXPECT_TRUE(token_rows(back).empty());
}

TEST(EmbeddingExportFormat, DimMismatchReportsOffset) {
  try {
    parse_embeddings(cat_bytes(), 4);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 13u);
  }
}

TEST(EmbeddingExportFormat, BadMagicVersionKindTruncation) {
  auto bytes = cat_bytes();
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_embeddings(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[8] = 2;
  try {
    parse_embeddings(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }

  auto bad_kind = bytes;
  bad_kind[12] = 7;
  try {
    parse_embeddings(bad_kind);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 12u);
  }

  for (std::size_t cut = 1; cut < bytes.size(); ++cut)
    EXPECT_THROW(parse_embeddings(bytes.substr(0, cut)), FormatError) << "cut at " << cut;
  EXPECT_THROW(parse_embeddings(bytes + "x"), FormatError);
}

TEST(EmbeddingExportFormat, TokenRowsOverrideTable) {
  EmbeddingExport e{EmbeddingKind::token, 2, {{"Cat", {1.0f, -2.0f}}}};
  auto rows = token_rows(e);
  auto table = TokenTable::build(build_vocab({{"cat", "dog"}}), 2, 1, rows);
  EXPECT_EQ(table.row(table.vocab().id("cat")), (std::vector<double>{1.0, -2.0}));
  EXPECT_THROW(token_rows(EmbeddingExport{EmbeddingKind::image, 2, {}}), ConfigError);
}
