#include <gtest/gtest.h>

#include <filesystem>

#include "ivgf/io.hpp"
#include "ivgf/pipeline.hpp"

using namespace ivgf;

namespace {

Bytes bytes_of(const std::string& s) { return Bytes(s.begin(), s.end()); }

template <class Fn>
std::size_t format_offset(Fn&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.byte_offset;
  }
  ADD_FAILURE() << "no FormatError";
  return SIZE_MAX;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ParamStore sample_store() {
  ParamStore ps;
  ps.add("a.w", Tensor({2, 3}, std::vector<double>{0.5, -1.25, 3.0, 0.0, 1e-3, -7.0}));
  ps.add("b", Tensor({1}, std::vector<double>{42.0}));
  ps.add("c.gamma", Tensor({2, 1, 2, 1}, 0.75));
  return ps;
}

}  // namespace

TEST(Pnm, DecodesP6) {
  std::string s = "P6\n2 1\n255\n";
  s += std::string{char(0), char(128), char(255), char(255), char(0), char(51)};
  Tensor t = read_pnm(bytes_of(s));
  EXPECT_EQ(t.shape(), (Shape{3, 1, 2}));
  EXPECT_DOUBLE_EQ(t.at(0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(t.at(1, 0, 0), 128.0 / 255.0);
  EXPECT_DOUBLE_EQ(t.at(2, 0, 1), 0.2);
}

TEST(Pnm, P5ReplicatesGray) {
  std::string s = "P5 1 1 255\n";
  s += char(200);
  Tensor t = read_pnm(bytes_of(s));
  EXPECT_EQ(t, Tensor({3, 1, 1}, 200.0 / 255.0));
}

TEST(Pnm, CommentsAndWhitespaceInHeader) {
  std::string s = "P6 # made by hand\n  2\t# width\n1\n# max next\n255\n";
  s += std::string(6, char(10));
  EXPECT_EQ(read_pnm(bytes_of(s)).shape(), (Shape{3, 1, 2}));
}

TEST(Pnm, HalfEncodesAs128) {
  Bytes b = encode_pnm(Tensor({3, 1, 1}, 0.5));
  EXPECT_EQ(std::string(b.begin(), b.begin() + 11), "P6\n1 1\n255\n");
  EXPECT_EQ(b.back(), 128);
  EXPECT_THROW(encode_pnm(Tensor({3, 1, 1}, 1.5)), std::domain_error);
  EXPECT_THROW(encode_pnm(Tensor({2, 1, 1})), DimensionError);
}

TEST(Pnm, RoundTripOnByteGrid) {
  Rng rng(1);
  Tensor t({3, 5, 7});
  for (auto& v : t.data()) v = static_cast<double>(rng.below(256)) / 255.0;
  EXPECT_EQ(read_pnm(encode_pnm(t)), t);
  Tensor gray({1, 4, 4}, 17.0 / 255.0);
  EXPECT_EQ(read_pnm(encode_pnm(gray)), Tensor({3, 4, 4}, 17.0 / 255.0));
}

TEST(Pnm, ErrorsCarryOffsets) {
  EXPECT_EQ(format_offset([] { read_pnm(bytes_of("P3\n1 1\n255\n")); }), 0u);
  EXPECT_EQ(format_offset([] { read_pnm(bytes_of("P6\n1 1\n65535\n")); }), 7u);
  // Payload one byte short: offset is the end of the data.
  EXPECT_EQ(format_offset([] { read_pnm(bytes_of("P6\n1 1\n255\nab")); }), 13u);
  EXPECT_THROW(read_pnm(bytes_of("P6\n0 1\n255\n")), FormatError);
  EXPECT_THROW(read_pnm(bytes_of("P6\nx 1\n255\n")), FormatError);
}

TEST(LabelMap, RawIdsRoundTrip) {
  Tensor ids({2, 3}, std::vector<double>{0, 1, 2, 3, 255, 1});
  Bytes b = encode_label_pgm(ids);
  EXPECT_EQ(b[0], 'P');
  EXPECT_EQ(b[1], '5');
  EXPECT_EQ(read_label_pgm(b), ids);
  EXPECT_THROW(read_label_pgm(encode_pnm(Tensor({3, 1, 1}))), FormatError);
}

TEST(Checkpoint, RoundTripIsFloat32Exact) {
  ParamStore ps = sample_store();
  ParamStore back = decode_checkpoint(encode_checkpoint(ps));
  ASSERT_EQ(back.names(), ps.names());
  for (const auto& n : ps.names()) {
    EXPECT_EQ(back.get(n).shape(), ps.get(n).shape());
    for (std::size_t i = 0; i < ps.get(n).numel(); ++i)
      EXPECT_EQ(back.get(n)[i], static_cast<double>(static_cast<float>(ps.get(n)[i])));
  }
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ps));
}

TEST(Checkpoint, EmptyStore) {
  Bytes b = encode_checkpoint(ParamStore{});
  EXPECT_EQ(b.size(), 12u);
  EXPECT_TRUE(decode_checkpoint(b).empty());
}

TEST(Checkpoint, ModelRoundTripThroughFile) {
  ModelConfig m;
  m.widths = {4, 8, 8, 8};
  m.depth = 3;
  m.mhsa_heads = 2;
  m.head_width = 8;
  m.agf.heads = 2;
  ParamStore ps = init_model_params(m, 3);
  const auto path = std::filesystem::temp_directory_path() / "ivgf_io_test.ckpt";
  save_checkpoint(ps, path);
  ParamStore back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.names(), ps.names());
  EXPECT_EQ(back.total_elements(), ps.total_elements());
}

TEST(Checkpoint, EveryByteFlipIsDetectedOrHarmless) {
  // A flipped byte either fails to parse or yields a well-formed store.
  const Bytes good = encode_checkpoint(sample_store());
  std::size_t rejected = 0;
  for (std::size_t i = 0; i < good.size(); ++i) {
    Bytes bad = good;
    bad[i] ^= 0xFF;
    try {
      ParamStore ps = decode_checkpoint(bad);
      EXPECT_GE(i, 16u) << "header flip at " << i << " accepted";
    } catch (const FormatError& e) {
      EXPECT_LE(e.byte_offset, bad.size());
      ++rejected;
    } catch (const ConfigError&) {
      ++rejected;  // name collision after a flip
    }
  }
  EXPECT_GT(rejected, 0u);
}

TEST(Checkpoint, Rejections) {
  const Bytes good = encode_checkpoint(sample_store());
  for (std::size_t n = 0; n < good.size(); ++n) {
    Bytes cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(decode_checkpoint(cut), FormatError) << "truncated at " << n;
  }
  Bytes trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
  Bytes version = good;
  version[4] = 2;
  EXPECT_EQ(format_offset([&] { decode_checkpoint(version); }), 4u);
  Bytes magic = good;
  magic[0] = 'X';
  EXPECT_EQ(format_offset([&] { decode_checkpoint(magic); }), 0u);

  // Duplicate: same single-entry record twice with count 2.
  ParamStore one;
  one.add("dup", Tensor({1}, 1.0));
  Bytes a = encode_checkpoint(one);
  Bytes dup(a.begin(), a.begin() + 12);
  dup[8] = 2;
  dup.insert(dup.end(), a.begin() + 12, a.end());
  dup.insert(dup.end(), a.begin() + 12, a.end());
  EXPECT_THROW(decode_checkpoint(dup), FormatError);
}

TEST(Checkpoint, NonFiniteRefused) {
  ParamStore ps;
  ps.add("x", Tensor({1}, std::numeric_limits<double>::infinity()));
  EXPECT_THROW(encode_checkpoint(ps), NonFiniteError);
}

TEST(Config, EmptyTextGivesDefaults) {
  RunConfig c = parse_config("");
  EXPECT_EQ(config_to_text(c), config_to_text(RunConfig{}));
  EXPECT_EQ(parse_config("# only a comment\n\n").model.agf.heads, 4u);
}

TEST(Config, SetsKeys) {
  RunConfig c = parse_config("fem.mode = serial\n  agf.heads=8 # trailing\ntrain.lr = 0.001\naug.enabled = false\n");
  EXPECT_EQ(c.model.fem.mode, FemMode::serial);
  EXPECT_EQ(c.model.agf.heads, 8u);
  EXPECT_DOUBLE_EQ(c.train.lr, 1e-3);
  EXPECT_FALSE(c.aug.enabled);
}

TEST(Config, TextRoundTrip) {
  RunConfig c = parse_config("fem.mode = channel_only\nseed = 99\naug.p_cutout = 0.125\n");
  EXPECT_EQ(config_to_text(parse_config(config_to_text(c))), config_to_text(c));
}

TEST(Config, ErrorsNameLineAndKey) {
  EXPECT_NE(config_error("\nagf.heads = 3\n").find("line 2, key 'agf.heads'"), std::string::npos);
  EXPECT_NE(config_error("seed = 1\nbogus = 2\n").find("line 2, key 'bogus'"), std::string::npos);
  const std::string dup = config_error("seed = 1\nseed = 2\n");
  EXPECT_NE(dup.find("line 2"), std::string::npos);
  EXPECT_NE(dup.find("duplicate"), std::string::npos);
  EXPECT_NE(config_error("fem.mode = sideways\n").find("line 1"), std::string::npos);
  EXPECT_NE(config_error("seed = -4\n"), "");
  EXPECT_NE(config_error("train.lr = fast\n"), "");
  EXPECT_NE(config_error("data.size = 40\n").find("data.size"), std::string::npos);
  EXPECT_NE(config_error("just words\n").find("line 1"), std::string::npos);
}
