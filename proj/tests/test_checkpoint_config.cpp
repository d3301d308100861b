#include <gtest/gtest.h>

#include <filesystem>
#include <cstring>

#include "ladmim/checkpoint.hpp"
#include "ladmim/config.hpp"
#include "ladmim/hvq.hpp"

using namespace ladmim;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.meta = {{"stage", "hvq"}, {"note", "x"}};
  ck.add("a", Tensor<float>({2, 3}, {1, -2, 3.5f, 0, 1e-30f, -0.0f}));
  ck.add("b", Tensor<float>({1, 1}, {42}));
  return ck;
}

}  // namespace

TEST(Checkpoint, LayoutAndRoundTrip) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "LDMM");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta["stage"], "hvq");
  EXPECT_EQ(back.get("a").shape, (Shape{2, 3}));
  const auto& a = back.get("a").data;
  const auto ref = sample_checkpoint();
  const auto& orig = ref.tensors[0].value.data;
  EXPECT_EQ(std::memcmp(a.data(), orig.data(), a.size() * sizeof(float)), 0);
  EXPECT_EQ(back.get("b").data[0], 42.0f);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  // payload ends with the last float in little-endian order
  float last;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  EXPECT_EQ(last, 42.0f);
}

TEST(Checkpoint, RejectsCorruption) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), IoError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad_version), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 10)), IoError);
  auto flipped = bytes;
  flipped[flipped.size() - 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), IoError);
}

TEST(Checkpoint, ModelRoundTripThroughFile) {
  HvqConfig cfg;
  cfg.dim = 8;
  cfg.ffn_hidden = 8;
  cfg.layers = 2;
  cfg.codebook_size = 4;
  cfg.code_dim = 4;
  HvqModel<float> m(cfg, 3);
  Checkpoint ck;
  ck.add_all(m.params());
  const auto dir = fs::temp_directory_path() / "ladmim_ckpt_test";
  fs::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", ck);
  HvqModel<float> other(cfg, 4);
  ASSERT_NE(other.hash(), m.hash());
  load_checkpoint(dir / "m.ckpt").load_into(other.params());
  EXPECT_EQ(other.hash(), m.hash());
  EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), MissingPrerequisite);
  cfg.dim = 16;
  HvqModel<float> wider(cfg, 4);
  EXPECT_THROW(ck.load_into(wider.params()), IoError);
  fs::remove_all(dir);
}

TEST(Config, DefaultsValidateAndRoundTrip) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.grid_h(), 8);
  EXPECT_EQ(c.grid_w(), 8);
  const auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  c.set_seed(7);
  EXPECT_EQ(c.seed_eval, 7u);
  EXPECT_EQ(c.seed_mask, 7u);
}

TEST(Config, RejectsBadValues) {
  auto bad = [](nlohmann::json j) {
    EXPECT_THROW(RunConfig::from_json(j).validate(), ConfigError) << j.dump();
  };
  bad({{"mask_ratio", 0.0}});
  bad({{"mask_ratio", 1.0}});
  bad({{"n_masks", 0}});
  bad({{"d", 30}, {"heads", 4}});
  bad({{"patch", 3}});
  bad({{"codebook_size", 1}});
  bad({{"n_val", 1}});
  bad({{"target", "tokens"}});
  bad({{"unknown_key", 1}});
  bad({{"d", "wide"}});
  bad({{"hvq_lr", -1.0}});
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::array()), ConfigError);
}
