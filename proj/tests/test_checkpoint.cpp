#include <gtest/gtest.h>

#include "tiny_pipeline.hpp"
#include "voxpatch/checkpoint.hpp"
#include "voxpatch/config.hpp"
#include "voxpatch/pipeline.hpp"

using namespace voxpatch;
using voxpatch::testing::tiny_config;
using voxpatch::testing::tiny_dataset;

TEST(RunConfig, ParsesKeyValueText) {
  RunConfig c;
  c.load_text("# comment\n grid = 16\npatch=4   # trailing\n\nstage2_lr = 5e-5\nseed = 123456789012\n");
  EXPECT_EQ(c.grid, 16);
  EXPECT_EQ(c.stage2_lr, 5e-5);
  EXPECT_EQ(c.seed, 123456789012LL);
  EXPECT_TRUE(c.explicit_keys.contains("stage2_lr"));
  EXPECT_FALSE(c.explicit_keys.contains("lm_dim"));
  EXPECT_EQ(c.patches(), 64);
  EXPECT_EQ(c.context(), 128);

  RunConfig back;
  back.load_text(c.to_text());
  EXPECT_EQ(back.to_json(), c.to_json());

  EXPECT_THROW(c.load_text("no_such_key = 1\n"), Error);
  EXPECT_THROW(c.load_text("grid = sixteen\n"), Error);
  EXPECT_THROW(c.load_text("grid 16\n"), Error);
  RunConfig bad;
  bad.grid = 30;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = tiny_config();
  auto [m, grids] = tiny_dataset(cfg);
  Pipeline p(cfg, build_tokenizer(m));
  auto ckpt = p.to_checkpoint(pipeline_namespaces());
  const std::string bytes = ckpt.serialize();
  auto parsed = Checkpoint::parse(bytes);
  EXPECT_EQ(parsed.serialize(), bytes);
  EXPECT_EQ(parsed.tensors, ckpt.tensors);

  auto p2 = Pipeline::from_checkpoint(parsed, RunConfig{});
  EXPECT_EQ(p2->params().hash(), p.params().hash());
  EXPECT_EQ(p2->tokenizer(), p.tokenizer());
  EXPECT_EQ(p2->to_checkpoint(pipeline_namespaces()).serialize(), bytes);
}

TEST(Checkpoint, DetectsCorruption) {
  auto cfg = tiny_config();
  auto [m, grids] = tiny_dataset(cfg);
  Pipeline p(cfg, build_tokenizer(m));
  const std::string bytes = p.to_checkpoint({"in_proj/"}).serialize();
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      Checkpoint::parse(bytes.substr(0, cut));
      FAIL() << "cut " << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::CorruptCheckpoint);
    }
  }
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(Checkpoint::parse(flipped), Error);
}

TEST(Checkpoint, ConfigMismatchNamesTheField) {
  auto cfg = tiny_config();
  auto [m, grids] = tiny_dataset(cfg);
  Pipeline p(cfg, build_tokenizer(m));
  auto ckpt = Checkpoint::parse(p.to_checkpoint(pipeline_namespaces()).serialize());

  RunConfig user;
  user.set("latent_dim", "128");
  try {
    Pipeline::from_checkpoint(ckpt, user);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigMismatch);
    EXPECT_NE(std::string(e.what()).find("latent_dim"), std::string::npos) << e.what();
  }
  try {
    cfg.latent_dim = 128;
    cfg.check_compatible(ckpt.config.at("run"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("latent_dim"), std::string::npos);
  }

  // restating a model key with the same value and changing a training key is fine
  RunConfig ok;
  ok.set("latent_dim", "8");
  ok.set("stage2_lr", "0.01");
  auto p2 = Pipeline::from_checkpoint(ckpt, ok);
  EXPECT_EQ(p2->config().stage2_lr, 0.01);
  EXPECT_EQ(p2->config().lm_dim, 32);
}

TEST(Checkpoint, RestoreOnlyPresentNamespaces) {
  auto cfg = tiny_config();
  auto [m, grids] = tiny_dataset(cfg);
  Pipeline p(cfg, build_tokenizer(m));
  for (auto& x : p.params().get("in_proj/linear.bias").value()) x = 42.0f;
  auto ckpt = p.to_checkpoint({"in_proj/"});
  EXPECT_TRUE(ckpt.has_namespace("in_proj/"));
  EXPECT_FALSE(ckpt.has_namespace("lm/"));
  auto p2 = Pipeline::from_checkpoint(ckpt, RunConfig{});
  EXPECT_EQ(p2->params().get("in_proj/linear.bias").value()[0], 42.0f);
  // fresh init is seed-determined, so untouched namespaces agree as well
  EXPECT_EQ(p2->params().hash("lm/"), p.params().hash("lm/"));
}
