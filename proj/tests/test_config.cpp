#include <gtest/gtest.h>

#include <filesystem>

#include "hfvad/config.hpp"

using namespace hfvad;
using namespace hfvad::config;

TEST(Config, DefaultsParseAndRoundTrip) {
  const RunConfig a = parse(json::object());
  const auto j = to_json(a);
  const RunConfig b = parse(j);
  EXPECT_EQ(to_json(b), j);
  EXPECT_EQ(model_hash(a), model_hash(b));
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(parse(json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(parse(json{{"training", {{"memae", {{"epoch", 3}}}}}}), ConfigError);
  EXPECT_THROW(parse(json{{"detector", {{"missrate", 0.1}}}}), ConfigError);
  EXPECT_THROW(parse(json{{"conditions", {{{"name", "x"}, {"weight", 1}}}}}), ConfigError);
}

TEST(Config, WrongTypesAndRangesRejected) {
  EXPECT_THROW(parse(json{{"seed", "one"}}), ConfigError);
  EXPECT_THROW(parse(json{{"precision", "float16"}}), ConfigError);
  EXPECT_THROW(parse(json{{"cube", {{"size", 16}}}}), ConfigError);
  EXPECT_THROW(parse(json{{"cube", {{"t_len", 5}}}}), ConfigError);  // channel counts no longer match
  EXPECT_THROW(parse(json{{"scoring", {{"weights", {{"w_r", -1.0}}}}}}), ConfigError);
  EXPECT_THROW(parse(json{{"detector", {{"track_miss_rate", {{"lead", 0.5}}}}}}), ConfigError);
  EXPECT_THROW(parse(json{{"conditions", json::array()}}), ConfigError);
  EXPECT_THROW(parse(json{{"conditions", {{{"name", "a"}}, {{"name", "a"}}}}}), ConfigError);
}

TEST(Config, OverrideSetsNestedKeys) {
  auto j = with_override(json::object(), "training.memae.epochs=3");
  j = with_override(j, "precision=float64");
  j = with_override(j, "scoring.latent=posterior-mean");
  const auto c = parse(j);
  EXPECT_EQ(c.training.memae.epochs, 3);
  EXPECT_EQ(c.precision, Precision::f64);
  EXPECT_EQ(c.scoring.latent, cvae::LatentMode::posterior_mean);
  EXPECT_THROW(with_override(json::object(), "novalue"), ConfigError);
  EXPECT_THROW(parse(with_override(json::object(), "training.memae.epochz=3")), ConfigError);
}

TEST(Config, ConditionsInheritBaseSettings) {
  auto c = parse(json{{"scoring", {{"weights", {{"w_r", 2.0}}}}}, {"detector", {{"miss_rate", 0.2}}}});
  const auto conds = resolve_conditions(c);
  ASSERT_EQ(conds.size(), 5u);
  EXPECT_EQ(conds[0].name, "gt");
  EXPECT_DOUBLE_EQ(conds[0].weights.w_r, 2.0);
  EXPECT_EQ(conds[1].weights.w_r, 0.1);
  EXPECT_EQ(conds[1].weights.w_p, 10.0);
  EXPECT_TRUE(conds[2].flow_only);
  EXPECT_EQ(conds[2].effective_weights().w_p, 0.0);
  EXPECT_EQ(conds[2].effective_weights().w_pp, 0.0);
  EXPECT_EQ(conds[3].boxes, Provenance::detected);
  EXPECT_DOUBLE_EQ(conds[3].detector.miss_rate, 0.2);
  EXPECT_DOUBLE_EQ(conds[4].detector.track_miss_rate.at(scene::kLeadTrackId), 0.5);
  EXPECT_DOUBLE_EQ(conds[4].detector.miss_rate, 0.2);
}

TEST(Config, ModelHashIgnoresScoringOnlySettings) {
  const auto base = parse(json::object());
  EXPECT_EQ(model_hash(base), model_hash(parse(json{{"scoring", {{"weights", {{"w_r", 3.0}}}}}, {"jobs", 4}})));
  EXPECT_EQ(model_hash(base), model_hash(parse(json{{"detector", {{"miss_rate", 0.3}}}})));
  EXPECT_NE(model_hash(base), model_hash(parse(json{{"training", {{"memae", {{"epochs", 2}}}}}})));
  EXPECT_NE(model_hash(base), model_hash(parse(json{{"scoring", {{"latent", "posterior-mean"}}}})));
  EXPECT_NE(model_hash(base), model_hash(parse(json{{"seed", 2}})));
}

TEST(Config, ShippedDefaultFileMatchesBuiltins) {
  const auto j = json::parse(read_file(std::filesystem::path(HFVAD_SOURCE_DIR) / "configs" / "default.json"));
  EXPECT_EQ(to_json(parse(j)), to_json(RunConfig{}));
  EXPECT_EQ(j, to_json(RunConfig{}));
}
