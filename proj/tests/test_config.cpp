#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "canf/config.hpp"

namespace canf {
namespace {

std::string message_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, DefaultsWhenEmpty) {
  EXPECT_EQ(parse_config_text(""), RunConfig{});
  EXPECT_EQ(parse_config_text("# only a comment\n\n   \n"), RunConfig{});
}

TEST(Config, ParsesEveryKind) {
  const auto c = parse_config_text(
      "width=32  # trailing comment\n"
      " depth = 2\n"
      "cond_aware_set=[dw-conv, head]\n"
      "control_method=[CAN,AdaNorm]\n"
      "cond_sources=[Timestep]\n"
      "skip_connections=false\n"
      "guidance=1.5\n"
      "seed=18446744073709551615\n");
  EXPECT_EQ(c.model.width, 32);
  EXPECT_EQ(c.model.depth, 2);
  EXPECT_EQ(c.model.cond_aware_set, (std::set<LayerKind>{LayerKind::DwConv, LayerKind::Head}));
  EXPECT_EQ(c.model.control, (ControlMethods{.can = true, .ada_norm = true, .cond_tokens = false}));
  EXPECT_EQ(c.model.cond_sources, ConditionSources::timestep_only());
  EXPECT_FALSE(c.model.skip_connections);
  EXPECT_EQ(c.train.guidance, 1.5);
  EXPECT_EQ(c.train.seed, 18446744073709551615ULL);
}

TEST(Config, RoundTrip) {
  RunConfig c;
  c.model.width = 48;
  c.model.heads = 3;
  c.model.cond_aware_set = {LayerKind::QkvProj, LayerKind::Mlp};
  c.model.control = {.can = true, .ada_norm = true, .cond_tokens = false};
  c.model.cond_sources = ConditionSources::class_only();
  c.model.selection_kernels = 2;
  c.train.jitter = 0.1;
  c.train.p_null = 1.0 / 3.0;
  c.train.seed = 77;
  const auto text = serialize_config(c);
  EXPECT_EQ(parse_config_text(text), c);
  EXPECT_EQ(serialize_config(parse_config_text(text)), text);
  for (const auto& k : config_keys()) {
    EXPECT_TRUE(text.rfind(k + "=", 0) == 0 || text.find("\n" + k + "=") != std::string::npos) << k;
  }
}

TEST(Config, UnknownKeySuggestsNearest) {
  const auto msg = message_of("widht=3\n");
  EXPECT_NE(msg.find("widht"), std::string::npos);
  EXPECT_NE(msg.find("did you mean 'width'"), std::string::npos);
}

TEST(Config, TypeErrorsNameKeyAndType) {
  EXPECT_NE(message_of("depth=two").find("depth"), std::string::npos);
  EXPECT_NE(message_of("depth=2.5").find("integer"), std::string::npos);
  EXPECT_NE(message_of("guidance=abc").find("guidance"), std::string::npos);
  EXPECT_NE(message_of("skip_connections=maybe").find("skip_connections"), std::string::npos);
  EXPECT_NE(message_of("cond_aware_set=[dw-conv,bogus]").find("bogus"), std::string::npos);
  EXPECT_NE(message_of("width").find("key=value"), std::string::npos);
}

TEST(Config, SemanticValidationRuns) {
  EXPECT_THROW(parse_config_text("width=30\nheads=4\n"), ConfigError);
  EXPECT_THROW(parse_config_text("n_classes=1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("control_method=[AdaNorm]\n"), ConfigError);
  EXPECT_THROW(parse_config_text("epochs=-1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("n_timesteps=10\nsample_steps=20\n"), ConfigError);
  EXPECT_THROW(parse_config_text("seed=-3\n"), ConfigError);
  EXPECT_THROW(parse_config_text("p_null=1.5\n"), ConfigError);
}

TEST(Config, FileThenOverrides) {
  const auto path = std::filesystem::temp_directory_path() / "canf_config_test.conf";
  {
    std::ofstream f(path);
    f << "width=32\nheads=2\nepochs=3\n";
  }
  const auto c = parse_config(path, {"epochs=5", "seed=9"});
  EXPECT_EQ(c.model.width, 32);
  EXPECT_EQ(c.train.epochs, 5);
  EXPECT_EQ(c.train.seed, 9u);
  std::filesystem::remove(path);
  EXPECT_THROW(parse_config(path), ConfigError);
}

TEST(Config, HashTracksContent) {
  RunConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.train.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, ShortestDoubleFormatting) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(2.0), "2");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

}  // namespace
}  // namespace canf
