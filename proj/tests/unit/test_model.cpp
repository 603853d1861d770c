#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "mtgaze/cost.hpp"
#include "mtgaze/errors.hpp"
#include "mtgaze/model.hpp"
#include "test_util.hpp"

using namespace mtgaze;
using testutil::randn;

namespace {

// Small enough to build and run 100 times in a few seconds.
ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::reduced();
  c.input_hw = 32;
  c.feature_width = 64;
  c.mrm_hidden = 16;
  c.sca_window = 4;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mtgaze_test_" + name);
}

bool same_tensors(Model& a, Model& b) {
  auto ta = a.named_tensors(), tb = b.named_tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].name != tb[i].name || !ta[i].tensor->same_values(*tb[i].tensor)) return false;
  }
  return true;
}

}  // namespace

TEST(Model, DefaultBuildsAndEmitsTwoAngles) {
  Model m = Model::build(ModelConfig::multitask_gaze(), 0);
  std::mt19937_64 rng(1);
  ModelOutput out = m.forward(testutil::randu({1, 3, 224, 224}, rng, 0.0f, 1.0f), ForwardContext{});
  EXPECT_EQ(out.fused.shape(), (Shape{1, 2}));
  EXPECT_TRUE(out.fused.all_finite());
}

TEST(Model, DefaultBudgetWindow) {
  const auto cfg = ModelConfig::multitask_gaze();
  Model m = Model::build(cfg, 0);
  const auto params = m.parameter_count();
  EXPECT_GE(params, 2'400'000);
  EXPECT_LE(params, 3'300'000);
  const auto macs = count_model(cfg).total_macs();
  EXPECT_GE(macs, 190'000'000);
  EXPECT_LE(macs, 290'000'000);
}

TEST(Model, AnalyticCountEqualsEnumeration) {
  std::vector<ModelConfig> configs{ModelConfig::multitask_gaze(), ModelConfig::reduced(), tiny_config()};
  for (const char* ab : {"sca", "gcm", "mrm", "sca,gcm,mrm"}) {
    auto c = ModelConfig::multitask_gaze();
    c.ablate = parse_ablations(ab);
    configs.push_back(c);
  }
  auto tail = ModelConfig::reduced();
  tail.gcm_norm_act = true;
  configs.push_back(tail);
  for (const auto& c : configs) {
    Model m = Model::build(c, 3);
    EXPECT_EQ(count_model(c).total_params(), m.parameter_count()) << c.to_text();
  }
}

TEST(Model, AblationDirections) {
  const auto base = ModelConfig::multitask_gaze();
  const auto full = count_model(base);
  auto with = [&](const char* ab) {
    auto c = base;
    c.ablate = parse_ablations(ab);
    return count_model(c);
  };
  const auto sca = with("sca"), mrm = with("mrm"), gcm = with("gcm");
  EXPECT_LT(sca.total_macs(), full.total_macs());
  EXPECT_LT(mrm.total_params(), full.total_params());
  EXPECT_NE(gcm.total_params(), full.total_params());
  EXPECT_NE(gcm.total_macs(), full.total_macs());
  for (const auto* r : {&sca, &mrm, &gcm}) {
    EXPECT_FALSE(r->total_params() > full.total_params() && r->total_macs() > full.total_macs());
  }
}

TEST(Model, SameSeedSameWeights) {
  Model a = Model::build(ModelConfig::reduced(), 42), b = Model::build(ModelConfig::reduced(), 42);
  Model c = Model::build(ModelConfig::reduced(), 43);
  EXPECT_TRUE(same_tensors(a, b));
  EXPECT_FALSE(same_tensors(a, c));
}

TEST(Model, InitializationConvention) {
  Model m = Model::build(ModelConfig::reduced(), 5);
  for (auto& p : m.named_tensors()) {
    const auto& n = p.name;
    if (n.ends_with(".gamma") || n.ends_with("running_var")) {
      for (float v : p.tensor->values()) ASSERT_EQ(v, 1.0f) << n;
    } else if (n.ends_with(".beta") || n.ends_with("running_mean")) {
      for (float v : p.tensor->values()) ASSERT_EQ(v, 0.0f) << n;
    } else if (n.ends_with(".weight") && n.find("gcm.row") == std::string::npos &&
               n.find("gcm.col") == std::string::npos) {
      const auto& s = p.tensor->shape();
      std::int64_t fan_in = 1;
      for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
      const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
      for (float v : p.tensor->values()) ASSERT_LE(std::abs(v), bound) << n;
    }
  }
}

TEST(Model, UnknownAblationAndBrokenChainRejected) {
  EXPECT_THROW(parse_ablations("sca,foo"), ValidationError);
  auto c = ModelConfig::reduced();
  c.bnecks[4].in = 24;
  try {
    Model::build(c, 0);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find('5'), std::string::npos) << e.what();
  }
  auto d = ModelConfig::reduced();
  d.sca_after = {10};
  EXPECT_THROW(d.validate(), ValidationError);
}

TEST(Model, ForwardDeterminismAndBatchRows) {
  auto cfg = tiny_config();
  Model m = Model::build(cfg, 7);
  std::mt19937_64 rng(2);
  Tensor one = testutil::randu({1, 3, 32, 32}, rng, 0.0f, 1.0f);
  Tensor two({2, 3, 32, 32});
  std::copy(one.values().begin(), one.values().end(), two.data().begin());
  std::copy(one.values().begin(), one.values().end(), two.data().begin() + one.numel());
  ModelOutput a = m.forward(two, ForwardContext{});
  EXPECT_EQ(a.fused[0], a.fused[2]);
  EXPECT_EQ(a.fused[1], a.fused[3]);
  ModelOutput b = m.forward(two, ForwardContext{});
  EXPECT_TRUE(a.fused.same_values(b.fused));
}

TEST(Model, ForwardFiniteOverRandomProbes) {
  std::mt19937_64 rng(3);
  auto cfg = tiny_config();
  for (int probe = 0; probe < 100; ++probe) {
    Model m = Model::build(cfg, static_cast<std::uint64_t>(probe));
    const float sd = std::uniform_real_distribution<float>(0.1f, 5.0f)(rng);
    ModelOutput out = m.forward(randn({2, 3, 32, 32}, rng, sd), ForwardContext{});
    ASSERT_TRUE(out.fused.all_finite()) << "probe " << probe;
  }
}

TEST(Model, RejectsWrongExtent) {
  Model m = Model::build(tiny_config(), 0);
  EXPECT_THROW(m.forward(Tensor({1, 3, 30, 30}), ForwardContext{}), ShapeError);
  EXPECT_THROW(m.forward(Tensor({1, 1, 32, 32}), ForwardContext{}), ShapeError);
}

TEST(Model, CanonicalNamesUnique) {
  Model m = Model::build(ModelConfig::multitask_gaze(), 0);
  std::set<std::string> names;
  for (auto& p : m.named_tensors()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_TRUE(names.count("bneck.4.expand.conv.weight"));
}

TEST(ConfigText, RoundTripAndUnknownKey) {
  auto c = ModelConfig::reduced();
  c.ablate = parse_ablations("gcm,mrm");
  c.gcm_norm_act = true;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  EXPECT_THROW(ModelConfig::from_text(R"({"input_hw": 64, "bogus": 1})"), ValidationError);
  EXPECT_THROW(ModelConfig::from_text("{not json"), ValidationError);
}

TEST(Weights, RoundTripBitExact) {
  auto cfg = tiny_config();
  cfg.ablate = parse_ablations("sca");
  Model m = Model::build(cfg, 11);
  const auto path = temp_path("roundtrip.bin");
  m.save(path);
  Model r = Model::load(path);
  EXPECT_EQ(r.config(), m.config());
  EXPECT_TRUE(same_tensors(m, r));
  std::filesystem::remove(path);
}

TEST(Weights, FileSizeFromCounter) {
  Model m = Model::build(ModelConfig::reduced(), 0);
  const auto bytes = m.serialize();
  std::size_t expect = 4 + 4 + 4 + m.config().to_text().size() + 4;
  for (auto& p : m.named_tensors()) {
    expect += 2 + p.name.size() + 1 + 4 * p.tensor->rank() + 4 * static_cast<std::size_t>(p.tensor->numel());
  }
  EXPECT_EQ(bytes.size(), expect);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MTGZ");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Weights, CorruptionRejected) {
  Model m = Model::build(tiny_config(), 0);
  const auto good = m.serialize();
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(Model::deserialize(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(Model::deserialize(bad_version), FormatError);
  auto truncated = good;
  truncated.resize(good.size() - 3);
  EXPECT_THROW(Model::deserialize(truncated), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(Model::deserialize(trailing), FormatError);
  // rename the first tensor
  auto unknown = good;
  const std::string first = m.named_tensors().front().name;
  auto it = std::search(unknown.begin(), unknown.end(), first.begin(), first.end());
  ASSERT_NE(it, unknown.end());
  *it = 'Q';
  try {
    Model::deserialize(unknown);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown tensor"), std::string::npos) << e.what();
  }
  EXPECT_THROW(Model::load(temp_path("does_not_exist.bin")), ValidationError);
}
