#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mtgaze/blocks.hpp"

namespace mtgaze {

enum class Ablation { sca, gcm, mrm };

// Parses a comma-separated list such as "sca,mrm" (empty string -> empty set).
std::set<Ablation> parse_ablations(std::string_view text);
std::string to_string(Ablation a);

struct BneckEntry {
  std::int64_t in = 16;
  std::int64_t exp = 16;
  std::int64_t out = 16;
  std::int64_t uc_k = 5;
  bool se = false;
  Activation act = Activation::relu;
  std::int64_t stride = 1;

  BneckSpec spec() const { return BneckSpec{in, exp, out, uc_k, stride, se, act}; }
  bool operator==(const BneckEntry&) const = default;
};

struct ModelConfig {
  std::int64_t input_hw = 224;
  std::int64_t stem_channels = 16;
  std::vector<BneckEntry> bnecks;
  std::vector<std::int64_t> sca_after{3, 6, 9};  // 1-based bneck indices
  std::int64_t sca_window = 7;
  std::int64_t sca_reduction = 4;
  std::int64_t feature_width = 480;
  // batchnorm + hswish after the GCM projection. Off by default: batch
  // statistics of a 1 x 1 map drift faster than the running estimate follows,
  // and infer mode then lags train mode badly.
  bool gcm_norm_act = false;
  std::int64_t mrm_hidden = 128;
  float mrm_a1 = 0.5f;
  float mrm_b1 = 0.5f;
  std::set<Ablation> ablate;

  // MobileNetV3-Large bneck table with 3x3 -> UC(5) and 5x5 -> UC(7).
  static ModelConfig multitask_gaze();
  // 64 x 64 input, nine narrower bnecks; the desk-scale training default.
  static ModelConfig reduced();

  // Throws ValidationError naming the offending field or bneck index.
  void validate() const;
  bool ablated(Ablation a) const { return ablate.count(a) != 0; }
  bool has_sca_after(std::int64_t index) const;

  // Human-readable JSON. Unknown keys are rejected on parse.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
  static ModelConfig load_file(const std::filesystem::path& path);

  bool operator==(const ModelConfig&) const = default;
};

// Spatial extent after the stem and after every bneck, used by both build and
// the cost model. extents[0] is the stem output; extents[i] follows bneck i.
std::vector<std::int64_t> feature_extents(const ModelConfig& config);
// SCA window actually used after bneck `index`: the configured window clamped
// to the feature extent there.
std::int64_t sca_window_at(const ModelConfig& config, std::int64_t extent);

struct ModelOutput {
  Tensor fused;
  Tensor yaw;
  Tensor pitch;
  Tensor joint;
};

class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  // images: [N, 3, input_hw, input_hw]; returns fused (yaw, pitch) plus the
  // individual head outputs.
  ModelOutput forward(const Tensor& images, const ForwardContext& ctx);

  const ModelConfig& config() const { return config_; }

  // All tensors (parameters and batchnorm buffers) with canonical names, in
  // forward order.
  ParamList named_tensors();
  ParamList parameters();
  std::int64_t parameter_count();

  // Weights file: magic "MTGZ", u32 version, u32 config length + config
  // text, u32 tensor count, then per tensor u16 name length + name, u8 rank,
  // u32 extents, little-endian float32 values.
  void save(const std::filesystem::path& path);
  static Model load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize();
  static Model deserialize(const std::vector<std::uint8_t>& bytes);

 private:
  ModelConfig config_;
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<Bneck> bnecks_;
  std::map<std::int64_t, SpatialChannelAttention> sca_;
  Conv2d head_;
  BatchNorm2d head_bn_;
  std::optional<GlobalConvModule> gcm_;
  MRMHeads mrm_;
};

inline constexpr std::uint32_t kWeightsVersion = 1;

}  // namespace mtgaze
