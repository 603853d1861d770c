#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mtgaze/ops.hpp"

namespace mtgaze {

// A named handle to a tensor owned by a block. Trainable tensors receive
// gradients; the rest (batchnorm running statistics) are buffers.
struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool trainable;
};
using ParamList = std::vector<ParamRef>;

struct ForwardContext {
  Mode mode = Mode::infer;
  GradTape* tape = nullptr;
  std::mt19937_64* rng = nullptr;   // required when dropout is active in train mode
  float sca_dropout = 0.0f;
  bool update_running_stats = true;
};

// Samples from uniform(-sqrt(6 / fan_in), +sqrt(6 / fan_in)).
Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng);

struct Conv2d {
  ConvSpec spec;
  Tensor weight;
  std::optional<Tensor> bias;

  static Conv2d create(const ConvSpec& spec, bool with_bias, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, GradTape* tape) const;
  void collect(const std::string& prefix, ParamList& out);
  std::int64_t param_count() const;
};

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static Linear create(std::int64_t in, std::int64_t out, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, GradTape* tape) const { return dense(x, weight, bias, tape); }
  void collect(const std::string& prefix, ParamList& out);
  std::int64_t in_features() const { return weight.dim(1); }
  std::int64_t out_features() const { return weight.dim(0); }
};

struct BatchNorm2d {
  BatchNormParams params;

  static BatchNorm2d create(std::int64_t channels);
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  void collect(const std::string& prefix, ParamList& out);
};

// Unidirectional convolution: a depthwise 1 x k stage followed by a depthwise
// k x 1 stage, each padded to keep the extent at stride 1.
struct UCSpec {
  std::int64_t k = 5;
  std::int64_t channels = 1;
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;

  void validate() const;
  ConvSpec row_spec() const { return ConvSpec{1, k, channels, channels, 1, stride_w, 0, (k - 1) / 2, channels}; }
  ConvSpec col_spec() const { return ConvSpec{k, 1, channels, channels, stride_h, 1, (k - 1) / 2, 0, channels}; }
  // Weight count of the pair, 2 k C.
  std::int64_t param_count() const { return 2 * k * channels; }
};

struct UnidirectionalConv {
  UCSpec spec;
  Conv2d row;
  Conv2d col;

  static UnidirectionalConv create(const UCSpec& spec, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, GradTape* tape) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Channel squeeze width used by MobileNetV3: c / 4 rounded to a multiple of 8.
std::int64_t squeeze_channels(std::int64_t channels);

struct SqueezeExcite {
  Linear fc1;
  Linear fc2;

  static SqueezeExcite create(std::int64_t channels, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, GradTape* tape) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct BneckSpec {
  std::int64_t c_in = 16;
  std::int64_t c_exp = 16;
  std::int64_t c_out = 16;
  std::int64_t uc_k = 5;
  std::int64_t stride = 1;
  bool use_se = false;
  Activation activation = Activation::relu;

  void validate() const;
  bool residual() const { return stride == 1 && c_in == c_out; }
  bool has_expansion() const { return c_exp != c_in; }
  UCSpec uc() const { return UCSpec{uc_k, c_exp, stride, stride}; }
};

// Inverted residual bottleneck with the depthwise stage replaced by UC:
// 1x1 expansion -> UC -> optional squeeze-excite -> 1x1 projection.
struct Bneck {
  BneckSpec spec;
  std::optional<Conv2d> expand;
  std::optional<BatchNorm2d> expand_bn;
  UnidirectionalConv uc;
  BatchNorm2d uc_bn;
  std::optional<SqueezeExcite> se;
  Conv2d project;
  BatchNorm2d project_bn;

  static Bneck create(const BneckSpec& spec, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  void collect(const std::string& prefix, ParamList& out);
};

struct SCASpec {
  std::int64_t channels = 1;
  std::int64_t window = 7;
  std::int64_t reduction = 4;

  void validate() const;
  std::int64_t hidden() const { return std::max<std::int64_t>(1, channels / reduction); }
  std::int64_t shift() const { return window / 2; }
};

inline constexpr std::int64_t kSpatialGateKernel = 7;

struct SCAResult {
  Tensor output;
  Tensor spatial_gate;  // [N, 1, H, W]
  Tensor channel_gate;  // [N, C, 1, 1]
};

// Spatial and channel attention.
//
// Spatial stage: the two-plane map [channel mean; channel max] is split into
// window x window tiles and a 7x7 conv + sigmoid produces a per-position gate
// inside each tile. A second pass runs on the map cyclically shifted by half
// a window and is shifted back, so positions on tile borders of the first
// pass sit inside a tile of the second. The two gates are multiplied.
//
// Channel stage: gate = sigmoid(MLP(avgpool(y)) + MLP(maxpool(y))) with one
// shared bottleneck MLP.
//
// In train mode the block output goes through dropout at ctx.sca_dropout.
struct SpatialChannelAttention {
  SCASpec spec;
  Conv2d spatial;
  Linear fc1;
  Linear fc2;

  static SpatialChannelAttention create(const SCASpec& spec, std::mt19937_64& rng);
  SCAResult forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Global convolution module: depthwise 1 x W conv (collapses width), depthwise
// H x 1 conv (collapses height), pointwise projection, then optionally
// batchnorm and hswish. Without the tail the averaging parameterization is
// exactly global average pooling.
struct GlobalConvModule {
  std::int64_t channels = 1;
  std::int64_t height = 1;
  std::int64_t width = 1;
  Conv2d row;
  Conv2d col;
  Conv2d pointwise;
  bool norm_act = false;
  BatchNorm2d bn;  // used only with norm_act

  static GlobalConvModule create(std::int64_t channels, std::int64_t height, std::int64_t width,
                                 std::int64_t out_channels, std::mt19937_64& rng, bool norm_act = false);
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  void collect(const std::string& prefix, ParamList& out);
  std::int64_t out_channels() const { return pointwise.spec.c_out; }
};

struct MRMOutput {
  Tensor fused;  // [N, 2] (yaw_total, pitch_total)
  Tensor yaw;    // [N, 1] yaw head
  Tensor pitch;  // [N, 1] pitch head
  Tensor joint;  // [N, 2] joint head
};

// Multi-task regression heads. Each head is D -> hidden -> out with a ReLU
// hidden layer. Fusion: total = a1 * (yaw head, pitch head) + b1 * joint head.
// With joint_only the fused output is the joint head and the single-angle
// heads report its columns.
struct MRMHeads {
  Linear yaw_hidden, yaw_out;
  Linear joint_hidden, joint_out;
  Linear pitch_hidden, pitch_out;
  float a1 = 0.5f;
  float b1 = 0.5f;
  bool joint_only = false;

  static MRMHeads create(std::int64_t features, std::int64_t hidden, std::mt19937_64& rng,
                         bool joint_only = false, float a1 = 0.5f, float b1 = 0.5f);
  MRMOutput forward(const Tensor& f, GradTape* tape) const;
  // (a1 * single_heads + b1 * joint), both [N, 2].
  static Tensor fuse(const Tensor& single_heads, const Tensor& joint, float a1, float b1,
                     GradTape* tape);
  void collect(const std::string& prefix, ParamList& out);
  std::int64_t features() const { return joint_hidden.in_features(); }
};

std::int64_t count_elements(const ParamList& params, bool trainable_only);

}  // namespace mtgaze
