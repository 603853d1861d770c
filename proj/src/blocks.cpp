#include "mtgaze/blocks.hpp"

#include <cmath>

#include "mtgaze/errors.hpp"

namespace mtgaze {

Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) {
    // 53-bit uniform in [0, 1), mapped to [-bound, bound).
    const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
    v = static_cast<float>((2.0 * u - 1.0) * bound);
  }
  return t;
}

Conv2d Conv2d::create(const ConvSpec& spec, bool with_bias, std::mt19937_64& rng) {
  spec.validate();
  Conv2d c;
  c.spec = spec;
  c.weight = fan_in_uniform(spec.weight_shape(), (spec.c_in / spec.groups) * spec.k_h * spec.k_w, rng);
  if (with_bias) c.bias = Tensor({spec.c_out});
  return c;
}

Tensor Conv2d::forward(const Tensor& x, GradTape* tape) const {
  return conv2d(x, weight, bias ? &*bias : nullptr, spec, tape);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, true});
  if (bias) out.push_back({prefix + ".bias", &*bias, true});
}

std::int64_t Conv2d::param_count() const { return weight.numel() + (bias ? bias->numel() : 0); }

Linear Linear::create(std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
  return Linear{fan_in_uniform({out, in}, in, rng), Tensor({out})};
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, true});
  out.push_back({prefix + ".bias", &bias, true});
}

BatchNorm2d BatchNorm2d::create(std::int64_t channels) {
  return BatchNorm2d{BatchNormParams::identity(channels)};
}

Tensor BatchNorm2d::forward(const Tensor& x, const ForwardContext& ctx) {
  return batchnorm(x, params, ctx.mode, ctx.tape, ctx.update_running_stats);
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gamma", &params.gamma, true});
  out.push_back({prefix + ".beta", &params.beta, true});
  out.push_back({prefix + ".running_mean", &params.running_mean, false});
  out.push_back({prefix + ".running_var", &params.running_var, false});
}

void UCSpec::validate() const {
  if (k < 1 || k % 2 == 0) throw ValidationError("UC kernel extent must be odd and positive, got " + std::to_string(k));
  if (channels < 1) throw ValidationError("UC channel count must be positive");
  if (stride_h < 1 || stride_w < 1) throw ValidationError("UC strides must be positive");
}

UnidirectionalConv UnidirectionalConv::create(const UCSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  UnidirectionalConv uc;
  uc.spec = spec;
  uc.row = Conv2d::create(spec.row_spec(), false, rng);
  uc.col = Conv2d::create(spec.col_spec(), false, rng);
  return uc;
}

Tensor UnidirectionalConv::forward(const Tensor& x, GradTape* tape) const {
  if (x.rank() != 4 || x.dim(1) != spec.channels) {
    throw ShapeError("UC: input channels " + (x.rank() == 4 ? std::to_string(x.dim(1)) : shape_to_string(x.shape())) +
                     " do not match spec channels " + std::to_string(spec.channels));
  }
  return col.forward(row.forward(x, tape), tape);
}

void UnidirectionalConv::collect(const std::string& prefix, ParamList& out) {
  row.collect(prefix + ".row", out);
  col.collect(prefix + ".col", out);
}

std::int64_t squeeze_channels(std::int64_t channels) {
  const std::int64_t divisor = 8;
  const double v = static_cast<double>(channels) / 4.0;
  std::int64_t r = std::max(divisor, static_cast<std::int64_t>(v + divisor / 2.0) / divisor * divisor);
  if (static_cast<double>(r) < 0.9 * v) r += divisor;
  return r;
}

SqueezeExcite SqueezeExcite::create(std::int64_t channels, std::mt19937_64& rng) {
  const std::int64_t sq = squeeze_channels(channels);
  SqueezeExcite se;
  se.fc1 = Linear::create(channels, sq, rng);
  se.fc2 = Linear::create(sq, channels, rng);
  return se;
}

Tensor SqueezeExcite::forward(const Tensor& x, GradTape* tape) const {
  const std::int64_t n = x.dim(0), c = x.dim(1);
  Tensor pooled = reshape(global_pool(x, PoolKind::avg, tape), {n, c}, tape);
  Tensor gate = sigmoid(fc2.forward(relu(fc1.forward(pooled, tape), tape), tape), tape);
  return mul(x, reshape(gate, {n, c, 1, 1}, tape), tape);
}

void SqueezeExcite::collect(const std::string& prefix, ParamList& out) {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

void BneckSpec::validate() const {
  if (c_in < 1 || c_exp < 1 || c_out < 1) throw ValidationError("bneck channel counts must be positive");
  if (stride != 1 && stride != 2) throw ValidationError("bneck stride must be 1 or 2, got " + std::to_string(stride));
  uc().validate();
}

Bneck Bneck::create(const BneckSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Bneck b;
  b.spec = spec;
  if (spec.has_expansion()) {
    b.expand = Conv2d::create(ConvSpec::standard(1, 1, spec.c_in, spec.c_exp), false, rng);
    b.expand_bn = BatchNorm2d::create(spec.c_exp);
  }
  b.uc = UnidirectionalConv::create(spec.uc(), rng);
  b.uc_bn = BatchNorm2d::create(spec.c_exp);
  if (spec.use_se) b.se = SqueezeExcite::create(spec.c_exp, rng);
  b.project = Conv2d::create(ConvSpec::standard(1, 1, spec.c_exp, spec.c_out), false, rng);
  b.project_bn = BatchNorm2d::create(spec.c_out);
  return b;
}

Tensor Bneck::forward(const Tensor& x, const ForwardContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != spec.c_in) {
    throw ShapeError("bneck: input channels " + (x.rank() == 4 ? std::to_string(x.dim(1)) : shape_to_string(x.shape())) +
                     " do not match c_in " + std::to_string(spec.c_in));
  }
  GradTape* tape = ctx.tape;
  Tensor h = spec.has_expansion()
                 ? activate(expand_bn->forward(expand->forward(x, tape), ctx), spec.activation, tape)
                 : scale(x, 1.0f, tape);
  h = activate(uc_bn.forward(uc.forward(h, tape), ctx), spec.activation, tape);
  if (se) h = se->forward(h, tape);
  h = project_bn.forward(project.forward(h, tape), ctx);
  if (spec.residual()) h = add(x, h, tape);
  return h;
}

void Bneck::collect(const std::string& prefix, ParamList& out) {
  if (expand) {
    expand->collect(prefix + ".expand.conv", out);
    expand_bn->collect(prefix + ".expand.bn", out);
  }
  uc.collect(prefix + ".uc", out);
  uc_bn.collect(prefix + ".uc.bn", out);
  if (se) se->collect(prefix + ".se", out);
  project.collect(prefix + ".project.conv", out);
  project_bn.collect(prefix + ".project.bn", out);
}

void SCASpec::validate() const {
  if (channels < 1) throw ValidationError("SCA channel count must be positive");
  if (window < 1) throw ValidationError("SCA window must be positive");
  if (reduction < 1) throw ValidationError("SCA reduction must be positive");
}

SpatialChannelAttention SpatialChannelAttention::create(const SCASpec& spec, std::mt19937_64& rng) {
  spec.validate();
  SpatialChannelAttention a;
  a.spec = spec;
  a.spatial = Conv2d::create(ConvSpec::standard(kSpatialGateKernel, kSpatialGateKernel, 2, 1), true, rng);
  a.fc1 = Linear::create(spec.channels, spec.hidden(), rng);
  a.fc2 = Linear::create(spec.hidden(), spec.channels, rng);
  return a;
}

SCAResult SpatialChannelAttention::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (x.rank() != 4 || x.dim(1) != spec.channels) {
    throw ShapeError("SCA: input " + shape_to_string(x.shape()) + " does not have " +
                     std::to_string(spec.channels) + " channels");
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (spec.window > h || spec.window > w) {
    throw ShapeError("SCA: window " + std::to_string(spec.window) + " exceeds spatial extent " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  GradTape* tape = ctx.tape;
  const Tensor stats = concat_channels(channel_mean(x, tape), channel_max(x, tape), tape);

  auto windowed_gate = [&](const Tensor& map) {
    Tensor logits = spatial.forward(window_partition(map, spec.window, tape), tape);
    return sigmoid(window_merge(logits, n, h, w, tape), tape);
  };
  Tensor gate_plain = windowed_gate(stats);
  const std::int64_t s = spec.shift();
  Tensor gate_shifted = roll(windowed_gate(roll(stats, -s, -s, tape)), s, s, tape);
  Tensor spatial_gate = mul(gate_plain, gate_shifted, tape);
  Tensor y = mul(x, spatial_gate, tape);

  Tensor avg = reshape(global_pool(y, PoolKind::avg, tape), {n, c}, tape);
  Tensor mx = reshape(global_pool(y, PoolKind::max, tape), {n, c}, tape);
  auto mlp = [&](const Tensor& v) { return fc2.forward(relu(fc1.forward(v, tape), tape), tape); };
  Tensor channel_gate = reshape(sigmoid(add(mlp(avg), mlp(mx), tape), tape), {n, c, 1, 1}, tape);
  Tensor out = mul(y, channel_gate, tape);

  if (ctx.mode == Mode::train && ctx.sca_dropout > 0.0f) {
    if (!ctx.rng) throw ValidationError("SCA: dropout in train mode needs a random generator");
    out = dropout(out, ctx.sca_dropout, *ctx.rng, Mode::train, tape);
  }
  return SCAResult{std::move(out), std::move(spatial_gate), std::move(channel_gate)};
}

void SpatialChannelAttention::collect(const std::string& prefix, ParamList& out) {
  spatial.collect(prefix + ".spatial", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

GlobalConvModule GlobalConvModule::create(std::int64_t channels, std::int64_t height, std::int64_t width,
                                          std::int64_t out_channels, std::mt19937_64& rng, bool norm_act) {
  GlobalConvModule g;
  g.channels = channels;
  g.height = height;
  g.width = width;
  g.row = Conv2d::create(ConvSpec{1, width, channels, channels, 1, 1, 0, 0, channels}, false, rng);
  g.col = Conv2d::create(ConvSpec{height, 1, channels, channels, 1, 1, 0, 0, channels}, false, rng);
  // Start at the averaging point. Fan-in init on both collapsing stages blows
  // up the feature scale and kills the ReLU heads early in training.
  std::fill(g.row.weight.data().begin(), g.row.weight.data().end(), 1.0f / static_cast<float>(width));
  std::fill(g.col.weight.data().begin(), g.col.weight.data().end(), 1.0f / static_cast<float>(height));
  g.pointwise = Conv2d::create(ConvSpec::standard(1, 1, channels, out_channels), false, rng);
  g.norm_act = norm_act;
  if (norm_act) g.bn = BatchNorm2d::create(out_channels);
  return g;
}

Tensor GlobalConvModule::forward(const Tensor& x, const ForwardContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != channels || x.dim(2) != height || x.dim(3) != width) {
    throw ShapeError("GCM: input " + shape_to_string(x.shape()) + " does not match [N, " +
                     std::to_string(channels) + ", " + std::to_string(height) + ", " +
                     std::to_string(width) + "]");
  }
  Tensor h = pointwise.forward(col.forward(row.forward(x, ctx.tape), ctx.tape), ctx.tape);
  if (!norm_act) return h;
  return hswish(bn.forward(h, ctx), ctx.tape);
}

void GlobalConvModule::collect(const std::string& prefix, ParamList& out) {
  row.collect(prefix + ".row", out);
  col.collect(prefix + ".col", out);
  pointwise.collect(prefix + ".pointwise", out);
  if (norm_act) bn.collect(prefix + ".bn", out);
}

MRMHeads MRMHeads::create(std::int64_t features, std::int64_t hidden, std::mt19937_64& rng,
                          bool joint_only, float a1, float b1) {
  MRMHeads m;
  m.joint_only = joint_only;
  m.a1 = a1;
  m.b1 = b1;
  if (!joint_only) {
    m.yaw_hidden = Linear::create(features, hidden, rng);
    m.yaw_out = Linear::create(hidden, 1, rng);
  }
  m.joint_hidden = Linear::create(features, hidden, rng);
  m.joint_out = Linear::create(hidden, 2, rng);
  if (!joint_only) {
    m.pitch_hidden = Linear::create(features, hidden, rng);
    m.pitch_out = Linear::create(hidden, 1, rng);
  }
  return m;
}

Tensor MRMHeads::fuse(const Tensor& single_heads, const Tensor& joint, float a1, float b1, GradTape* tape) {
  return add(scale(single_heads, a1, tape), scale(joint, b1, tape), tape);
}

MRMOutput MRMHeads::forward(const Tensor& f, GradTape* tape) const {
  if (f.rank() != 2 || f.dim(1) != features()) {
    throw ShapeError("MRM: feature " + shape_to_string(f.shape()) + " does not have width " +
                     std::to_string(features()));
  }
  Tensor joint = joint_out.forward(relu(joint_hidden.forward(f, tape), tape), tape);
  if (joint_only) {
    Tensor yaw = slice_columns(joint, 0, 1, tape);
    Tensor pitch = slice_columns(joint, 1, 2, tape);
    Tensor fused = scale(joint, 1.0f, tape);
    return MRMOutput{std::move(fused), std::move(yaw), std::move(pitch), std::move(joint)};
  }
  Tensor yaw = yaw_out.forward(relu(yaw_hidden.forward(f, tape), tape), tape);
  Tensor pitch = pitch_out.forward(relu(pitch_hidden.forward(f, tape), tape), tape);
  Tensor fused = fuse(concat_channels(yaw, pitch, tape), joint, a1, b1, tape);
  return MRMOutput{std::move(fused), std::move(yaw), std::move(pitch), std::move(joint)};
}

void MRMHeads::collect(const std::string& prefix, ParamList& out) {
  if (!joint_only) {
    yaw_hidden.collect(prefix + ".yaw.fc1", out);
    yaw_out.collect(prefix + ".yaw.fc2", out);
  }
  joint_hidden.collect(prefix + ".joint.fc1", out);
  joint_out.collect(prefix + ".joint.fc2", out);
  if (!joint_only) {
    pitch_hidden.collect(prefix + ".pitch.fc1", out);
    pitch_out.collect(prefix + ".pitch.fc2", out);
  }
}

std::int64_t count_elements(const ParamList& params, bool trainable_only) {
  std::int64_t total = 0;
  for (const auto& p : params) {
    if (!trainable_only || p.trainable) total += p.tensor->numel();
  }
  return total;
}

}  // namespace mtgaze
