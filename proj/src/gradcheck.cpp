#include "mtgaze/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mtgaze/blocks.hpp"
#include "mtgaze/errors.hpp"
#include "mtgaze/gaze_math.hpp"

namespace mtgaze {

namespace {

double weighted_sum(const Tensor& out, const Tensor& r) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    acc += static_cast<double>(out[static_cast<std::size_t>(i)]) * r[static_cast<std::size_t>(i)];
  }
  return acc;
}

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, float stddev = 1.0f) {
  std::normal_distribution<float> d(0.0f, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Randomizes every parameter so zero-initialized biases and unit gammas do
// not hide mistakes.
void jitter(ParamList params, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 0.5f);
  for (auto& p : params) {
    if (!p.trainable) continue;
    for (auto& v : p.tensor->data()) v += d(rng);
  }
}

void add_params(GradcheckCase& c, const ParamList& params) {
  for (const auto& p : params) {
    if (p.trainable) c.probes.emplace_back(p.name, p.tensor);
  }
}

}  // namespace

GradcheckResult check_case(GradcheckCase& c, std::uint64_t seed, const GradcheckOptions& opt) {
  GradcheckResult res;
  res.name = c.name;
  std::mt19937_64 rng(seed);

  GradTape tape;
  const Tensor out = c.forward(&tape);
  const Tensor r = normal_tensor(out.shape(), rng);
  const Gradients grads = backward(tape, out, r);

  std::vector<Tensor> analytic;
  double sq = 0.0;
  std::int64_t count = 0;
  for (const auto& [name, t] : c.probes) {
    analytic.push_back(grads.of(*t));
    for (float g : analytic.back().data()) sq += static_cast<double>(g) * g;
    count += t->numel();
  }
  const double floor = count > 0 ? opt.floor_fraction * std::sqrt(sq / static_cast<double>(count)) : 0.0;

  auto eval = [&](std::uint64_t& digest) {
    BranchTrace trace;
    const double v = weighted_sum(c.forward(nullptr), r);
    digest = trace.digest();
    return v;
  };
  std::uint64_t base_digest = 0;
  eval(base_digest);
  // Central difference of entry i with step h; false if it straddles a kink.
  auto central = [&](Tensor& t, std::size_t i, double h, double& slope) {
    const float orig = t[i];
    std::uint64_t up_digest = 0, down_digest = 0;
    // Steps actually taken after rounding to float.
    t[i] = static_cast<float>(orig + h);
    const double step_up = static_cast<double>(t[i]) - orig;
    const double plus = eval(up_digest);
    t[i] = static_cast<float>(orig - h);
    const double step_down = orig - static_cast<double>(t[i]);
    const double minus = eval(down_digest);
    t[i] = orig;
    slope = (plus - minus) / (step_up + step_down);
    return up_digest == base_digest && down_digest == base_digest;
  };
  for (std::size_t pi = 0; pi < c.probes.size(); ++pi) {
    Tensor& t = *c.probes[pi].second;
    const std::string& tname = c.probes[pi].first;
    const auto n = static_cast<std::size_t>(t.numel());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > static_cast<std::size_t>(opt.probes_per_tensor)) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(opt.probes_per_tensor); ++i) {
        std::swap(idx[i], idx[i + static_cast<std::size_t>(rng() % (n - i))]);
      }
      idx.resize(static_cast<std::size_t>(opt.probes_per_tensor));
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    int used = 0;
    for (std::size_t i : idx) {
      double wide = 0.0, narrow = 0.0;
      if (!central(t, i, opt.eps, wide) || (opt.richardson && !central(t, i, 0.5 * opt.eps, narrow))) {
        ++res.kinks_skipped;
        continue;
      }
      // Richardson: cancels the eps^2 term of the central difference.
      const double numeric = opt.richardson ? (4.0 * narrow - wide) / 3.0 : wide;
      const double a = analytic[pi][i];
      ++res.probes;
      ++used;
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      const double denom = std::max(std::fabs(a), std::fabs(numeric));
      const double entry = denom > 0.0 ? std::fabs(a - numeric) / denom : 0.0;
      if (entry >= res.worst_entry_rel_error) {
        res.worst_entry_rel_error = entry;
        res.worst_entry = tname + "[" + std::to_string(i) + "]";
      }
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), floor * std::sqrt(static_cast<double>(used)));
    const double rel = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    if (rel >= res.worst_rel_error) {
      res.worst_rel_error = rel;
      res.worst_tensor = tname;
    }
  }
  return res;
}

std::vector<GradcheckCase> standard_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckCase> cases;

  {
    struct S {
      Tensor x, w, b, xd, wd;
      ConvSpec spec{3, 3, 4, 6, 2, 1, 1, 1, 2};
      ConvSpec dw = ConvSpec::depthwise_spec(5, 5, 3);
    };
    auto s = std::make_shared<S>();
    s->x = normal_tensor({2, 4, 7, 6}, rng);
    s->w = normal_tensor(s->spec.weight_shape(), rng);
    s->b = normal_tensor({6}, rng);
    s->xd = normal_tensor({2, 3, 6, 6}, rng);
    s->wd = normal_tensor(s->dw.weight_shape(), rng);
    GradcheckCase c{"conv2d", nullptr, {{"input", &s->x}, {"weight", &s->w}, {"bias", &s->b}, {"dw_input", &s->xd}, {"dw_weight", &s->wd}}, s};
    S* p = s.get();
    c.forward = [p](GradTape* tape) {
      const Tensor a = conv2d(p->x, p->w, &p->b, p->spec, tape);
      const Tensor b = conv2d(p->xd, p->wd, nullptr, p->dw, tape);
      return concat_channels(reshape(a, {1, a.numel()}, tape), reshape(b, {1, b.numel()}, tape), tape);
    };
    cases.push_back(std::move(c));
  }
  {
    struct S {
      Tensor x, w, b;
    };
    auto s = std::make_shared<S>();
    s->x = normal_tensor({3, 5}, rng);
    s->w = normal_tensor({4, 5}, rng);
    s->b = normal_tensor({4}, rng);
    S* p = s.get();
    cases.push_back({"dense", [p](GradTape* tape) { return dense(p->x, p->w, p->b, tape); },
                     {{"input", &s->x}, {"weight", &s->w}, {"bias", &s->b}}, s});
  }
  {
    struct S {
      Tensor x;
    };
    auto s = std::make_shared<S>();
    s->x = normal_tensor({4, 16}, rng, 2.0f);
    S* p = s.get();
    cases.push_back({"activations",
                     [p](GradTape* tape) {
                       const Tensor a = concat_channels(relu(p->x, tape), hswish(p->x, tape), tape);
                       return concat_channels(a, sigmoid(p->x, tape), tape);
                     },
                     {{"input", &s->x}}, s});
  }
  {
    struct S {
      Tensor x;
      BatchNormParams bn = BatchNormParams::identity(3);
    };
    auto s = std::make_shared<S>();
    s->x = normal_tensor({4, 3, 3, 3}, rng);
    s->bn.gamma = normal_tensor({3}, rng);
    s->bn.beta = normal_tensor({3}, rng);
    S* p = s.get();
    cases.push_back({"batchnorm",
                     [p](GradTape* tape) {
                       const Tensor t = batchnorm(p->x, p->bn, Mode::train, tape, false);
                       const Tensor i = batchnorm(p->x, p->bn, Mode::infer, tape, false);
                       return concat_channels(t, i, tape);
                     },
                     {{"input", &s->x}, {"gamma", &s->bn.gamma}, {"beta", &s->bn.beta}}, s});
  }
  {
    struct S {
      Tensor x;
    };
    auto s = std::make_shared<S>();
    s->x = normal_tensor({2, 3, 6, 6}, rng);
    S* p = s.get();
    cases.push_back({"pool2d",
                     [p](GradTape* tape) {
                       const Tensor a = pool2d(p->x, PoolKind::avg, 3, 3, 2, 2, tape);
                       const Tensor m = pool2d(p->x, PoolKind::max, 2, 2, 2, 2, tape);
                       const Tensor g = global_pool(p->x, PoolKind::max, tape);
                       const Tensor flat = concat_channels(reshape(a, {1, a.numel()}, tape),
                                                           reshape(m, {1, m.numel()}, tape), tape);
                       return concat_channels(flat, reshape(g, {1, 6}, tape), tape);
                     },
                     {{"input", &s->x}}, s});
  }
  {
    struct S {
      Tensor x;
      UnidirectionalConv uc;
    };
    auto s = std::make_shared<S>();
    s->uc = UnidirectionalConv::create(UCSpec{5, 4, 2, 2}, rng);
    s->x = normal_tensor({2, 4, 9, 9}, rng);
    ParamList params;
    s->uc.collect("uc", params);
    GradcheckCase c{"uc", nullptr, {{"input", &s->x}}, s};
    add_params(c, params);
    S* p = s.get();
    c.forward = [p](GradTape* tape) { return p->uc.forward(p->x, tape); };
    cases.push_back(std::move(c));
  }
  {
    struct S {
      Tensor x;
      Bneck block;
    };
    auto s = std::make_shared<S>();
    s->block = Bneck::create(BneckSpec{6, 12, 6, 5, 1, true, Activation::hswish}, rng);
    s->x = normal_tensor({2, 6, 5, 5}, rng);
    ParamList params;
    s->block.collect("bneck", params);
    jitter(params, rng);
    GradcheckCase c{"bneck", nullptr, {{"input", &s->x}}, s};
    add_params(c, params);
    S* p = s.get();
    c.forward = [p](GradTape* tape) {
      ForwardContext ctx;
      ctx.mode = Mode::train;
      ctx.tape = tape;
      ctx.update_running_stats = false;
      return p->block.forward(p->x, ctx);
    };
    cases.push_back(std::move(c));
  }
  {
    struct S {
      Tensor x;
      SpatialChannelAttention sca;
    };
    auto s = std::make_shared<S>();
    s->sca = SpatialChannelAttention::create(SCASpec{8, 4, 4}, rng);
    s->x = normal_tensor({2, 8, 7, 7}, rng);
    // Per-channel offsets, as after a batchnorm with nonzero beta. Zero-mean
    // channels pool to near-zero descriptors and starve fc1 of gradient.
    {
      std::normal_distribution<float> d(0.0f, 1.0f);
      for (std::int64_t ch = 0; ch < 8; ++ch) {
        const float off = d(rng);
        for (std::int64_t b = 0; b < 2; ++b)
          for (std::int64_t i = 0; i < 49; ++i) s->x[static_cast<std::size_t>((b * 8 + ch) * 49 + i)] += off;
      }
    }
    ParamList params;
    s->sca.collect("sca", params);
    jitter(params, rng);
    GradcheckCase c{"sca", nullptr, {{"input", &s->x}}, s};
    add_params(c, params);
    S* p = s.get();
    const std::uint64_t mask_seed = rng();
    c.forward = [p, mask_seed](GradTape* tape) {
      std::mt19937_64 mask_rng(mask_seed);  // identical dropout mask every call
      ForwardContext ctx;
      ctx.mode = Mode::train;
      ctx.tape = tape;
      ctx.rng = &mask_rng;
      ctx.sca_dropout = 0.1f;
      return p->sca.forward(p->x, ctx).output;
    };
    cases.push_back(std::move(c));
  }
  {
    struct S {
      Tensor x;
      GlobalConvModule gcm;
    };
    auto s = std::make_shared<S>();
    s->gcm = GlobalConvModule::create(6, 5, 4, 5, rng, true);
    s->x = normal_tensor({5, 6, 5, 4}, rng);
    ParamList params;
    s->gcm.collect("gcm", params);
    jitter(params, rng);
    GradcheckCase c{"gcm", nullptr, {{"input", &s->x}}, s};
    add_params(c, params);
    S* p = s.get();
    c.forward = [p](GradTape* tape) {
      ForwardContext ctx;
      ctx.mode = Mode::train;
      ctx.tape = tape;
      ctx.update_running_stats = false;
      return p->gcm.forward(p->x, ctx);
    };
    cases.push_back(std::move(c));
  }
  {
    struct S {
      Tensor f;
      MRMHeads heads;
    };
    auto s = std::make_shared<S>();
    s->heads = MRMHeads::create(12, 6, rng);
    s->f = normal_tensor({3, 12}, rng);
    ParamList params;
    s->heads.collect("mrm", params);
    jitter(params, rng);
    GradcheckCase c{"mrm", nullptr, {{"features", &s->f}}, s};
    add_params(c, params);
    S* p = s.get();
    c.forward = [p](GradTape* tape) {
      const MRMOutput o = p->heads.forward(p->f, tape);
      const Tensor a = concat_channels(o.fused, o.joint, tape);
      return concat_channels(a, concat_channels(o.yaw, o.pitch, tape), tape);
    };
    cases.push_back(std::move(c));
  }
  {
    struct S {
      Tensor fused, yaw, pitch, joint, target;
    };
    auto s = std::make_shared<S>();
    s->fused = normal_tensor({4, 2}, rng);
    s->yaw = normal_tensor({4, 1}, rng);
    s->pitch = normal_tensor({4, 1}, rng);
    s->joint = normal_tensor({4, 2}, rng);
    s->target = normal_tensor({4, 2}, rng);
    S* p = s.get();
    cases.push_back({"loss",
                     [p](GradTape* tape) {
                       return multitask_loss(p->fused, p->yaw, p->pitch, p->joint, p->target, {}, tape).total;
                     },
                     {{"yaw_head", &s->yaw}, {"pitch_head", &s->pitch}, {"joint_head", &s->joint}}, s});
  }
  return cases;
}

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, const GradcheckOptions& opt) {
  std::vector<GradcheckResult> out;
  auto cases = standard_cases(seed);
  std::uint64_t k = 0;
  for (auto& c : cases) out.push_back(check_case(c, seed * 1000003ULL + (++k), opt));
  return out;
}

}  // namespace mtgaze
