#include "mtgaze/cost.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "mtgaze/errors.hpp"

namespace mtgaze {

LayerCost count_conv(const ConvSpec& spec, std::int64_t h_out, std::int64_t w_out, bool bias) {
  spec.validate();
  if (h_out < 1 || w_out < 1) throw ValidationError("count_conv: output extents must be positive");
  const std::int64_t weights = spec.k_h * spec.k_w * (spec.c_in / spec.groups) * spec.c_out;
  return LayerCost{weights + (bias ? spec.c_out : 0), weights * h_out * w_out};
}

FactorizationCost compare_factorized(const ConvSpec& spec, std::int64_t h_out, std::int64_t w_out) {
  FactorizationCost f;
  f.standard = count_conv(spec, h_out, w_out);
  ConvSpec row = spec;
  row.k_h = 1;
  ConvSpec col = spec;
  col.k_w = 1;
  const LayerCost a = count_conv(row, h_out, w_out);
  const LayerCost b = count_conv(col, h_out, w_out);
  f.factorized = LayerCost{a.params + b.params, a.macs + b.macs};
  f.param_reduction = 1.0 - static_cast<double>(f.factorized.params) / static_cast<double>(f.standard.params);
  f.mac_reduction = 1.0 - static_cast<double>(f.factorized.macs) / static_cast<double>(f.standard.macs);
  return f;
}

namespace {

struct InstrumentVisitor {
  std::int64_t operator()(const ConvOp& op) const {
    const ConvSpec& s = op.spec;
    s.validate();
    const std::int64_t h_out = s.out_h(op.height), w_out = s.out_w(op.width);
    if (h_out < 1 || w_out < 1) throw ValidationError("instrumented_macs: conv output would be empty");
    const std::int64_t cig = s.c_in / s.groups, cog = s.c_out / s.groups;
    // Synthetic operands; the values only need to be well defined.
    auto input = [&](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) -> float {
      if (h < 0 || h >= op.height || w < 0 || w >= op.width) return 0.0f;
      return static_cast<float>((n + 3 * c + 5 * h + 7 * w) % 11) * 0.125f;
    };
    std::int64_t counter = 0;
    volatile float sink = 0.0f;
    for (std::int64_t n = 0; n < op.batch; ++n)
      for (std::int64_t oc = 0; oc < s.c_out; ++oc) {
        const std::int64_t g = oc / cog;
        for (std::int64_t oh = 0; oh < h_out; ++oh)
          for (std::int64_t ow = 0; ow < w_out; ++ow) {
            float acc = op.bias ? 0.5f : 0.0f;
            for (std::int64_t ic = 0; ic < cig; ++ic)
              for (std::int64_t kh = 0; kh < s.k_h; ++kh)
                for (std::int64_t kw = 0; kw < s.k_w; ++kw) {
                  const float wv = static_cast<float>((oc + ic + kh + kw) % 5) * 0.25f;
                  acc += wv * input(n, g * cig + ic, oh * s.stride_h + kh - s.pad_h, ow * s.stride_w + kw - s.pad_w);
                  ++counter;
                }
            sink = sink + acc;
          }
      }
    (void)sink;
    return counter;
  }

  std::int64_t operator()(const DenseOp& op) const {
    if (op.in < 1 || op.out < 1 || op.batch < 1) throw ValidationError("instrumented_macs: dense extents must be positive");
    std::int64_t counter = 0;
    volatile float sink = 0.0f;
    for (std::int64_t n = 0; n < op.batch; ++n)
      for (std::int64_t o = 0; o < op.out; ++o) {
        float acc = 0.0f;
        for (std::int64_t i = 0; i < op.in; ++i) {
          acc += static_cast<float>((o + i) % 7) * static_cast<float>((n + i) % 3);
          ++counter;
        }
        sink = sink + acc;
      }
    (void)sink;
    return counter;
  }

  std::int64_t operator()(const PoolOp&) const {
    throw ValidationError("instrumented_macs: pooling is not a multiply-accumulate op");
  }
};

}  // namespace

std::int64_t instrumented_macs(const OpDescription& op) { return std::visit(InstrumentVisitor{}, op); }

std::int64_t CostReport::total_params() const {
  std::int64_t t = 0;
  for (const auto& r : rows) t += r.params;
  return t;
}

std::int64_t CostReport::total_macs() const {
  std::int64_t t = 0;
  for (const auto& r : rows) t += r.macs;
  return t;
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "name,params,macs\n";
  for (const auto& r : rows) os << r.name << ',' << r.params << ',' << r.macs << '\n';
  os << "TOTAL," << total_params() << ',' << total_macs() << '\n';
  return os.str();
}

namespace {

class ModelCounter {
 public:
  void conv(const std::string& name, const ConvSpec& spec, std::int64_t batch, std::int64_t h, std::int64_t w,
            bool bias, std::int64_t repeats = 1) {
    const LayerCost c = count_conv(spec, spec.out_h(h), spec.out_w(w), bias);
    report_.rows.push_back(
        CostRow{name, c.params, c.macs * batch * repeats, ConvOp{spec, batch, h, w, bias}, repeats});
  }
  void dense(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t repeats = 1) {
    report_.rows.push_back(CostRow{name, in * out + out, in * out * repeats, DenseOp{in, out, 1}, repeats});
  }
  void batchnorm(const std::string& name, std::int64_t channels) {
    report_.rows.push_back(CostRow{name, 2 * channels, 0, std::nullopt, 1});
  }
  CostReport take() { return std::move(report_); }

 private:
  CostReport report_;
};

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

CostReport count_model(const ModelConfig& config) {
  config.validate();
  ModelCounter m;
  std::int64_t hw = config.input_hw;
  const ConvSpec stem = ConvSpec::standard(3, 3, 3, config.stem_channels, 2);
  m.conv("stem.conv", stem, 1, hw, hw, false);
  m.batchnorm("stem.bn", config.stem_channels);
  hw = stem.out_h(hw);
  std::int64_t channels = config.stem_channels;
  for (std::size_t i = 0; i < config.bnecks.size(); ++i) {
    const BneckSpec b = config.bnecks[i].spec();
    const std::string p = "bneck." + std::to_string(i + 1);
    if (b.has_expansion()) {
      m.conv(p + ".expand.conv", ConvSpec::standard(1, 1, b.c_in, b.c_exp), 1, hw, hw, false);
      m.batchnorm(p + ".expand.bn", b.c_exp);
    }
    const UCSpec uc = b.uc();
    const ConvSpec row = uc.row_spec(), col = uc.col_spec();
    m.conv(p + ".uc.row", row, 1, hw, hw, false);
    const std::int64_t w1 = row.out_w(hw);
    m.conv(p + ".uc.col", col, 1, hw, w1, false);
    const std::int64_t h2 = col.out_h(hw);
    m.batchnorm(p + ".uc.bn", b.c_exp);
    if (b.use_se) {
      const std::int64_t sq = squeeze_channels(b.c_exp);
      m.dense(p + ".se.fc1", b.c_exp, sq);
      m.dense(p + ".se.fc2", sq, b.c_exp);
    }
    hw = h2;
    m.conv(p + ".project.conv", ConvSpec::standard(1, 1, b.c_exp, b.c_out), 1, hw, hw, false);
    m.batchnorm(p + ".project.bn", b.c_out);
    channels = b.c_out;
    if (config.has_sca_after(static_cast<std::int64_t>(i + 1))) {
      const std::string s = "sca." + std::to_string(i + 1);
      const SCASpec spec{channels, sca_window_at(config, hw), config.sca_reduction};
      const std::int64_t tiles = ceil_div(hw, spec.window) * ceil_div(hw, spec.window);
      // plain and shifted passes
      m.conv(s + ".spatial", ConvSpec::standard(kSpatialGateKernel, kSpatialGateKernel, 2, 1), tiles,
             spec.window, spec.window, true, 2);
      // avg- and max-pooled descriptors share the MLP
      m.dense(s + ".fc1", channels, spec.hidden(), 2);
      m.dense(s + ".fc2", spec.hidden(), channels, 2);
    }
  }
  m.conv("head.conv", ConvSpec::standard(1, 1, channels, config.feature_width), 1, hw, hw, false);
  m.batchnorm("head.bn", config.feature_width);
  const std::int64_t fw = config.feature_width;
  if (!config.ablated(Ablation::gcm)) {
    m.conv("gcm.row", ConvSpec{1, hw, fw, fw, 1, 1, 0, 0, fw}, 1, hw, hw, false);
    m.conv("gcm.col", ConvSpec{hw, 1, fw, fw, 1, 1, 0, 0, fw}, 1, hw, 1, false);
    m.conv("gcm.pointwise", ConvSpec::standard(1, 1, fw, fw), 1, 1, 1, false);
    if (config.gcm_norm_act) m.batchnorm("gcm.bn", fw);
  }
  const std::int64_t hid = config.mrm_hidden;
  if (!config.ablated(Ablation::mrm)) {
    m.dense("mrm.yaw.fc1", fw, hid);
    m.dense("mrm.yaw.fc2", hid, 1);
  }
  m.dense("mrm.joint.fc1", fw, hid);
  m.dense("mrm.joint.fc2", hid, 2);
  if (!config.ablated(Ablation::mrm)) {
    m.dense("mrm.pitch.fc1", fw, hid);
    m.dense("mrm.pitch.fc2", hid, 1);
  }
  return m.take();
}

std::vector<RFRow> theoretical_rf(std::span<const RFLayer> layers) {
  std::vector<RFRow> rows;
  std::int64_t rf_h = 1, rf_w = 1, jump_h = 1, jump_w = 1, start_h = 0, start_w = 0;
  for (const auto& l : layers) {
    if (l.k_h < 1 || l.k_w < 1 || l.stride_h < 1 || l.stride_w < 1) {
      throw ValidationError("theoretical_rf: layer '" + l.name + "' has non-positive kernel or stride");
    }
    rf_h += (l.k_h - 1) * jump_h;
    rf_w += (l.k_w - 1) * jump_w;
    start_h -= l.pad_h * jump_h;
    start_w -= l.pad_w * jump_w;
    jump_h *= l.stride_h;
    jump_w *= l.stride_w;
    rows.push_back(RFRow{l.name, rf_h, rf_w, jump_h, jump_w, start_h, start_w});
  }
  return rows;
}

std::vector<RFLayer> ConvStack::rf_layers() const {
  std::vector<RFLayer> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    out.push_back(RFLayer{"layer." + std::to_string(i + 1) + " " + std::to_string(s.k_h) + "x" + std::to_string(s.k_w),
                          s.k_h, s.k_w, s.stride_h, s.stride_w, s.pad_h, s.pad_w});
  }
  return out;
}

namespace {

ConvSpec stack_layer(std::int64_t k_h, std::int64_t k_w, std::int64_t stride, std::int64_t channels) {
  return ConvSpec{k_h, k_w, channels, channels, stride, stride, (k_h - 1) / 2, (k_w - 1) / 2, 1};
}

std::int64_t parse_positive(std::string_view s, std::string_view token) {
  if (s.empty()) throw ValidationError("stack item '" + std::string(token) + "' is malformed");
  std::int64_t v = 0;
  for (char ch : s) {
    if (ch < '0' || ch > '9') throw ValidationError("stack item '" + std::string(token) + "' is malformed");
    v = v * 10 + (ch - '0');
    if (v > 4096) throw ValidationError("stack item '" + std::string(token) + "' is out of range");
  }
  if (v < 1) throw ValidationError("stack item '" + std::string(token) + "' must be positive");
  return v;
}

}  // namespace

ConvStack make_stack(std::string_view token, std::int64_t channels) {
  if (channels < 1) throw ValidationError("stack channels must be positive");
  ConvStack st;
  st.name = std::string(token);
  auto repeat = [&](int n, auto&& add) {
    for (int i = 0; i < n; ++i) add();
  };
  auto uc = [&](std::int64_t k) {
    st.layers.push_back(stack_layer(1, k, 1, channels));
    st.layers.push_back(stack_layer(k, 1, 1, channels));
  };
  if (token == "std5x3") {
    repeat(3, [&] { st.layers.push_back(stack_layer(5, 5, 1, channels)); });
  } else if (token == "std5x4") {
    repeat(4, [&] { st.layers.push_back(stack_layer(5, 5, 1, channels)); });
  } else if (token == "uc5x3") {
    repeat(3, [&] { uc(5); });
  } else if (token == "uc7x3") {
    repeat(3, [&] { uc(7); });
  } else {
    std::size_t pos = 0;
    while (pos < token.size()) {
      std::size_t comma = token.find(',', pos);
      if (comma == std::string_view::npos) comma = token.size();
      const std::string_view item = token.substr(pos, comma - pos);
      pos = comma + 1;
      if (item.rfind("uc", 0) == 0) {
        const std::int64_t k = parse_positive(item.substr(2), item);
        if (k % 2 == 0) throw ValidationError("stack item '" + std::string(item) + "' needs an odd kernel");
        uc(k);
        continue;
      }
      const std::size_t x = item.find('x');
      if (x == std::string_view::npos) {
        throw ValidationError("unknown stack token '" + std::string(token) +
                              "' (expected std5x3, uc5x3, uc7x3, std5x4 or a list like 5x5,1x7,7x1,3x3s2)");
      }
      const std::size_t s = item.find('s', x);
      const std::int64_t kh = parse_positive(item.substr(0, x), item);
      const std::int64_t kw = parse_positive(item.substr(x + 1, s == std::string_view::npos ? item.npos : s - x - 1), item);
      const std::int64_t stride = s == std::string_view::npos ? 1 : parse_positive(item.substr(s + 1), item);
      st.layers.push_back(stack_layer(kh, kw, stride, channels));
    }
    if (st.layers.empty()) throw ValidationError("stack '" + std::string(token) + "' has no layers");
  }
  return st;
}

std::vector<Tensor> random_stack_weights(const ConvStack& stack, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> weights;
  for (const auto& s : stack.layers) {
    weights.push_back(fan_in_uniform(s.weight_shape(), (s.c_in / s.groups) * s.k_h * s.k_w, rng));
  }
  return weights;
}

namespace {

std::pair<std::int64_t, std::int64_t> stack_output_extent(const ConvStack& stack, std::int64_t extent) {
  std::int64_t h = extent, w = extent;
  for (const auto& s : stack.layers) {
    h = s.out_h(h);
    w = s.out_w(w);
    if (h < 1 || w < 1) throw ValidationError("stack output would be empty for input extent " + std::to_string(extent));
  }
  return {h, w};
}

}  // namespace

Box theoretical_box(const ConvStack& stack, std::int64_t extent) {
  const auto layers = stack.rf_layers();
  const auto rows = theoretical_rf(layers);
  const auto [h_out, w_out] = stack_output_extent(stack, extent);
  std::int64_t rf_h = 1, rf_w = 1, jump_h = 1, jump_w = 1, start_h = 0, start_w = 0;
  if (!rows.empty()) {
    rf_h = rows.back().rf_h;
    rf_w = rows.back().rf_w;
    jump_h = rows.back().jump_h;
    jump_w = rows.back().jump_w;
    start_h = rows.back().start_h;
    start_w = rows.back().start_w;
  }
  const std::int64_t top = (h_out / 2) * jump_h + start_h;
  const std::int64_t left = (w_out / 2) * jump_w + start_w;
  const std::int64_t t = std::max<std::int64_t>(0, top), l = std::max<std::int64_t>(0, left);
  const std::int64_t b = std::min(extent, top + rf_h), r = std::min(extent, left + rf_w);
  return Box{t, l, std::max<std::int64_t>(0, b - t), std::max<std::int64_t>(0, r - l)};
}

Box support_box(const Heatmap& map) {
  std::int64_t top = map.height, left = map.width, bottom = -1, right = -1;
  for (std::int64_t i = 0; i < map.height; ++i)
    for (std::int64_t j = 0; j < map.width; ++j)
      if (map.at(i, j) != 0.0f) {
        top = std::min(top, i);
        left = std::min(left, j);
        bottom = std::max(bottom, i);
        right = std::max(right, j);
      }
  if (bottom < 0) return Box{};
  return Box{top, left, bottom - top + 1, right - left + 1};
}

std::int64_t nonzero_count(const Heatmap& map) {
  std::int64_t n = 0;
  for (float v : map.values) n += v != 0.0f;
  return n;
}

Heatmap effective_rf(const ConvStack& stack, const std::vector<Tensor>& weights, std::int64_t extent, int draws,
                     std::uint64_t seed) {
  if (weights.size() != stack.layers.size()) {
    throw ValidationError("effective_rf: " + std::to_string(weights.size()) + " weight tensors for " +
                          std::to_string(stack.layers.size()) + " layers");
  }
  if (draws < 1) throw ValidationError("effective_rf: draws must be positive");
  const auto layers = stack.rf_layers();
  const auto rows = theoretical_rf(layers);
  if (!rows.empty() && (extent < rows.back().rf_h || extent < rows.back().rf_w)) {
    throw ValidationError("effective_rf: input extent " + std::to_string(extent) + " is smaller than the receptive field " +
                          std::to_string(rows.back().rf_h) + "x" + std::to_string(rows.back().rf_w));
  }
  const auto [h_out, w_out] = stack_output_extent(stack, extent);
  const std::int64_t c = stack.channels();
  std::vector<double> acc(static_cast<std::size_t>(extent * extent), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (int d = 0; d < draws; ++d) {
    Tensor input({1, c, extent, extent});
    for (auto& v : input.data()) v = normal(rng);
    GradTape tape;
    Tensor x = scale(input, 1.0f, &tape);
    for (std::size_t l = 0; l < stack.layers.size(); ++l) x = conv2d(x, weights[l], nullptr, stack.layers[l], &tape);
    Tensor m = channel_mean(x, &tape);
    Tensor seed_grad(m.shape());
    seed_grad.at(0, 0, h_out / 2, w_out / 2) = 1.0f;
    const Gradients grads = backward(tape, m, seed_grad);
    const Tensor g = grads.of(input);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < extent; ++i)
        for (std::int64_t j = 0; j < extent; ++j)
          acc[static_cast<std::size_t>(i * extent + j)] += std::fabs(g.at(0, ch, i, j));
  }
  Heatmap map;
  map.height = extent;
  map.width = extent;
  double peak = 0.0;
  for (double v : acc) peak = std::max(peak, v);
  map.values.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) map.values[i] = peak > 0.0 ? static_cast<float>(acc[i] / peak) : 0.0f;
  return map;
}

void write_pgm(const std::filesystem::path& path, const Heatmap& map, PgmEncoding encoding, int bits) {
  if (bits != 8 && bits != 16) throw ValidationError("PGM depth must be 8 or 16 bits");
  const int maxval = bits == 8 ? 255 : 65535;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << (encoding == PgmEncoding::ascii ? "P2" : "P5") << '\n'
      << map.width << ' ' << map.height << '\n'
      << maxval << '\n';
  for (std::int64_t i = 0; i < map.height; ++i) {
    for (std::int64_t j = 0; j < map.width; ++j) {
      const float v = std::clamp(map.at(i, j), 0.0f, 1.0f);
      const auto q = static_cast<unsigned>(std::lround(v * static_cast<float>(maxval)));
      if (encoding == PgmEncoding::ascii) {
        out << q << (j + 1 == map.width ? '\n' : ' ');
      } else if (bits == 8) {
        out.put(static_cast<char>(q));
      } else {
        out.put(static_cast<char>(q >> 8));
        out.put(static_cast<char>(q & 0xff));
      }
    }
  }
  if (!out) throw ValidationError("failed writing " + path.string());
}

std::string heatmap_csv(const Heatmap& map) {
  std::ostringstream os;
  char buf[32];
  for (std::int64_t i = 0; i < map.height; ++i) {
    for (std::int64_t j = 0; j < map.width; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(map.at(i, j)));
      os << buf << (j + 1 == map.width ? '\n' : ',');
    }
  }
  return os.str();
}

}  // namespace mtgaze
