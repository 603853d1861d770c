#include "mtgaze/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "mtgaze/errors.hpp"

namespace mtgaze {

using json = nlohmann::json;

std::set<Ablation> parse_ablations(std::string_view text) {
  std::set<Ablation> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    std::string token(text.substr(pos, comma - pos));
    pos = comma + 1;
    if (token.empty()) continue;
    for (auto& ch : token) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (token == "sca") {
      out.insert(Ablation::sca);
    } else if (token == "gcm") {
      out.insert(Ablation::gcm);
    } else if (token == "mrm") {
      out.insert(Ablation::mrm);
    } else if (token == "all") {
      out = {Ablation::sca, Ablation::gcm, Ablation::mrm};
    } else {
      throw ValidationError("unknown ablation '" + token + "' (expected sca, gcm, mrm, all)");
    }
  }
  return out;
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::sca: return "sca";
    case Ablation::gcm: return "gcm";
    case Ablation::mrm: return "mrm";
  }
  return "?";
}

namespace {

BneckEntry entry(std::int64_t in, std::int64_t exp, std::int64_t out, std::int64_t k, bool se,
                 Activation act, std::int64_t stride) {
  return BneckEntry{in, exp, out, k, se, act, stride};
}

}  // namespace

ModelConfig ModelConfig::multitask_gaze() {
  constexpr auto RE = Activation::relu;
  constexpr auto HS = Activation::hswish;
  ModelConfig c;
  c.bnecks = {
      entry(16, 16, 16, 5, false, RE, 1),    entry(16, 64, 24, 5, false, RE, 2),
      entry(24, 72, 24, 5, false, RE, 1),    entry(24, 72, 40, 7, true, RE, 2),
      entry(40, 120, 40, 7, true, RE, 1),    entry(40, 120, 40, 7, true, RE, 1),
      entry(40, 240, 80, 5, false, HS, 2),   entry(80, 200, 80, 5, false, HS, 1),
      entry(80, 184, 80, 5, false, HS, 1),   entry(80, 184, 80, 5, false, HS, 1),
      entry(80, 480, 112, 5, true, HS, 1),   entry(112, 672, 112, 5, true, HS, 1),
      entry(112, 672, 160, 7, true, HS, 2),  entry(160, 960, 160, 7, true, HS, 1),
      entry(160, 960, 160, 7, true, HS, 1),
  };
  return c;
}

ModelConfig ModelConfig::reduced() {
  constexpr auto RE = Activation::relu;
  constexpr auto HS = Activation::hswish;
  ModelConfig c;
  c.input_hw = 64;
  c.bnecks = {
      entry(16, 16, 16, 5, false, RE, 2),  entry(16, 64, 24, 5, false, RE, 1),
      entry(24, 72, 24, 5, false, RE, 1),  entry(24, 72, 40, 7, true, RE, 2),
      entry(40, 120, 40, 7, true, RE, 1),  entry(40, 120, 40, 7, true, RE, 1),
      entry(40, 240, 80, 5, false, HS, 2), entry(80, 200, 80, 5, false, HS, 1),
      entry(80, 184, 80, 5, false, HS, 1),
  };
  return c;
}

bool ModelConfig::has_sca_after(std::int64_t index) const {
  if (ablated(Ablation::sca)) return false;
  for (auto i : sca_after) {
    if (i == index) return true;
  }
  return false;
}

void ModelConfig::validate() const {
  if (input_hw < 1) throw ValidationError("config: input_hw must be positive");
  if (stem_channels < 1) throw ValidationError("config: stem_channels must be positive");
  std::int64_t prev = stem_channels;
  for (std::size_t i = 0; i < bnecks.size(); ++i) {
    const auto& b = bnecks[i];
    const std::string where = "config: bneck " + std::to_string(i + 1);
    if (b.in != prev) {
      throw ValidationError(where + " has in=" + std::to_string(b.in) + " but the previous stage produces " +
                            std::to_string(prev) + " channels");
    }
    try {
      b.spec().validate();
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    prev = b.out;
  }
  std::set<std::int64_t> seen;
  for (auto idx : sca_after) {
    if (idx < 1 || idx > static_cast<std::int64_t>(bnecks.size())) {
      throw ValidationError("config: sca_after index " + std::to_string(idx) + " outside bneck range 1.." +
                            std::to_string(bnecks.size()));
    }
    if (!seen.insert(idx).second) throw ValidationError("config: sca_after index " + std::to_string(idx) + " repeated");
  }
  if (sca_window < 1) throw ValidationError("config: sca_window must be positive");
  if (sca_reduction < 1) throw ValidationError("config: sca_reduction must be positive");
  if (feature_width < 1) throw ValidationError("config: feature_width must be positive");
  if (mrm_hidden < 1) throw ValidationError("config: mrm_hidden must be positive");
  if (std::fabs(mrm_a1 + mrm_b1 - 1.0f) > 1e-6f) {
    throw ValidationError("config: mrm_a1 + mrm_b1 must equal 1");
  }
  if (input_hw < 3) throw ValidationError("config: input_hw too small for the 3x3 stem");
}

std::vector<std::int64_t> feature_extents(const ModelConfig& config) {
  std::vector<std::int64_t> ext;
  std::int64_t e = (config.input_hw + 2 - 3) / 2 + 1;
  ext.push_back(e);
  for (const auto& b : config.bnecks) {
    e = (e - 1) / b.stride + 1;
    ext.push_back(e);
  }
  return ext;
}

std::int64_t sca_window_at(const ModelConfig& config, std::int64_t extent) {
  return std::min(config.sca_window, extent);
}

std::string ModelConfig::to_text() const {
  json j;
  j["input_hw"] = input_hw;
  j["stem_channels"] = stem_channels;
  json table = json::array();
  for (const auto& b : bnecks) {
    table.push_back(json{{"in", b.in},     {"exp", b.exp},         {"out", b.out},
                         {"uc_k", b.uc_k}, {"se", b.se},           {"act", mtgaze::to_string(b.act)},
                         {"stride", b.stride}});
  }
  j["bnecks"] = table;
  j["sca_after"] = sca_after;
  j["sca_window"] = sca_window;
  j["sca_reduction"] = sca_reduction;
  j["feature_width"] = feature_width;
  j["gcm_norm_act"] = gcm_norm_act;
  j["mrm_hidden"] = mrm_hidden;
  j["mrm_a1"] = mrm_a1;
  j["mrm_b1"] = mrm_b1;
  json ab = json::array();
  for (auto a : ablate) ab.push_back(mtgaze::to_string(a));
  j["ablate"] = ab;
  return j.dump(2) + "\n";
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ValidationError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_field(const json& obj, const char* key, const std::string& where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": field '" + key + "' invalid: " + e.what());
  }
}

}  // namespace

ModelConfig ModelConfig::from_text(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: malformed text: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  reject_unknown(j,
                 {"input_hw", "stem_channels", "bnecks", "sca_after", "sca_window", "sca_reduction",
                  "feature_width", "gcm_norm_act", "mrm_hidden", "mrm_a1", "mrm_b1", "ablate"},
                 "config");
  ModelConfig c = multitask_gaze();
  const std::string where = "config";
  if (j.contains("input_hw")) c.input_hw = get_field<std::int64_t>(j, "input_hw", where);
  if (j.contains("stem_channels")) c.stem_channels = get_field<std::int64_t>(j, "stem_channels", where);
  if (j.contains("bnecks")) {
    if (!j["bnecks"].is_array()) throw ValidationError("config: bnecks must be an array");
    c.bnecks.clear();
    std::size_t i = 0;
    for (const auto& b : j["bnecks"]) {
      const std::string w = "config: bneck " + std::to_string(++i);
      if (!b.is_object()) throw ValidationError(w + " must be an object");
      reject_unknown(b, {"in", "exp", "out", "uc_k", "se", "act", "stride"}, w);
      BneckEntry e;
      e.in = get_field<std::int64_t>(b, "in", w);
      e.exp = get_field<std::int64_t>(b, "exp", w);
      e.out = get_field<std::int64_t>(b, "out", w);
      e.uc_k = get_field<std::int64_t>(b, "uc_k", w);
      e.se = b.contains("se") ? get_field<bool>(b, "se", w) : false;
      e.act = b.contains("act") ? parse_activation(get_field<std::string>(b, "act", w)) : Activation::relu;
      e.stride = b.contains("stride") ? get_field<std::int64_t>(b, "stride", w) : 1;
      c.bnecks.push_back(e);
    }
  }
  if (j.contains("sca_after")) c.sca_after = get_field<std::vector<std::int64_t>>(j, "sca_after", where);
  if (j.contains("sca_window")) c.sca_window = get_field<std::int64_t>(j, "sca_window", where);
  if (j.contains("sca_reduction")) c.sca_reduction = get_field<std::int64_t>(j, "sca_reduction", where);
  if (j.contains("feature_width")) c.feature_width = get_field<std::int64_t>(j, "feature_width", where);
  if (j.contains("gcm_norm_act")) c.gcm_norm_act = get_field<bool>(j, "gcm_norm_act", where);
  if (j.contains("mrm_hidden")) c.mrm_hidden = get_field<std::int64_t>(j, "mrm_hidden", where);
  if (j.contains("mrm_a1")) c.mrm_a1 = get_field<float>(j, "mrm_a1", where);
  if (j.contains("mrm_b1")) c.mrm_b1 = get_field<float>(j, "mrm_b1", where);
  if (j.contains("ablate")) {
    c.ablate.clear();
    for (const auto& a : get_field<std::vector<std::string>>(j, "ablate", where)) {
      auto parsed = parse_ablations(a);
      c.ablate.insert(parsed.begin(), parsed.end());
    }
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return from_text(ss.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config_ = config;
  m.stem_ = Conv2d::create(ConvSpec::standard(3, 3, 3, config.stem_channels, 2), false, rng);
  m.stem_bn_ = BatchNorm2d::create(config.stem_channels);
  const auto extents = feature_extents(config);
  std::int64_t channels = config.stem_channels;
  for (std::size_t i = 0; i < config.bnecks.size(); ++i) {
    const auto& e = config.bnecks[i];
    m.bnecks_.push_back(Bneck::create(e.spec(), rng));
    channels = e.out;
    const auto index = static_cast<std::int64_t>(i + 1);
    if (config.has_sca_after(index)) {
      const SCASpec spec{channels, sca_window_at(config, extents[i + 1]), config.sca_reduction};
      m.sca_.emplace(index, SpatialChannelAttention::create(spec, rng));
    }
  }
  m.head_ = Conv2d::create(ConvSpec::standard(1, 1, channels, config.feature_width), false, rng);
  m.head_bn_ = BatchNorm2d::create(config.feature_width);
  if (!config.ablated(Ablation::gcm)) {
    const std::int64_t e = extents.back();
    m.gcm_ = GlobalConvModule::create(config.feature_width, e, e, config.feature_width, rng, config.gcm_norm_act);
  }
  m.mrm_ = MRMHeads::create(config.feature_width, config.mrm_hidden, rng, config.ablated(Ablation::mrm),
                            config.mrm_a1, config.mrm_b1);
  return m;
}

ModelOutput Model::forward(const Tensor& images, const ForwardContext& ctx) {
  const auto hw = config_.input_hw;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != hw || images.dim(3) != hw) {
    throw ShapeError("model: expected images [N, 3, " + std::to_string(hw) + ", " + std::to_string(hw) +
                     "], got " + shape_to_string(images.shape()));
  }
  GradTape* tape = ctx.tape;
  Tensor x = hswish(stem_bn_.forward(stem_.forward(images, tape), ctx), tape);
  for (std::size_t i = 0; i < bnecks_.size(); ++i) {
    x = bnecks_[i].forward(x, ctx);
    auto it = sca_.find(static_cast<std::int64_t>(i + 1));
    if (it != sca_.end()) x = it->second.forward(x, ctx).output;
  }
  x = hswish(head_bn_.forward(head_.forward(x, tape), ctx), tape);
  x = gcm_ ? gcm_->forward(x, ctx) : global_pool(x, PoolKind::avg, tape);
  Tensor f = reshape(x, {x.dim(0), config_.feature_width}, tape);
  MRMOutput heads = mrm_.forward(f, tape);
  return ModelOutput{std::move(heads.fused), std::move(heads.yaw), std::move(heads.pitch), std::move(heads.joint)};
}

ParamList Model::named_tensors() {
  ParamList out;
  stem_.collect("stem.conv", out);
  stem_bn_.collect("stem.bn", out);
  for (std::size_t i = 0; i < bnecks_.size(); ++i) {
    const auto index = static_cast<std::int64_t>(i + 1);
    bnecks_[i].collect("bneck." + std::to_string(index), out);
    auto it = sca_.find(index);
    if (it != sca_.end()) it->second.collect("sca." + std::to_string(index), out);
  }
  head_.collect("head.conv", out);
  head_bn_.collect("head.bn", out);
  if (gcm_) gcm_->collect("gcm", out);
  mrm_.collect("mrm", out);
  return out;
}

ParamList Model::parameters() {
  ParamList all = named_tensors();
  ParamList out;
  for (auto& p : all) {
    if (p.trainable) out.push_back(p);
  }
  return out;
}

std::int64_t Model::parameter_count() { return count_elements(named_tensors(), true); }

namespace {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("weights file truncated at byte " + std::to_string(pos_) + " while reading " + what);
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> Model::serialize() {
  ByteWriter w;
  w.raw("MTGZ");
  w.u32(kWeightsVersion);
  const std::string text = config_.to_text();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  const ParamList tensors = named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& p : tensors) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.raw(p.name);
    w.u8(static_cast<std::uint8_t>(p.tensor->rank()));
    for (auto e : p.tensor->shape()) w.u32(static_cast<std::uint32_t>(e));
    for (float v : p.tensor->data()) w.f32(v);
  }
  return w.take();
}

Model Model::deserialize(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.str(4, "magic") != "MTGZ") throw FormatError("weights file has bad magic (expected MTGZ)");
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion) {
    throw FormatError("weights file version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kWeightsVersion) + ")");
  }
  const std::uint32_t text_len = r.u32("config length");
  const ModelConfig config = ModelConfig::from_text(r.str(text_len, "config text"));
  Model m = build(config, 0);
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& p : m.named_tensors()) by_name[p.name] = p.tensor;
  const std::uint32_t count = r.u32("tensor count");
  std::set<std::string> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("name length");
    const std::string name = r.str(name_len, "tensor name");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("weights file has unknown tensor '" + name + "'");
    if (!loaded.insert(name).second) throw FormatError("weights file repeats tensor '" + name + "'");
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32("extent"));
    if (shape != it->second->shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_to_string(shape) + ", config expects " +
                        shape_to_string(it->second->shape()));
    }
    for (auto& v : it->second->data()) v = r.f32("tensor values");
  }
  if (loaded.size() != by_name.size()) {
    for (const auto& [name, _] : by_name) {
      if (!loaded.count(name)) throw FormatError("weights file is missing tensor '" + name + "'");
    }
  }
  if (!r.done()) throw FormatError("weights file has trailing bytes after offset " + std::to_string(r.position()));
  return m;
}

void Model::save(const std::filesystem::path& path) {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write weights file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("failed writing weights file " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open weights file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace mtgaze
