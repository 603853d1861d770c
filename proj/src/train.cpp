#include "mtgaze/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "mtgaze/errors.hpp"

namespace mtgaze {

EyeGeometry EyeGeometry::for_size(std::int64_t image_size) {
  const double s = static_cast<double>(image_size);
  EyeGeometry g;
  g.center_x = s / 2.0;
  g.center_y = s / 2.0;
  g.sclera_a = 0.42 * s;
  g.sclera_b = 0.30 * s;
  g.iris_r = 0.10 * s;
  g.scale = 0.18 * s;
  return g;
}

namespace {

constexpr int kSupersample = 8;

// Fraction of the pixel at (row, col) covered by the sclera and by the iris.
void coverage(const EyeGeometry& g, double ix, double iy, std::int64_t row, std::int64_t col, double& sclera,
              double& iris) {
  int in_sclera = 0, in_iris = 0;
  for (int a = 0; a < kSupersample; ++a) {
    const double y = static_cast<double>(row) + (a + 0.5) / kSupersample;
    for (int b = 0; b < kSupersample; ++b) {
      const double x = static_cast<double>(col) + (b + 0.5) / kSupersample;
      const double ex = (x - g.center_x) / g.sclera_a, ey = (y - g.center_y) / g.sclera_b;
      if (ex * ex + ey * ey <= 1.0) {
        ++in_sclera;
        const double dx = x - ix, dy = y - iy;
        if (dx * dx + dy * dy <= g.iris_r * g.iris_r) ++in_iris;
      }
    }
  }
  constexpr double total = kSupersample * kSupersample;
  sclera = in_sclera / total;
  iris = in_iris / total;
}

void check_size(std::int64_t image_size) {
  if (image_size < kMinImageSize) {
    throw ValidationError("image size " + std::to_string(image_size) + " is too small for the eye schematic (minimum " +
                          std::to_string(kMinImageSize) + ")");
  }
}

}  // namespace

Tensor render_eye(const GazeAngles& label, std::int64_t image_size) {
  check_size(image_size);
  const EyeGeometry g = EyeGeometry::for_size(image_size);
  const double ix = g.center_x + g.scale * label.yaw;
  const double iy = g.center_y - g.scale * label.pitch;
  Tensor img({3, image_size, image_size});
  const std::int64_t plane = image_size * image_size;
  for (std::int64_t r = 0; r < image_size; ++r) {
    for (std::int64_t c = 0; c < image_size; ++c) {
      double sclera = 0.0, iris = 0.0;
      // Pixels far from the sclera are plain background.
      const double ex = (c + 0.5 - g.center_x) / (g.sclera_a + 1.0), ey = (r + 0.5 - g.center_y) / (g.sclera_b + 1.0);
      if (ex * ex + ey * ey <= 1.0) coverage(g, ix, iy, r, c, sclera, iris);
      const double v = kBackground + (kSclera - kBackground) * sclera - (kSclera - kIris) * iris;
      for (int ch = 0; ch < 3; ++ch) img[static_cast<std::size_t>(ch * plane + r * image_size + c)] = static_cast<float>(v);
    }
  }
  return img;
}

std::vector<GazeSample> generate(std::int64_t n, std::uint64_t seed, const GeneratorConfig& config) {
  if (n < 1) throw ValidationError("generate: sample count must be at least 1");
  check_size(config.image_size);
  if (!(config.label_range > 0.0) || config.label_range > 0.6 + 1e-12) {
    // Wider ranges would push the iris across the sclera border.
    throw ValidationError("generate: label range must lie in (0, 0.6] rad");
  }
  if (!(config.noise_sigma >= 0.0)) throw ValidationError("generate: noise sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> label(-config.label_range, config.label_range);
  std::normal_distribution<double> noise(0.0, config.noise_sigma);
  std::vector<GazeSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    GazeSample s;
    s.label.yaw = label(rng);
    s.label.pitch = label(rng);
    s.image = render_eye(s.label, config.image_size);
    if (config.noise_sigma > 0.0) {
      for (auto& v : s.image.data()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
    }
    out.push_back(std::move(s));
  }
  return out;
}

GazeAngles centroid_estimate(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("centroid_estimate: expected a [3 x S x S] image, got " + shape_to_string(image.shape()));
  }
  const std::int64_t s = image.dim(1);
  check_size(s);
  const EyeGeometry g = EyeGeometry::for_size(s);
  // Inside 0.9x the sclera every pixel is fully sclera, so darkness relative
  // to the sclera level is iris coverage times a constant. The weighted
  // centroid minimizes sum w |p - c|^2.
  double w_sum = 0.0, x_sum = 0.0, y_sum = 0.0;
  for (std::int64_t r = 0; r < s; ++r) {
    for (std::int64_t c = 0; c < s; ++c) {
      const double x = c + 0.5, y = r + 0.5;
      const double ex = (x - g.center_x) / (0.9 * g.sclera_a), ey = (y - g.center_y) / (0.9 * g.sclera_b);
      if (ex * ex + ey * ey > 1.0) continue;
      double v = 0.0;
      for (int ch = 0; ch < 3; ++ch) v += image[static_cast<std::size_t>((ch * s + r) * s + c)];
      const double w = std::max(0.0, kSclera - v / 3.0);
      w_sum += w;
      x_sum += w * x;
      y_sum += w * y;
    }
  }
  if (w_sum <= 0.0) throw ValidationError("centroid_estimate: no iris found");
  return GazeAngles{(x_sum / w_sum - g.center_x) / g.scale, -(y_sum / w_sum - g.center_y) / g.scale};
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  if (!std::isfinite(learning_rate) || learning_rate < 0.0f) throw ValidationError("learning rate must be finite and >= 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(dropout_p0 >= 0.0f && dropout_p0 < 1.0f)) throw ValidationError("dropout_p0 must lie in [0, 1)");
  if (holdout < 1 || samples <= holdout) {
    throw ValidationError("need at least one training and one held-out sample (samples=" + std::to_string(samples) +
                          ", holdout=" + std::to_string(holdout) + ")");
  }
}

float dropout_rate(float p0, int epoch, int epochs) {
  if (epochs < 1 || epoch < 0 || epoch > epochs) {
    throw ValidationError("dropout_rate: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(epochs) + "]");
  }
  return static_cast<float>(static_cast<double>(p0) * (1.0 - static_cast<double>(epoch) / epochs));
}

float epoch_learning_rate(const TrainConfig& config, int epoch) {
  if (config.schedule == LrSchedule::constant || config.epochs <= 1) return config.learning_rate;
  // Cosine from the full rate at epoch 1 down to a small floor at epoch E.
  const double t = static_cast<double>(epoch - 1) / (config.epochs - 1);
  const double f = 0.02 + 0.98 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return static_cast<float>(config.learning_rate * f);
}

double prediction_error(const GazeAngles& truth, const GazeAngles& pred) {
  auto dir = [](const GazeAngles& a) {
    const double cp = std::cos(a.pitch);
    return GazeVector{cp * std::sin(a.yaw), std::sin(a.pitch), cp * std::cos(a.yaw)};
  };
  if (!std::isfinite(pred.yaw) || !std::isfinite(pred.pitch)) throw NumericError("non-finite prediction");
  return angular_error(dir(truth), dir(pred));
}

namespace {

struct Batch {
  Tensor images;
  Tensor targets;
};

Batch make_batch(const std::vector<GazeSample>& data, const std::vector<std::size_t>& order, std::size_t begin,
                 std::size_t end) {
  const auto& first = data[order[begin]].image;
  const std::int64_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const auto n = static_cast<std::int64_t>(end - begin);
  Batch b{Tensor({n, c, h, w}), Tensor({n, 2})};
  const std::size_t per = static_cast<std::size_t>(c * h * w);
  for (std::size_t i = begin; i < end; ++i) {
    const GazeSample& s = data[order[i]];
    if (s.image.shape() != first.shape()) throw ShapeError("dataset images differ in shape");
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.data().begin() + static_cast<std::ptrdiff_t>((i - begin) * per));
    b.targets[2 * (i - begin)] = static_cast<float>(s.label.yaw);
    b.targets[2 * (i - begin) + 1] = static_cast<float>(s.label.pitch);
  }
  return b;
}

std::vector<std::size_t> iota_order(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

EvalResult evaluate(Model& model, const std::vector<GazeSample>& data, std::int64_t batch_size) {
  if (data.empty()) throw ValidationError("evaluate: dataset is empty");
  if (batch_size < 1) throw ValidationError("evaluate: batch size must be positive");
  EvalResult res;
  const auto order = iota_order(data.size());
  ForwardContext ctx;
  double err_sum = 0.0, lt = 0.0, ly = 0.0, lp = 0.0, lj = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), begin + static_cast<std::size_t>(batch_size));
    const Batch b = make_batch(data, order, begin, end);
    const ModelOutput out = model.forward(b.images, ctx);
    const LossTerms loss = multitask_loss(out.fused, out.yaw, out.pitch, out.joint, b.targets);
    const double n = static_cast<double>(end - begin);
    lt += loss.total[0] * n;
    ly += loss.yaw[0] * n;
    lp += loss.pitch[0] * n;
    lj += loss.joint[0] * n;
    for (std::size_t i = begin; i < end; ++i) {
      EvalRow row;
      row.index = static_cast<std::int64_t>(i);
      row.truth = data[i].label;
      row.pred.yaw = out.fused[2 * (i - begin)];
      row.pred.pitch = out.fused[2 * (i - begin) + 1];
      row.ang_err_deg = prediction_error(row.truth, row.pred);
      err_sum += row.ang_err_deg;
      res.rows.push_back(row);
    }
  }
  const double n = static_cast<double>(data.size());
  res.mean_ang_err_deg = err_sum / n;
  res.l_total = lt / n;
  res.l_yaw = ly / n;
  res.l_pitch = lp / n;
  res.l_joint = lj / n;
  return res;
}

std::vector<EpochMetrics> train(Model& model, const TrainConfig& config, const std::vector<GazeSample>& train_set,
                                const std::vector<GazeSample>& heldout, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty() || heldout.empty()) throw ValidationError("train: training and held-out sets must be non-empty");

  std::vector<EpochMetrics> history;
  auto record = [&](int epoch, float p, float lr) {
    const EvalResult ev = evaluate(model, heldout);
    EpochMetrics m{epoch, ev.l_total, ev.l_yaw, ev.l_pitch, ev.l_joint, ev.mean_ang_err_deg, p, lr};
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  };
  record(0, config.epochs > 0 ? dropout_rate(config.dropout_p0, 0, config.epochs) : 0.0f, 0.0f);

  ParamList params = model.parameters();
  std::vector<std::vector<float>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(static_cast<std::size_t>(params[i].tensor->numel()), 0.0f);

  std::mt19937_64 shuffle_rng(config.seed ^ 0x5eed5eed5eed5eedULL);
  std::mt19937_64 dropout_rng(config.seed ^ 0xd20d20d20d20d20dULL);
  auto order = iota_order(train_set.size());
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const float p = dropout_rate(config.dropout_p0, epoch, config.epochs);
    const float lr = epoch_learning_rate(config, epoch);
    shuffle(order, shuffle_rng);
    int batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + bs);
      if (end - begin < 2) continue;  // batchnorm needs more than one sample
      const Batch b = make_batch(train_set, order, begin, end);
      GradTape tape;
      ForwardContext ctx;
      ctx.mode = Mode::train;
      ctx.tape = &tape;
      ctx.rng = &dropout_rng;
      ctx.sca_dropout = p;
      // A zero rate is a probe: nothing in the model may move.
      ctx.update_running_stats = lr > 0.0f;
      const ModelOutput out = model.forward(b.images, ctx);
      const LossTerms loss = multitask_loss(out.fused, out.yaw, out.pitch, out.joint, b.targets, {}, &tape);
      if (!std::isfinite(loss.total[0])) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index));
      }
      if (lr == 0.0f) continue;
      const Gradients grads = backward(tape, loss.total);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor* g = grads.find(params[i].tensor->id());
        if (!g) continue;
        auto w = params[i].tensor->data();
        auto gv = g->data();
        auto& v = velocity[i];
        for (std::size_t k = 0; k < v.size(); ++k) {
          v[k] = config.momentum * v[k] + gv[k];
          w[k] -= lr * v[k];
        }
      }
    }
    record(epoch, p, lr);
  }
  return history;
}

namespace {

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  os << "epoch,l_total,l_yaw,l_pitch,l_joint,ang_err_deg\n";
  for (const auto& m : history) {
    os << m.epoch << ',' << g9(m.l_total) << ',' << g9(m.l_yaw) << ',' << g9(m.l_pitch) << ',' << g9(m.l_joint) << ','
       << g9(m.ang_err_deg) << '\n';
  }
  return os.str();
}

std::string eval_csv(const EvalResult& result) {
  std::ostringstream os;
  os << "index,yaw_true,pitch_true,yaw_pred,pitch_pred,ang_err_deg\n";
  for (const auto& r : result.rows) {
    os << r.index << ',' << g9(r.truth.yaw) << ',' << g9(r.truth.pitch) << ',' << g9(r.pred.yaw) << ','
       << g9(r.pred.pitch) << ',' << g9(r.ang_err_deg) << '\n';
  }
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
  if (!out) throw ValidationError("failed writing " + path);
}

}  // namespace mtgaze
