#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtgaze/gaze_math.hpp"
#include "mtgaze/model.hpp"

namespace mtgaze {

struct GazeSample {
  Tensor image;  // [3, H, W], values in [0, 1]
  GazeAngles label;
};

// Schematic eye: bright elliptical sclera on a dark background with a dark
// iris disc displaced by (scale * yaw, -scale * pitch) pixels.
struct EyeGeometry {
  double center_x = 0.0;
  double center_y = 0.0;
  double sclera_a = 0.0;  // horizontal semi-axis, px
  double sclera_b = 0.0;  // vertical semi-axis, px
  double iris_r = 0.0;
  double scale = 0.0;  // px per radian

  static EyeGeometry for_size(std::int64_t image_size);
};

inline constexpr float kBackground = 0.1f;
inline constexpr float kSclera = 0.9f;
inline constexpr float kIris = 0.15f;
inline constexpr std::int64_t kMinImageSize = 16;

struct GeneratorConfig {
  std::int64_t image_size = 64;
  double label_range = 0.6;  // yaw, pitch ~ U[-range, range]
  double noise_sigma = 0.02;
};

std::vector<GazeSample> generate(std::int64_t n, std::uint64_t seed, const GeneratorConfig& config = {});

// Single noiseless render, [3, H, W].
Tensor render_eye(const GazeAngles& label, std::int64_t image_size);

// Closed-form label decoder used as an oracle: darkness-weighted centroid of
// the iris inside the sclera, divided by the pixel scale.
GazeAngles centroid_estimate(const Tensor& image);

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  int epochs = 15;
  std::int64_t batch_size = 32;
  float learning_rate = 0.01f;
  LrSchedule schedule = LrSchedule::cosine;
  float momentum = 0.9f;
  std::uint64_t seed = 0;
  float dropout_p0 = 0.1f;
  std::int64_t samples = 2000;  // generated in total
  std::int64_t holdout = 400;   // last `holdout` samples are held out
  GeneratorConfig data;

  void validate() const;
};

// p(e) = p0 (1 - e / E) for e in [0, E].
float dropout_rate(float p0, int epoch, int epochs);
// Learning rate used by training epoch e in [1, E].
float epoch_learning_rate(const TrainConfig& config, int epoch);

struct EpochMetrics {
  int epoch = 0;
  double l_total = 0.0;
  double l_yaw = 0.0;
  double l_pitch = 0.0;
  double l_joint = 0.0;
  double ang_err_deg = 0.0;
  float dropout = 0.0f;
  float learning_rate = 0.0f;
};

struct EvalRow {
  std::int64_t index = 0;
  GazeAngles truth;
  GazeAngles pred;
  double ang_err_deg = 0.0;
};

struct EvalResult {
  double mean_ang_err_deg = 0.0;
  double l_total = 0.0;
  double l_yaw = 0.0;
  double l_pitch = 0.0;
  double l_joint = 0.0;
  std::vector<EvalRow> rows;
};

// Angle between two (yaw, pitch) directions in degrees. Unlike
// angles_to_vector this accepts any finite pitch, since raw network outputs
// are not confined to the invertible range.
double prediction_error(const GazeAngles& truth, const GazeAngles& pred);

// Infer-mode evaluation of fused predictions. Losses are sample means.
EvalResult evaluate(Model& model, const std::vector<GazeSample>& data, std::int64_t batch_size = 64);

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Row 0 is the untrained model; row e >= 1 follows training epoch e. Each
// row is measured in infer mode on the held-out samples. Throws NumericError
// naming epoch and batch on a non-finite loss.
std::vector<EpochMetrics> train(Model& model, const TrainConfig& config, const std::vector<GazeSample>& train_set,
                                const std::vector<GazeSample>& heldout, const EpochCallback& on_epoch = {});

// epoch,l_total,l_yaw,l_pitch,l_joint,ang_err_deg with 9 significant digits.
std::string metrics_csv(const std::vector<EpochMetrics>& history);
// index,yaw_true,pitch_true,yaw_pred,pitch_pred,ang_err_deg
std::string eval_csv(const EvalResult& result);

void write_text(const std::string& path, const std::string& text);

}  // namespace mtgaze
