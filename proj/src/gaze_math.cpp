#include "mtgaze/gaze_math.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtgaze/errors.hpp"

namespace mtgaze {

double GazeVector::norm() const { return std::sqrt(x * x + y * y + z * z); }

GazeVector angles_to_vector(const GazeAngles& a) {
  if (!std::isfinite(a.yaw) || !std::isfinite(a.pitch)) throw ValidationError("gaze angles must be finite");
  if (std::fabs(a.pitch) >= std::numbers::pi / 2) {
    throw ValidationError("pitch " + std::to_string(a.pitch) + " rad is at or beyond +-pi/2; yaw is undefined there");
  }
  const double cp = std::cos(a.pitch);
  return GazeVector{cp * std::sin(a.yaw), std::sin(a.pitch), cp * std::cos(a.yaw)};
}

double angular_error(const GazeVector& g, const GazeVector& g_hat) {
  const double ng = g.norm(), nh = g_hat.norm();
  if (ng == 0.0 || nh == 0.0) throw ValidationError("angular_error: zero-length gaze vector");
  const double dot = g.x * g_hat.x + g.y * g_hat.y + g.z * g_hat.z;
  const double c = std::clamp(dot / (ng * nh), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

double angular_error(const GazeAngles& truth, const GazeAngles& pred) {
  return angular_error(angles_to_vector(truth), angles_to_vector(pred));
}

namespace {

Tensor as_column(const Tensor& t, std::int64_t n, const char* what, GradTape* tape) {
  if (t.rank() == 1 && t.dim(0) == n) return reshape(t, {n, 1}, tape);
  if (t.rank() == 2 && t.dim(0) == n && t.dim(1) == 1) return scale(t, 1.0f, tape);
  throw ShapeError(std::string("multitask_loss: ") + what + " has shape " + shape_to_string(t.shape()) +
                   ", expected [" + std::to_string(n) + "] or [" + std::to_string(n) + "x1]");
}

void require_pairs(const Tensor& t, std::int64_t n, const char* what) {
  if (t.rank() != 2 || t.dim(0) != n || t.dim(1) != 2) {
    throw ShapeError(std::string("multitask_loss: ") + what + " has shape " + shape_to_string(t.shape()) +
                     ", expected [" + std::to_string(n) + "x2]");
  }
}

}  // namespace

LossTerms multitask_loss(const Tensor& fused, const Tensor& pred_yaw, const Tensor& pred_pitch,
                         const Tensor& pred_joint, const Tensor& target, const LossWeights& w, GradTape* tape) {
  if (target.rank() != 2) throw ShapeError("multitask_loss: target must be [N x 2]");
  const std::int64_t n = target.dim(0);
  require_pairs(target, n, "target");
  require_pairs(fused, n, "fused prediction");
  require_pairs(pred_joint, n, "joint head");
  const Tensor yaw = as_column(pred_yaw, n, "yaw head", tape);
  const Tensor pitch = as_column(pred_pitch, n, "pitch head", tape);
  const Tensor t_yaw = slice_columns(target, 0, 1);
  const Tensor t_pitch = slice_columns(target, 1, 2);

  LossTerms out;
  out.yaw = mean(abs(sub(yaw, t_yaw, tape), tape), tape);
  out.pitch = mean(abs(sub(pitch, t_pitch, tape), tape), tape);
  out.joint = mean(abs(sub(pred_joint, target, tape), tape), tape);
  const Tensor heads = add(out.yaw, out.pitch, tape);
  out.total = add(scale(out.joint, w.a2, tape), scale(heads, w.b2, tape), tape);
  return out;
}

double zero_predictor_error(double range, int nodes) {
  if (!(range > 0.0) || range >= std::numbers::pi / 2) throw ValidationError("label range must lie in (0, pi/2)");
  if (nodes < 2) throw ValidationError("zero_predictor_error: need at least two nodes");
  // Midpoint rule on the square; the integrand is smooth away from the origin.
  const double h = 2.0 * range / nodes;
  double acc = 0.0;
  for (int i = 0; i < nodes; ++i) {
    const double yaw = -range + (i + 0.5) * h;
    for (int j = 0; j < nodes; ++j) {
      const double pitch = -range + (j + 0.5) * h;
      acc += std::acos(std::clamp(std::cos(pitch) * std::cos(yaw), -1.0, 1.0));
    }
  }
  return acc / (static_cast<double>(nodes) * nodes) * 180.0 / std::numbers::pi;
}

}  // namespace mtgaze
