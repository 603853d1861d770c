#pragma once

#include <array>

#include "mtgaze/ops.hpp"

namespace mtgaze {

// Radians. Positive yaw turns toward +x, positive pitch toward +y (up).
struct GazeAngles {
  double yaw = 0.0;
  double pitch = 0.0;
};

struct GazeVector {
  double x = 0.0;
  double y = 0.0;
  double z = 1.0;

  double norm() const;
};

// (cos p sin y, sin p, cos p cos y); rejects |pitch| >= pi/2.
GazeVector angles_to_vector(const GazeAngles& a);

// Angle between the two directions in degrees. The normalized dot product is
// clamped to [-1, 1] before arccos. Rejects zero vectors.
double angular_error(const GazeVector& g, const GazeVector& g_hat);
double angular_error(const GazeAngles& truth, const GazeAngles& pred);

struct LossWeights {
  float a2 = 0.5f;  // joint head
  float b2 = 0.5f;  // each single-angle head
};

struct LossTerms {
  Tensor total;
  Tensor yaw;    // mean |yaw head - yaw|
  Tensor pitch;  // mean |pitch head - pitch|
  Tensor joint;  // mean over both components of |joint head - target|
};

// total = a2 * joint + b2 * yaw + b2 * pitch. `fused` only takes part in the
// batch-size check; the heads carry the gradient. pred_yaw and pred_pitch may
// be [N] or [N, 1]; fused, joint and target are [N, 2].
LossTerms multitask_loss(const Tensor& fused, const Tensor& pred_yaw, const Tensor& pred_pitch,
                         const Tensor& pred_joint, const Tensor& target, const LossWeights& w = {},
                         GradTape* tape = nullptr);

// Expected angular error in degrees of a predictor that always answers (0, 0)
// when yaw and pitch are independent and uniform on [-range, range].
double zero_predictor_error(double range, int nodes = 400);

}  // namespace mtgaze
