#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "mtgaze/tape.hpp"
#include "mtgaze/tensor.hpp"

namespace mtgaze {

enum class Mode { train, infer };

// Convolution geometry. Weights are laid out [c_out, c_in / groups, k_h, k_w].
struct ConvSpec {
  std::int64_t k_h = 1;
  std::int64_t k_w = 1;
  std::int64_t c_in = 1;
  std::int64_t c_out = 1;
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
  std::int64_t groups = 1;

  // Throws ValidationError naming the offending field.
  void validate() const;
  std::int64_t out_h(std::int64_t h) const { return (h + 2 * pad_h - k_h) / stride_h + 1; }
  std::int64_t out_w(std::int64_t w) const { return (w + 2 * pad_w - k_w) / stride_w + 1; }
  bool depthwise() const { return groups == c_in && groups == c_out; }
  Shape weight_shape() const { return {c_out, c_in / groups, k_h, k_w}; }
  std::int64_t weight_count() const { return c_out * (c_in / groups) * k_h * k_w; }

  static ConvSpec standard(std::int64_t k_h, std::int64_t k_w, std::int64_t c_in,
                           std::int64_t c_out, std::int64_t stride = 1);
  static ConvSpec depthwise_spec(std::int64_t k_h, std::int64_t k_w, std::int64_t channels,
                                 std::int64_t stride_h = 1, std::int64_t stride_w = 1);
  bool operator==(const ConvSpec&) const = default;
};

std::string to_string(const ConvSpec& spec);

// Direct cross-correlation. `bias` may be null.
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor* bias, const ConvSpec& spec,
              GradTape* tape = nullptr);

// y = x W^T + b, input [N, D_in], weights [D_out, D_in], bias [D_out].
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias,
             GradTape* tape = nullptr);

enum class Activation { relu, hswish, sigmoid, identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation act);

// While alive, every nonsmooth op on this thread (relu, hswish, abs, max
// pooling, channel_max) folds the branch it took per element into a digest.
// Two forwards with equal digests lie on the same smooth piece.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t digest() const { return digest_; }

 private:
  std::uint64_t digest_ = 0xcbf29ce484222325ULL;
  std::uint64_t* outer_ = nullptr;
};

Tensor relu(const Tensor& x, GradTape* tape = nullptr);
Tensor hswish(const Tensor& x, GradTape* tape = nullptr);
Tensor sigmoid(const Tensor& x, GradTape* tape = nullptr);
Tensor activate(const Tensor& x, Activation act, GradTape* tape = nullptr);

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static BatchNormParams identity(std::int64_t channels);
};

// Per-channel normalization of [N, C, H, W]. Train mode normalizes by batch
// statistics and, when `update_running` is set, folds them into the running
// statistics; infer mode uses the running statistics.
Tensor batchnorm(const Tensor& input, BatchNormParams& params, Mode mode,
                 GradTape* tape = nullptr, bool update_running = true);

enum class PoolKind { avg, max };

Tensor pool2d(const Tensor& input, PoolKind kind, std::int64_t window_h, std::int64_t window_w,
              std::int64_t stride_h, std::int64_t stride_w, GradTape* tape = nullptr);
// Pools the whole spatial extent to [N, C, 1, 1].
Tensor global_pool(const Tensor& input, PoolKind kind, GradTape* tape = nullptr);

// Inverted dropout. Survivors are scaled by 1 / (1 - p).
Tensor dropout(const Tensor& input, float p, std::mt19937_64& rng, Mode mode,
               GradTape* tape = nullptr);

// Elementwise arithmetic with broadcasting between equal-rank tensors: every
// extent must match or be 1 in one operand.
Tensor add(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
Tensor scale(const Tensor& x, float factor, GradTape* tape = nullptr);
Tensor abs(const Tensor& x, GradTape* tape = nullptr);

Tensor sum(const Tensor& x, GradTape* tape = nullptr);
Tensor mean(const Tensor& x, GradTape* tape = nullptr);

Tensor reshape(const Tensor& x, Shape shape, GradTape* tape = nullptr);
// Concatenates along axis 1.
Tensor concat_channels(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
// Columns [begin, end) of a [N, D] tensor.
Tensor slice_columns(const Tensor& x, std::int64_t begin, std::int64_t end,
                     GradTape* tape = nullptr);

// Reductions over axis 1 of [N, C, H, W], keeping the axis with extent 1.
Tensor channel_mean(const Tensor& x, GradTape* tape = nullptr);
Tensor channel_max(const Tensor& x, GradTape* tape = nullptr);

// Cyclic spatial shift: out[h][w] = in[(h - shift_h) mod H][(w - shift_w) mod W].
Tensor roll(const Tensor& x, std::int64_t shift_h, std::int64_t shift_w, GradTape* tape = nullptr);

// Splits [N, C, H, W] into non-overlapping window x window tiles stacked along
// the batch axis ([N * tiles_h * tiles_w, C, window, window]); partial edge
// tiles are zero-filled. window_merge is the exact inverse on the valid area.
Tensor window_partition(const Tensor& x, std::int64_t window, GradTape* tape = nullptr);
Tensor window_merge(const Tensor& tiles, std::int64_t batch, std::int64_t height,
                    std::int64_t width, GradTape* tape = nullptr);

}  // namespace mtgaze
