#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mtgaze/model.hpp"
#include "mtgaze/ops.hpp"

namespace mtgaze {

// Cost convention: MACs count multiply-accumulates of convolution and dense
// layers only (one per kernel tap per output element, padded taps included).
// Bias, batchnorm and activation work is excluded from MACs; their
// parameters are included in parameter totals. FLOPs are reported as MACs.
inline constexpr const char* kCostConvention =
    "MACs = conv/dense multiply-accumulates (FLOPs reported as MACs); "
    "params include bias and batchnorm gamma/beta; bias, batchnorm and activation MACs excluded";

struct LayerCost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

// params = k_h k_w (c_in / groups) c_out (+ c_out with bias);
// macs = k_h k_w (c_in / groups) c_out h_out w_out.
LayerCost count_conv(const ConvSpec& spec, std::int64_t h_out, std::int64_t w_out, bool bias = false);

// Standard k_h x k_w conv versus its [1 x k_w; k_h x 1] factorization with
// the same channel counts and groups.
struct FactorizationCost {
  LayerCost standard;
  LayerCost factorized;
  double param_reduction = 0.0;  // 1 - factorized / standard
  double mac_reduction = 0.0;
};
FactorizationCost compare_factorized(const ConvSpec& spec, std::int64_t h_out, std::int64_t w_out);

struct ConvOp {
  ConvSpec spec;
  std::int64_t batch = 1;
  std::int64_t height = 1;
  std::int64_t width = 1;
  bool bias = false;
};
struct DenseOp {
  std::int64_t in = 1;
  std::int64_t out = 1;
  std::int64_t batch = 1;
};
struct PoolOp {
  PoolKind kind = PoolKind::avg;
  std::int64_t window = 1;
  std::int64_t channels = 1;
  std::int64_t height = 1;
  std::int64_t width = 1;
};
using OpDescription = std::variant<ConvOp, DenseOp, PoolOp>;

// Runs a naive loop for the op on synthetic data with a multiply-accumulate
// counter and returns the count. Only conv and dense are supported.
std::int64_t instrumented_macs(const OpDescription& op);

struct CostRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::optional<OpDescription> op;  // absent for parameter-only rows (batchnorm)
  std::int64_t repeats = 1;         // times `op` runs per forward pass
};

struct CostReport {
  std::vector<CostRow> rows;

  std::int64_t total_params() const;
  std::int64_t total_macs() const;
  // name,params,macs rows followed by a TOTAL row.
  std::string to_csv() const;
};

// Walks the layer sequence of the configured model analytically (batch 1).
CostReport count_model(const ModelConfig& config);

// --- receptive fields ---

struct RFLayer {
  std::string name;
  std::int64_t k_h = 1;
  std::int64_t k_w = 1;
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
};

struct RFRow {
  std::string name;
  std::int64_t rf_h = 1;
  std::int64_t rf_w = 1;
  std::int64_t jump_h = 1;   // product of strides up to and including this layer
  std::int64_t jump_w = 1;
  std::int64_t start_h = 0;  // input row of the first tap for output row 0
  std::int64_t start_w = 0;
};

// rf_l = rf_{l-1} + (k_l - 1) * prod_{i<l} stride_i per axis, rf_0 = 1.
std::vector<RFRow> theoretical_rf(std::span<const RFLayer> layers);

// A plain stack of convolutions without nonlinearities.
struct ConvStack {
  std::string name;
  std::vector<ConvSpec> layers;

  std::vector<RFLayer> rf_layers() const;
  std::int64_t channels() const { return layers.empty() ? 1 : layers.front().c_in; }
};

// Named stacks: std5x3, std5x4 (standard 5x5 convs), uc5x3, uc7x3 (UC pairs),
// or a custom comma-separated list of KHxKW[sS] items and ucK shorthands,
// e.g. "uc7,3x3s2,1x1".
ConvStack make_stack(std::string_view token, std::int64_t channels = 4);
std::vector<Tensor> random_stack_weights(const ConvStack& stack, std::uint64_t seed);

struct Heatmap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> values;  // row-major, peak normalized to 1

  float at(std::int64_t i, std::int64_t j) const { return values[static_cast<std::size_t>(i * width + j)]; }
};

struct Box {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  bool operator==(const Box&) const = default;
};

// Input box that can influence the central output element of the stack for
// a square input of the given extent.
Box theoretical_box(const ConvStack& stack, std::int64_t extent);
// Bounding box of the nonzero heatmap entries (height 0 when all zero).
Box support_box(const Heatmap& map);
std::int64_t nonzero_count(const Heatmap& map);

// Gradient-based effective receptive field: the channel mean of the central
// output element is back-propagated to the input, absolute input gradients are
// summed over channels, averaged over `draws` random inputs and normalized to
// a peak of 1.
Heatmap effective_rf(const ConvStack& stack, const std::vector<Tensor>& weights, std::int64_t extent,
                     int draws = 32, std::uint64_t seed = 2024);

enum class PgmEncoding { ascii, binary };
void write_pgm(const std::filesystem::path& path, const Heatmap& map, PgmEncoding encoding, int bits);
std::string heatmap_csv(const Heatmap& map);

}  // namespace mtgaze
