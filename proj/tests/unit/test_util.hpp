#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtgaze/ops.hpp"

namespace testutil {

inline mtgaze::Tensor randn(mtgaze::Shape shape, std::mt19937_64& rng, float sd = 1.0f) {
  mtgaze::Tensor t(std::move(shape));
  std::normal_distribution<float> d(0.0f, sd);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline mtgaze::Tensor randu(mtgaze::Shape shape, std::mt19937_64& rng, float lo, float hi) {
  mtgaze::Tensor t(std::move(shape));
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

inline double max_abs_diff(const mtgaze::Tensor& a, const mtgaze::Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

// Quadruple loop in double, straight from the definition.
inline mtgaze::Tensor naive_conv(const mtgaze::Tensor& x, const mtgaze::Tensor& w, const mtgaze::Tensor* b,
                                 const mtgaze::ConvSpec& s) {
  const auto N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const auto Ho = (H + 2 * s.pad_h - s.k_h) / s.stride_h + 1;
  const auto Wo = (W + 2 * s.pad_w - s.k_w) / s.stride_w + 1;
  const auto cig = s.c_in / s.groups, cog = s.c_out / s.groups;
  mtgaze::Tensor y({N, s.c_out, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < s.c_out; ++co) {
      const auto g = co / cog;
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          double acc = b ? (*b)[static_cast<std::size_t>(co)] : 0.0;
          for (std::int64_t ci = 0; ci < cig; ++ci)
            for (std::int64_t i = 0; i < s.k_h; ++i)
              for (std::int64_t j = 0; j < s.k_w; ++j) {
                const auto ih = oh * s.stride_h - s.pad_h + i;
                const auto iw = ow * s.stride_w - s.pad_w + j;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(x.at(n, g * cig + ci, ih, iw)) * w.at(co, ci, i, j);
              }
          y.at(n, co, oh, ow) = static_cast<float>(acc);
        }
    }
  return y;
}

}  // namespace testutil
