#include "mtgaze/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "mtgaze/errors.hpp"

namespace mtgaze {

namespace {

using Index = std::int64_t;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

void require_dim(const char* op, const char* dim_name, Index got, Index expected) {
  if (got != expected) {
    throw ShapeError(std::string(op) + ": dimension " + dim_name + " is " + std::to_string(got) +
                     ", expected " + std::to_string(expected));
  }
}

// Valid output range [lo, hi) along one axis for kernel offset `k`.
inline void tap_range(Index k, Index pad, Index stride, Index in_extent, Index out_extent, Index& lo,
                      Index& hi) {
  // need 0 <= o * stride + k - pad < in_extent
  Index first = pad - k;
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  Index last = in_extent - 1 + pad - k;
  hi = last < 0 ? 0 : std::min(out_extent, last / stride + 1);
  if (lo > hi) lo = hi;
}

struct ConvGeometry {
  Index n, c_in, h, w, c_out, h_out, w_out, cig, cog;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weights, const Tensor* bias,
                           const ConvSpec& spec) {
  spec.validate();
  require_rank(input, 4, "conv2d", "input");
  require_rank(weights, 4, "conv2d", "weights");
  require_dim("conv2d", "input C_in", input.dim(1), spec.c_in);
  const Shape ws = spec.weight_shape();
  require_dim("conv2d", "weights C_out", weights.dim(0), ws[0]);
  require_dim("conv2d", "weights C_in/groups", weights.dim(1), ws[1]);
  require_dim("conv2d", "weights k_h", weights.dim(2), ws[2]);
  require_dim("conv2d", "weights k_w", weights.dim(3), ws[3]);
  if (bias) {
    require_rank(*bias, 1, "conv2d", "bias");
    require_dim("conv2d", "bias C_out", bias->dim(0), spec.c_out);
  }
  ConvGeometry g{input.dim(0), spec.c_in,  input.dim(2), input.dim(3),          spec.c_out,
                 0,            0,          spec.c_in / spec.groups, spec.c_out / spec.groups};
  g.h_out = spec.out_h(g.h);
  g.w_out = spec.out_w(g.w);
  if (g.h + 2 * spec.pad_h < spec.k_h || g.h_out < 1) {
    throw ShapeError("conv2d: output height would be non-positive (H=" + std::to_string(g.h) +
                     ", k_h=" + std::to_string(spec.k_h) + ", pad_h=" + std::to_string(spec.pad_h) + ")");
  }
  if (g.w + 2 * spec.pad_w < spec.k_w || g.w_out < 1) {
    throw ShapeError("conv2d: output width would be non-positive (W=" + std::to_string(g.w) +
                     ", k_w=" + std::to_string(spec.k_w) + ", pad_w=" + std::to_string(spec.pad_w) + ")");
  }
  return g;
}

bool is_pointwise(const ConvSpec& s) {
  return s.k_h == 1 && s.k_w == 1 && s.stride_h == 1 && s.stride_w == 1 && s.pad_h == 0 &&
         s.pad_w == 0;
}

// Dot product with eight interleaved partial sums; the fixed lane order keeps
// results reproducible while letting the compiler vectorize.
inline float dot_lanes(const float* a, const float* b, Index n) {
  float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  Index i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) lane[j] += a[i + j] * b[i + j];
  }
  float acc = ((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7]));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// out_plane += w * shifted/strided in_plane for one kernel tap.
inline void conv_tap_forward(const float* in_plane, float* out_plane, float w, Index kh, Index kw,
                             const ConvSpec& s, const ConvGeometry& g) {
  Index oh_lo, oh_hi, ow_lo, ow_hi;
  tap_range(kh, s.pad_h, s.stride_h, g.h, g.h_out, oh_lo, oh_hi);
  tap_range(kw, s.pad_w, s.stride_w, g.w, g.w_out, ow_lo, ow_hi);
  for (Index oh = oh_lo; oh < oh_hi; ++oh) {
    const float* in_row = in_plane + (oh * s.stride_h + kh - s.pad_h) * g.w + kw - s.pad_w;
    float* out_row = out_plane + oh * g.w_out;
    if (s.stride_w == 1) {
      for (Index ow = ow_lo; ow < ow_hi; ++ow) out_row[ow] += w * in_row[ow];
    } else {
      for (Index ow = ow_lo; ow < ow_hi; ++ow) out_row[ow] += w * in_row[ow * s.stride_w];
    }
  }
}

inline void conv_tap_input_grad(float* gin_plane, const float* gout_plane, float w, Index kh,
                                Index kw, const ConvSpec& s, const ConvGeometry& g) {
  Index oh_lo, oh_hi, ow_lo, ow_hi;
  tap_range(kh, s.pad_h, s.stride_h, g.h, g.h_out, oh_lo, oh_hi);
  tap_range(kw, s.pad_w, s.stride_w, g.w, g.w_out, ow_lo, ow_hi);
  for (Index oh = oh_lo; oh < oh_hi; ++oh) {
    float* in_row = gin_plane + (oh * s.stride_h + kh - s.pad_h) * g.w + kw - s.pad_w;
    const float* out_row = gout_plane + oh * g.w_out;
    if (s.stride_w == 1) {
      for (Index ow = ow_lo; ow < ow_hi; ++ow) in_row[ow] += w * out_row[ow];
    } else {
      for (Index ow = ow_lo; ow < ow_hi; ++ow) in_row[ow * s.stride_w] += w * out_row[ow];
    }
  }
}

inline float conv_tap_weight_grad(const float* in_plane, const float* gout_plane, Index kh,
                                  Index kw, const ConvSpec& s, const ConvGeometry& g) {
  Index oh_lo, oh_hi, ow_lo, ow_hi;
  tap_range(kh, s.pad_h, s.stride_h, g.h, g.h_out, oh_lo, oh_hi);
  tap_range(kw, s.pad_w, s.stride_w, g.w, g.w_out, ow_lo, ow_hi);
  float acc = 0.0f;
  for (Index oh = oh_lo; oh < oh_hi; ++oh) {
    const float* in_row = in_plane + (oh * s.stride_h + kh - s.pad_h) * g.w + kw - s.pad_w;
    const float* out_row = gout_plane + oh * g.w_out;
    if (s.stride_w == 1) {
      acc += dot_lanes(out_row + ow_lo, in_row + ow_lo, ow_hi - ow_lo);
    } else {
      for (Index ow = ow_lo; ow < ow_hi; ++ow) acc += out_row[ow] * in_row[ow * s.stride_w];
    }
  }
  return acc;
}

// Four-float vector with unaligned loads and stores (GCC/Clang extension).
using F4 = float __attribute__((vector_size(16), aligned(4)));

inline F4 load4(const float* p) { return *reinterpret_cast<const F4*>(p); }
inline void store4(float* p, F4 v) { *reinterpret_cast<F4*>(p) = v; }

// y[r] += sum_c m[r * row_stride + c * col_stride] * x[c] over planes of
// `planes` floats. Blocks of 4 rows x 8 pixels stay in registers while the
// c loop runs; every element is summed in the order c = 0, 1, ...
void pointwise_rows(const float* m, Index rows, Index cols, Index row_stride, Index col_stride,
                    const float* x, float* y, Index planes) {
  Index r = 0;
  for (; r + 4 <= rows; r += 4) {
    float* y0 = y + r * planes;
    float* y1 = y0 + planes;
    float* y2 = y1 + planes;
    float* y3 = y2 + planes;
    const float* m0 = m + r * row_stride;
    Index p = 0;
    for (; p + 8 <= planes; p += 8) {
      F4 a0 = load4(y0 + p), b0 = load4(y0 + p + 4);
      F4 a1 = load4(y1 + p), b1 = load4(y1 + p + 4);
      F4 a2 = load4(y2 + p), b2 = load4(y2 + p + 4);
      F4 a3 = load4(y3 + p), b3 = load4(y3 + p + 4);
      const float* xp = x + p;
      const float* mc = m0;
      for (Index c = 0; c < cols; ++c, xp += planes, mc += col_stride) {
        const F4 xa = load4(xp), xb = load4(xp + 4);
        const float w0 = mc[0], w1 = mc[row_stride], w2 = mc[2 * row_stride], w3 = mc[3 * row_stride];
        a0 += w0 * xa;
        b0 += w0 * xb;
        a1 += w1 * xa;
        b1 += w1 * xb;
        a2 += w2 * xa;
        b2 += w2 * xb;
        a3 += w3 * xa;
        b3 += w3 * xb;
      }
      store4(y0 + p, a0), store4(y0 + p + 4, b0);
      store4(y1 + p, a1), store4(y1 + p + 4, b1);
      store4(y2 + p, a2), store4(y2 + p + 4, b2);
      store4(y3 + p, a3), store4(y3 + p + 4, b3);
    }
    for (; p < planes; ++p) {
      for (Index i = 0; i < 4; ++i) {
        float acc = y[(r + i) * planes + p];
        for (Index c = 0; c < cols; ++c) acc += m[(r + i) * row_stride + c * col_stride] * x[c * planes + p];
        y[(r + i) * planes + p] = acc;
      }
    }
  }
  for (; r < rows; ++r) {
    float* yr = y + r * planes;
    Index p = 0;
    for (; p + 8 <= planes; p += 8) {
      F4 a = load4(yr + p), b = load4(yr + p + 4);
      for (Index c = 0; c < cols; ++c) {
        const float w = m[r * row_stride + c * col_stride];
        a += w * load4(x + c * planes + p);
        b += w * load4(x + c * planes + p + 4);
      }
      store4(yr + p, a), store4(yr + p + 4, b);
    }
    for (; p < planes; ++p) {
      float acc = yr[p];
      for (Index c = 0; c < cols; ++c) acc += m[r * row_stride + c * col_stride] * x[c * planes + p];
      yr[p] = acc;
    }
  }
}

// Eight-lane dot product in the same order as dot_lanes.
inline float reduce_lanes(F4 lo, F4 hi, const float* a, const float* b, Index from, Index len) {
  float acc = ((lo[0] + hi[0]) + (lo[1] + hi[1])) + ((lo[2] + hi[2]) + (lo[3] + hi[3]));
  for (Index k = from; k < len; ++k) acc += a[k] * b[k];
  return acc;
}

// g[a * ld + b] += dot(A row a, B row b) for all rows of A (na) and B (nb),
// each row `len` floats long.
void pointwise_weight_grad(const float* A, Index na, const float* B, Index nb, Index len, float* g, Index ld) {
  Index a = 0;
  for (; a + 2 <= na; a += 2) {
    const float* A0 = A + a * len;
    const float* A1 = A0 + len;
    Index b = 0;
    for (; b + 2 <= nb; b += 2) {
      const float* B0 = B + b * len;
      const float* B1 = B0 + len;
      F4 l00 = {}, h00 = {}, l01 = {}, h01 = {}, l10 = {}, h10 = {}, l11 = {}, h11 = {};
      Index i = 0;
      for (; i + 8 <= len; i += 8) {
        const F4 a0l = load4(A0 + i), a0h = load4(A0 + i + 4);
        const F4 a1l = load4(A1 + i), a1h = load4(A1 + i + 4);
        const F4 b0l = load4(B0 + i), b0h = load4(B0 + i + 4);
        const F4 b1l = load4(B1 + i), b1h = load4(B1 + i + 4);
        l00 += a0l * b0l, h00 += a0h * b0h;
        l01 += a0l * b1l, h01 += a0h * b1h;
        l10 += a1l * b0l, h10 += a1h * b0h;
        l11 += a1l * b1l, h11 += a1h * b1h;
      }
      g[a * ld + b] += reduce_lanes(l00, h00, A0, B0, i, len);
      g[a * ld + b + 1] += reduce_lanes(l01, h01, A0, B1, i, len);
      g[(a + 1) * ld + b] += reduce_lanes(l10, h10, A1, B0, i, len);
      g[(a + 1) * ld + b + 1] += reduce_lanes(l11, h11, A1, B1, i, len);
    }
    for (; b < nb; ++b) {
      g[a * ld + b] += dot_lanes(A0, B + b * len, len);
      g[(a + 1) * ld + b] += dot_lanes(A1, B + b * len, len);
    }
  }
  for (; a < na; ++a)
    for (Index b = 0; b < nb; ++b) g[a * ld + b] += dot_lanes(A + a * len, B + b * len, len);
}

// Single-plane stride-1 correlation:
// y[oh][ow] += sum_{kh, kw} w[kh][kw] * x[oh + kh - ph][ow + kw - pw], with
// out-of-range taps skipped. Taps are summed in (kh, kw) order per element.
void plane_correlate(const float* x, Index h, Index w, const float* wt, Index k_h, Index k_w, Index ph,
                     Index pw, float* y, Index h_out, Index w_out) {
  // ow range where every kw tap is in range
  const Index lo = std::clamp<Index>(pw, 0, w_out);
  const Index hi = std::clamp<Index>(w - k_w + 1 + pw, lo, w_out);
  for (Index oh = 0; oh < h_out; ++oh) {
    const Index kh_lo = std::max<Index>(0, ph - oh);
    const Index kh_hi = std::min<Index>(k_h, h + ph - oh);
    float* yr = y + oh * w_out;
    auto scalar_at = [&](Index ow) {
      float acc = yr[ow];
      for (Index kh = kh_lo; kh < kh_hi; ++kh) {
        const float* xr = x + (oh + kh - ph) * w;
        for (Index kw = 0; kw < k_w; ++kw) {
          const Index iw = ow + kw - pw;
          if (iw >= 0 && iw < w) acc += wt[kh * k_w + kw] * xr[iw];
        }
      }
      yr[ow] = acc;
    };
    Index ow = 0;
    for (; ow < lo; ++ow) scalar_at(ow);
    for (; ow + 4 <= hi; ow += 4) {
      F4 acc = load4(yr + ow);
      for (Index kh = kh_lo; kh < kh_hi; ++kh) {
        const float* xr = x + (oh + kh - ph) * w + ow - pw;
        const float* wr = wt + kh * k_w;
        for (Index kw = 0; kw < k_w; ++kw) acc += wr[kw] * load4(xr + kw);
      }
      store4(yr + ow, acc);
    }
    for (; ow < w_out; ++ow) scalar_at(ow);
  }
}

bool depthwise_stride1(const ConvSpec& s) {
  return s.groups == s.c_in && s.c_in == s.c_out && s.stride_h == 1 && s.stride_w == 1;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor* bias,
                      const ConvSpec& s, const ConvGeometry& g) {
  Tensor out({g.n, g.c_out, g.h_out, g.w_out});
  const float* x = input.data().data();
  const float* wt = weights.data().data();
  float* y = out.data().data();
  const Index in_plane = g.h * g.w;
  const Index out_plane = g.h_out * g.w_out;
  const Index ksize = s.k_h * s.k_w;
  const bool pointwise = is_pointwise(s);
  if (pointwise && s.groups == 1) {
    for (Index n = 0; n < g.n; ++n) {
      float* yn = y + n * g.c_out * out_plane;
      if (bias) {
        for (Index oc = 0; oc < g.c_out; ++oc) {
          std::fill(yn + oc * out_plane, yn + (oc + 1) * out_plane, (*bias)[static_cast<std::size_t>(oc)]);
        }
      }
      pointwise_rows(wt, g.c_out, g.c_in, g.c_in, 1, x + n * g.c_in * in_plane, yn, out_plane);
    }
    return out;
  }
  if (depthwise_stride1(s)) {
    for (Index n = 0; n < g.n; ++n) {
      for (Index c = 0; c < g.c_out; ++c) {
        float* yp = y + (n * g.c_out + c) * out_plane;
        if (bias) std::fill(yp, yp + out_plane, (*bias)[static_cast<std::size_t>(c)]);
        plane_correlate(x + (n * g.c_in + c) * in_plane, g.h, g.w, wt + c * ksize, s.k_h, s.k_w, s.pad_h, s.pad_w,
                        yp, g.h_out, g.w_out);
      }
    }
    return out;
  }
  for (Index n = 0; n < g.n; ++n) {
    for (Index oc = 0; oc < g.c_out; ++oc) {
      const Index grp = oc / g.cog;
      float* yp = y + (n * g.c_out + oc) * out_plane;
      if (bias) std::fill(yp, yp + out_plane, (*bias)[static_cast<std::size_t>(oc)]);
      for (Index ic = 0; ic < g.cig; ++ic) {
        const float* xp = x + (n * g.c_in + grp * g.cig + ic) * in_plane;
        const float* wp = wt + (oc * g.cig + ic) * ksize;
        if (pointwise) {
          const float w = wp[0];
          for (Index p = 0; p < out_plane; ++p) yp[p] += w * xp[p];
          continue;
        }
        for (Index kh = 0; kh < s.k_h; ++kh) {
          for (Index kw = 0; kw < s.k_w; ++kw) {
            conv_tap_forward(xp, yp, wp[kh * s.k_w + kw], kh, kw, s, g);
          }
        }
      }
    }
  }
  return out;
}

std::vector<Tensor> conv2d_backward(const Tensor& input, const Tensor& weights, bool has_bias,
                                    const ConvSpec& s, const ConvGeometry& g,
                                    const Tensor& grad_out) {
  Tensor gin(input.shape());
  Tensor gw(weights.shape());
  const float* x = input.data().data();
  const float* wt = weights.data().data();
  const float* go = grad_out.data().data();
  float* gx = gin.data().data();
  float* gwp = gw.data().data();
  const Index in_plane = g.h * g.w;
  const Index out_plane = g.h_out * g.w_out;
  const Index ksize = s.k_h * s.k_w;
  const bool pointwise = is_pointwise(s);
  if (pointwise && s.groups == 1) {
    for (Index n = 0; n < g.n; ++n) {
      const float* xn = x + n * g.c_in * in_plane;
      const float* gon = go + n * g.c_out * out_plane;
      // grad_in[ic] += sum_oc w[oc, ic] grad_out[oc]
      pointwise_rows(wt, g.c_in, g.c_out, 1, g.c_in, gon, gx + n * g.c_in * in_plane, out_plane);
      pointwise_weight_grad(gon, g.c_out, xn, g.c_in, out_plane, gwp, g.c_in);
    }
  } else if (depthwise_stride1(s)) {
    std::vector<float> flipped(static_cast<std::size_t>(ksize));
    for (Index c = 0; c < g.c_out; ++c) {
      const float* wp = wt + c * ksize;
      for (Index i = 0; i < ksize; ++i) flipped[static_cast<std::size_t>(i)] = wp[ksize - 1 - i];
      for (Index n = 0; n < g.n; ++n) {
        const Index off_in = (n * g.c_in + c) * in_plane, off_out = (n * g.c_out + c) * out_plane;
        plane_correlate(go + off_out, g.h_out, g.w_out, flipped.data(), s.k_h, s.k_w, s.k_h - 1 - s.pad_h,
                        s.k_w - 1 - s.pad_w, gx + off_in, g.h, g.w);
        for (Index kh = 0; kh < s.k_h; ++kh)
          for (Index kw = 0; kw < s.k_w; ++kw)
            gwp[c * ksize + kh * s.k_w + kw] += conv_tap_weight_grad(x + off_in, go + off_out, kh, kw, s, g);
      }
    }
  } else {
  for (Index n = 0; n < g.n; ++n) {
    for (Index oc = 0; oc < g.c_out; ++oc) {
      const Index grp = oc / g.cog;
      const float* gop = go + (n * g.c_out + oc) * out_plane;
      for (Index ic = 0; ic < g.cig; ++ic) {
        const Index in_c = grp * g.cig + ic;
        const float* xp = x + (n * g.c_in + in_c) * in_plane;
        float* gxp = gx + (n * g.c_in + in_c) * in_plane;
        const float* wp = wt + (oc * g.cig + ic) * ksize;
        float* gwq = gwp + (oc * g.cig + ic) * ksize;
        if (pointwise) {
          const float w = wp[0];
          float acc = 0.0f;
          for (Index p = 0; p < out_plane; ++p) {
            gxp[p] += w * gop[p];
            acc += gop[p] * xp[p];
          }
          gwq[0] += acc;
          continue;
        }
        for (Index kh = 0; kh < s.k_h; ++kh) {
          for (Index kw = 0; kw < s.k_w; ++kw) {
            conv_tap_input_grad(gxp, gop, wp[kh * s.k_w + kw], kh, kw, s, g);
            gwq[kh * s.k_w + kw] += conv_tap_weight_grad(xp, gop, kh, kw, s, g);
          }
        }
      }
    }
  }
  }
  std::vector<Tensor> grads;
  grads.push_back(std::move(gin));
  grads.push_back(std::move(gw));
  if (has_bias) {
    Tensor gb({g.c_out});
    for (Index n = 0; n < g.n; ++n) {
      for (Index oc = 0; oc < g.c_out; ++oc) {
        const float* gop = go + (n * g.c_out + oc) * out_plane;
        float acc = 0.0f;
        for (Index p = 0; p < out_plane; ++p) acc += gop[p];
        gb[static_cast<std::size_t>(oc)] += acc;
      }
    }
    grads.push_back(std::move(gb));
  }
  return grads;
}

thread_local std::uint64_t* t_branch_digest = nullptr;

inline void note_branch(std::uint64_t code) {
  *t_branch_digest = (*t_branch_digest ^ code) * 0x100000001b3ULL;
}

template <class Code>
void trace_branches(const Tensor& x, Code code) {
  if (!t_branch_digest) return;
  for (float v : x.data()) note_branch(code(v));
}

// Unary elementwise op with derivative computed from the saved input.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, GradTape* tape, Fwd fwd, Deriv deriv) {
  Tensor y(x.shape());
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (tape) {
    tape->record(y, {&x}, [xv = x.values(), shape = x.shape(), deriv](const Tensor& g) {
      Tensor gx(shape);
      auto gs = g.data();
      auto gxs = gx.data();
      for (std::size_t i = 0; i < xv.size(); ++i) gxs[i] = gs[i] * deriv(xv[i]);
      std::vector<Tensor> out;
      out.push_back(std::move(gx));
      return out;
    });
  }
  return y;
}

float sigmoid_scalar(float v) { return 1.0f / (1.0f + std::exp(-v)); }

// Broadcast plan for two tensors of equal rank (<= 4), padded to 4-D.
struct Broadcast {
  std::array<Index, 4> out{1, 1, 1, 1};
  std::array<Index, 4> sa{0, 0, 0, 0};
  std::array<Index, 4> sb{0, 0, 0, 0};
  Shape out_shape;
};

std::array<Index, 4> padded_strides(const Shape& s, const std::array<Index, 4>& out) {
  std::array<Index, 4> ext{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) ext[off + i] = s[i];
  std::array<Index, 4> strides{};
  Index acc = 1;
  for (int i = 3; i >= 0; --i) {
    strides[i] = (ext[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= ext[i];
  }
  return strides;
}

Broadcast broadcast_plan(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != b.rank() || a.rank() > 4) {
    throw ShapeError(std::string(op) + ": operands " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " must have equal rank <= 4");
  }
  Broadcast p;
  const std::size_t off = 4 - a.rank();
  p.out_shape.resize(a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i) {
    Index ea = a.dim(i), eb = b.dim(i);
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": dimension " + std::to_string(i) + " mismatch (" +
                       std::to_string(ea) + " vs " + std::to_string(eb) + ")");
    }
    p.out_shape[i] = std::max(ea, eb);
    p.out[off + i] = p.out_shape[i];
  }
  p.sa = padded_strides(a.shape(), p.out);
  p.sb = padded_strides(b.shape(), p.out);
  return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  Index o = 0;
  for (Index i0 = 0; i0 < p.out[0]; ++i0)
    for (Index i1 = 0; i1 < p.out[1]; ++i1)
      for (Index i2 = 0; i2 < p.out[2]; ++i2)
        for (Index i3 = 0; i3 < p.out[3]; ++i3, ++o) {
          const Index ia = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2] + i3 * p.sa[3];
          const Index ib = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2] + i3 * p.sb[3];
          f(o, ia, ib);
        }
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, GradTape* tape, const char* op) {
  Broadcast p = broadcast_plan(a, b, op);
  Tensor y(p.out_shape);
  auto as = a.data();
  auto bs = b.data();
  auto ys = y.data();
  for_each_broadcast(p, [&](Index o, Index ia, Index ib) {
    switch (kind) {
      case BinaryKind::add: ys[o] = as[ia] + bs[ib]; break;
      case BinaryKind::sub: ys[o] = as[ia] - bs[ib]; break;
      case BinaryKind::mul: ys[o] = as[ia] * bs[ib]; break;
    }
  });
  if (tape) {
    std::vector<float> av, bv;
    if (kind == BinaryKind::mul) {
      av = a.values();
      bv = b.values();
    }
    tape->record(y, {&a, &b},
                 [p, kind, sa = a.shape(), sb = b.shape(), av = std::move(av),
                  bv = std::move(bv)](const Tensor& g) {
                   Tensor ga(sa), gb(sb);
                   auto gs = g.data();
                   auto gas = ga.data();
                   auto gbs = gb.data();
                   for_each_broadcast(p, [&](Index o, Index ia, Index ib) {
                     switch (kind) {
                       case BinaryKind::add:
                         gas[ia] += gs[o];
                         gbs[ib] += gs[o];
                         break;
                       case BinaryKind::sub:
                         gas[ia] += gs[o];
                         gbs[ib] -= gs[o];
                         break;
                       case BinaryKind::mul:
                         gas[ia] += gs[o] * bv[ib];
                         gbs[ib] += gs[o] * av[ia];
                         break;
                     }
                   });
                   std::vector<Tensor> out;
                   out.push_back(std::move(ga));
                   out.push_back(std::move(gb));
                   return out;
                 });
  }
  return y;
}

std::vector<Tensor> single(Tensor t) {
  std::vector<Tensor> v;
  v.push_back(std::move(t));
  return v;
}

}  // namespace

void ConvSpec::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v < 1) throw ValidationError(std::string("ConvSpec: ") + name + " must be positive, got " + std::to_string(v));
  };
  positive(k_h, "k_h");
  positive(k_w, "k_w");
  positive(c_in, "c_in");
  positive(c_out, "c_out");
  positive(stride_h, "stride_h");
  positive(stride_w, "stride_w");
  positive(groups, "groups");
  if (pad_h < 0 || pad_w < 0) throw ValidationError("ConvSpec: padding must be non-negative");
  if (c_in % groups != 0) {
    throw ValidationError("ConvSpec: groups " + std::to_string(groups) + " does not divide c_in " + std::to_string(c_in));
  }
  if (c_out % groups != 0) {
    throw ValidationError("ConvSpec: groups " + std::to_string(groups) + " does not divide c_out " + std::to_string(c_out));
  }
}

ConvSpec ConvSpec::standard(Index k_h, Index k_w, Index c_in, Index c_out, Index stride) {
  return ConvSpec{k_h, k_w, c_in, c_out, stride, stride, (k_h - 1) / 2, (k_w - 1) / 2, 1};
}

ConvSpec ConvSpec::depthwise_spec(Index k_h, Index k_w, Index channels, Index stride_h,
                                  Index stride_w) {
  return ConvSpec{k_h, k_w, channels, channels, stride_h, stride_w, (k_h - 1) / 2, (k_w - 1) / 2, channels};
}

std::string to_string(const ConvSpec& s) {
  return std::to_string(s.k_h) + "x" + std::to_string(s.k_w) + " " + std::to_string(s.c_in) + "->" +
         std::to_string(s.c_out) + " s" + std::to_string(s.stride_h) + "x" + std::to_string(s.stride_w) +
         " p" + std::to_string(s.pad_h) + "x" + std::to_string(s.pad_w) + " g" + std::to_string(s.groups);
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor* bias, const ConvSpec& spec,
              GradTape* tape) {
  const ConvGeometry g = conv_geometry(input, weights, bias, spec);
  Tensor out = conv2d_forward(input, weights, bias, spec, g);
  if (tape) {
    std::vector<const Tensor*> inputs{&input, &weights};
    if (bias) inputs.push_back(bias);
    tape->record(out, std::move(inputs),
                 [x = input, w = weights, has_bias = bias != nullptr, spec, g](const Tensor& go) {
                   return conv2d_backward(x, w, has_bias, spec, g, go);
                 });
  }
  return out;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias, GradTape* tape) {
  require_rank(input, 2, "dense", "input");
  require_rank(weights, 2, "dense", "weights");
  require_rank(bias, 1, "dense", "bias");
  const Index n = input.dim(0), d_in = input.dim(1), d_out = weights.dim(0);
  require_dim("dense", "weights D_in", weights.dim(1), d_in);
  require_dim("dense", "bias D_out", bias.dim(0), d_out);
  Tensor y({n, d_out});
  const float* x = input.data().data();
  const float* w = weights.data().data();
  float* ys = y.data().data();
  for (Index r = 0; r < n; ++r) {
    for (Index o = 0; o < d_out; ++o) {
      float acc = bias[static_cast<std::size_t>(o)];
      const float* wr = w + o * d_in;
      const float* xr = x + r * d_in;
      for (Index i = 0; i < d_in; ++i) acc += wr[i] * xr[i];
      ys[r * d_out + o] = acc;
    }
  }
  if (tape) {
    tape->record(y, {&input, &weights, &bias}, [xv = input, wv = weights, n, d_in, d_out](const Tensor& g) {
      Tensor gx(xv.shape()), gw(wv.shape()), gb({d_out});
      const float* gs = g.data().data();
      const float* x = xv.data().data();
      const float* w = wv.data().data();
      float* gxs = gx.data().data();
      float* gws = gw.data().data();
      for (Index r = 0; r < n; ++r) {
        for (Index o = 0; o < d_out; ++o) {
          const float go = gs[r * d_out + o];
          gb[static_cast<std::size_t>(o)] += go;
          const float* wr = w + o * d_in;
          const float* xr = x + r * d_in;
          float* gxr = gxs + r * d_in;
          float* gwr = gws + o * d_in;
          for (Index i = 0; i < d_in; ++i) {
            gxr[i] += go * wr[i];
            gwr[i] += go * xr[i];
          }
        }
      }
      std::vector<Tensor> out;
      out.push_back(std::move(gx));
      out.push_back(std::move(gw));
      out.push_back(std::move(gb));
      return out;
    });
  }
  return y;
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "hswish") return Activation::hswish;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "identity") return Activation::identity;
  throw ValidationError("unknown activation '" + name + "' (expected relu, hswish, sigmoid, identity)");
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::relu: return "relu";
    case Activation::hswish: return "hswish";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "identity";
}

BranchTrace::BranchTrace() : outer_(t_branch_digest) { t_branch_digest = &digest_; }
BranchTrace::~BranchTrace() { t_branch_digest = outer_; }

Tensor relu(const Tensor& x, GradTape* tape) {
  trace_branches(x, [](float v) { return std::uint64_t{v > 0.0f}; });
  return unary(
      // NaN passes through so a poisoned batch still surfaces as a bad loss
      x, tape, [](float v) { return v > 0.0f || std::isnan(v) ? v : 0.0f; },
      [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor hswish(const Tensor& x, GradTape* tape) {
  trace_branches(x, [](float v) { return std::uint64_t{v <= -3.0f ? 0u : (v >= 3.0f ? 2u : 1u)}; });
  return unary(
      x, tape, [](float v) { return v * std::clamp(v + 3.0f, 0.0f, 6.0f) / 6.0f; },
      [](float v) {
        if (v <= -3.0f) return 0.0f;
        if (v >= 3.0f) return 1.0f;
        return (2.0f * v + 3.0f) / 6.0f;
      });
}

Tensor sigmoid(const Tensor& x, GradTape* tape) {
  return unary(x, tape, sigmoid_scalar, [](float v) {
    const float s = sigmoid_scalar(v);
    return s * (1.0f - s);
  });
}

Tensor activate(const Tensor& x, Activation act, GradTape* tape) {
  switch (act) {
    case Activation::relu: return relu(x, tape);
    case Activation::hswish: return hswish(x, tape);
    case Activation::sigmoid: return sigmoid(x, tape);
    case Activation::identity: break;
  }
  return unary(x, tape, [](float v) { return v; }, [](float) { return 1.0f; });
}

BatchNormParams BatchNormParams::identity(Index channels) {
  return BatchNormParams{Tensor({channels}, 1.0f), Tensor({channels}, 0.0f),
                         Tensor({channels}, 0.0f), Tensor({channels}, 1.0f)};
}

Tensor batchnorm(const Tensor& input, BatchNormParams& params, Mode mode, GradTape* tape,
                 bool update_running) {
  require_rank(input, 4, "batchnorm", "input");
  const Index n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  for (const Tensor* t : {&params.gamma, &params.beta, &params.running_mean, &params.running_var}) {
    require_rank(*t, 1, "batchnorm", "parameter");
    require_dim("batchnorm", "parameter C", t->dim(0), c);
  }
  const Index m = n * plane;
  if (mode == Mode::train && m < 2) {
    throw ValidationError("batchnorm: train mode needs more than one value per channel, got " +
                          std::to_string(m));
  }
  std::vector<float> mean_v(static_cast<std::size_t>(c)), invstd_v(static_cast<std::size_t>(c));
  const float* x = input.data().data();
  for (Index ch = 0; ch < c; ++ch) {
    const auto k = static_cast<std::size_t>(ch);
    if (mode == Mode::train) {
      double s = 0.0;
      for (Index b = 0; b < n; ++b) {
        const float* p = x + (b * c + ch) * plane;
        for (Index i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (Index b = 0; b < n; ++b) {
        const float* p = x + (b * c + ch) * plane;
        for (Index i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(m);
      mean_v[k] = static_cast<float>(mu);
      invstd_v[k] = static_cast<float>(1.0 / std::sqrt(var + kBatchNormEps));
      if (update_running) {
        const double unbiased = ss / static_cast<double>(m - 1);
        params.running_mean[k] = (1.0f - kBatchNormMomentum) * params.running_mean[k] +
                                 kBatchNormMomentum * static_cast<float>(mu);
        params.running_var[k] = (1.0f - kBatchNormMomentum) * params.running_var[k] +
                                kBatchNormMomentum * static_cast<float>(unbiased);
      }
    } else {
      mean_v[k] = params.running_mean[k];
      invstd_v[k] = 1.0f / std::sqrt(params.running_var[k] + kBatchNormEps);
    }
  }
  Tensor xhat(input.shape());
  Tensor y(input.shape());
  float* xh = xhat.data().data();
  float* ys = y.data().data();
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      const float mu = mean_v[k], is = invstd_v[k], ga = params.gamma[k], be = params.beta[k];
      const Index off = (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) {
        xh[off + i] = (x[off + i] - mu) * is;
        ys[off + i] = ga * xh[off + i] + be;
      }
    }
  }
  if (tape) {
    tape->record(y, {&input, &params.gamma, &params.beta},
                 [xhat = std::move(xhat), invstd_v, gamma = params.gamma.values(), mode, n, c, plane,
                  m](const Tensor& g) {
                   Tensor gx(xhat.shape()), ggamma({c}), gbeta({c});
                   const float* gs = g.data().data();
                   const float* xh = xhat.data().data();
                   float* gxs = gx.data().data();
                   for (Index ch = 0; ch < c; ++ch) {
                     const auto k = static_cast<std::size_t>(ch);
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (Index b = 0; b < n; ++b) {
                       const Index off = (b * c + ch) * plane;
                       for (Index i = 0; i < plane; ++i) {
                         sum_g += gs[off + i];
                         sum_gx += static_cast<double>(gs[off + i]) * xh[off + i];
                       }
                     }
                     gbeta[k] = static_cast<float>(sum_g);
                     ggamma[k] = static_cast<float>(sum_gx);
                     const double scale = static_cast<double>(gamma[k]) * invstd_v[k];
                     for (Index b = 0; b < n; ++b) {
                       const Index off = (b * c + ch) * plane;
                       for (Index i = 0; i < plane; ++i) {
                         if (mode == Mode::train) {
                           gxs[off + i] = static_cast<float>(
                               scale * (gs[off + i] - sum_g / m - xh[off + i] * sum_gx / m));
                         } else {
                           gxs[off + i] = static_cast<float>(scale * gs[off + i]);
                         }
                       }
                     }
                   }
                   std::vector<Tensor> out;
                   out.push_back(std::move(gx));
                   out.push_back(std::move(ggamma));
                   out.push_back(std::move(gbeta));
                   return out;
                 });
  }
  return y;
}

Tensor pool2d(const Tensor& input, PoolKind kind, Index window_h, Index window_w, Index stride_h,
              Index stride_w, GradTape* tape) {
  require_rank(input, 4, "pool2d", "input");
  if (window_h < 1 || window_w < 1 || stride_h < 1 || stride_w < 1) {
    throw ValidationError("pool2d: window and stride must be positive");
  }
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window_h > h || window_w > w) {
    throw ShapeError("pool2d: window " + std::to_string(window_h) + "x" + std::to_string(window_w) +
                     " exceeds input " + std::to_string(h) + "x" + std::to_string(w));
  }
  const Index ho = (h - window_h) / stride_h + 1, wo = (w - window_w) / stride_w + 1;
  Tensor y({n, c, ho, wo});
  // Flat input index feeding each max output.
  std::vector<Index> argmax;
  if (kind == PoolKind::max) argmax.resize(static_cast<std::size_t>(y.numel()));
  const float* x = input.data().data();
  float* ys = y.data().data();
  const float inv_area = 1.0f / static_cast<float>(window_h * window_w);
  for (Index p = 0; p < n * c; ++p) {
    const float* xp = x + p * h * w;
    for (Index oh = 0; oh < ho; ++oh) {
      for (Index ow = 0; ow < wo; ++ow) {
        const Index o = (p * ho + oh) * wo + ow;
        if (kind == PoolKind::avg) {
          float acc = 0.0f;
          for (Index i = 0; i < window_h; ++i)
            for (Index j = 0; j < window_w; ++j) acc += xp[(oh * stride_h + i) * w + ow * stride_w + j];
          ys[o] = acc * inv_area;
        } else {
          Index best = (oh * stride_h) * w + ow * stride_w;
          for (Index i = 0; i < window_h; ++i)
            for (Index j = 0; j < window_w; ++j) {
              const Index idx = (oh * stride_h + i) * w + ow * stride_w + j;
              if (xp[idx] > xp[best]) best = idx;
            }
          ys[o] = xp[best];
          argmax[static_cast<std::size_t>(o)] = p * h * w + best;
          if (t_branch_digest) note_branch(static_cast<std::uint64_t>(best));
        }
      }
    }
  }
  if (tape) {
    tape->record(y, {&input},
                 [kind, argmax = std::move(argmax), shape = input.shape(), n, c, h, w, ho, wo, window_h,
                  window_w, stride_h, stride_w, inv_area](const Tensor& g) {
                   Tensor gx(shape);
                   float* gxs = gx.data().data();
                   const float* gs = g.data().data();
                   for (Index p = 0; p < n * c; ++p) {
                     for (Index oh = 0; oh < ho; ++oh) {
                       for (Index ow = 0; ow < wo; ++ow) {
                         const Index o = (p * ho + oh) * wo + ow;
                         if (kind == PoolKind::max) {
                           gxs[argmax[static_cast<std::size_t>(o)]] += gs[o];
                         } else {
                           const float v = gs[o] * inv_area;
                           for (Index i = 0; i < window_h; ++i)
                             for (Index j = 0; j < window_w; ++j)
                               gxs[p * h * w + (oh * stride_h + i) * w + ow * stride_w + j] += v;
                         }
                       }
                     }
                   }
                   return single(std::move(gx));
                 });
  }
  return y;
}

Tensor global_pool(const Tensor& input, PoolKind kind, GradTape* tape) {
  require_rank(input, 4, "global_pool", "input");
  return pool2d(input, kind, input.dim(2), input.dim(3), 1, 1, tape);
}

Tensor dropout(const Tensor& input, float p, std::mt19937_64& rng, Mode mode, GradTape* tape) {
  if (!(p >= 0.0f && p < 1.0f)) {
    throw ValidationError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::infer || p == 0.0f) return scale(input, 1.0f, tape);
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(static_cast<std::size_t>(input.numel()));
  for (auto& m : mask) {
    // 24 random bits give a uniform float in [0, 1) independent of the standard library.
    const float u = static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
    m = u < p ? 0.0f : keep_scale;
  }
  Tensor y(input.shape());
  auto xs = input.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < mask.size(); ++i) ys[i] = xs[i] * mask[i];
  if (tape) {
    tape->record(y, {&input}, [mask = std::move(mask), shape = input.shape()](const Tensor& g) {
      Tensor gx(shape);
      auto gs = g.data();
      auto gxs = gx.data();
      for (std::size_t i = 0; i < mask.size(); ++i) gxs[i] = gs[i] * mask[i];
      return single(std::move(gx));
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b, GradTape* tape) { return binary(a, b, BinaryKind::add, tape, "add"); }
Tensor sub(const Tensor& a, const Tensor& b, GradTape* tape) { return binary(a, b, BinaryKind::sub, tape, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b, GradTape* tape) { return binary(a, b, BinaryKind::mul, tape, "mul"); }

Tensor scale(const Tensor& x, float factor, GradTape* tape) {
  return unary(x, tape, [factor](float v) { return v * factor; }, [factor](float) { return factor; });
}

Tensor abs(const Tensor& x, GradTape* tape) {
  trace_branches(x, [](float v) { return std::uint64_t{v > 0.0f ? 2u : (v < 0.0f ? 0u : 1u)}; });
  return unary(
      x, tape, [](float v) { return std::fabs(v); },
      [](float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Tensor sum(const Tensor& x, GradTape* tape) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor y = Tensor::scalar(static_cast<float>(acc));
  if (tape) {
    tape->record(y, {&x}, [shape = x.shape()](const Tensor& g) { return single(Tensor(shape, g[0])); });
  }
  return y;
}

Tensor mean(const Tensor& x, GradTape* tape) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const auto count = static_cast<double>(x.numel());
  Tensor y = Tensor::scalar(static_cast<float>(acc / count));
  if (tape) {
    tape->record(y, {&x}, [shape = x.shape(), count](const Tensor& g) {
      return single(Tensor(shape, static_cast<float>(g[0] / count)));
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape, GradTape* tape) {
  Tensor y = x.reshaped(std::move(shape));
  if (tape) {
    tape->record(y, {&x}, [shape = x.shape()](const Tensor& g) { return single(g.reshaped(shape)); });
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b, GradTape* tape) {
  if (a.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("concat_channels: operands " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " must have equal rank >= 2");
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != 1 && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_channels: dimension " + std::to_string(i) + " mismatch (" +
                       std::to_string(a.dim(i)) + " vs " + std::to_string(b.dim(i)) + ")");
    }
  }
  Shape out_shape = a.shape();
  out_shape[1] += b.dim(1);
  const Index outer = a.dim(0);
  const Index ia = a.numel() / outer, ib = b.numel() / outer;
  Tensor y(out_shape);
  for (Index r = 0; r < outer; ++r) {
    std::copy_n(a.data().data() + r * ia, ia, y.data().data() + r * (ia + ib));
    std::copy_n(b.data().data() + r * ib, ib, y.data().data() + r * (ia + ib) + ia);
  }
  if (tape) {
    tape->record(y, {&a, &b}, [sa = a.shape(), sb = b.shape(), outer, ia, ib](const Tensor& g) {
      Tensor ga(sa), gb(sb);
      for (Index r = 0; r < outer; ++r) {
        std::copy_n(g.data().data() + r * (ia + ib), ia, ga.data().data() + r * ia);
        std::copy_n(g.data().data() + r * (ia + ib) + ia, ib, gb.data().data() + r * ib);
      }
      std::vector<Tensor> out;
      out.push_back(std::move(ga));
      out.push_back(std::move(gb));
      return out;
    });
  }
  return y;
}

Tensor slice_columns(const Tensor& x, Index begin, Index end, GradTape* tape) {
  require_rank(x, 2, "slice_columns", "input");
  const Index n = x.dim(0), d = x.dim(1);
  if (begin < 0 || end > d || begin >= end) {
    throw ShapeError("slice_columns: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for width " + std::to_string(d));
  }
  const Index k = end - begin;
  Tensor y({n, k});
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < k; ++j) y[static_cast<std::size_t>(r * k + j)] = x[static_cast<std::size_t>(r * d + begin + j)];
  if (tape) {
    tape->record(y, {&x}, [n, d, k, begin](const Tensor& g) {
      Tensor gx({n, d});
      for (Index r = 0; r < n; ++r)
        for (Index j = 0; j < k; ++j) gx[static_cast<std::size_t>(r * d + begin + j)] = g[static_cast<std::size_t>(r * k + j)];
      return single(std::move(gx));
    });
  }
  return y;
}

Tensor channel_mean(const Tensor& x, GradTape* tape) {
  require_rank(x, 4, "channel_mean", "input");
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({n, 1, x.dim(2), x.dim(3)});
  const float inv = 1.0f / static_cast<float>(c);
  for (Index b = 0; b < n; ++b) {
    float* yp = y.data().data() + b * plane;
    for (Index ch = 0; ch < c; ++ch) {
      const float* xp = x.data().data() + (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) yp[i] += xp[i];
    }
    for (Index i = 0; i < plane; ++i) yp[i] *= inv;
  }
  if (tape) {
    tape->record(y, {&x}, [shape = x.shape(), n, c, plane, inv](const Tensor& g) {
      Tensor gx(shape);
      for (Index b = 0; b < n; ++b)
        for (Index ch = 0; ch < c; ++ch)
          for (Index i = 0; i < plane; ++i)
            gx.data()[static_cast<std::size_t>((b * c + ch) * plane + i)] = g[static_cast<std::size_t>(b * plane + i)] * inv;
      return single(std::move(gx));
    });
  }
  return y;
}

Tensor channel_max(const Tensor& x, GradTape* tape) {
  require_rank(x, 4, "channel_max", "input");
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({n, 1, x.dim(2), x.dim(3)});
  std::vector<Index> arg(static_cast<std::size_t>(n * plane), 0);
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < plane; ++i) {
      Index best = 0;
      float bv = x[static_cast<std::size_t>(b * c * plane + i)];
      for (Index ch = 1; ch < c; ++ch) {
        const float v = x[static_cast<std::size_t>((b * c + ch) * plane + i)];
        if (v > bv) {
          bv = v;
          best = ch;
        }
      }
      y[static_cast<std::size_t>(b * plane + i)] = bv;
      arg[static_cast<std::size_t>(b * plane + i)] = best;
      if (t_branch_digest) note_branch(static_cast<std::uint64_t>(best));
    }
  }
  if (tape) {
    tape->record(y, {&x}, [shape = x.shape(), arg = std::move(arg), n, c, plane](const Tensor& g) {
      Tensor gx(shape);
      for (Index b = 0; b < n; ++b)
        for (Index i = 0; i < plane; ++i) {
          const Index ch = arg[static_cast<std::size_t>(b * plane + i)];
          gx[static_cast<std::size_t>((b * c + ch) * plane + i)] = g[static_cast<std::size_t>(b * plane + i)];
        }
      return single(std::move(gx));
    });
  }
  return y;
}

namespace {

Tensor roll_values(const Tensor& x, Index shift_h, Index shift_w) {
  const Index h = x.dim(2), w = x.dim(3), planes = x.dim(0) * x.dim(1);
  Tensor y(x.shape());
  const Index sh = ((shift_h % h) + h) % h, sw = ((shift_w % w) + w) % w;
  for (Index p = 0; p < planes; ++p) {
    const float* xp = x.data().data() + p * h * w;
    float* yp = y.data().data() + p * h * w;
    for (Index i = 0; i < h; ++i) {
      const Index src_i = (i - sh + h) % h;
      for (Index j = 0; j < w; ++j) yp[i * w + j] = xp[src_i * w + (j - sw + w) % w];
    }
  }
  return y;
}

}  // namespace

Tensor roll(const Tensor& x, Index shift_h, Index shift_w, GradTape* tape) {
  require_rank(x, 4, "roll", "input");
  Tensor y = roll_values(x, shift_h, shift_w);
  if (tape) {
    tape->record(y, {&x}, [shift_h, shift_w](const Tensor& g) {
      return single(roll_values(g, -shift_h, -shift_w));
    });
  }
  return y;
}

namespace {

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

// Copies between the [N, C, H, W] layout and window tiles; `to_tiles` picks the direction.
void window_copy(const float* src, float* dst, Index n, Index c, Index h, Index w, Index win,
                 bool to_tiles) {
  const Index th = ceil_div(h, win), tw = ceil_div(w, win);
  for (Index b = 0; b < n; ++b)
    for (Index ti = 0; ti < th; ++ti)
      for (Index tj = 0; tj < tw; ++tj) {
        const Index tile = (b * th + ti) * tw + tj;
        for (Index ch = 0; ch < c; ++ch)
          for (Index i = 0; i < win; ++i) {
            const Index hh = ti * win + i;
            if (hh >= h) break;
            for (Index j = 0; j < win; ++j) {
              const Index ww = tj * win + j;
              if (ww >= w) break;
              const Index flat = ((b * c + ch) * h + hh) * w + ww;
              const Index tiled = ((tile * c + ch) * win + i) * win + j;
              if (to_tiles) {
                dst[tiled] = src[flat];
              } else {
                dst[flat] = src[tiled];
              }
            }
          }
      }
}

}  // namespace

Tensor window_partition(const Tensor& x, Index window, GradTape* tape) {
  require_rank(x, 4, "window_partition", "input");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window < 1 || window > h || window > w) {
    throw ShapeError("window_partition: window " + std::to_string(window) + " exceeds spatial extent " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const Index tiles = n * ceil_div(h, window) * ceil_div(w, window);
  Tensor y({tiles, c, window, window});
  window_copy(x.data().data(), y.data().data(), n, c, h, w, window, true);
  if (tape) {
    tape->record(y, {&x}, [shape = x.shape(), n, c, h, w, window](const Tensor& g) {
      Tensor gx(shape);
      window_copy(g.data().data(), gx.data().data(), n, c, h, w, window, false);
      return single(std::move(gx));
    });
  }
  return y;
}

Tensor window_merge(const Tensor& tiles, Index batch, Index height, Index width, GradTape* tape) {
  require_rank(tiles, 4, "window_merge", "tiles");
  const Index c = tiles.dim(1), window = tiles.dim(2);
  require_dim("window_merge", "tile width", tiles.dim(3), window);
  require_dim("window_merge", "tile count", tiles.dim(0),
              batch * ceil_div(height, window) * ceil_div(width, window));
  Tensor y({batch, c, height, width});
  window_copy(tiles.data().data(), y.data().data(), batch, c, height, width, window, false);
  if (tape) {
    tape->record(y, {&tiles}, [shape = tiles.shape(), batch, c, height, width, window](const Tensor& g) {
      Tensor gt(shape);
      window_copy(g.data().data(), gt.data().data(), batch, c, height, width, window, true);
      return single(std::move(gt));
    });
  }
  return y;
}

}  // namespace mtgaze
