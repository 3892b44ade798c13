#pragma once

// Implementation of the forward/backward passes declared in network.hpp.

#include <algorithm>

#include "sessionfit/network.hpp"

namespace sessionfit {
namespace detail {

inline void pad_plane_copy(const float* src, int h, int w, int padding, float* dst) {
  const int pw = w + 2 * padding;
  for (int y = 0; y < h; ++y) {
    float* row = dst + static_cast<std::size_t>(y + padding) * pw + padding;
    const float* srow = src + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) row[x] = srow[x];
  }
}

struct ConvDims {
  int ic, oc, k, stride, padding;
  int h, w, ph, pw, oh, ow;
};

inline ConvDims conv_dims(const Conv2D& conv, const Tensor& input) {
  ConvDims d{};
  d.ic = conv.in_channels;
  d.oc = conv.out_channels;
  d.k = conv.kernel;
  d.stride = conv.stride;
  d.padding = conv.padding;
  d.h = static_cast<int>(input.shape[2]);
  d.w = static_cast<int>(input.shape[3]);
  d.ph = d.h + 2 * d.padding;
  d.pw = d.w + 2 * d.padding;
  d.oh = (d.ph - d.k) / d.stride + 1;
  d.ow = (d.pw - d.k) / d.stride + 1;
  return d;
}

// Gathers the 3x3 stride-1 receptive fields into a pixel-major patch matrix
// [oh*ow x in_channels*9]; column order is (ic, ky, kx), matching the weight
// layout.
inline void im2col3(const ConvDims& d, const float* padded, float* patch) {
  const int j9 = d.ic * 9;
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      float* prow = patch + (static_cast<std::size_t>(oy) * d.ow + ox) * j9;
      for (int ic = 0; ic < d.ic; ++ic) {
        const float* plane = padded + static_cast<std::size_t>(ic) * d.ph * d.pw;
        for (int ky = 0; ky < 3; ++ky) {
          const float* s = plane + static_cast<std::size_t>(oy + ky) * d.pw + ox;
          float* dst = prow + ic * 9 + ky * 3;
          dst[0] = s[0];
          dst[1] = s[1];
          dst[2] = s[2];
        }
      }
    }
  }
}

// Weight-gradient row accumulation for the 3x3 stride-1 path. Partial sums
// are kept in `Lanes` parallel slots and folded lane-ascending by the
// caller; the lane width is picked from the output width alone so the
// summation order is a pure function of the layer configuration.
template <int Lanes>
inline void dw3_accumulate_rows(const float* __restrict__ pplane,
                                const float* __restrict__ dplane, int oh, int ow, int pw,
                                int ky, float* __restrict__ l0, float* __restrict__ l1,
                                float* __restrict__ l2) {
  for (int oy = 0; oy < oh; ++oy) {
    const float* __restrict__ s = pplane + static_cast<std::size_t>(oy + ky) * pw;
    const float* __restrict__ g = dplane + static_cast<std::size_t>(oy) * ow;
    int ox = 0;
    for (; ox + Lanes <= ow; ox += Lanes) {
      for (int l = 0; l < Lanes; ++l) {
        l0[l] += s[ox + l] * g[ox + l];
        l1[l] += s[ox + l + 1] * g[ox + l];
        l2[l] += s[ox + l + 2] * g[ox + l];
      }
    }
    for (int t = 0; ox < ow; ++ox, ++t) {
      l0[t] += s[ox] * g[ox];
      l1[t] += s[ox + 1] * g[ox];
      l2[t] += s[ox + 2] * g[ox];
    }
  }
}

inline Tensor conv2d_forward(const Conv2D& conv, const LayerParams& p, const Tensor& input) {
  const ConvDims d = conv_dims(conv, input);
  const std::size_t batch = input.shape[0];
  Tensor out = Tensor::zeros({batch, static_cast<std::size_t>(d.oc),
                              static_cast<std::size_t>(d.oh), static_cast<std::size_t>(d.ow)});
  std::vector<float> padded(static_cast<std::size_t>(d.ic) * d.ph * d.pw, 0.0f);
  const std::size_t in_stride = static_cast<std::size_t>(d.ic) * d.h * d.w;
  const std::size_t out_stride = static_cast<std::size_t>(d.oc) * d.oh * d.ow;
  const std::size_t ksq = static_cast<std::size_t>(d.k) * d.k;
  const bool fast3 = d.k == 3 && d.stride == 1;
  const bool patch3 = fast3 && d.ow <= 8 && d.oc >= 32;

  // Narrow-plane path: accumulate output pixels over the contiguous output
  // channel dimension against a transposed weight matrix [ic*9 x oc].
  if (patch3) {
    const int j9 = d.ic * 9;
    const int pix = d.oh * d.ow;
    std::vector<float> wt(static_cast<std::size_t>(j9) * d.oc);
    for (int oc = 0; oc < d.oc; ++oc)
      for (int j = 0; j < j9; ++j)
        wt[static_cast<std::size_t>(j) * d.oc + oc] =
            p.weights.data[static_cast<std::size_t>(oc) * j9 + j];
    std::vector<float> patch(static_cast<std::size_t>(pix) * j9);
    std::vector<float> out_t(static_cast<std::size_t>(pix) * d.oc);
    for (std::size_t b = 0; b < batch; ++b) {
      const float* in = input.data.data() + b * in_stride;
      for (int c = 0; c < d.ic; ++c)
        pad_plane_copy(in + static_cast<std::size_t>(c) * d.h * d.w, d.h, d.w, d.padding,
                       padded.data() + static_cast<std::size_t>(c) * d.ph * d.pw);
      im2col3(d, padded.data(), patch.data());
      for (int pidx = 0; pidx < pix; ++pidx) {
        float* __restrict__ orow = out_t.data() + static_cast<std::size_t>(pidx) * d.oc;
        for (int oc = 0; oc < d.oc; ++oc) orow[oc] = p.bias.data[static_cast<std::size_t>(oc)];
        const float* __restrict__ prow = patch.data() + static_cast<std::size_t>(pidx) * j9;
        for (int j = 0; j < j9; ++j) {
          const float v = prow[j];
          const float* __restrict__ wrow = wt.data() + static_cast<std::size_t>(j) * d.oc;
          for (int oc = 0; oc < d.oc; ++oc) orow[oc] += v * wrow[oc];
        }
      }
      float* out_base = out.data.data() + b * out_stride;
      for (int oc = 0; oc < d.oc; ++oc)
        for (int pidx = 0; pidx < pix; ++pidx)
          out_base[static_cast<std::size_t>(oc) * pix + pidx] =
              out_t[static_cast<std::size_t>(pidx) * d.oc + oc];
    }
    return out;
  }

  for (std::size_t b = 0; b < batch; ++b) {
    const float* in = input.data.data() + b * in_stride;
    for (int c = 0; c < d.ic; ++c)
      pad_plane_copy(in + static_cast<std::size_t>(c) * d.h * d.w, d.h, d.w, d.padding,
                     padded.data() + static_cast<std::size_t>(c) * d.ph * d.pw);
    float* out_base = out.data.data() + b * out_stride;
    for (int oc = 0; oc < d.oc; ++oc) {
      float* plane = out_base + static_cast<std::size_t>(oc) * d.oh * d.ow;
      const float bias = p.bias.data[static_cast<std::size_t>(oc)];
      for (std::size_t i = 0; i < static_cast<std::size_t>(d.oh) * d.ow; ++i) plane[i] = bias;
      const float* wbase =
          p.weights.data.data() + static_cast<std::size_t>(oc) * d.ic * ksq;
      for (int ic = 0; ic < d.ic; ++ic) {
        const float* pplane = padded.data() + static_cast<std::size_t>(ic) * d.ph * d.pw;
        const float* wk = wbase + static_cast<std::size_t>(ic) * ksq;
        if (fast3) {
          // 3x3 stride-1 path: the three column taps of a kernel row are
          // fused into one expression per output element
          for (int ky = 0; ky < 3; ++ky) {
            const float w0 = wk[static_cast<std::size_t>(ky) * 3];
            const float w1 = wk[static_cast<std::size_t>(ky) * 3 + 1];
            const float w2 = wk[static_cast<std::size_t>(ky) * 3 + 2];
            for (int oy = 0; oy < d.oh; ++oy) {
              const float* __restrict__ src =
                  pplane + static_cast<std::size_t>(oy + ky) * d.pw;
              float* __restrict__ dst = plane + static_cast<std::size_t>(oy) * d.ow;
              for (int ox = 0; ox < d.ow; ++ox)
                dst[ox] += w0 * src[ox] + w1 * src[ox + 1] + w2 * src[ox + 2];
            }
          }
        } else {
          for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
              const float wv = wk[static_cast<std::size_t>(ky) * d.k + kx];
              for (int oy = 0; oy < d.oh; ++oy) {
                const float* __restrict__ src =
                    pplane + static_cast<std::size_t>(oy * d.stride + ky) * d.pw + kx;
                float* __restrict__ dst = plane + static_cast<std::size_t>(oy) * d.ow;
                if (d.stride == 1) {
                  for (int ox = 0; ox < d.ow; ++ox) dst[ox] += wv * src[ox];
                } else {
                  for (int ox = 0; ox < d.ow; ++ox) dst[ox] += wv * src[ox * d.stride];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Patch-matrix backward for 3x3 stride-1 layers with small spatial extents:
// deep layers have wide channel*tap rows (in_channels*9), so the inner loops
// run over that contiguous dimension. Gradients accumulate pixel-ascending
// (batch outer), a fixed order.
inline void conv2d_backward_patch3(const ConvDims& d, const LayerParams& p,
                                   const float* padded, const float* dout_base,
                                   float* dpadded, Tensor& dweights) {
  const int j9 = d.ic * 9;
  const int pix = d.oh * d.ow;
  thread_local std::vector<float> patch, dpatch;
  patch.assign(static_cast<std::size_t>(pix) * j9, 0.0f);
  dpatch.assign(static_cast<std::size_t>(pix) * j9, 0.0f);
  im2col3(d, padded, patch.data());

  for (int pidx = 0; pidx < pix; ++pidx) {
    const float* __restrict__ prow = patch.data() + static_cast<std::size_t>(pidx) * j9;
    float* __restrict__ dprow = dpatch.data() + static_cast<std::size_t>(pidx) * j9;
    for (int oc = 0; oc < d.oc; ++oc) {
      const float g = dout_base[static_cast<std::size_t>(oc) * pix + pidx];
      float* __restrict__ dwrow = dweights.data.data() + static_cast<std::size_t>(oc) * j9;
      const float* __restrict__ wrow =
          p.weights.data.data() + static_cast<std::size_t>(oc) * j9;
      for (int j = 0; j < j9; ++j) {
        dwrow[j] += g * prow[j];
        dprow[j] += g * wrow[j];
      }
    }
  }

  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      const float* dprow = dpatch.data() + (static_cast<std::size_t>(oy) * d.ow + ox) * j9;
      for (int ic = 0; ic < d.ic; ++ic) {
        float* plane = dpadded + static_cast<std::size_t>(ic) * d.ph * d.pw;
        for (int ky = 0; ky < 3; ++ky) {
          float* dst = plane + static_cast<std::size_t>(oy + ky) * d.pw + ox;
          const float* s = dprow + ic * 9 + ky * 3;
          dst[0] += s[0];
          dst[1] += s[1];
          dst[2] += s[2];
        }
      }
    }
  }
}

// Gradients w.r.t. conv weights, bias and input. dInput accumulation runs in
// padded coordinates and is cropped at the end.
inline void conv2d_backward(const Conv2D& conv, const LayerParams& p, const Tensor& input,
                            const Tensor& dout, Tensor& dweights, Tensor& dbias,
                            Tensor& dinput) {
  const ConvDims d = conv_dims(conv, input);
  const std::size_t batch = input.shape[0];
  const std::size_t in_stride = static_cast<std::size_t>(d.ic) * d.h * d.w;
  const std::size_t out_stride = static_cast<std::size_t>(d.oc) * d.oh * d.ow;
  const std::size_t ksq = static_cast<std::size_t>(d.k) * d.k;

  dweights = Tensor::zeros(p.weights.shape);
  dbias = Tensor::zeros(p.bias.shape);
  dinput = Tensor::zeros(input.shape);

  std::vector<float> padded(static_cast<std::size_t>(d.ic) * d.ph * d.pw, 0.0f);
  std::vector<float> dpadded(static_cast<std::size_t>(d.ic) * d.ph * d.pw, 0.0f);

  // bias gradient: batch, then rows ascending
  for (std::size_t b = 0; b < batch; ++b) {
    const float* dob = dout.data.data() + b * out_stride;
    for (int oc = 0; oc < d.oc; ++oc) {
      const float* plane = dob + static_cast<std::size_t>(oc) * d.oh * d.ow;
      float acc = dbias.data[static_cast<std::size_t>(oc)];
      for (std::size_t i = 0; i < static_cast<std::size_t>(d.oh) * d.ow; ++i) acc += plane[i];
      dbias.data[static_cast<std::size_t>(oc)] = acc;
    }
  }

  for (std::size_t b = 0; b < batch; ++b) {
    const float* in = input.data.data() + b * in_stride;
    for (int c = 0; c < d.ic; ++c)
      pad_plane_copy(in + static_cast<std::size_t>(c) * d.h * d.w, d.h, d.w, d.padding,
                     padded.data() + static_cast<std::size_t>(c) * d.ph * d.pw);
    std::fill(dpadded.begin(), dpadded.end(), 0.0f);
    const float* dob = dout.data.data() + b * out_stride;

    const bool is3s1 = d.k == 3 && d.stride == 1;
    const bool fast3 = is3s1 && d.ow > 8;  // row-lane path for wide planes
    if (is3s1 && d.ow <= 8) {              // patch path for narrow planes
      conv2d_backward_patch3(d, p, padded.data(), dob, dpadded.data(), dweights);
      float* din = dinput.data.data() + b * in_stride;
      for (int c = 0; c < d.ic; ++c) {
        const float* dpplane = dpadded.data() + static_cast<std::size_t>(c) * d.ph * d.pw;
        float* dplane = din + static_cast<std::size_t>(c) * d.h * d.w;
        for (int y = 0; y < d.h; ++y) {
          const float* src =
              dpplane + static_cast<std::size_t>(y + d.padding) * d.pw + d.padding;
          float* dst = dplane + static_cast<std::size_t>(y) * d.w;
          for (int x = 0; x < d.w; ++x) dst[x] = src[x];
        }
      }
      continue;
    }
    for (int oc = 0; oc < d.oc; ++oc) {
      const float* dplane = dob + static_cast<std::size_t>(oc) * d.oh * d.ow;
      float* wgrad_base =
          dweights.data.data() + static_cast<std::size_t>(oc) * d.ic * ksq;
      const float* wbase =
          p.weights.data.data() + static_cast<std::size_t>(oc) * d.ic * ksq;
      for (int ic = 0; ic < d.ic; ++ic) {
        const float* pplane = padded.data() + static_cast<std::size_t>(ic) * d.ph * d.pw;
        float* dpplane = dpadded.data() + static_cast<std::size_t>(ic) * d.ph * d.pw;
        float* wgrad = wgrad_base + static_cast<std::size_t>(ic) * ksq;
        const float* wk = wbase + static_cast<std::size_t>(ic) * ksq;
        if (fast3) {
          // weight gradients: lane-partitioned partial sums per kernel row,
          // combined lane-ascending at the end (fixed order, vectorizable)
          for (int ky = 0; ky < 3; ++ky) {
            constexpr int kMaxLanes = 16;
            float l0[kMaxLanes] = {0}, l1[kMaxLanes] = {0}, l2[kMaxLanes] = {0};
            int lanes;
            if (d.ow >= 16) {
              lanes = 16;
              dw3_accumulate_rows<16>(pplane, dplane, d.oh, d.ow, d.pw, ky, l0, l1, l2);
            } else if (d.ow >= 8) {
              lanes = 8;
              dw3_accumulate_rows<8>(pplane, dplane, d.oh, d.ow, d.pw, ky, l0, l1, l2);
            } else {
              lanes = 4;
              dw3_accumulate_rows<4>(pplane, dplane, d.oh, d.ow, d.pw, ky, l0, l1, l2);
            }
            float a0 = 0, a1 = 0, a2 = 0;
            for (int l = 0; l < lanes; ++l) {
              a0 += l0[l];
              a1 += l1[l];
              a2 += l2[l];
            }
            wgrad[static_cast<std::size_t>(ky) * 3] += a0;
            wgrad[static_cast<std::size_t>(ky) * 3 + 1] += a1;
            wgrad[static_cast<std::size_t>(ky) * 3 + 2] += a2;
          }
          // input gradient in padded coordinates, one write per element:
          // dpad[iy][ix] = sum_kx w[kx] * dout[iy-ky][ix-kx]
          for (int ky = 0; ky < 3; ++ky) {
            const float w0 = wk[static_cast<std::size_t>(ky) * 3];
            const float w1 = wk[static_cast<std::size_t>(ky) * 3 + 1];
            const float w2 = wk[static_cast<std::size_t>(ky) * 3 + 2];
            for (int oy = 0; oy < d.oh; ++oy) {
              float* __restrict__ dst = dpplane + static_cast<std::size_t>(oy + ky) * d.pw;
              const float* __restrict__ g = dplane + static_cast<std::size_t>(oy) * d.ow;
              dst[0] += w0 * g[0];
              dst[1] += w0 * g[1] + w1 * g[0];
              for (int ix = 2; ix < d.ow; ++ix)
                dst[ix] += w0 * g[ix] + w1 * g[ix - 1] + w2 * g[ix - 2];
              dst[d.ow] += w1 * g[d.ow - 1] + w2 * g[d.ow - 2];
              dst[d.ow + 1] += w2 * g[d.ow - 1];
            }
          }
        } else {
          for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
              const std::size_t kidx = static_cast<std::size_t>(ky) * d.k + kx;
              const float wv = wk[kidx];
              float wacc = wgrad[kidx];
              for (int oy = 0; oy < d.oh; ++oy) {
                const float* drow = dplane + static_cast<std::size_t>(oy) * d.ow;
                const std::size_t srow_off =
                    static_cast<std::size_t>(oy * d.stride + ky) * d.pw + kx;
                const float* srow = pplane + srow_off;
                float* dsrow = dpplane + srow_off;
                if (d.stride == 1) {
                  for (int ox = 0; ox < d.ow; ++ox) {
                    wacc += srow[ox] * drow[ox];
                    dsrow[ox] += wv * drow[ox];
                  }
                } else {
                  for (int ox = 0; ox < d.ow; ++ox) {
                    wacc += srow[ox * d.stride] * drow[ox];
                    dsrow[ox * d.stride] += wv * drow[ox];
                  }
                }
              }
              wgrad[kidx] = wacc;
            }
          }
        }
      }
    }

    // crop padded gradient back to input coordinates
    float* din = dinput.data.data() + b * in_stride;
    for (int c = 0; c < d.ic; ++c) {
      const float* dpplane = dpadded.data() + static_cast<std::size_t>(c) * d.ph * d.pw;
      float* dplane = din + static_cast<std::size_t>(c) * d.h * d.w;
      for (int y = 0; y < d.h; ++y) {
        const float* src =
            dpplane + static_cast<std::size_t>(y + d.padding) * d.pw + d.padding;
        float* dst = dplane + static_cast<std::size_t>(y) * d.w;
        for (int x = 0; x < d.w; ++x) dst[x] = src[x];
      }
    }
  }
}

inline Tensor maxpool_forward(const MaxPool2D& pool, const Tensor& input,
                              std::vector<std::uint32_t>* argmax) {
  const std::size_t batch = input.shape[0];
  const std::size_t c = input.shape[1];
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  const int oh = (h - pool.window) / pool.stride + 1;
  const int ow = (w - pool.window) / pool.stride + 1;
  Tensor out = Tensor::zeros({batch, c, static_cast<std::size_t>(oh),
                              static_cast<std::size_t>(ow)});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t oidx = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* plane = input.data.data() + (b * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const int y0 = oy * pool.stride;
          const int x0 = ox * pool.stride;
          float best = plane[static_cast<std::size_t>(y0) * w + x0];
          std::uint32_t best_idx = static_cast<std::uint32_t>(y0 * w + x0);
          for (int ky = 0; ky < pool.window; ++ky) {
            for (int kx = 0; kx < pool.window; ++kx) {
              const std::uint32_t idx = static_cast<std::uint32_t>((y0 + ky) * w + (x0 + kx));
              const float v = plane[idx];
              if (v > best) {  // ties keep the earliest position
                best = v;
                best_idx = idx;
              }
            }
          }
          out.data[oidx] = best;
          if (argmax) (*argmax)[oidx] = best_idx;
          ++oidx;
        }
      }
    }
  }
  return out;
}

inline Tensor maxpool_backward(const MaxPool2D& pool, const Tensor& input,
                               const std::vector<std::uint32_t>& argmax, const Tensor& dout) {
  (void)pool;
  Tensor dinput = Tensor::zeros(input.shape);
  const std::size_t batch = input.shape[0];
  const std::size_t c = input.shape[1];
  const std::size_t plane_size = input.shape[2] * input.shape[3];
  const std::size_t out_plane = dout.shape[2] * dout.shape[3];
  std::size_t oidx = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* dplane = dinput.data.data() + (b * c + ch) * plane_size;
      for (std::size_t i = 0; i < out_plane; ++i) {
        dplane[argmax[oidx]] += dout.data[oidx];
        ++oidx;
      }
    }
  }
  return dinput;
}

inline Tensor dense_forward(const Dense& dense, const LayerParams& p, const Tensor& input) {
  // input arrives as [B x F x 1 x 1] or [B x F]
  const std::size_t batch = input.shape[0];
  const Tensor x = input.reshaped({batch, static_cast<std::size_t>(dense.in_features)});
  Tensor out = matmul(x, p.weights);
  for (std::size_t b = 0; b < batch; ++b) {
    float* row = out.data.data() + b * static_cast<std::size_t>(dense.out_features);
    for (int j = 0; j < dense.out_features; ++j) row[j] += p.bias.data[static_cast<std::size_t>(j)];
  }
  return out;
}

}  // namespace detail

inline ForwardResult forward(const NetworkSpec& spec, const ParameterSet& params,
                             const Tensor& batch, bool training) {
  if (batch.shape.size() != 4 ||
      batch.shape[1] != static_cast<std::size_t>(spec.input.channels) ||
      batch.shape[2] != static_cast<std::size_t>(spec.input.height) ||
      batch.shape[3] != static_cast<std::size_t>(spec.input.width))
    throw std::invalid_argument("forward: batch shape " + shape_to_string(batch.shape) +
                                " does not match network input");
  if (spec.layers.size() != params.layers.size())
    throw std::invalid_argument("forward: spec/params layer count mismatch");

  ForwardResult result;
  result.cache.batch = batch.shape[0];
  if (training) result.cache.entries.resize(spec.layers.size());

  Tensor cur = batch;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const LayerParams& p = params.layers[i];
    LayerCacheEntry* entry = training ? &result.cache.entries[i] : nullptr;
    Tensor next;
    if (const auto* conv = std::get_if<Conv2D>(&layer.op)) {
      next = detail::conv2d_forward(*conv, p, cur);
    } else if (std::holds_alternative<ReLU>(layer.op)) {
      next = cur;
      for (float& v : next.data) v = v > 0.0f ? v : 0.0f;
    } else if (const auto* pool = std::get_if<MaxPool2D>(&layer.op)) {
      next = detail::maxpool_forward(*pool, cur, entry ? &entry->pool_argmax : nullptr);
    } else if (std::holds_alternative<Flatten>(layer.op)) {
      next = cur.reshaped({cur.shape[0], cur.size() / cur.shape[0]});
    } else if (const auto* dense = std::get_if<Dense>(&layer.op)) {
      next = detail::dense_forward(*dense, p, cur);
    }
    if (entry) entry->input = std::move(cur);
    cur = std::move(next);
  }
  result.logits = std::move(cur);
  return result;
}

inline GradientSet backward(const NetworkSpec& spec, const ParameterSet& params,
                            const ForwardCache& cache, const Tensor& dlogits) {
  if (cache.entries.size() != spec.layers.size())
    throw std::invalid_argument("backward: cache does not match network (run forward with training=true)");
  if (dlogits.shape.size() != 2 || dlogits.shape[0] != cache.batch ||
      dlogits.shape[1] != static_cast<std::size_t>(spec.class_count))
    throw std::invalid_argument("backward: dlogits shape mismatch");

  GradientSet grads(spec.layers.size());
  Tensor dcur = dlogits;
  for (std::size_t ri = spec.layers.size(); ri-- > 0;) {
    const LayerSpec& layer = spec.layers[ri];
    const LayerParams& p = params.layers[ri];
    const LayerCacheEntry& entry = cache.entries[ri];
    if (entry.input.shape.empty() || entry.input.shape[0] != cache.batch)
      throw std::invalid_argument("backward: cache entry missing for layer " + layer.name);
    if (const auto* conv = std::get_if<Conv2D>(&layer.op)) {
      Tensor dinput;
      detail::conv2d_backward(*conv, p, entry.input, dcur, grads[ri].weights,
                              grads[ri].bias, dinput);
      dcur = std::move(dinput);
    } else if (std::holds_alternative<ReLU>(layer.op)) {
      if (!entry.input.same_shape(dcur))
        throw std::invalid_argument("backward: ReLU cache shape mismatch");
      Tensor dinput = dcur;
      for (std::size_t i = 0; i < dinput.size(); ++i)
        dinput.data[i] = entry.input.data[i] > 0.0f ? dinput.data[i] : 0.0f;
      dcur = std::move(dinput);
    } else if (const auto* pool = std::get_if<MaxPool2D>(&layer.op)) {
      if (entry.pool_argmax.size() != dcur.size())
        throw std::invalid_argument("backward: pooling cache mismatch");
      dcur = detail::maxpool_backward(*pool, entry.input, entry.pool_argmax, dcur);
    } else if (std::holds_alternative<Flatten>(layer.op)) {
      dcur = dcur.reshaped(entry.input.shape);
    } else if (const auto* dense = std::get_if<Dense>(&layer.op)) {
      const std::size_t batch = cache.batch;
      const Tensor x =
          entry.input.reshaped({batch, static_cast<std::size_t>(dense->in_features)});
      grads[ri].weights = matmul(transpose2d(x), dcur);  // [in x out]
      grads[ri].bias = Tensor::zeros(p.bias.shape);
      for (std::size_t b = 0; b < batch; ++b) {
        const float* row = dcur.data.data() + b * static_cast<std::size_t>(dense->out_features);
        for (int j = 0; j < dense->out_features; ++j)
          grads[ri].bias.data[static_cast<std::size_t>(j)] += row[j];
      }
      Tensor dx = matmul(dcur, transpose2d(p.weights));  // [B x in]
      dcur = dx.reshaped(entry.input.shape);
    }
  }
  return grads;
}

}  // namespace sessionfit
