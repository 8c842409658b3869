#include "bunet/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "bunet/errors.hpp"

namespace bunet {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

void require_nchw(const Tensor& x, const char* op) {
  if (!x.defined() || x.dim() != 4) {
    throw ShapeError(std::string(op) + ": expected NCHW tensor, got " +
                     (x.defined() ? shape_to_string(x.shape()) : std::string("undefined")));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, pad_before;
  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return height * width; }
};

/// Unfolds one image [c, h, w] into a [c*k*k, h*w] patch matrix.
void im2col(const float* image, const ConvGeometry& g, float* cols) {
  const auto h = static_cast<long>(g.height);
  const auto w = static_cast<long>(g.width);
  const auto pad = static_cast<long>(g.pad_before);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const float* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        float* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        const long x_lo = std::clamp(-dx, 0L, w);
        const long x_hi = std::clamp(w - dx, 0L, w);
        for (long y = 0; y < h; ++y) {
          float* dst = row + y * w;
          const long sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, 0.0f);
            continue;
          }
          const float* src = plane + sy * w;
          std::fill(dst, dst + x_lo, 0.0f);
          for (long x = x_lo; x < x_hi; ++x) dst[x] = src[x + dx];
          std::fill(dst + x_hi, dst + w, 0.0f);
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters a patch matrix back onto an image, accumulating.
void col2im(const float* cols, const ConvGeometry& g, float* image) {
  const auto h = static_cast<long>(g.height);
  const auto w = static_cast<long>(g.width);
  const auto pad = static_cast<long>(g.pad_before);
  for (std::size_t c = 0; c < g.channels; ++c) {
    float* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const float* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        const long x_lo = std::clamp(-dx, 0L, w);
        const long x_hi = std::clamp(w - dx, 0L, w);
        for (long y = 0; y < h; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const float* src = row + y * w;
          float* dst = plane + sy * w;
          for (long x = x_lo; x < x_hi; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

}  // namespace

// --- conv2d -----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_nchw(x, "conv2d");
  require_nchw(weight, "conv2d weight");
  const std::size_t batch = x.size(0);
  const std::size_t out_ch = weight.size(0);
  const std::size_t k = weight.size(2);
  if (weight.size(3) != k) throw ShapeError("conv2d: kernel must be square");
  if (weight.size(1) != x.size(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.size(1)) + " channels, layer expects " +
                     std::to_string(weight.size(1)));
  }
  if (!bias.defined() || bias.numel() != out_ch) throw ShapeError("conv2d: bias must have one entry per output channel");
  const ConvGeometry g{x.size(1), x.size(2), x.size(3), k, (k - 1) / 2};

  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto cols_n = static_cast<Eigen::Index>(g.cols());
  const auto oc = static_cast<Eigen::Index>(out_ch);
  Tensor out = Tensor::zeros({batch, out_ch, g.height, g.width});
  std::vector<float> cols(g.rows() * g.cols());
  ConstMap w(weight.data().data(), oc, rows);
  Eigen::Map<const Eigen::VectorXf> b(bias.data().data(), oc);
  const std::size_t in_stride = g.channels * g.cols();
  const std::size_t out_stride = out_ch * g.cols();
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(x.data().data() + n * in_stride, g, cols.data());
    MutMap o(out.mutable_data().data() + n * out_stride, oc, cols_n);
    o.noalias() = w * ConstMap(cols.data(), rows, cols_n);
    o.colwise() += b;
  }

  if (needs_recording({&x, &weight, &bias})) {
    Tape::current()->record("conv2d", {x, weight, bias}, out, [g, batch, oc, rows, cols_n, in_stride,
                                                               out_stride](const Tape::Node& node) {
      Tensor tx = node.inputs[0];
      Tensor tw = node.inputs[1];
      Tensor tb = node.inputs[2];
      const float* gout = node.output.grad().data();
      std::vector<float> cols(static_cast<std::size_t>(rows * cols_n));
      std::vector<float> dcols(tx.requires_grad() ? cols.size() : 0);
      ConstMap w(tw.data().data(), oc, rows);
      for (std::size_t n = 0; n < batch; ++n) {
        ConstMap go(gout + n * out_stride, oc, cols_n);
        if (tb.requires_grad()) {
          // Sequential sum: Eigen's vectorized reduction order depends on buffer alignment.
          auto gb = tb.mutable_grad();
          for (Eigen::Index c = 0; c < oc; ++c) {
            const float* row = gout + n * out_stride + static_cast<std::size_t>(c * cols_n);
            double acc = 0.0;
            for (Eigen::Index i = 0; i < cols_n; ++i) acc += row[i];
            gb[static_cast<std::size_t>(c)] += static_cast<float>(acc);
          }
        }
        if (tw.requires_grad()) {
          im2col(tx.data().data() + n * in_stride, g, cols.data());
          MutMap(tw.mutable_grad().data(), oc, rows).noalias() += go * ConstMap(cols.data(), rows, cols_n).transpose();
        }
        if (tx.requires_grad()) {
          MutMap(dcols.data(), rows, cols_n).noalias() = w.transpose() * go;
          col2im(dcols.data(), g, tx.mutable_grad().data() + n * in_stride);
        }
      }
    });
  }
  return out;
}

// --- batch norm -------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BnMode mode, float momentum, float epsilon) {
  require_nchw(x, "batch_norm");
  const std::size_t batch = x.size(0);
  const std::size_t ch = x.size(1);
  const std::size_t plane = x.size(2) * x.size(3);
  if (gamma.numel() != ch || beta.numel() != ch || running_mean.numel() != ch || running_var.numel() != ch) {
    throw ShapeError("batch_norm: layer has " + std::to_string(gamma.numel()) + " channels, input has " +
                     std::to_string(ch));
  }
  const std::size_t count = batch * plane;
  if (mode == BnMode::train && count < 2) {
    throw ContractError("batch_norm: train mode needs at least 2 values per channel");
  }

  std::vector<float> mean(ch);
  std::vector<float> inv_std(ch);
  const auto xv = x.data();
  if (mode == BnMode::train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < ch; ++c) {
      float s = 0.0f;
      for (std::size_t n = 0; n < batch; ++n) {
        const float* p = xv.data() + (n * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const float mu = s / static_cast<float>(count);
      float ss = 0.0f;
      for (std::size_t n = 0; n < batch; ++n) {
        const float* p = xv.data() + (n * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const float var = ss / static_cast<float>(count);
      mean[c] = mu;
      inv_std[c] = 1.0f / std::sqrt(var + epsilon);
      const float unbiased = ss / static_cast<float>(count - 1);
      rm[c] = (1.0f - momentum) * rm[c] + momentum * mu;
      rv[c] = (1.0f - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = rm[c];
      inv_std[c] = 1.0f / std::sqrt(rv[c] + epsilon);
    }
  }

  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t base = (n * ch + c) * plane;
      const float a = gv[c] * inv_std[c];
      const float shift = bv[c] - a * mean[c];
      for (std::size_t i = 0; i < plane; ++i) o[base + i] = a * xv[base + i] + shift;
    }
  }

  if (needs_recording({&x, &gamma, &beta})) {
    Tape::current()->record(
        "batch_norm", {x, gamma, beta}, out,
        [mode, batch, ch, plane, count, mean = std::move(mean), inv_std = std::move(inv_std)](const Tape::Node& node) {
          Tensor tx = node.inputs[0];
          Tensor tg = node.inputs[1];
          Tensor tb = node.inputs[2];
          const auto gout = node.output.grad();
          const auto xv = tx.data();
          const auto gv = tg.data();
          std::vector<float> dgamma(ch, 0.0f);
          std::vector<float> dbeta(ch, 0.0f);
          for (std::size_t c = 0; c < ch; ++c) {
            float sg = 0.0f;
            float sgx = 0.0f;
            for (std::size_t n = 0; n < batch; ++n) {
              const std::size_t base = (n * ch + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const float xhat = (xv[base + i] - mean[c]) * inv_std[c];
                sg += gout[base + i];
                sgx += gout[base + i] * xhat;
              }
            }
            dbeta[c] = sg;
            dgamma[c] = sgx;
          }
          accumulate_grad(tg, dgamma);
          accumulate_grad(tb, dbeta);
          if (!tx.requires_grad()) return;
          auto dx = tx.mutable_grad();
          const float inv_count = 1.0f / static_cast<float>(count);
          for (std::size_t c = 0; c < ch; ++c) {
            const float a = gv[c] * inv_std[c];
            for (std::size_t n = 0; n < batch; ++n) {
              const std::size_t base = (n * ch + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                if (mode == BnMode::eval) {
                  dx[base + i] += a * gout[base + i];
                } else {
                  const float xhat = (xv[base + i] - mean[c]) * inv_std[c];
                  dx[base + i] += a * (gout[base + i] - inv_count * (dbeta[c] + xhat * dgamma[c]));
                }
              }
            }
          }
        });
  }
  return out;
}

// --- dropout ----------------------------------------------------------------

Tensor dropout(const Tensor& x, float rate, DropoutMode mode, Rng& rng) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == DropoutMode::inactive || rate == 0.0f) return x;
  const double keep = 1.0 - static_cast<double>(rate);
  const float scale_factor = 1.0f / static_cast<float>(keep);
  std::vector<float> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(keep) ? scale_factor : 0.0f;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * mask[i];
  if (needs_recording({&x})) {
    Tape::current()->record("dropout", {x}, out, [mask = std::move(mask)](const Tape::Node& node) {
      Tensor in = node.inputs[0];
      if (!in.requires_grad()) return;
      const auto g = node.output.grad();
      auto gi = in.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * mask[i];
    });
  }
  return out;
}

// --- pooling / upsampling / concat ------------------------------------------

Tensor maxpool2x2(const Tensor& x) {
  require_nchw(x, "maxpool2x2");
  const std::size_t h = x.size(2);
  const std::size_t w = x.size(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_to_string(x.shape()));
  const std::size_t planes = x.size(0) * x.size(1);
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Tensor out = Tensor::zeros({x.size(0), x.size(1), oh, ow});
  auto o = out.mutable_data();
  const auto v = x.data();
  std::vector<std::size_t> argmax(o.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t top = p * h * w + 2 * y * w + 2 * xx;
        const std::size_t window[4] = {top, top + 1, top + w, top + w + 1};
        std::size_t best = window[0];
        for (int i = 1; i < 4; ++i) {
          if (v[window[i]] > v[best]) best = window[i];
        }
        const std::size_t oi = p * oh * ow + y * ow + xx;
        o[oi] = v[best];
        argmax[oi] = best;
      }
    }
  }
  if (needs_recording({&x})) {
    Tape::current()->record("maxpool2x2", {x}, out, [argmax = std::move(argmax)](const Tape::Node& node) {
      Tensor in = node.inputs[0];
      if (!in.requires_grad()) return;
      const auto g = node.output.grad();
      auto gi = in.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gi[argmax[i]] += g[i];
    });
  }
  return out;
}

Tensor upsample2x_nearest(const Tensor& x) {
  require_nchw(x, "upsample2x_nearest");
  const std::size_t h = x.size(2);
  const std::size_t w = x.size(3);
  const std::size_t planes = x.size(0) * x.size(1);
  Tensor out = Tensor::zeros({x.size(0), x.size(1), 2 * h, 2 * w});
  auto o = out.mutable_data();
  const auto v = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const float* src = v.data() + p * h * w + (y / 2) * w;
      float* dst = o.data() + p * 4 * h * w + y * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  }
  if (needs_recording({&x})) {
    Tape::current()->record("upsample2x", {x}, out, [planes, h, w](const Tape::Node& node) {
      Tensor in = node.inputs[0];
      if (!in.requires_grad()) return;
      const auto g = node.output.grad();
      auto gi = in.mutable_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          const float* src = g.data() + p * 4 * h * w + y * 2 * w;
          float* dst = gi.data() + p * h * w + (y / 2) * w;
          for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_nchw(a, "concat_channels");
  require_nchw(b, "concat_channels");
  if (a.size(0) != b.size(0) || a.size(2) != b.size(2) || a.size(3) != b.size(3)) {
    throw ShapeError("concat_channels: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  const std::size_t batch = a.size(0);
  const std::size_t ca = a.size(1);
  const std::size_t cb = b.size(1);
  const std::size_t plane = a.size(2) * a.size(3);
  Tensor out = Tensor::zeros({batch, ca + cb, a.size(2), a.size(3)});
  auto o = out.mutable_data();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.data().data() + n * ca * plane, ca * plane, o.data() + n * (ca + cb) * plane);
    std::copy_n(b.data().data() + n * cb * plane, cb * plane, o.data() + (n * (ca + cb) + ca) * plane);
  }
  if (needs_recording({&a, &b})) {
    Tape::current()->record("concat_channels", {a, b}, out, [batch, ca, cb, plane](const Tape::Node& node) {
      Tensor ta = node.inputs[0];
      Tensor tb = node.inputs[1];
      const auto g = node.output.grad();
      for (std::size_t n = 0; n < batch; ++n) {
        const float* src = g.data() + n * (ca + cb) * plane;
        if (ta.requires_grad()) {
          float* dst = ta.mutable_grad().data() + n * ca * plane;
          for (std::size_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
        }
        if (tb.requires_grad()) {
          float* dst = tb.mutable_grad().data() + n * cb * plane;
          for (std::size_t i = 0; i < cb * plane; ++i) dst[i] += src[ca * plane + i];
        }
      }
    });
  }
  return out;
}

// --- sigmoid / loss ---------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (v[i] >= 0.0f) {
      o[i] = 1.0f / (1.0f + std::exp(-v[i]));
    } else {
      const float e = std::exp(v[i]);
      o[i] = e / (1.0f + e);
    }
  }
  if (needs_recording({&x})) {
    Tape::current()->record("sigmoid", {x}, out, [](const Tape::Node& node) {
      Tensor in = node.inputs[0];
      if (!in.requires_grad()) return;
      const auto g = node.output.grad();
      const auto p = node.output.data();
      auto gi = in.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * p[i] * (1.0f - p[i]);
    });
  }
  return out;
}

Tensor bce_loss(const Tensor& p, const Tensor& y) {
  if (!p.defined() || !y.defined() || p.numel() != y.numel()) throw ShapeError("bce_loss: prediction/target size mismatch");
  const auto pv = p.data();
  const auto yv = y.data();
  const float lo = kBceClamp;
  const float hi = 1.0f - kBceClamp;
  float total = 0.0f;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (yv[i] != 0.0f && yv[i] != 1.0f) throw ContractError("bce_loss: targets must be binary");
    const float q = std::clamp(pv[i], lo, hi);
    total += yv[i] == 1.0f ? std::log(q) : std::log(1.0f - q);
  }
  const float n = static_cast<float>(pv.size());
  Tensor out = Tensor::scalar(-total / n);
  if (needs_recording({&p})) {
    Tape::current()->record("bce_loss", {p, y}, out, [lo, hi, n](const Tape::Node& node) {
      Tensor tp = node.inputs[0];
      if (!tp.requires_grad()) return;
      const float g = node.output.grad()[0];
      const auto pv = tp.data();
      const auto yv = node.inputs[1].data();
      auto gi = tp.mutable_grad();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] < lo || pv[i] > hi) continue;
        const float d = yv[i] == 1.0f ? -1.0f / pv[i] : 1.0f / (1.0f - pv[i]);
        gi[i] += g * d / n;
      }
    });
  }
  return out;
}

// --- layers -----------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng) {
  if (in_channels == 0 || out_channels == 0 || kernel == 0) throw ConfigError("Conv2d: dimensions must be positive");
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  const double stddev = std::sqrt(2.0 / fan_in);
  std::vector<float> w(out_channels * in_channels * kernel * kernel);
  for (auto& v : w) v = static_cast<float>(rng.normal(0.0, stddev));
  weight_ = Tensor::from_vector({out_channels, in_channels, kernel, kernel}, std::move(w), true);
  bias_ = Tensor::zeros({out_channels}, true);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight_, bias_); }

BatchNorm2d::BatchNorm2d(std::size_t channels, float momentum, float epsilon)
    : gamma_(Tensor::full({channels}, 1.0f, true)),
      beta_(Tensor::zeros({channels}, true)),
      running_mean_(Tensor::zeros({channels})),
      running_var_(Tensor::full({channels}, 1.0f)),
      momentum_(momentum),
      epsilon_(epsilon) {
  if (!(momentum > 0.0f && momentum < 1.0f)) throw ConfigError("BatchNorm2d: momentum must lie in (0, 1)");
  if (!(epsilon > 0.0f)) throw ConfigError("BatchNorm2d: epsilon must be positive");
}

Tensor BatchNorm2d::forward(const Tensor& x, BnMode mode) {
  return batch_norm(x, gamma_, beta_, running_mean_, running_var_, mode, momentum_, epsilon_);
}

Dropout::Dropout(float rate) : rate_(rate) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

}  // namespace bunet
