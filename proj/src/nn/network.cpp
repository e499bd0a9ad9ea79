#include "fccl/nn/network.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "fccl/util/error.hpp"

namespace fccl::nn {
namespace {

struct ConvGeometry {
  int in_c, in_h, in_w;
  int out_c, out_h, out_w;
  int k, stride, pad;

  // Valid output column range [lo, hi) for kernel column kw.
  std::pair<int, int> columns(int kw) const {
    int lo = 0;
    while (lo < out_w && lo * stride - pad + kw < 0) ++lo;
    int hi = out_w;
    while (hi > lo && (hi - 1) * stride - pad + kw >= in_w) --hi;
    return {lo, hi};
  }
};

ConvGeometry geometry(const Conv& c, const LayerLayout& ll) {
  return {ll.in.channels, ll.in.height, ll.in.width, ll.out.channels, ll.out.height,
          ll.out.width,   c.kernel,     c.stride,    c.padding};
}

void affine_forward(const LayerLayout& ll, std::span<const double> p, const Tensor& x, Tensor& y) {
  const std::size_t in = ll.in.size();
  const std::size_t out = ll.out.size();
  const double* w = p.data();
  const double* b = p.data() + out * in;
  for (std::size_t n = 0; n < x.batch(); ++n) {
    const auto xs = x.sample(n);
    auto ys = y.sample(n);
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = w + o * in;
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * xs[i];
      ys[o] = s;
    }
  }
}

void affine_backward(const LayerLayout& ll, std::span<const double> p, const Tensor& x,
                     const Tensor& dy, std::span<double> dp, Tensor* dx) {
  const std::size_t in = ll.in.size();
  const std::size_t out = ll.out.size();
  const double* w = p.data();
  double* dw = dp.data();
  double* db = dp.data() + out * in;
  for (std::size_t n = 0; n < x.batch(); ++n) {
    const auto xs = x.sample(n);
    const auto gs = dy.sample(n);
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gs[o];
      if (g == 0.0) continue;
      double* dwr = dw + o * in;
      for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xs[i];
      db[o] += g;
    }
    if (dx != nullptr) {
      auto dxs = dx->sample(n);
      for (std::size_t o = 0; o < out; ++o) {
        const double g = gs[o];
        if (g == 0.0) continue;
        const double* wr = w + o * in;
        for (std::size_t i = 0; i < in; ++i) dxs[i] += g * wr[i];
      }
    }
  }
}

// Column matrix of one sample: row (ic, kh, kw), column (oh, ow); zero where
// the kernel tap falls in the padding.
void im2col(const ConvGeometry& g, const double* xs, std::vector<double>& col) {
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  col.assign(static_cast<std::size_t>(g.in_c) * g.k * g.k * out_plane, 0.0);
  double* c = col.data();
  for (int ic = 0; ic < g.in_c; ++ic) {
    const double* xp = xs + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw, c += out_plane) {
        const auto [lo, hi] = g.columns(kw);
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          const double* xr = xp + ih * g.in_w - g.pad + kw;
          double* cr = c + oh * g.out_w;
          for (int ow = lo; ow < hi; ++ow) cr[ow] = xr[ow * g.stride];
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const std::vector<double>& col, double* dxs) {
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const double* c = col.data();
  for (int ic = 0; ic < g.in_c; ++ic) {
    double* dxp = dxs + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw, c += out_plane) {
        const auto [lo, hi] = g.columns(kw);
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          double* dxr = dxp + ih * g.in_w - g.pad + kw;
          const double* cr = c + oh * g.out_w;
          for (int ow = lo; ow < hi; ++ow) dxr[ow * g.stride] += cr[ow];
        }
      }
    }
  }
}

void conv_forward(const ConvGeometry& g, std::span<const double> p, const Tensor& x, Tensor& y) {
  const std::size_t rows = static_cast<std::size_t>(g.in_c) * g.k * g.k;
  const double* w = p.data();
  const double* b = p.data() + static_cast<std::size_t>(g.out_c) * rows;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  std::vector<double> col;
  for (std::size_t n = 0; n < x.batch(); ++n) {
    im2col(g, x.sample(n).data(), col);
    double* ys = y.sample(n).data();
    for (int oc = 0; oc < g.out_c; ++oc) {
      double* yp = ys + oc * out_plane;
      std::fill(yp, yp + out_plane, b[oc]);
      const double* wr = w + oc * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double wv = wr[r];
        const double* cr = col.data() + r * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) yp[i] += wv * cr[i];
      }
    }
  }
}

void conv_backward(const ConvGeometry& g, std::span<const double> p, const Tensor& x,
                   const Tensor& dy, std::span<double> dp, Tensor* dx) {
  const std::size_t rows = static_cast<std::size_t>(g.in_c) * g.k * g.k;
  const double* w = p.data();
  double* dw = dp.data();
  double* db = dp.data() + static_cast<std::size_t>(g.out_c) * rows;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  std::vector<double> col, dcol;
  for (std::size_t n = 0; n < x.batch(); ++n) {
    im2col(g, x.sample(n).data(), col);
    const double* gs = dy.sample(n).data();
    if (dx != nullptr) dcol.assign(col.size(), 0.0);
    for (int oc = 0; oc < g.out_c; ++oc) {
      const double* gp = gs + oc * out_plane;
      double bsum = 0.0;
      for (std::size_t i = 0; i < out_plane; ++i) bsum += gp[i];
      db[oc] += bsum;
      double* dwr = dw + oc * rows;
      const double* wr = w + oc * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* cr = col.data() + r * out_plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i] * cr[i];
        dwr[r] += acc;
        if (dx != nullptr) {
          const double wv = wr[r];
          double* dc = dcol.data() + r * out_plane;
          for (std::size_t i = 0; i < out_plane; ++i) dc[i] += wv * gp[i];
        }
      }
    }
    if (dx != nullptr) col2im_add(g, dcol, dx->sample(n).data());
  }
}

void batch_norm_forward(const BatchNorm& bn, const LayerLayout& ll, std::span<const double> p,
                        const ParameterVector& params, const Tensor& x, Mode mode, Tensor& y,
                        BatchNormRecord& rec) {
  const auto channels = static_cast<std::size_t>(ll.in.channels);
  const std::size_t plane = static_cast<std::size_t>(ll.in.height) * ll.in.width;
  const std::size_t count = x.batch() * plane;
  const double* scale = p.data();
  const double* shift = p.data() + channels;
  rec.mean.assign(channels, 0.0);
  rec.var.assign(channels, 0.0);
  rec.inv_std.assign(channels, 0.0);
  rec.normalized = Tensor(x.batch(), x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const double* xp = x.sample(n).data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += xp[i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const double* xp = x.sample(n).data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) sq += (xp[i] - mean) * (xp[i] - mean);
    }
    const double var = sq / static_cast<double>(count);
    rec.mean[c] = mean;
    rec.var[c] = var;
    double use_mean = mean;
    double use_var = var;
    if (mode == Mode::eval) {
      use_mean = params.running_mean[ll.bn_offset + c];
      use_var = params.running_var[ll.bn_offset + c];
    }
    const double inv = 1.0 / std::sqrt(use_var + bn.eps);
    rec.inv_std[c] = inv;
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const double* xp = x.sample(n).data() + c * plane;
      double* hp = rec.normalized.sample(n).data() + c * plane;
      double* yp = y.sample(n).data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        hp[i] = (xp[i] - use_mean) * inv;
        yp[i] = scale[c] * hp[i] + shift[c];
      }
    }
  }
}

void batch_norm_backward(const LayerLayout& ll, std::span<const double> p, Mode mode,
                         const BatchNormRecord& rec, const Tensor& dy, std::span<double> dp,
                         Tensor* dx) {
  const auto channels = static_cast<std::size_t>(ll.in.channels);
  const std::size_t plane = static_cast<std::size_t>(ll.in.height) * ll.in.width;
  const auto count = static_cast<double>(dy.batch() * plane);
  const double* scale = p.data();
  double* dscale = dp.data();
  double* dshift = dp.data() + channels;
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_g = 0.0;
    double sum_gh = 0.0;
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      const double* gp = dy.sample(n).data() + c * plane;
      const double* hp = rec.normalized.sample(n).data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += gp[i];
        sum_gh += gp[i] * hp[i];
      }
    }
    dscale[c] += sum_gh;
    dshift[c] += sum_g;
    if (dx == nullptr) continue;
    const double k = scale[c] * rec.inv_std[c];
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      const double* gp = dy.sample(n).data() + c * plane;
      const double* hp = rec.normalized.sample(n).data() + c * plane;
      double* dxp = dx->sample(n).data() + c * plane;
      if (mode == Mode::train) {
        for (std::size_t i = 0; i < plane; ++i) {
          dxp[i] += k * (gp[i] - sum_g / count - hp[i] * sum_gh / count);
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) dxp[i] += k * gp[i];
      }
    }
  }
}

void upsample_forward(int f, const LayerLayout& ll, const Tensor& x, Tensor& y) {
  const int h = ll.in.height, w = ll.in.width, oh = ll.out.height, ow = ll.out.width;
  for (std::size_t n = 0; n < x.batch(); ++n) {
    const double* xs = x.sample(n).data();
    double* ys = y.sample(n).data();
    for (int c = 0; c < ll.in.channels; ++c) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          ys[(c * oh + i) * ow + j] = xs[(c * h + i / f) * w + j / f];
        }
      }
    }
  }
}

void upsample_backward(int f, const LayerLayout& ll, const Tensor& dy, Tensor& dx) {
  const int h = ll.in.height, w = ll.in.width, oh = ll.out.height, ow = ll.out.width;
  for (std::size_t n = 0; n < dy.batch(); ++n) {
    const double* gs = dy.sample(n).data();
    double* dxs = dx.sample(n).data();
    for (int c = 0; c < ll.in.channels; ++c) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) dxs[(c * h + i / f) * w + j / f] += gs[(c * oh + i) * ow + j];
      }
    }
  }
}

void require_finite(const Tensor& t, std::size_t layer, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite ") + what + " at layer " + std::to_string(layer),
                       static_cast<int>(layer));
  }
}

}  // namespace

Tape forward_tape(const ModelSpec& spec, const ParameterVector& params, const Tensor& inputs,
                  Mode mode) {
  if (params.layout.layers.size() != spec.layers.size()) {
    throw ShapeError("parameter layout does not belong to this model");
  }
  if (!(inputs.shape() == spec.input_shape)) {
    throw ShapeError("input shape " + inputs.shape().str() + " does not match model input " +
                     spec.input_shape.str());
  }
  if (inputs.batch() == 0) throw ShapeError("empty batch");
  Tape tape;
  tape.mode = mode;
  tape.activations.reserve(spec.layers.size() + 1);
  tape.activations.push_back(inputs);
  tape.batch_norm.resize(params.layout.num_bn_channels > 0 ? spec.batch_norm_count() : 0);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerLayout& ll = params.layout.layers[i];
    const Tensor& x = tape.activations.back();
    Tensor y(x.batch(), ll.out);
    const auto p = params.layer(i);
    switch (ll.kind) {
      case LayerKind::affine: affine_forward(ll, p, x, y); break;
      case LayerKind::conv: conv_forward(geometry(std::get<Conv>(spec.layers[i]), ll), p, x, y); break;
      case LayerKind::batch_norm:
        batch_norm_forward(std::get<BatchNorm>(spec.layers[i]), ll, p, params, x, mode, y,
                           tape.batch_norm[static_cast<std::size_t>(ll.bn_index)]);
        break;
      case LayerKind::relu:
        for (std::size_t k = 0; k < x.size(); ++k) y.values()[k] = std::max(0.0, x.values()[k]);
        break;
      case LayerKind::tanh:
        for (std::size_t k = 0; k < x.size(); ++k) y.values()[k] = std::tanh(x.values()[k]);
        break;
      case LayerKind::flatten:
      case LayerKind::reshape: y = x.reshaped(ll.out); break;
      case LayerKind::upsample: upsample_forward(std::get<Upsample>(spec.layers[i]).factor, ll, x, y); break;
    }
    require_finite(y, i, "activation");
    tape.activations.push_back(std::move(y));
  }
  return tape;
}

Tensor forward(const ModelSpec& spec, const ParameterVector& params, const Tensor& inputs,
               Mode mode) {
  Tape tape = forward_tape(spec, params, inputs, mode);
  return std::move(tape.activations.back());
}

Gradients backward(const ModelSpec& spec, const ParameterVector& params, const Tape& tape,
                   const Tensor& output_grad, bool want_input_grad, const Injections* injections) {
  const std::size_t L = spec.layers.size();
  if (tape.activations.size() != L + 1) throw ShapeError("tape does not match model");
  if (output_grad.batch() != tape.output().batch() ||
      output_grad.sample_size() != tape.output().sample_size()) {
    throw ShapeError("output gradient shape mismatch");
  }
  if (injections != nullptr && injections->size() > L) throw ShapeError("too many injections");
  Gradients out;
  out.params.assign(params.layout.num_params, 0.0);
  Tensor g = output_grad.reshaped(tape.output().shape());
  for (std::size_t idx = L; idx-- > 0;) {
    const LayerLayout& ll = params.layout.layers[idx];
    const Tensor& x = tape.activations[idx];
    const bool need_dx = idx > 0 || want_input_grad ||
                         (injections != nullptr && idx < injections->size() && (*injections)[idx]);
    Tensor dx;
    if (need_dx) dx = Tensor(x.batch(), ll.in);
    const auto p = params.layer(idx);
    auto dp = std::span<double>(out.params).subspan(ll.param_offset, ll.param_count);
    Tensor* dxp = need_dx ? &dx : nullptr;
    switch (ll.kind) {
      case LayerKind::affine: affine_backward(ll, p, x, g, dp, dxp); break;
      case LayerKind::conv:
        conv_backward(geometry(std::get<Conv>(spec.layers[idx]), ll), p, x, g, dp, dxp);
        break;
      case LayerKind::batch_norm:
        batch_norm_backward(ll, p, tape.mode,
                            tape.batch_norm[static_cast<std::size_t>(ll.bn_index)], g, dp, dxp);
        break;
      case LayerKind::relu:
        if (dxp != nullptr) {
          for (std::size_t k = 0; k < x.size(); ++k) {
            dx.values()[k] = x.values()[k] > 0.0 ? g.values()[k] : 0.0;
          }
        }
        break;
      case LayerKind::tanh:
        if (dxp != nullptr) {
          const auto& y = tape.activations[idx + 1];
          for (std::size_t k = 0; k < x.size(); ++k) {
            const double t = y.values()[k];
            dx.values()[k] = g.values()[k] * (1.0 - t * t);
          }
        }
        break;
      case LayerKind::flatten:
      case LayerKind::reshape:
        if (dxp != nullptr) dx = g.reshaped(ll.in);
        break;
      case LayerKind::upsample:
        if (dxp != nullptr) upsample_backward(std::get<Upsample>(spec.layers[idx]).factor, ll, g, dx);
        break;
    }
    for (std::size_t k = 0; k < ll.param_count; ++k) {
      if (!std::isfinite(dp[k])) {
        throw NumericError("non-finite parameter gradient at layer " + std::to_string(idx),
                           static_cast<int>(idx));
      }
    }
    if (!need_dx) break;
    if (injections != nullptr && idx < injections->size() && (*injections)[idx]) {
      const Tensor& inj = *(*injections)[idx];
      if (inj.size() != dx.size()) throw ShapeError("injection shape mismatch at layer " + std::to_string(idx));
      for (std::size_t k = 0; k < dx.size(); ++k) dx.values()[k] += inj.values()[k];
    }
    require_finite(dx, idx, "input gradient");
    g = std::move(dx);
  }
  if (want_input_grad) out.inputs = std::move(g);
  return out;
}

void update_running_stats(ParameterVector& params, const Tape& tape, double momentum) {
  if (tape.mode != Mode::train) return;
  for (const LayerLayout& ll : params.layout.layers) {
    if (ll.kind != LayerKind::batch_norm) continue;
    const BatchNormRecord& rec = tape.batch_norm[static_cast<std::size_t>(ll.bn_index)];
    for (std::size_t c = 0; c < rec.mean.size(); ++c) {
      double& m = params.running_mean[ll.bn_offset + c];
      double& v = params.running_var[ll.bn_offset + c];
      m = (1.0 - momentum) * m + momentum * rec.mean[c];
      v = (1.0 - momentum) * v + momentum * rec.var[c];
    }
  }
}

GradResult grad(const ModelSpec& spec, const ParameterVector& params, const LossFn& loss,
                const Tensor& inputs, Mode mode, bool want_input_grad) {
  GradResult r;
  r.tape = forward_tape(spec, params, inputs, mode);
  LossGrad lg = loss(r.tape.output());
  r.loss = lg.value;
  r.grads = backward(spec, params, r.tape, lg.grad, want_input_grad);
  return r;
}

}  // namespace fccl::nn
