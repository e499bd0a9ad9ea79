#include "fccl/nn/model.hpp"

#include <cmath>

#include "fccl/util/error.hpp"

namespace fccl::nn {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string where(std::size_t i, LayerKind k) {
  return "layer " + std::to_string(i) + " (" + std::string(kind_name(k)) + ")";
}

}  // namespace

LayerKind kind_of(const LayerDesc& layer) {
  return std::visit(overloaded{
                        [](const Affine&) { return LayerKind::affine; },
                        [](const Conv&) { return LayerKind::conv; },
                        [](const BatchNorm&) { return LayerKind::batch_norm; },
                        [](const Relu&) { return LayerKind::relu; },
                        [](const Tanh&) { return LayerKind::tanh; },
                        [](const Flatten&) { return LayerKind::flatten; },
                        [](const Upsample&) { return LayerKind::upsample; },
                        [](const Reshape&) { return LayerKind::reshape; },
                    },
                    layer);
}

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::affine: return "affine";
    case LayerKind::conv: return "conv";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::flatten: return "flatten";
    case LayerKind::upsample: return "upsample";
    case LayerKind::reshape: return "reshape";
  }
  return "unknown";
}

std::size_t ModelSpec::batch_norm_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += kind_of(l) == LayerKind::batch_norm ? 1 : 0;
  return n;
}

Layout Layout::of(const ModelSpec& spec) {
  if (spec.input_shape.size() == 0) throw ShapeError("model input shape is empty");
  if (spec.layers.empty()) throw ShapeError("model has no layers");
  Layout layout;
  Shape cur = spec.input_shape;
  int bn_count = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerLayout ll;
    ll.kind = kind_of(spec.layers[i]);
    ll.in = cur;
    ll.param_offset = layout.num_params;
    const std::string at = where(i, ll.kind);
    std::visit(
        overloaded{
            [&](const Affine& a) {
              if (!cur.flat()) throw ShapeError(at + " needs a flat input, got " + cur.str());
              if (a.out <= 0) throw ShapeError(at + " has no outputs");
              ll.out = Shape{a.out, 1, 1};
              ll.param_count = static_cast<std::size_t>(a.out) * cur.size() + a.out;
            },
            [&](const Conv& c) {
              if (c.out_channels <= 0 || c.kernel <= 0 || c.stride <= 0 || c.padding < 0) {
                throw ShapeError(at + " has invalid hyperparameters");
              }
              const int oh = (cur.height + 2 * c.padding - c.kernel) / c.stride + 1;
              const int ow = (cur.width + 2 * c.padding - c.kernel) / c.stride + 1;
              if (cur.height + 2 * c.padding < c.kernel || cur.width + 2 * c.padding < c.kernel) {
                throw ShapeError(at + " kernel larger than padded input " + cur.str());
              }
              ll.out = Shape{c.out_channels, oh, ow};
              ll.param_count = static_cast<std::size_t>(c.out_channels) * cur.channels * c.kernel *
                                   c.kernel +
                               c.out_channels;
            },
            [&](const BatchNorm& b) {
              if (!(b.eps > 0.0)) throw ShapeError(at + " eps must be positive");
              ll.out = cur;
              ll.param_count = 2 * static_cast<std::size_t>(cur.channels);
              ll.bn_index = bn_count++;
              ll.bn_offset = layout.num_bn_channels;
              layout.num_bn_channels += static_cast<std::size_t>(cur.channels);
            },
            [&](const Relu&) { ll.out = cur; },
            [&](const Tanh&) { ll.out = cur; },
            [&](const Flatten&) { ll.out = Shape{static_cast<int>(cur.size()), 1, 1}; },
            [&](const Upsample& u) {
              if (u.factor <= 0) throw ShapeError(at + " factor must be positive");
              ll.out = Shape{cur.channels, cur.height * u.factor, cur.width * u.factor};
            },
            [&](const Reshape& r) {
              if (r.shape.size() != cur.size()) {
                throw ShapeError(at + " cannot reshape " + cur.str() + " to " + r.shape.str());
              }
              ll.out = r.shape;
            },
        },
        spec.layers[i]);
    layout.num_params += ll.param_count;
    cur = ll.out;
    layout.layers.push_back(ll);
  }
  if (!cur.flat() || static_cast<int>(cur.size()) != spec.num_outputs) {
    throw ShapeError("model output " + cur.str() + " does not match num_outputs " +
                     std::to_string(spec.num_outputs));
  }
  return layout;
}

ParameterVector::ParameterVector(Layout l)
    : layout(std::move(l)),
      values(layout.num_params, 0.0),
      running_mean(layout.num_bn_channels, 0.0),
      running_var(layout.num_bn_channels, 1.0) {}

ParameterVector init_params(const ModelSpec& spec, Rng& rng) {
  ParameterVector p(Layout::of(spec));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerLayout& ll = p.layout.layers[i];
    auto block = p.layer(i);
    switch (ll.kind) {
      case LayerKind::affine:
      case LayerKind::conv: {
        std::size_t out = 0;
        std::size_t fan_in = 0;
        if (ll.kind == LayerKind::affine) {
          out = ll.out.size();
          fan_in = ll.in.size();
        } else {
          const auto& c = std::get<Conv>(spec.layers[i]);
          out = static_cast<std::size_t>(c.out_channels);
          fan_in = static_cast<std::size_t>(ll.in.channels) * c.kernel * c.kernel;
        }
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (std::size_t k = 0; k < out * fan_in; ++k) block[k] = rng.uniform(-bound, bound);
        break;
      }
      case LayerKind::batch_norm: {
        const auto c = static_cast<std::size_t>(ll.in.channels);
        for (std::size_t k = 0; k < c; ++k) block[k] = 1.0;
        break;
      }
      default: break;
    }
  }
  return p;
}

ModelSpec make_classifier(Shape input, int num_classes, const std::string& kind, int width) {
  ModelSpec spec;
  spec.input_shape = input;
  spec.num_outputs = num_classes;
  if (kind == "mlp") {
    spec.layers = {Flatten{}, Affine{4 * width}, BatchNorm{}, Relu{}, Affine{num_classes}};
  } else if (kind == "cnn") {
    const int w1 = std::max(1, width / 2);
    spec.layers = {Conv{w1, 3, 2, 1},      BatchNorm{}, Relu{}, Conv{width, 3, 2, 1},
                   BatchNorm{},            Relu{},      Flatten{}, Affine{2 * width},
                   BatchNorm{},            Relu{},      Affine{num_classes}};
  } else {
    throw ShapeError("unknown classifier kind '" + kind + "'");
  }
  Layout::of(spec);
  return spec;
}

}  // namespace fccl::nn
