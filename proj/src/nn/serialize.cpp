#include "fccl/nn/serialize.hpp"

#include "fccl/util/binary.hpp"
#include "fccl/util/error.hpp"

namespace fccl::nn {

std::string encode_params(const ParameterVector& params) {
  binary::Writer w;
  w.bytes(kParamMagic);
  w.u32_le(kParamVersion);
  w.u32_le(static_cast<std::uint32_t>(params.layout.layers.size()));
  for (const LayerLayout& ll : params.layout.layers) {
    w.u32_le(static_cast<std::uint32_t>(ll.kind));
    for (const Shape& s : {ll.in, ll.out}) {
      w.u32_le(static_cast<std::uint32_t>(s.channels));
      w.u32_le(static_cast<std::uint32_t>(s.height));
      w.u32_le(static_cast<std::uint32_t>(s.width));
    }
    w.u32_le(static_cast<std::uint32_t>(ll.param_count));
  }
  w.u64_le(params.values.size());
  for (const double v : params.values) w.f32_le(static_cast<float>(v));
  w.u32_le(static_cast<std::uint32_t>(params.running_mean.size()));
  for (const double v : params.running_mean) w.f32_le(static_cast<float>(v));
  for (const double v : params.running_var) w.f32_le(static_cast<float>(v));
  return w.release();
}

ParameterVector decode_params(std::string_view bytes, const Layout* expected) {
  binary::Reader r(bytes);
  if (r.bytes(kParamMagic.size()) != kParamMagic) {
    throw DataError(DataError::Kind::bad_magic, "not a parameter file");
  }
  if (const auto v = r.u32_le(); v != kParamVersion) {
    throw DataError(DataError::Kind::bad_magic, "unsupported parameter file version " + std::to_string(v));
  }
  Layout layout;
  const std::uint32_t count = r.u32_le();
  int bn_index = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerLayout ll;
    ll.kind = static_cast<LayerKind>(r.u32_le());
    for (Shape* s : {&ll.in, &ll.out}) {
      s->channels = static_cast<int>(r.u32_le());
      s->height = static_cast<int>(r.u32_le());
      s->width = static_cast<int>(r.u32_le());
    }
    ll.param_count = r.u32_le();
    ll.param_offset = layout.num_params;
    if (ll.kind == LayerKind::batch_norm) {
      ll.bn_index = bn_index++;
      ll.bn_offset = layout.num_bn_channels;
      layout.num_bn_channels += static_cast<std::size_t>(ll.in.channels);
    }
    layout.num_params += ll.param_count;
    layout.layers.push_back(ll);
  }
  if (expected != nullptr && !(layout == *expected)) {
    throw ShapeError("parameter file layout does not match the model");
  }
  ParameterVector p(layout);
  if (r.u64_le() != layout.num_params) throw ShapeError("parameter count disagrees with header");
  for (double& v : p.values) v = r.f32_le();
  if (r.u32_le() != layout.num_bn_channels) throw ShapeError("batch-norm channel count disagrees with header");
  for (double& v : p.running_mean) v = r.f32_le();
  for (double& v : p.running_var) v = r.f32_le();
  return p;
}

void save_params(const std::string& path, const ParameterVector& params) {
  binary::write_file(path, encode_params(params));
}

ParameterVector load_params(const std::string& path, const Layout* expected) {
  return decode_params(binary::read_file(path), expected);
}

}  // namespace fccl::nn
