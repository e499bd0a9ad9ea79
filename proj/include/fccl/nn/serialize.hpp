#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "fccl/nn/model.hpp"

namespace fccl::nn {

/// Binary parameter file, all integers and floats little-endian:
///
///   "FCPV"  u32 version (=1)  u32 layer_count
///   per layer: u32 kind, u32 in_c, in_h, in_w, u32 out_c, out_h, out_w, u32 param_count
///   u64 num_params  f32[num_params] values
///   u32 num_bn_channels  f32[num_bn_channels] running_mean  f32[num_bn_channels] running_var
///
/// Values are stored as float32, so a load returns the float-rounded vector.
inline constexpr std::string_view kParamMagic = "FCPV";
inline constexpr std::uint32_t kParamVersion = 1;

std::string encode_params(const ParameterVector& params);

/// Decodes and rebuilds the layout from the header. When `expected` is given the
/// decoded layout must equal it.
ParameterVector decode_params(std::string_view bytes, const Layout* expected = nullptr);

void save_params(const std::string& path, const ParameterVector& params);
ParameterVector load_params(const std::string& path, const Layout* expected = nullptr);

}  // namespace fccl::nn
