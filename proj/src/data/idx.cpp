#include <algorithm>
#include <cmath>

#include "fccl/data/dataset.hpp"
#include "fccl/util/binary.hpp"
#include "fccl/util/error.hpp"

namespace fccl::data {
namespace {

constexpr std::uint8_t kUbyte = 0x08;

struct IdxHeader {
  std::vector<std::uint32_t> dims;
};

IdxHeader read_header(binary::Reader& r, const char* what, std::initializer_list<int> allowed_dims) {
  const std::uint8_t z0 = r.u8();
  const std::uint8_t z1 = r.u8();
  const std::uint8_t type = r.u8();
  const std::uint8_t ndims = r.u8();
  const bool dims_ok = std::find(allowed_dims.begin(), allowed_dims.end(), ndims) != allowed_dims.end();
  if (z0 != 0 || z1 != 0 || type != kUbyte || !dims_ok) {
    throw DataError(DataError::Kind::bad_magic, std::string("bad IDX magic in ") + what + " file");
  }
  IdxHeader h;
  for (int d = 0; d < ndims; ++d) h.dims.push_back(r.u32_be());
  return h;
}

}  // namespace

LabeledDataset decode_idx(std::string_view images, std::string_view labels, int num_classes) {
  binary::Reader ri(images);
  const IdxHeader hi = read_header(ri, "image", {3, 4});
  binary::Reader rl(labels);
  const IdxHeader hl = read_header(rl, "label", {1});
  nn::Shape shape;
  if (hi.dims.size() == 3) {
    shape = {1, static_cast<int>(hi.dims[1]), static_cast<int>(hi.dims[2])};
  } else {
    shape = {static_cast<int>(hi.dims[1]), static_cast<int>(hi.dims[2]), static_cast<int>(hi.dims[3])};
  }
  const std::size_t count = hi.dims[0];
  if (hl.dims[0] != count) {
    throw DataError(DataError::Kind::count_mismatch, "IDX image count " + std::to_string(count) +
                                                         " but label count " + std::to_string(hl.dims[0]));
  }
  const std::size_t bytes = count * shape.size();
  if (ri.remaining() < bytes) throw DataError(DataError::Kind::truncated, "IDX image file is truncated");
  if (rl.remaining() < count) throw DataError(DataError::Kind::truncated, "IDX label file is truncated");
  std::vector<double> pixels(bytes);
  const auto raw = ri.bytes(bytes);
  for (std::size_t i = 0; i < bytes; ++i) pixels[i] = static_cast<unsigned char>(raw[i]) / 255.0;
  std::vector<int> y(count);
  int max_label = -1;
  for (std::size_t i = 0; i < count; ++i) {
    y[i] = rl.u8();
    max_label = std::max(max_label, y[i]);
  }
  if (num_classes <= 0) num_classes = max_label + 1;
  return LabeledDataset(shape, std::max(num_classes, 1), std::move(pixels), std::move(y));
}

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path, int num_classes) {
  return decode_idx(binary::read_file(images_path), binary::read_file(labels_path), num_classes);
}

std::string encode_idx_images(const LabeledDataset& dataset) {
  binary::Writer w;
  const auto& s = dataset.shape();
  const bool mono = s.channels == 1;
  w.u8(0);
  w.u8(0);
  w.u8(kUbyte);
  w.u8(mono ? 3 : 4);
  w.u32_be(static_cast<std::uint32_t>(dataset.size()));
  if (!mono) w.u32_be(static_cast<std::uint32_t>(s.channels));
  w.u32_be(static_cast<std::uint32_t>(s.height));
  w.u32_be(static_cast<std::uint32_t>(s.width));
  for (const double v : dataset.pixels()) {
    w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return w.release();
}

std::string encode_idx_labels(const LabeledDataset& dataset) {
  binary::Writer w;
  w.u8(0);
  w.u8(0);
  w.u8(kUbyte);
  w.u8(1);
  w.u32_be(static_cast<std::uint32_t>(dataset.size()));
  for (const int y : dataset.labels()) {
    if (y > 255) throw DataError(DataError::Kind::invalid_argument, "label does not fit in IDX ubyte");
    w.u8(static_cast<std::uint8_t>(y));
  }
  return w.release();
}

void save_idx(const LabeledDataset& dataset, const std::string& images_path, const std::string& labels_path) {
  binary::write_file(images_path, encode_idx_images(dataset));
  binary::write_file(labels_path, encode_idx_labels(dataset));
}

}  // namespace fccl::data
