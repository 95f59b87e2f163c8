#include "musefuse/nn/checkpoint.hpp"

namespace musefuse::nn {

Bytes serialize_checkpoint(std::span<const NamedTensor> tensors) {
  ByteWriter w;
  w.raw("CKPT");
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw Error(ErrorCode::InvalidRecord, "tensor name too long");
    if (t.shape.size() > 0xff) throw Error(ErrorCode::InvalidRecord, "too many dimensions");
    if (static_cast<Index>(t.data.size()) != numel(t.shape)) throw Error(ErrorCode::ShapeMismatch, t.name);
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) w.f32(v);
  }
  return std::move(w).bytes();
}

std::vector<NamedTensor> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != "CKPT") throw Error(ErrorCode::BadMagic, "expected CKPT");
  const auto n = r.u32();
  std::vector<NamedTensor> out(n);
  for (auto& t : out) {
    t.name = r.raw(r.u16());
    const auto ndim = r.u8();
    t.shape.resize(ndim);
    for (auto& d : t.shape) d = static_cast<Index>(r.u32());
    t.data.resize(static_cast<std::size_t>(numel(t.shape)));
    for (auto& v : t.data) v = r.f32();
  }
  if (r.remaining() != 0) throw Error(ErrorCode::InvalidRecord, "trailing bytes in checkpoint");
  return out;
}

}  // namespace musefuse::nn
