#pragma once

#include <span>
#include <string>
#include <vector>

#include "musefuse/binary_io.hpp"
#include "musefuse/nn/tensor.hpp"

namespace musefuse::nn {

/// One named f32 tensor as stored in a "CKPT" file.
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

Bytes serialize_checkpoint(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> parse_checkpoint(std::span<const std::uint8_t> bytes);

template <typename S>
NamedTensor to_named(const std::string& name, const Tensor<S>& t) {
  NamedTensor nt{name, t.shape(), std::vector<float>(static_cast<std::size_t>(t.numel()))};
  for (Index i = 0; i < t.numel(); ++i) nt.data[static_cast<std::size_t>(i)] = static_cast<float>(t.value()[i]);
  return nt;
}

template <typename S>
void assign_from(Tensor<S>& t, const NamedTensor& nt) {
  if (nt.shape != t.shape()) {
    throw Error(ErrorCode::ShapeMismatch, nt.name + ": checkpoint " + to_string(nt.shape) + " vs model " + to_string(t.shape()));
  }
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = static_cast<S>(nt.data[static_cast<std::size_t>(i)]);
}

}  // namespace musefuse::nn
