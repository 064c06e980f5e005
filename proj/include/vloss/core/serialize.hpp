#pragma once

// "VLT1" tensor container:
//   bytes 0..3  magic "VLT1"
//   u32         rank
//   u32[rank]   dims
//   u8          dtype tag (0 = f32, 1 = f64)
//   payload     row-major, little-endian
// Multi-byte fields are little-endian regardless of host order.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <variant>

#include "vloss/core/tensor.hpp"

namespace vloss {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t);

/// Throws ValidationError naming the byte offset of the first bad field.
AnyTensor read_any_tensor(std::istream& is);

/// Reads and converts to `Scalar` when the stored dtype differs.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is);

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t);
template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path);

std::string encode_tensor_bytes(const Tensor<float>& t);
std::string encode_tensor_bytes(const Tensor<double>& t);

}  // namespace vloss
