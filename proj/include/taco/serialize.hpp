#pragma once

#include <string>
#include <vector>

#include "taco/tensor.hpp"

namespace taco::io {

std::string base64_encode(const unsigned char* data, std::size_t len);
std::vector<unsigned char> base64_decode(const std::string& text);  // throws on bad input

// Tensor payloads travel as base64 of little-endian 64-bit doubles.
std::string tensor_to_base64(const taco::num::Tensor& t);
taco::num::Tensor tensor_from_base64(const std::string& text, int rows, int cols);

}  // namespace taco::io
