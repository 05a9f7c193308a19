#include "taco/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "taco/errors.hpp"

namespace taco::io {

namespace {

constexpr char kAlphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

}  // namespace

std::string base64_encode(const unsigned char* data, std::size_t len) {
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= len; i += 3) {
    unsigned v = (unsigned(data[i]) << 16) | (unsigned(data[i + 1]) << 8) | data[i + 2];
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back(kAlphabet[v & 63]);
  }
  if (i + 1 == len) {
    unsigned v = unsigned(data[i]) << 16;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (i + 2 == len) {
    unsigned v = (unsigned(data[i]) << 16) | (unsigned(data[i + 1]) << 8);
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) {
    throw taco::ValidationError("base64_decode: length " + std::to_string(text.size()) +
                                " is not a multiple of 4");
  }
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int pad = 0;
    int vals[4];
    for (int k = 0; k < 4; ++k) {
      char c = text[i + k];
      if (c == '=') {
        // padding is only legal in the last two slots of the final group
        if (i + 4 != text.size() || k < 2) {
          throw taco::ValidationError("base64_decode: misplaced padding");
        }
        vals[k] = 0;
        ++pad;
      } else {
        if (pad > 0) throw taco::ValidationError("base64_decode: data after padding");
        vals[k] = decode_char(c);
        if (vals[k] < 0) {
          throw taco::ValidationError(std::string("base64_decode: invalid character '") + c + "'");
        }
      }
    }
    unsigned v = (unsigned(vals[0]) << 18) | (unsigned(vals[1]) << 12) |
                 (unsigned(vals[2]) << 6) | unsigned(vals[3]);
    out.push_back((v >> 16) & 0xff);
    if (pad < 2) out.push_back((v >> 8) & 0xff);
    if (pad < 1) out.push_back(v & 0xff);
  }
  return out;
}

std::string tensor_to_base64(const taco::num::Tensor& t) {
  static_assert(sizeof(double) == 8);
  std::vector<unsigned char> bytes(std::size_t(t.numel()) * 8);
  for (int i = 0; i < t.numel(); ++i) {
    std::uint64_t word = std::bit_cast<std::uint64_t>(t.data()[i]);
    for (int b = 0; b < 8; ++b) {
      bytes[std::size_t(i) * 8 + std::size_t(b)] = (word >> (8 * b)) & 0xff;
    }
  }
  return base64_encode(bytes.data(), bytes.size());
}

taco::num::Tensor tensor_from_base64(const std::string& text, int rows, int cols) {
  std::vector<unsigned char> bytes = base64_decode(text);
  taco::num::Tensor t(rows, cols);
  if (bytes.size() != std::size_t(t.numel()) * 8) {
    throw taco::ValidationError("tensor_from_base64: payload holds " +
                                std::to_string(bytes.size() / 8) + " doubles, expected " +
                                std::to_string(t.numel()));
  }
  for (int i = 0; i < t.numel(); ++i) {
    std::uint64_t word = 0;
    for (int b = 0; b < 8; ++b) {
      word |= std::uint64_t(bytes[std::size_t(i) * 8 + std::size_t(b)]) << (8 * b);
    }
    t.data()[i] = std::bit_cast<double>(word);
  }
  return t;
}

}  // namespace taco::io
