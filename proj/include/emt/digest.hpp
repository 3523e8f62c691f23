#pragma once

#include <span>
#include <string>
#include <string_view>

namespace emt {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const unsigned char> bytes);

std::string base64_encode(std::string_view bytes);
/// Throws std::invalid_argument on malformed input.
std::string base64_decode(std::string_view text);

/// Incremental SHA-256 over length-prefixed fields, so ("ab","c") and
/// ("a","bc") hash differently.
class FieldHasher {
 public:
  FieldHasher();
  ~FieldHasher();
  FieldHasher(const FieldHasher&) = delete;
  FieldHasher& operator=(const FieldHasher&) = delete;

  FieldHasher& add(std::string_view field);
  std::string hex();

 private:
  void* ctx_;
};

}  // namespace emt
