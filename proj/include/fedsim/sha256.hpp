#pragma once

#include <array>
#include <cstdint>
#include <cstddef>
#include <span>
#include <string>

namespace fedsim {

// FIPS 180-4 SHA-256, streaming. Used for checkpoint integrity and the
// frozen-backbone checksum; no external dependency wanted for that.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::array<uint8_t, 32> finish();

 private:
  void process_block(const uint8_t* block);

  std::array<uint32_t, 8> state_;
  std::array<uint8_t, 64> buffer_;
  size_t buffered_ = 0;
  uint64_t total_bytes_ = 0;
};

std::string to_hex(std::span<const uint8_t> bytes);
std::string sha256_hex(std::span<const uint8_t> data);
std::string sha256_hex(std::string_view data);

}  // namespace fedsim
