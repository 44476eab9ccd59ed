#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace unidec {

// Plain SHA-256, used for freeze-fidelity checks and checkpoint content hashes.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  std::string hex_digest();  // finalizes; do not update afterwards

 private:
  void process_block(const uint8_t* block);
  uint32_t h_[8];
  uint8_t buf_[64];
  size_t buf_len_ = 0;
  uint64_t total_ = 0;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

}  // namespace unidec
