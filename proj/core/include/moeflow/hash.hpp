#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace moeflow {

/// Incremental SHA-256. hex() finalizes a copy, so an accumulator can keep
/// receiving updates after being queried.
class Sha256 {
  public:
    Sha256();
    void update(const void* data, std::size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::string hex() const;

  private:
    void compress(const std::uint8_t* block);

    std::uint32_t h_[8];
    std::uint8_t buf_[64];
    std::size_t buf_len_ = 0;
    std::uint64_t total_ = 0;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
/// Streaming file hash; throws IoError when the file cannot be read.
std::string sha256_file_hex(const std::string& path);

}  // namespace moeflow
