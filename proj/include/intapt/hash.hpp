#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace intapt {

/// Incremental SHA-256; digests are reported as lowercase hex.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256 &) = delete;
  Sha256 &operator=(const Sha256 &) = delete;

  void update(std::span<const std::uint8_t> bytes);
  void update(std::string_view text);
  void update(const void *data, std::size_t size);
  std::array<std::uint8_t, 32> digest();
  std::string hex_digest();

 private:
  void *ctx_;
};

std::string sha256_hex(std::string_view data);
std::string to_hex(std::span<const std::uint8_t> bytes);

/// SplitMix64 mixing; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace intapt
