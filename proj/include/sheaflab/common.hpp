#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sheaflab {

// Contract violations (bad arguments, shape mismatches, broken invariants).
// The CLI maps these to exit code 1.
class contract_error : public std::runtime_error {
 public:
  explicit contract_error(const std::string& what) : std::runtime_error(what) {}
};

// Enumeration/budget guard rejections. The CLI maps these to exit code 2.
class budget_error : public std::runtime_error {
 public:
  explicit budget_error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw contract_error(msg);
}

// FNV-1a, used for config hashes embedded in output files.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace sheaflab
