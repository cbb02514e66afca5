#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "prevmap/errors.hpp"

namespace prevmap {

// FNV-1a 64-bit content digest. Used for change detection and determinism
// checks, not for security.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 1099511628211ULL;
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ULL;
};

inline std::string digest_hex(std::uint64_t h) {
  std::ostringstream os;
  os << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string digest_string(const std::string& s) {
  Fnv1a f;
  f.update(s.data(), s.size());
  return digest_hex(f.value());
}

inline std::string digest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file for digest: " + path);
  Fnv1a f;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    f.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return digest_hex(f.value());
}

}  // namespace prevmap
