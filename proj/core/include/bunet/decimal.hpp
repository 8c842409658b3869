#pragma once

#include <charconv>
#include <cstdlib>
#include <string>

namespace bunet {

/// The double closest to the shortest decimal that round-trips `v`, so that
/// 1e-4f serializes as 0.0001 rather than 9.9999997e-05.
inline double shortest_decimal(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

}  // namespace bunet
