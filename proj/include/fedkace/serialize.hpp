#pragma once

#include <cstdio>
#include <string>

namespace fedkace {

// 17 significant digits round-trip any double exactly through strtod.
inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace fedkace
