#pragma once

#include <charconv>
#include <string>

namespace qualdyn {

/// Shortest decimal representation that round-trips to the same double.
inline std::string format_double(double value) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc{}) return "nan";
    return std::string(buf, end);
}

}  // namespace qualdyn
