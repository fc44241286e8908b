#pragma once

#include <string>

namespace prism::log {

enum class Level { quiet = 0, warn = 1, info = 2 };

void set_level(Level level);
Level level();
void warn(const std::string& message);
void info(const std::string& message);
// Number of warnings emitted since start (counted even when quiet).
std::size_t warning_count();

}  // namespace prism::log
