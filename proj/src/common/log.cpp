#include "prism/common/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace prism::log {
namespace {
std::atomic<int> g_level{static_cast<int>(Level::warn)};
std::atomic<std::size_t> g_warnings{0};
std::mutex g_mutex;
}  // namespace

void set_level(Level l) { g_level = static_cast<int>(l); }
Level level() { return static_cast<Level>(g_level.load()); }

void warn(const std::string& message) {
  ++g_warnings;
  if (g_level < static_cast<int>(Level::warn)) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "warning: " << message << '\n';
}

void info(const std::string& message) {
  if (g_level < static_cast<int>(Level::info)) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << message << '\n';
}

std::size_t warning_count() { return g_warnings; }

}  // namespace prism::log
