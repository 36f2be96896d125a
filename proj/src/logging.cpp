#include "metacausal/logging.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace metacausal::log {

namespace {
std::atomic<Level> g_level{Level::warn};
std::mutex g_mutex;
constexpr const char* kNames[] = {"debug", "info", "warn", "error", "off"};
}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void write(Level lvl, std::string_view message) {
  if (lvl < g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::clog << "[" << kNames[static_cast<int>(lvl)] << "] " << message << '\n';
}

}  // namespace metacausal::log
