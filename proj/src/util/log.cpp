#include "fccl/util/log.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>

namespace fccl::log {
namespace {

Level initial_level() {
  const char* env = std::getenv("FCCL_LOG");
  if (env == nullptr) return Level::warn;
  const std::string v(env);
  if (v == "debug") return Level::debug;
  if (v == "info") return Level::info;
  if (v == "error") return Level::error;
  if (v == "off") return Level::off;
  return Level::warn;
}

std::atomic<Level> g_level{initial_level()};
std::atomic<long> g_warnings{0};
std::mutex g_mutex;

const char* tag(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
    default: return "";
  }
}

}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level l, std::string_view message) {
  if (l == Level::warn) ++g_warnings;
  if (l < g_level.load() || l == Level::off) return;
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[%s] %.*s\n", tag(l), static_cast<int>(message.size()), message.data());
}

long warning_count() { return g_warnings; }

}  // namespace fccl::log
