#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

// Tiny stderr logger gated by the PROTODIST_LOG env var
// (debug | info | warn | quiet; default info). Artifacts never go through
// this path, so log noise cannot break run-to-run byte determinism.
namespace protodist::log {

enum class Level { debug = 0, info = 1, warn = 2, quiet = 3 };

inline Level threshold() {
  static Level lvl = [] {
    const char* env = std::getenv("PROTODIST_LOG");
    if (!env) return Level::info;
    if (std::strcmp(env, "debug") == 0) return Level::debug;
    if (std::strcmp(env, "warn") == 0) return Level::warn;
    if (std::strcmp(env, "quiet") == 0) return Level::quiet;
    return Level::info;
  }();
  return lvl;
}

template <class... Args>
void emit(Level lvl, const char* tag, const char* fmt, Args... args) {
  if (lvl < threshold()) return;
  std::fprintf(stderr, "[%s] ", tag);
  if constexpr (sizeof...(Args) == 0) {
    std::fputs(fmt, stderr);
  } else {
    std::fprintf(stderr, fmt, args...);
  }
  std::fputc('\n', stderr);
}

template <class... Args>
void debug(const char* fmt, Args... args) {
  emit(Level::debug, "debug", fmt, args...);
}

template <class... Args>
void info(const char* fmt, Args... args) {
  emit(Level::info, "info", fmt, args...);
}

template <class... Args>
void warn(const char* fmt, Args... args) {
  emit(Level::warn, "warn", fmt, args...);
}

}  // namespace protodist::log
