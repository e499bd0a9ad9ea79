#pragma once

#include <string_view>

namespace fccl::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

/// Messages below the threshold are dropped. Initial threshold comes from
/// the FCCL_LOG environment variable (debug|info|warn|error|off), default warn.
void set_level(Level level);
Level level();

void write(Level level, std::string_view message);

inline void debug(std::string_view m) { write(Level::debug, m); }
inline void info(std::string_view m) { write(Level::info, m); }
inline void warn(std::string_view m) { write(Level::warn, m); }
inline void error(std::string_view m) { write(Level::error, m); }

/// Number of warnings emitted since process start (used by tests).
long warning_count();

}  // namespace fccl::log
