// Copyright 2026 The sdmtss Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Minimal leveled logging to stderr. The level comes from SDMTSS_LOG
// (error, info or debug; default info).

#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

#include "sdmtss/error.hpp"

namespace sdmtss {

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel parse_log_level(const std::string& s) {
  if (s == "error") return LogLevel::error;
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  throw ConfigError("SDMTSS_LOG must be one of error, info, debug (got '" + s + "')");
}

inline LogLevel& log_level() {
  static LogLevel level = LogLevel::info;
  return level;
}

/// Reads SDMTSS_LOG; an unset or empty variable keeps the default.
inline void init_log_from_env() {
  const char* v = std::getenv("SDMTSS_LOG");
  if (v && *v) log_level() = parse_log_level(v);
}

inline void log_at(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  static const char* names[] = {"error", "info", "debug"};
  std::fprintf(stderr, "[sdmtss %s] %s\n", names[static_cast<int>(level)], msg.c_str());
}

inline void log_error(const std::string& msg) { log_at(LogLevel::error, msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::debug, msg); }

}  // namespace sdmtss
