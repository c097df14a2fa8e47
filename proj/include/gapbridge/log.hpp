#pragma once

#include <functional>
#include <string>
#include <utility>

namespace gapbridge {

enum class LogLevel { debug, info, warn };

using LogSink = std::function<void(LogLevel, const std::string&)>;

// Process-wide sink; silent until a caller installs one (the CLI routes it to
// stderr).
inline LogSink& log_sink() {
  static LogSink sink;
  return sink;
}

inline void set_log_sink(LogSink sink) { log_sink() = std::move(sink); }

inline void log(LogLevel level, const std::string& message) {
  if (const auto& sink = log_sink()) sink(level, message);
}

}  // namespace gapbridge
