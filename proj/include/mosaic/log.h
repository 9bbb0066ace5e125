#pragma once

#include <string_view>

namespace mosaic::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

// Initial level comes from MOSAIC_LOG (error|warn|info|debug), default warn.
Level level();
void set_level(Level lvl);

void error(std::string_view msg);
void warn(std::string_view msg);
void info(std::string_view msg);
void debug(std::string_view msg);

}  // namespace mosaic::log
