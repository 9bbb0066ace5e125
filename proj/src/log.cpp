#include "mosaic/log.h"

#include <cstdlib>
#include <iostream>
#include <string>

namespace mosaic::log {

namespace {

Level from_env() {
    const char* env = std::getenv("MOSAIC_LOG");
    if (!env) return Level::Warn;
    const std::string v(env);
    if (v == "error") return Level::Error;
    if (v == "info") return Level::Info;
    if (v == "debug") return Level::Debug;
    return Level::Warn;
}

Level& current() {
    static Level lvl = from_env();
    return lvl;
}

void emit(Level lvl, const char* tag, std::string_view msg) {
    if (static_cast<int>(lvl) > static_cast<int>(current())) return;
    std::cerr << "[mosaic " << tag << "] " << msg << '\n';
}

}  // namespace

Level level() { return current(); }
void set_level(Level lvl) { current() = lvl; }

void error(std::string_view msg) { emit(Level::Error, "error", msg); }
void warn(std::string_view msg) { emit(Level::Warn, "warn", msg); }
void info(std::string_view msg) { emit(Level::Info, "info", msg); }
void debug(std::string_view msg) { emit(Level::Debug, "debug", msg); }

}  // namespace mosaic::log
