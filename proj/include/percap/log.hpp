#pragma once

#include <iostream>
#include <string>

namespace percap {

inline void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }
inline void info(const std::string& msg) { std::cerr << msg << "\n"; }

}  // namespace percap
