#pragma once

namespace ltrec {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ltrec
