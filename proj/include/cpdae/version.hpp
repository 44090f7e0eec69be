#pragma once

namespace cpdae {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kCheckpointFormat = "cpdae-ckpt-v1";

}  // namespace cpdae
