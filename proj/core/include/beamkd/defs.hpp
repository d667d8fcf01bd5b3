#pragma once

namespace beamkd {

// Floor applied inside every log so features stay finite.
inline constexpr double kLogFloor = 1e-10;

inline constexpr double kSpeedOfSound = 343.0;  // m/s

inline constexpr double kPi = 3.14159265358979323846;

}  // namespace beamkd
