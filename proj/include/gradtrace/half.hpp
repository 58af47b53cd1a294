#pragma once

#include <cstdint>
#include <span>

// IEEE binary16 storage. Values are computed in double and rounded to
// nearest-even binary16 (via binary32) only when stored.

namespace gradtrace {

using HalfBits = std::uint16_t;

HalfBits to_half(double value);
double from_half(HalfBits bits);

// Largest finite binary16 value.
inline constexpr double kHalfMax = 65504.0;

// Widened dot product of two half vectors, accumulated in double over eight
// lanes. Uses F16C instructions when the CPU has them.
double half_dot(std::span<const HalfBits> a, std::span<const HalfBits> b);
// The portable path of half_dot; always bitwise equal to it.
double half_dot_reference(std::span<const HalfBits> a, std::span<const HalfBits> b);

}  // namespace gradtrace
