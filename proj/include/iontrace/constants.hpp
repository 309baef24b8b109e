#pragma once

namespace iontrace {

// CODATA 2018 exact / defined values.
namespace constants {
inline constexpr double elementary_charge = 1.602176634e-19;  // C
inline constexpr double atomic_mass_unit = 1.66053906660e-27; // kg
inline constexpr double vacuum_permittivity = 8.8541878128e-12; // F/m
inline constexpr double boltzmann = 1.380649e-23; // J/K
inline constexpr double pi = 3.141592653589793238462643383279502884;
inline constexpr double coulomb_constant = 1.0 / (4.0 * pi * vacuum_permittivity);
} // namespace constants

} // namespace iontrace
