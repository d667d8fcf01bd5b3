#pragma once

#include <complex>
#include <cstddef>

namespace beamkd::detail {

// Real-to-complex DFT; out must hold n/2 + 1 values. Thread-safe.
void rfft(const double* in, std::size_t n, std::complex<double>* out);

// Inverse of rfft with 1/n normalization; in holds n/2 + 1 values.
void irfft(const std::complex<double>* in, std::size_t n, double* out);

}  // namespace beamkd::detail
