#pragma once

#include <span>
#include <vector>

#include "ch4/numerics/tensor.hpp"

namespace ch4 {

std::size_t next_pow2(std::size_t n);

// Iterative radix-2 transform. Inputs whose length is not a power of two are
// zero-padded, so the result has next_pow2(x.size()) entries.
ComplexVector fft(std::span<const Complex> x);
ComplexVector ifft(std::span<const Complex> x);

// In-place transform; data.size() must be a power of two.
void fft_inplace(std::span<Complex> data, bool inverse);

// y_t = sum_{j<=t} k_{t-j} u_j, evaluated through a zero-padded FFT.
std::vector<double> causal_convolve(std::span<const double> u, std::span<const double> k);

}  // namespace ch4
