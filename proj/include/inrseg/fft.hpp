#pragma once

#include <complex>
#include <vector>

#include "inrseg/tensor.hpp"

namespace inrseg {

// Radix-2 in-place FFT over n points (n power of two); inverse includes the
// 1/n normalization.
void fft_inplace(std::complex<Scalar>* a, Index n, bool inverse = false);
// 2-D transform of an n×n row-major grid (rows, then columns).
void fft2_inplace(std::complex<Scalar>* a, Index n, bool inverse = false);

// Channel-mean grayscale of an {H,W,3} image.
Tensor to_grayscale(const Tensor& rgb);

// Spectrum of a square power-of-two grayscale patch: centered log(1+|F|)
// image and radial band energies (|F|^2 / P^2 per band, so the band total
// matches the patch energy by Parseval).
struct SpectrumReport {
  Index patch_row = 0;
  Index patch_col = 0;
  Index size = 0;
  Tensor log_magnitude;              // {P,P}, quadrant-swapped so DC is centered
  std::vector<Scalar> band_energy;   // bands 0..P/2 by rounded radial frequency
  Scalar total_energy = 0.0;         // sum |F|^2 / P^2
  Scalar patch_energy = 0.0;         // sum x^2
  Scalar parseval_rel_err = 0.0;
};

SpectrumReport fft2_magnitude(const Tensor& patch);

// Energy in bands at or above radial frequency P/4.
Scalar high_band_energy(const SpectrumReport& report);

}  // namespace inrseg
