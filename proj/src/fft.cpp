#include "inrseg/fft.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "inrseg/errors.hpp"

namespace inrseg {

namespace {

constexpr Scalar kPi = 3.14159265358979323846;

bool is_pow2(Index v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void fft_inplace(std::complex<Scalar>* a, Index n, bool inverse) {
  if (!is_pow2(n)) raise_invalid_shape("fft length must be a power of two");
  for (Index i = 1, j = 0; i < n; ++i) {
    Index bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (Index len = 2; len <= n; len <<= 1) {
    const Scalar ang = 2.0 * kPi / static_cast<Scalar>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<Scalar> wlen(std::cos(ang), std::sin(ang));
    for (Index i = 0; i < n; i += len) {
      std::complex<Scalar> w(1.0, 0.0);
      for (Index k = 0; k < len / 2; ++k) {
        const std::complex<Scalar> u = a[i + k];
        const std::complex<Scalar> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    for (Index i = 0; i < n; ++i) a[i] /= static_cast<Scalar>(n);
  }
}

void fft2_inplace(std::complex<Scalar>* a, Index n, bool inverse) {
  for (Index r = 0; r < n; ++r) fft_inplace(a + r * n, n, inverse);
  std::vector<std::complex<Scalar>> col(static_cast<std::size_t>(n));
  for (Index c = 0; c < n; ++c) {
    for (Index r = 0; r < n; ++r) col[static_cast<std::size_t>(r)] = a[r * n + c];
    fft_inplace(col.data(), n, inverse);
    for (Index r = 0; r < n; ++r) a[r * n + c] = col[static_cast<std::size_t>(r)];
  }
}

Tensor to_grayscale(const Tensor& rgb) {
  const Shape& sh = rgb.shape();
  if (sh.size() != 3 || sh[2] != 3) {
    raise_invalid_shape("to_grayscale expects {H,W,3}, got " + shape_str(sh));
  }
  Tensor out({sh[0], sh[1]});
  CMapMat m(rgb.data().data(), sh[0] * sh[1], 3);
  MapMat o(out.data().data(), sh[0] * sh[1], 1);
  o = m.rowwise().mean();
  return out;
}

SpectrumReport fft2_magnitude(const Tensor& patch) {
  const Shape& sh = patch.shape();
  if (sh.size() != 2 || sh[0] != sh[1]) {
    raise_invalid_shape("fft2_magnitude expects a square {P,P} patch, got " + shape_str(sh));
  }
  const Index p = sh[0];
  if (!is_pow2(p)) raise_invalid_shape("spectrum patches must have power-of-two size");

  std::vector<std::complex<Scalar>> f(static_cast<std::size_t>(p * p));
  for (Index i = 0; i < p * p; ++i) f[static_cast<std::size_t>(i)] = patch.data()[i];
  fft2_inplace(f.data(), p);

  SpectrumReport rep;
  rep.size = p;
  rep.log_magnitude = Tensor({p, p});
  rep.band_energy.assign(static_cast<std::size_t>(p / 2 + 1), 0.0);
  rep.patch_energy = patch.data().square().sum();

  const Scalar inv_p2 = 1.0 / static_cast<Scalar>(p * p);
  const Index half = p / 2;
  for (Index r = 0; r < p; ++r) {
    for (Index c = 0; c < p; ++c) {
      const std::complex<Scalar> v = f[static_cast<std::size_t>(r * p + c)];
      const Scalar mag2 = std::norm(v);
      rep.total_energy += mag2 * inv_p2;

      // Signed frequencies in [-P/2, P/2).
      const Index fr = r < half ? r : r - p;
      const Index fc = c < half ? c : c - p;
      const Scalar radius = std::sqrt(static_cast<Scalar>(fr * fr + fc * fc));
      Index band = static_cast<Index>(std::floor(radius + 0.5));
      if (band > half) band = half;
      rep.band_energy[static_cast<std::size_t>(band)] += mag2 * inv_p2;

      // Quadrant swap so DC lands at (P/2, P/2).
      const Index sr = (r + half) % p;
      const Index sc = (c + half) % p;
      rep.log_magnitude.data()[sr * p + sc] = std::log1p(std::sqrt(mag2));
    }
  }

  const Scalar denom = std::max(rep.patch_energy, Scalar(1e-300));
  rep.parseval_rel_err = std::abs(rep.total_energy - rep.patch_energy) / denom;
  return rep;
}

Scalar high_band_energy(const SpectrumReport& report) {
  const Index cut = report.size / 4;
  Scalar e = 0.0;
  for (std::size_t b = static_cast<std::size_t>(cut); b < report.band_energy.size(); ++b) {
    e += report.band_energy[b];
  }
  return e;
}

}  // namespace inrseg
