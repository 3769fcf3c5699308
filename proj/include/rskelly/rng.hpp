// Counter-based random number generation.
//
// Draws are a pure function of (seed, stream, step, channel, index): no
// mutable generator state, so any path, any step and any coordinate can be
// produced independently and in any order, and parallel simulation is
// bit-identical to serial simulation. The mixer is the SplitMix64 finalizer
// applied to a combined 64-bit counter; normals come from the inverse CDF
// (Wichura's AS241 double-precision rational approximations), so a normal
// draw is also a pure function of its key.
#ifndef RSKELLY_RNG_H
#define RSKELLY_RNG_H

#include <cmath>
#include <cstdint>
#include <limits>

namespace rskelly {

// Identifies an independent random stream. `stream` is typically the path
// index; `seed` is the experiment seed.
struct RngSpec {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

// Channels keep the factor noise w and the exploration noise v independent
// even at equal (step, index).
enum class NoiseChannel : std::uint64_t {
  factor = (0x77ULL << 56) | 1,       // w draws
  exploration = (0x76ULL << 56) | 2,  // v draws
  init = (0x78ULL << 56) | 3         // initial-state jitter
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Mix the full key into one 64-bit word by chained finalization. Each field
// passes through the full-avalanche finalizer, so distinct keys decorrelate.
constexpr std::uint64_t mix_key(std::uint64_t seed, std::uint64_t stream,
                                std::uint64_t step, std::uint64_t channel,
                                std::uint64_t index) {
  std::uint64_t h = splitmix64(seed ^ 0x243f6a8885a308d3ULL);
  h = splitmix64(h ^ stream);
  h = splitmix64(h ^ step);
  h = splitmix64(h ^ channel);
  h = splitmix64(h ^ index);
  return h;
}

// Uniform in the open interval (0,1): 53 random mantissa bits, offset by
// half an ulp so 0 and 1 are unattainable.
inline double u64_to_open01(std::uint64_t u) {
  return (static_cast<double>(u >> 11) + 0.5) * 0x1.0p-53;
}

// Inverse standard normal CDF, AS241 (PPND16). Accurate to ~1e-16 over
// the full open interval.
inline double inverse_normal_cdf(double p) {
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double x;
  if (r <= 5.0) {
    r -= 1.6;
    x = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
            3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
          4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
          2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
          5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
  }
  return (q < 0.0) ? -x : x;
}

}  // namespace detail

// One uniform (0,1) draw for the key.
inline double uniform_open01(const RngSpec& spec, std::uint64_t step,
                             NoiseChannel channel, std::uint64_t index) {
  return detail::u64_to_open01(detail::mix_key(
      spec.seed, spec.stream, step, static_cast<std::uint64_t>(channel),
      index));
}

// One standard normal draw for the key.
inline double standard_normal(const RngSpec& spec, std::uint64_t step,
                              NoiseChannel channel, std::uint64_t index) {
  return detail::inverse_normal_cdf(uniform_open01(spec, step, channel, index));
}

}  // namespace rskelly

#endif  // RSKELLY_RNG_H
