#include "upskill/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace upskill::rng {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

Stream::Stream(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& word : state_) word = splitmix64(x);
}

Stream Stream::derive(std::uint64_t master_seed, Purpose purpose,
                      std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = master_seed;
  std::uint64_t h = splitmix64(x);
  x = h ^ (static_cast<std::uint64_t>(purpose) * 0xD1B54A32D192ED03ULL);
  h = splitmix64(x);
  x = h ^ (a * 0x8CB92BA72F3D8DD7ULL + 0x2545F4914F6CDD1DULL);
  h = splitmix64(x);
  x = h ^ (b * 0x9E6C63D0876A9A47ULL + 0xB5297A4D3A2D8FE7ULL);
  return Stream(splitmix64(x));
}

std::uint64_t Stream::next_u64() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Stream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Stream::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
  const std::uint64_t threshold = (-n) % n;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double Stream::gaussian() {
  // uniform() can return exactly 0; shift into (0, 1] for the log.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

std::size_t Stream::categorical(const std::vector<double>& probs) {
  if (probs.empty()) throw std::invalid_argument("categorical: empty support");
  const double u = uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return probs.size() - 1;
}

}  // namespace upskill::rng
