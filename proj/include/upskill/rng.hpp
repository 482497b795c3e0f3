#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace upskill::rng {

// Purpose tags for deriving independent streams from one master seed.
// Every random decision in a run flows through a stream derived from
// (master_seed, purpose, a, b), so runs are reproducible and individual
// subsystems can be re-driven in isolation.
enum class Purpose : std::uint64_t {
  kInit = 1,
  kProblem = 2,
  kSkill = 3,
  kTokenSample = 4,
  kWarmupTarget = 5,
  kEvalProblem = 6,
  kEvalToken = 7,
  kTheoryProblem = 8,
  kMixture = 9,
  kJitter = 10,
  kTest = 11,
};

// xoshiro256** with splitmix64 seeding. Small serializable state (4 u64),
// fast, and statistically solid for simulation work.
class Stream {
 public:
  Stream() : Stream(0) {}
  explicit Stream(std::uint64_t seed);

  static Stream derive(std::uint64_t master_seed, Purpose purpose,
                       std::uint64_t a = 0, std::uint64_t b = 0);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, n), unbiased (rejection on the modulus threshold).
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller; the second variate of each pair is
  // discarded so the state never carries hidden cache across checkpoints.
  double gaussian();

  // Inverse-CDF categorical draw over `probs` in index order.
  std::size_t categorical(const std::vector<double>& probs);

  std::array<std::uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

 private:
  std::array<std::uint64_t, 4> state_;
};

}  // namespace upskill::rng
