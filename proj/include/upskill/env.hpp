#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "upskill/rng.hpp"

namespace upskill::env {

// One task instance: three prompt digits.
struct Problem {
  int a = 0;
  int b = 0;
  int c = 0;
  bool operator==(const Problem&) const = default;
};

enum class Operator : int { kAdd = 0, kSub = 1, kMul = 2, kDiv = 3, kMod = 4 };

constexpr int kOperatorCount = 5;

char operator_symbol(Operator op);

// A grammatical three-token candidate: digit, operator, digit.
struct Completion {
  int lhs = 0;
  Operator op = Operator::kAdd;
  int rhs = 0;
  bool operator==(const Completion&) const = default;
};

enum class VerifyReason {
  kCorrect,
  kWrongValue,
  kDigitNotAvailable,
  kUndefinedOperation,
  kMalformed,
};

struct VerifierOutcome {
  int reward = 0;  // 1 iff reason == kCorrect
  std::optional<int> value;
  VerifyReason reason = VerifyReason::kMalformed;
};

// Integer value of `lhs op rhs`, or absent where the operation is undefined:
// division requires a nonzero divisor and an integer quotient, modulo a
// nonzero divisor. Subtraction may go negative.
std::optional<int> evaluate_expression(int lhs, Operator op, int rhs);

// A completion is correct when its two operands can be consumed from the
// multiset {a, b, c} and its value equals the one remaining digit.
VerifierOutcome verify(const Problem& problem, const Completion& completion);

// Brute force over all 10*5*10 grammatical triples.
std::vector<Completion> enumerate_solutions(const Problem& problem);

Problem sample_problem(rng::Stream& stream);

// Prompt layout: [skill_token(z), a, b, c] under the policy vocabulary
// (digits 0-9, operators 10-14, skill tokens from 15).
std::vector<int> render_prompt_tokens(const Problem& problem, int z,
                                      int n_skills);

std::string to_string(const Problem& problem);
std::string to_string(const Completion& completion);
const char* to_string(VerifyReason reason);

}  // namespace upskill::env
