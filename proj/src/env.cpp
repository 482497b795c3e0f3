#include "upskill/env.hpp"

#include <stdexcept>

namespace upskill::env {

char operator_symbol(Operator op) {
  switch (op) {
    case Operator::kAdd: return '+';
    case Operator::kSub: return '-';
    case Operator::kMul: return '*';
    case Operator::kDiv: return '/';
    case Operator::kMod: return '%';
  }
  throw std::invalid_argument("operator_symbol: bad operator");
}

std::optional<int> evaluate_expression(int lhs, Operator op, int rhs) {
  if (lhs < 0 || lhs > 9 || rhs < 0 || rhs > 9) {
    throw std::invalid_argument("evaluate_expression: digits must be in [0,9]");
  }
  switch (op) {
    case Operator::kAdd: return lhs + rhs;
    case Operator::kSub: return lhs - rhs;
    case Operator::kMul: return lhs * rhs;
    case Operator::kDiv:
      if (rhs == 0 || lhs % rhs != 0) return std::nullopt;
      return lhs / rhs;
    case Operator::kMod:
      if (rhs == 0) return std::nullopt;
      return lhs % rhs;
  }
  throw std::invalid_argument("evaluate_expression: bad operator");
}

VerifierOutcome verify(const Problem& problem, const Completion& completion) {
  VerifierOutcome out;
  out.value = evaluate_expression(completion.lhs, completion.op, completion.rhs);

  // Consume the two operands from the multiset {a, b, c}.
  std::array<int, 3> digits = {problem.a, problem.b, problem.c};
  std::array<bool, 3> used = {false, false, false};
  auto consume = [&](int d) {
    for (std::size_t i = 0; i < 3; ++i) {
      if (!used[i] && digits[i] == d) {
        used[i] = true;
        return true;
      }
    }
    return false;
  };
  if (!consume(completion.lhs) || !consume(completion.rhs)) {
    out.reward = 0;
    out.reason = VerifyReason::kDigitNotAvailable;
    return out;
  }
  int remaining = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!used[i]) remaining = digits[i];
  }
  if (!out.value.has_value()) {
    out.reward = 0;
    out.reason = VerifyReason::kUndefinedOperation;
    return out;
  }
  if (*out.value == remaining) {
    out.reward = 1;
    out.reason = VerifyReason::kCorrect;
  } else {
    out.reward = 0;
    out.reason = VerifyReason::kWrongValue;
  }
  return out;
}

std::vector<Completion> enumerate_solutions(const Problem& problem) {
  std::vector<Completion> solutions;
  for (int lhs = 0; lhs <= 9; ++lhs) {
    for (int op = 0; op < kOperatorCount; ++op) {
      for (int rhs = 0; rhs <= 9; ++rhs) {
        Completion completion{lhs, static_cast<Operator>(op), rhs};
        if (verify(problem, completion).reward == 1) {
          solutions.push_back(completion);
        }
      }
    }
  }
  return solutions;
}

Problem sample_problem(rng::Stream& stream) {
  Problem p;
  p.a = static_cast<int>(stream.uniform_int(10));
  p.b = static_cast<int>(stream.uniform_int(10));
  p.c = static_cast<int>(stream.uniform_int(10));
  return p;
}

std::vector<int> render_prompt_tokens(const Problem& problem, int z,
                                      int n_skills) {
  if (z < 0 || z >= n_skills) {
    throw std::invalid_argument("render_prompt_tokens: skill id " +
                                std::to_string(z) + " out of range [0, " +
                                std::to_string(n_skills) + ")");
  }
  return {15 + z, problem.a, problem.b, problem.c};
}

std::string to_string(const Problem& problem) {
  return std::to_string(problem.a) + " " + std::to_string(problem.b) + " " +
         std::to_string(problem.c);
}

std::string to_string(const Completion& completion) {
  std::string s;
  s += static_cast<char>('0' + completion.lhs);
  s += operator_symbol(completion.op);
  s += static_cast<char>('0' + completion.rhs);
  return s;
}

const char* to_string(VerifyReason reason) {
  switch (reason) {
    case VerifyReason::kCorrect: return "CORRECT";
    case VerifyReason::kWrongValue: return "WRONG_VALUE";
    case VerifyReason::kDigitNotAvailable: return "DIGIT_NOT_AVAILABLE";
    case VerifyReason::kUndefinedOperation: return "UNDEFINED_OPERATION";
    case VerifyReason::kMalformed: return "MALFORMED";
  }
  return "UNKNOWN";
}

}  // namespace upskill::env
