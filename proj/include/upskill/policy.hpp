#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "upskill/env.hpp"
#include "upskill/rng.hpp"
#include "upskill/tensor.hpp"

namespace upskill::policy {

// Fixed symbol table: ids 0-9 digits, 10-14 operators (+ - * / %), then one
// skill token per latent starting at 15. Skill ids are prompt-only; the
// output projection is restricted to the first 15 ids.
struct VocabSpec {
  static constexpr int kOutputVocab = 15;
  int n_skills = 5;

  int total_input_vocab() const { return kOutputVocab + n_skills; }
  int skill_token(int z) const;
  static bool is_digit(int id) { return id >= 0 && id <= 9; }
  static bool is_operator(int id) { return id >= 10 && id <= 14; }
};

struct PolicyConfig {
  int layers = 2;
  int hidden = 128;
  int heads = 4;
  int mlp_factor = 4;
  int max_seq_len = 7;  // 4 prompt tokens + 3 generated
  int n_skills = 5;
  double init_std = 0.02;

  void validate() const;
  VocabSpec vocab() const { return VocabSpec{n_skills}; }
};

constexpr int kPromptLen = 4;
constexpr int kGenLen = 3;

// One sampled completion with the sampler's own tempered log-probabilities.
struct Trajectory {
  env::Problem problem;
  int z = 0;
  std::array<int, kGenLen> tokens = {0, 0, 0};
  std::array<double, kGenLen> logprobs = {0.0, 0.0, 0.0};
};

// Pre-LN causal transformer over the shared token table, conditioned on the
// skill token at position 0.
class Policy {
 public:
  Policy(const PolicyConfig& config, rng::Stream& init_stream);
  // Rebuild from externally loaded parameters (checkpoint path).
  Policy(const PolicyConfig& config, numerics::ParameterSet params);

  const PolicyConfig& config() const { return config_; }
  numerics::ParameterSet& params() { return params_; }
  const numerics::ParameterSet& params() const { return params_; }
  std::size_t parameter_count() const { return params_.total_size(); }

  // Logits over the 15 output ids at every position of every sequence.
  // `tokens` is row-major [batch x seq_len]; result is [batch*seq_len x 15].
  // Differentiable when a tape is active.
  numerics::Tensor logits_all_positions(const std::vector<int>& tokens,
                                        std::size_t batch,
                                        std::size_t seq_len) const;

  // Tempered next-token distributions at chosen positions: for each sequence,
  // the softmax(logits/temperature) rows at `positions` (position p predicts
  // token p+1). Result is [batch * positions.size() * 15], pure forward.
  std::vector<double> tempered_distributions_at(
      const std::vector<int>& tokens, std::size_t batch, std::size_t seq_len,
      const std::vector<std::size_t>& positions, double temperature) const;

  // Single-sequence conveniences.
  std::vector<double> forward_logits(const std::vector<int>& prompt,
                                     const std::vector<int>& generated) const;
  std::vector<double> next_token_distribution(const std::vector<int>& prompt,
                                              const std::vector<int>& generated,
                                              double temperature) const;

  Trajectory sample_completion(const env::Problem& problem, int z,
                               double temperature, rng::Stream& stream) const;

  double trajectory_logprob(const env::Problem& problem, int z,
                            const std::array<int, kGenLen>& tokens,
                            double temperature) const;

  // Deep immutable copy; training the live policy never touches it.
  Policy snapshot() const;

 private:
  PolicyConfig config_;
  numerics::ParameterSet params_;
};

}  // namespace upskill::policy
