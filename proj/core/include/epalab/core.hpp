#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "epalab/matrix.hpp"

namespace epalab {

using PromptId = std::size_t;
using ResponseId = std::size_t;

/// Global response vocabulary shared by all prompts. `lengths` is synthetic
/// token-length metadata consumed only by the length tricks.
struct ResponseVocab {
  std::vector<int> lengths;

  std::size_t size() const noexcept { return lengths.size(); }
  bool operator==(const ResponseVocab&) const = default;
};

/// True rewards r(x, y). Entries equal to -inf lie outside the finite support.
struct RewardTable {
  Matrix values;

  std::size_t prompts() const noexcept { return values.rows(); }
  std::size_t responses() const noexcept { return values.cols(); }
  std::span<const double> row(PromptId x) const { return values.row(x); }
  bool in_support(PromptId x, ResponseId y) const;
  std::vector<ResponseId> support(PromptId x) const;

  bool operator==(const RewardTable&) const = default;
};

/// Per-prompt softmax policy over the vocabulary.
///
/// Trainable policies always carry finite logits. Closed-form minimizers may
/// carry -inf logits where the reward is -inf, giving probability exactly 0.
class TabularPolicy {
 public:
  TabularPolicy() = default;
  explicit TabularPolicy(Matrix logits) : logits_(std::move(logits)) {}

  static TabularPolicy uniform(std::size_t prompts, std::size_t responses) {
    return TabularPolicy(Matrix(prompts, responses, 0.0));
  }

  std::size_t prompts() const noexcept { return logits_.rows(); }
  std::size_t responses() const noexcept { return logits_.cols(); }

  const Matrix& logits() const noexcept { return logits_; }
  Matrix& logits() noexcept { return logits_; }

  std::vector<double> probabilities(PromptId x) const;
  std::vector<double> log_probabilities(PromptId x) const;

  bool operator==(const TabularPolicy&) const = default;

 private:
  Matrix logits_;
};

/// The ground-truth environment: vocabulary, true rewards and reference policy.
///
/// `on_topic` optionally lists, per prompt, the responses that count as
/// plausible candidates for that prompt (used by best-of-K sampling). When it
/// is empty the finite support of each reward row plays that role.
struct World {
  ResponseVocab vocab;
  RewardTable rewards;
  TabularPolicy reference;
  std::uint64_t seed = 0;
  std::vector<std::vector<ResponseId>> on_topic;

  std::size_t prompts() const noexcept { return rewards.prompts(); }
  std::size_t responses() const noexcept { return rewards.responses(); }
  std::vector<ResponseId> candidates(PromptId x) const;

  bool operator==(const World&) const = default;
};

/// Row-stochastic matrix of p(z | y); row index is y.
struct PerturbationKernel {
  Matrix transition;

  std::size_t size() const noexcept { return transition.rows(); }
  std::span<const double> row(ResponseId y) const { return transition.row(y); }
};

struct PreferenceRecord {
  PromptId prompt = 0;
  ResponseId winner = 0;
  std::vector<ResponseId> strong;
  // Pre-computed weak negatives (bare response ids, always scored under
  // `prompt`). Empty when weak negatives are chosen at batch assembly.
  std::vector<ResponseId> weak;
  // Number of weak negatives to draw at batch assembly (in-batch mode).
  std::size_t weak_n = 0;

  bool operator==(const PreferenceRecord&) const = default;
};

enum class LossVariant { Dpo, EpaNarrow, EpaGeneral, EdStat, Ipo, DpoPl };
enum class WeakSource { InBatch, Precomputed };

const char* to_string(LossVariant v) noexcept;
LossVariant loss_variant_from_string(const std::string& s);

/// Loss modification tricks, applied in declaration order.
struct Tricks {
  bool remove_ref = false;        // r = beta * log pi
  double sft_coef = 0.0;          // L += coef * -log pi(y_w)
  double len_penalty_alpha = 0.0; // r -= alpha * |y|
  bool len_normalize = false;     // r /= |y|
  bool on_policy_weight = false;  // L *= prod pi(y)/sum pi^2, held constant

  bool any() const noexcept {
    return remove_ref || sft_coef != 0.0 || len_penalty_alpha != 0.0 ||
           len_normalize || on_policy_weight;
  }
};

struct LossConfig {
  LossVariant variant = LossVariant::Dpo;
  double beta = 0.1;
  std::size_t n_weak = 0;
  WeakSource weak_source = WeakSource::InBatch;
  double margin_mc = 0.0;
  double ipo_tau = 0.5;
  Tricks tricks;
  // Sampling parameters of the ED statistic when used as a training loss.
  std::size_t ed_negatives = 8;
  double ed_stay_prob = 0.5;
};

/// Throws Error(Config) when the configuration violates its invariants.
/// `batch_size` of 0 skips the batch-dependent checks.
void validate_loss_config(const LossConfig& config, std::size_t batch_size = 0);

/// Every invariant violation of the world, empty when valid.
std::vector<std::string> validate_world(const World& world);

std::vector<std::string> validate_kernel(const PerturbationKernel& kernel);

/// p(y|y) = stay_prob, remaining mass spread uniformly over the other V-1 responses.
PerturbationKernel make_symmetric_kernel(std::size_t vocab_size, double stay_prob);

}  // namespace epalab
