#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "epalab/core.hpp"
#include "epalab/matrix.hpp"
#include "epalab/rng.hpp"

namespace epalab {

/// One training example with every negative resolved to a response id.
/// All responses are scored under `prompt`; weak ids are borrowed from other
/// records but never their prompt.
struct BatchItem {
  PromptId prompt = 0;
  ResponseId winner = 0;
  std::vector<ResponseId> strong;   // for listwise losses: ranking order after the winner
  std::vector<ResponseId> weak;
  std::vector<ResponseId> sampled;  // kernel negatives of the ED statistic
};

struct Batch {
  std::vector<BatchItem> items;
  std::size_t size() const noexcept { return items.size(); }
};

/// Softmax weights of one record: positive, strong, weak and sampled terms.
struct ContrastWeights {
  double positive = 0.0;
  std::vector<double> strong;
  std::vector<double> weak;
  std::vector<double> sampled;

  double total() const;
};

struct LossValue {
  double loss = 0.0;
  std::vector<double> per_record;
  std::vector<ContrastWeights> weights;  // empty for non-softmax losses (IPO)
  std::vector<std::string> warnings;
};

/// Transformed reward row r~(x, .) and its slope d r~(y) / d log pi(y).
struct TrickedRewards {
  std::vector<double> value;
  std::vector<double> slope;
};

/// Reward-level tricks in order: -ref, +len_p, +len_n. The margin, SFT term
/// and on-policy weight act on the loss and are applied by each loss.
TrickedRewards apply_tricks(const LossConfig& config, std::span<const double> log_policy,
                            std::span<const double> log_reference, const ResponseVocab& vocab);

/// Tabular analog of the on-policy weight: prod over ids of pi(y)/sum pi^2.
double on_policy_weight(std::span<const double> probs, std::span<const ResponseId> ids);

/// Optional snapshot used for the on-policy weight. Training passes the
/// current policy; gradient checks pass a frozen copy so the weight stays
/// constant under perturbation.
struct LossOptions {
  const TabularPolicy* weight_policy = nullptr;
};

LossValue dpo_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                   const LossConfig& config, LossOptions options = {});
LossValue epa_narrow_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                          const LossConfig& config, LossOptions options = {});
LossValue epa_general_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                           const LossConfig& config, LossOptions options = {});
LossValue ipo_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                   const LossConfig& config, LossOptions options = {});
/// Listwise Plackett-Luce loss; the ranking is winner followed by `strong`.
LossValue dpo_pl_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                      const LossConfig& config, LossOptions options = {});
/// ED statistic used as a training loss: softmax contrast of the winner
/// against its kernel-sampled negatives, minus log M.
LossValue ed_stat_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                       const LossConfig& config, LossOptions options = {});

/// Dispatches on config.variant.
LossValue evaluate_loss(const Batch& batch, const TabularPolicy& policy, const World& world,
                        const LossConfig& config, LossOptions options = {});

struct LossGradient {
  LossValue value;
  Matrix gradient;  // d loss / d logits, P x V
};

/// Analytic gradient of evaluate_loss with respect to the policy logits.
LossGradient loss_gradient(const Batch& batch, const TabularPolicy& policy, const World& world,
                           const LossConfig& config, LossOptions options = {});

/// Gradient of the EPA loss (narrow or general): per record the winner is
/// pushed up and each negative down in proportion to its softmax weight.
Matrix epa_gradient(const Batch& batch, const TabularPolicy& policy, const World& world,
                    const LossConfig& config, LossOptions options = {});

/// Builds a batch from records, resolving weak negatives (in-batch or
/// pre-computed) and ED kernel negatives. Throws Error(Config) when the
/// records do not fit the loss variant.
Batch assemble_batch(std::span<const PreferenceRecord> records, const World& world,
                     const LossConfig& config, Rng& rng);

/// Checks record shapes against the variant (strong-negative counts, weak
/// availability). Throws Error(Config) naming the first mismatch.
void check_records_compatible(std::span<const PreferenceRecord> records,
                              const LossConfig& config);

/// The ED statistic for one prompt:
///   (1/N) sum_i log(1 + sum_j exp(r(y-_ij) - r(y_i))) - log M,
/// with z0 ~ p(z|y_i) drawn once per positive and negatives ~ p(y|z0).
double ed_statistic(std::span<const double> rewards, const PerturbationKernel& kernel,
                    std::span<const ResponseId> positives, std::size_t M, std::uint64_t seed);

/// Same statistic with r taken as the log-ratio reward of `policy`.
double ed_statistic(const World& world, const PerturbationKernel& kernel,
                    const TabularPolicy& policy, double beta, PromptId x,
                    std::span<const ResponseId> positives, std::size_t M, std::uint64_t seed);

}  // namespace epalab
