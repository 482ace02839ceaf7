#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epalab/core.hpp"
#include "epalab/datagen.hpp"
#include "epalab/losses.hpp"

namespace epalab {

enum class Optimizer { Sgd, AdamLike };

Optimizer optimizer_from_string(const std::string& s);
const char* to_string(Optimizer o) noexcept;

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::AdamLike;
  double adam_b1 = 0.9;
  double adam_b2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t checkpoint_every = 100;
  // Finite-difference audit of the analytic gradient every N steps; 0 disables.
  std::size_t audit_every = 0;
  bool keep_snapshots = false;
  // Stop rule of exact_mle_fit: gradient max-norm below this value.
  double convergence_tol = 1e-8;
};

void validate_train_config(const TrainConfig& config, std::size_t dataset_size);

struct Checkpoint {
  std::size_t step = 0;
  double loss = 0.0;
  double probe_pearson = 0.0;
  double probe_eps_hat = 0.0;
  double kl_to_ref = 0.0;
  double exp_true_reward = 0.0;
  std::optional<TabularPolicy> snapshot;
};

struct Trajectory {
  std::vector<Checkpoint> points;
};

/// step,loss,probe_pearson,probe_eps_hat,kl_to_ref,exp_true_reward
std::string trajectory_to_csv(const Trajectory& trajectory);

struct AuditRecord {
  std::size_t step = 0;
  double relative_error = 0.0;
  bool passed = true;
};

struct TrainResult {
  TabularPolicy policy;
  Trajectory trajectory;
  std::vector<AuditRecord> audits;
};

/// Minibatch training starting from the reference policy. Batches are drawn
/// without replacement per epoch and reshuffled between epochs; in-batch weak
/// negatives are resolved when each batch is assembled. Checkpoint k records
/// the policy after k updates and the loss of the minibatch of update k
/// (the first minibatch for k = 0).
TrainResult train(const World& world, std::span<const PreferenceRecord> records,
                  const LossConfig& loss_config, const TrainConfig& train_config);

struct GridEntry {
  PromptId prompt = 0;
  ResponseId response = 0;
};

using LossEvaluator = std::function<double(const TabularPolicy&)>;

/// Central differences (L(theta + h e) - L(theta - h e)) / 2h at each entry.
/// Throws Error(Check) if the evaluator is not deterministic.
std::vector<double> finite_diff_gradient(const LossEvaluator& loss, const TabularPolicy& policy,
                                         double h, std::span<const GridEntry> entries);

/// Uniformly sampled distinct entries of a P x V table.
std::vector<GridEntry> sample_entries(std::size_t prompts, std::size_t responses,
                                      std::size_t count, std::uint64_t seed);

/// All entries of the given prompt rows.
std::vector<GridEntry> row_entries(std::span<const PromptId> prompts, std::size_t responses);

/// ||a - b|| / max(||a||, ||b||), or 0 when both vectors are zero.
double relative_error(std::span<const double> a, std::span<const double> b);

struct GradientCheck {
  double relative_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the analytic gradient of a batch loss against central
/// differences on every entry of the rows the batch touches. The on-policy
/// weight is frozen at `policy` so both sides see the same constant.
GradientCheck check_loss_gradient(const Batch& batch, const TabularPolicy& policy,
                                  const World& world, const LossConfig& config, double h = 1e-6);

struct ExactFitResult {
  TabularPolicy policy;
  bool converged = false;
  std::size_t steps = 0;
  double grad_max_norm = 0.0;
  double final_loss = 0.0;
  std::size_t monotonicity_violations = 0;
};

/// sum_x w_x * ipm_nll_exact(policy, x) with the gradient of each row.
double weighted_ipm_nll(const TabularPolicy& policy, const World& world, double beta,
                        std::span<const double> prompt_weights, Matrix* gradient = nullptr);

/// Minimizes the exact weighted IPM negative log-likelihood by gradient
/// descent from the reference policy. Stops once the gradient max-norm drops
/// below train_config.convergence_tol or the step budget runs out.
/// Empty prompt_weights means weight 1 for every prompt.
ExactFitResult exact_mle_fit(const World& world, double beta,
                             std::span<const double> prompt_weights,
                             const TrainConfig& train_config);

}  // namespace epalab
