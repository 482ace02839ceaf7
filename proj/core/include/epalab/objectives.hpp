#pragma once

#include <span>
#include <vector>

#include "epalab/core.hpp"

namespace epalab {

/// A per-prompt reward row over the whole vocabulary. -inf entries are
/// outside the support.
using RewardVector = std::vector<double>;

/// beta * (log pi(y|x) - log pi_ref(y|x)) for every response.
RewardVector log_ratio_reward(const TabularPolicy& policy, const World& world, double beta,
                              PromptId x);

/// -E_pi[r] + beta * KL(pi || ref) from probability rows. Returns +inf when
/// pi places mass on a -inf reward; zero-probability entries contribute 0.
double rlhf_loss(std::span<const double> policy_probs, std::span<const double> rewards,
                 std::span<const double> reference_probs, double beta);

double rlhf_loss(const TabularPolicy& policy, const World& world, double beta, PromptId x);

/// Closed-form minimizer of the KL-regularized objective: per row
/// pi(y) ∝ ref(y) * exp(r(y) / beta). Logits are normalized log-probabilities;
/// -inf rewards get -inf logits (probability exactly 0).
TabularPolicy analytic_rlhf_minimizer(const World& world, double beta);

/// sum p log(p/q) with 0 log 0 = 0; +inf when p > 0 where q == 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

double entropy(std::span<const double> p);

double total_variation(std::span<const double> p, std::span<const double> q);

/// E_p[r] with the 0 * -inf = 0 convention.
double expected_reward(std::span<const double> probs, std::span<const double> rewards);

/// Boltzmann distribution softmax(r) over finite entries, 0 at -inf.
/// Throws Error(EmptySupport) when every entry is -inf.
std::vector<double> ipm_distribution(std::span<const double> rewards);

/// Cross-entropy -sum_y p(y) log q(y), with p = ipm(r_true row) and
/// q = ipm(log-ratio reward row).
double ipm_nll_exact(const TabularPolicy& policy, const World& world, double beta, PromptId x);

/// Gradient of ipm_nll_exact with respect to the logits of row x, which
/// simplifies to beta * (q - p).
std::vector<double> ipm_nll_gradient(const TabularPolicy& policy, const World& world,
                                     double beta, PromptId x);

/// Exact energy discrepancy of a reward row:
///   sum_y target(y) sum_z p(z|y) log sum_y' p(z|y') exp(r(y') - r(y)).
double exact_energy_discrepancy(std::span<const double> rewards,
                                const PerturbationKernel& kernel,
                                std::span<const double> target);

/// d ED / d r(k) = sum_z m(z) post(k|z) - target(k), where
/// m(z) = sum_y target(y) p(z|y) and post(k|z) ∝ p(z|k) exp(r(k)).
RewardVector ed_gradient_exact(std::span<const double> rewards,
                               const PerturbationKernel& kernel,
                               std::span<const double> target);

}  // namespace epalab
