#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epalab/core.hpp"
#include "epalab/matrix.hpp"
#include "epalab/objectives.hpp"
#include "epalab/trainer.hpp"

namespace epalab {

// ---- slope-1 probe --------------------------------------------------------

inline constexpr std::size_t kAllSupport = 0;

/// Slope-1 regression of r_learned = r_true + b on one response set.
struct PromptProbe {
  PromptId prompt = 0;
  std::vector<ResponseId> responses;
  std::optional<double> pearson;  // missing when either side has zero variance
  double b_hat = 0.0;
  double eps_hat = 0.0;
};

struct ProbeReport {
  std::vector<PromptProbe> prompts;
  double mean_pearson = 0.0;  // over prompts where pearson is defined
  double mean_eps_hat = 0.0;
};

/// eps(b) = sum (r_true - r_learned + b)^2.
double slope1_error(std::span<const double> r_true, std::span<const double> r_learned, double b);

/// b_hat = mean(r_learned - r_true), eps_hat = eps(b_hat), and the Pearson
/// coefficient of the pairs. Throws Error(Config) for fewer than 2 points.
PromptProbe slope1_fit(std::span<const double> r_true, std::span<const double> r_learned);

/// Probes every prompt over its finite support (responses_per_prompt ==
/// kAllSupport) or over a seeded random subset of that many candidates.
ProbeReport slope1_probe(const TabularPolicy& policy, const World& world, double beta,
                         std::size_t responses_per_prompt = kAllSupport, std::uint64_t seed = 0);

std::string probe_to_csv(const ProbeReport& report);
nlohmann::json to_json(const ProbeReport& report);

// ---- KL-reward frontier ---------------------------------------------------

struct FrontierPoint {
  std::string method;
  double beta = 0.0;
  double kl = 0.0;
  double expected_true_reward = 0.0;
  bool ok = true;
  std::string error;
};

/// Exact prompt-averaged KL(pi || ref) and E_pi[r_true] of a policy.
FrontierPoint policy_point(const TabularPolicy& policy, const World& world, double beta,
                           const std::string& method);

/// For each beta trains a fresh policy and records its exact (KL, reward)
/// point. A failed run yields a point with ok == false.
std::vector<FrontierPoint> kl_reward_frontier(const World& world,
                                              std::span<const PreferenceRecord> records,
                                              const LossConfig& loss_template,
                                              std::span<const double> betas,
                                              const TrainConfig& train_config,
                                              const std::string& method);

/// Reward of a frontier at the given KL by linear interpolation between the
/// neighbouring points (sorted by KL); nullopt outside the covered range.
std::optional<double> reward_at_kl(std::span<const FrontierPoint> frontier, double kl);

/// method,beta,kl,reward
std::string frontier_to_csv(std::span<const FrontierPoint> points);
nlohmann::json to_json(std::span<const FrontierPoint> points);

// ---- BTM degeneracy certificate ---------------------------------------------

struct DegeneracyReport {
  double likelihood_gap = 0.0;  // |E ll(r) - E ll(r~)|
  double tv_distance = 0.0;     // between ref*exp(r) and ref*exp(r~)
  double rlhf_base = 0.0;
  double rlhf_alternative = 0.0;
  double rlhf_gap = 0.0;
  bool passed = false;
  RewardVector base;
  RewardVector alternative;
};

/// log(pi*/ref) for the closed-form minimizer at `beta`; satisfies
/// sum ref * exp(r) = 1 and is a valid base row for the certificate.
RewardVector minimizer_log_ratio(const World& world, PromptId x, double beta);

/// Builds r~ with btm_degenerate_transform and compares the expected
/// Bradley-Terry log-likelihood, the induced policies and their RLHF losses
/// (evaluated at `beta`). Passes when the likelihood gap < 1e-10, the TV
/// distance > 1e-3 and the RLHF losses differ by > 1e-3.
DegeneracyReport degeneracy_certificate(const World& world, PromptId x,
                                        const Matrix& pair_weights,
                                        std::span<const double> base_reward_row,
                                        ResponseId y_star, double A, double beta = 1.0);

nlohmann::json to_json(const DegeneracyReport& report);

// ---- energy discrepancy --------------------------------------------------------

struct EdStationarityReport {
  double grad_max_norm = 0.0;
  double min_perturbation_gain = 0.0;  // min over deltas of ED(r+d) - ED(r)
  std::size_t perturbations = 0;
  std::size_t positive_gains = 0;
  double shift_gap = 0.0;  // |ED(r + c) - ED(r)|
  bool passed = false;
};

/// Gradient and second-order checks of ED at r = r_true with the IPM target.
/// Perturbations are mean-zero on the support with Euclidean norm `radius`.
EdStationarityReport ed_stationarity_check(const World& world, const PerturbationKernel& kernel,
                                           PromptId x, std::size_t n_perturbations = 100,
                                           double radius = 0.1, std::uint64_t seed = 0);

nlohmann::json to_json(const EdStationarityReport& report);

struct ConvergenceRow {
  std::size_t M = 0;
  double mean_abs_error = 0.0;
  double std_error = 0.0;
};

/// Mean |ed_statistic - exact ED| over seeds, with positives drawn from
/// ipm(r_true row) and r = r_true.
std::vector<ConvergenceRow> estimator_convergence_study(const World& world,
                                                        const PerturbationKernel& kernel,
                                                        PromptId x,
                                                        std::span<const std::size_t> M_list,
                                                        std::size_t n_seeds,
                                                        std::size_t n_positives = 64,
                                                        std::uint64_t seed = 0);

std::string convergence_to_csv(std::span<const ConvergenceRow> rows);
nlohmann::json to_json(std::span<const ConvergenceRow> rows);

}  // namespace epalab
