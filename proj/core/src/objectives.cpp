#include "epalab/objectives.hpp"

#include <cmath>

#include <fmt/format.h>

#include "epalab/error.hpp"
#include "epalab/numeric.hpp"

namespace epalab {

namespace {

void check_policy_shape(const TabularPolicy& policy, const World& world, PromptId x) {
  if (policy.prompts() != world.prompts() || policy.responses() != world.responses())
    fail(ErrorKind::Shape, fmt::format("policy is {}x{}, world is {}x{}", policy.prompts(),
                                       policy.responses(), world.prompts(), world.responses()));
  if (x >= world.prompts())
    fail(ErrorKind::Shape, fmt::format("prompt {} out of range ({} prompts)", x, world.prompts()));
}

void check_beta(double beta) {
  if (!(beta > 0.0)) fail(ErrorKind::Config, fmt::format("beta must be positive, got {}", beta));
}

void check_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) fail(ErrorKind::Shape, fmt::format("{}: length {} vs {}", what, a, b));
}

}  // namespace

RewardVector log_ratio_reward(const TabularPolicy& policy, const World& world, double beta,
                              PromptId x) {
  check_policy_shape(policy, world, x);
  check_beta(beta);
  const auto lp = policy.log_probabilities(x);
  const auto lr = world.reference.log_probabilities(x);
  RewardVector out(lp.size());
  for (std::size_t y = 0; y < lp.size(); ++y) out[y] = beta * (lp[y] - lr[y]);
  return out;
}

double rlhf_loss(std::span<const double> pi, std::span<const double> rewards,
                 std::span<const double> ref, double beta) {
  check_same_size(pi.size(), rewards.size(), "rlhf_loss");
  check_same_size(pi.size(), ref.size(), "rlhf_loss");
  check_beta(beta);
  double reward = 0.0;
  for (std::size_t y = 0; y < pi.size(); ++y) {
    if (pi[y] <= 0.0) continue;
    if (is_neg_inf(rewards[y])) return kPosInf;
    reward += pi[y] * rewards[y];
  }
  return -reward + beta * kl_divergence(pi, ref);
}

double rlhf_loss(const TabularPolicy& policy, const World& world, double beta, PromptId x) {
  check_policy_shape(policy, world, x);
  return rlhf_loss(policy.probabilities(x), world.rewards.row(x),
                   world.reference.probabilities(x), beta);
}

TabularPolicy analytic_rlhf_minimizer(const World& world, double beta) {
  check_beta(beta);
  Matrix logits(world.prompts(), world.responses());
  for (PromptId x = 0; x < world.prompts(); ++x) {
    const auto lr = world.reference.log_probabilities(x);
    const auto r = world.rewards.row(x);
    std::vector<double> unnormalized(r.size());
    bool any_finite = false;
    for (std::size_t y = 0; y < r.size(); ++y) {
      unnormalized[y] = is_neg_inf(r[y]) ? kNegInf : lr[y] + r[y] / beta;
      any_finite = any_finite || !is_neg_inf(r[y]);
    }
    if (!any_finite) fail(ErrorKind::EmptySupport, fmt::format("row {}: all rewards are -inf", x));
    const auto normalized = log_softmax(unnormalized);
    std::copy(normalized.begin(), normalized.end(), logits.row(x).begin());
  }
  return TabularPolicy(std::move(logits));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  check_same_size(p.size(), q.size(), "kl_divergence");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return kPosInf;
    kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  // Rounding can produce tiny negative values for p ≈ q.
  return std::max(kl, 0.0);
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  check_same_size(p.size(), q.size(), "total_variation");
  double tv = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return 0.5 * tv;
}

double expected_reward(std::span<const double> probs, std::span<const double> rewards) {
  check_same_size(probs.size(), rewards.size(), "expected_reward");
  double e = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    if (is_neg_inf(rewards[i])) return kNegInf;
    e += probs[i] * rewards[i];
  }
  return e;
}

std::vector<double> ipm_distribution(std::span<const double> rewards) {
  bool any_finite = false;
  for (double r : rewards) any_finite = any_finite || !is_neg_inf(r);
  if (!any_finite) fail(ErrorKind::EmptySupport, "ipm_distribution: every reward is -inf");
  return softmax(rewards);
}

double ipm_nll_exact(const TabularPolicy& policy, const World& world, double beta, PromptId x) {
  const auto p = ipm_distribution(world.rewards.row(x));
  const auto log_q = log_softmax(log_ratio_reward(policy, world, beta, x));
  double nll = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y)
    if (p[y] > 0.0) nll -= p[y] * log_q[y];
  return nll;
}

std::vector<double> ipm_nll_gradient(const TabularPolicy& policy, const World& world,
                                     double beta, PromptId x) {
  const auto p = ipm_distribution(world.rewards.row(x));
  const auto q = softmax(log_ratio_reward(policy, world, beta, x));
  std::vector<double> g(p.size());
  for (std::size_t y = 0; y < p.size(); ++y) g[y] = beta * (q[y] - p[y]);
  return g;
}

namespace {

// G(z) = log sum_y' p(z|y') exp(r(y')), evaluated column-wise with log-sum-exp.
std::vector<double> log_column_mass(std::span<const double> r, const PerturbationKernel& kernel) {
  const std::size_t V = r.size();
  std::vector<double> G(V);
  std::vector<double> terms(V);
  for (std::size_t z = 0; z < V; ++z) {
    for (std::size_t y = 0; y < V; ++y) {
      const double k = kernel.transition(y, z);
      terms[y] = (k > 0.0 && !is_neg_inf(r[y])) ? std::log(k) + r[y] : kNegInf;
    }
    G[z] = log_sum_exp(terms);
  }
  return G;
}

void check_ed_inputs(std::span<const double> r, const PerturbationKernel& kernel,
                     std::span<const double> target) {
  check_same_size(r.size(), kernel.size(), "energy discrepancy (rewards vs kernel)");
  check_same_size(r.size(), target.size(), "energy discrepancy (rewards vs target)");
  if (kernel.transition.cols() != kernel.size())
    fail(ErrorKind::Shape, "kernel must be square");
}

}  // namespace

double exact_energy_discrepancy(std::span<const double> r, const PerturbationKernel& kernel,
                                std::span<const double> target) {
  check_ed_inputs(r, kernel, target);
  const auto G = log_column_mass(r, kernel);
  const std::size_t V = r.size();
  double ed = 0.0;
  for (std::size_t y = 0; y < V; ++y) {
    if (target[y] <= 0.0) continue;
    if (is_neg_inf(r[y])) return kPosInf;
    double inner = 0.0;
    for (std::size_t z = 0; z < V; ++z) {
      const double k = kernel.transition(y, z);
      if (k > 0.0) inner += k * (G[z] - r[y]);
    }
    ed += target[y] * inner;
  }
  return ed;
}

RewardVector ed_gradient_exact(std::span<const double> r, const PerturbationKernel& kernel,
                               std::span<const double> target) {
  check_ed_inputs(r, kernel, target);
  const auto G = log_column_mass(r, kernel);
  const std::size_t V = r.size();
  std::vector<double> mass(V, 0.0);
  for (std::size_t y = 0; y < V; ++y)
    for (std::size_t z = 0; z < V; ++z) mass[z] += target[y] * kernel.transition(y, z);

  RewardVector grad(V);
  for (std::size_t k = 0; k < V; ++k) {
    double pulled = 0.0;
    if (!is_neg_inf(r[k])) {
      for (std::size_t z = 0; z < V; ++z) {
        const double kz = kernel.transition(k, z);
        if (kz <= 0.0 || mass[z] <= 0.0) continue;
        pulled += mass[z] * std::exp(std::log(kz) + r[k] - G[z]);
      }
    }
    grad[k] = pulled - target[k];
  }
  return grad;
}

}  // namespace epalab
