#include "epalab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "epalab/datagen.hpp"
#include "epalab/error.hpp"
#include "epalab/losses.hpp"
#include "epalab/numeric.hpp"
#include "epalab/rng.hpp"

namespace epalab {

using nlohmann::json;

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

double slope1_error(std::span<const double> r_true, std::span<const double> r_learned, double b) {
  if (r_true.size() != r_learned.size()) fail(ErrorKind::Shape, "slope1_error: size mismatch");
  double eps = 0.0;
  for (std::size_t i = 0; i < r_true.size(); ++i) {
    const double d = r_true[i] - r_learned[i] + b;
    eps += d * d;
  }
  return eps;
}

PromptProbe slope1_fit(std::span<const double> r_true, std::span<const double> r_learned) {
  const std::size_t K = r_true.size();
  if (r_learned.size() != K) fail(ErrorKind::Shape, "slope1_fit: size mismatch");
  if (K < 2) fail(ErrorKind::Config, fmt::format("slope-1 probe needs >= 2 responses, got {}", K));
  PromptProbe out;
  double diff = 0.0, mt = 0.0, ml = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    diff += r_learned[i] - r_true[i];
    mt += r_true[i];
    ml += r_learned[i];
  }
  const double n = static_cast<double>(K);
  out.b_hat = diff / n;
  out.eps_hat = slope1_error(r_true, r_learned, out.b_hat);
  mt /= n;
  ml /= n;
  double stt = 0.0, sll = 0.0, stl = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    stt += (r_true[i] - mt) * (r_true[i] - mt);
    sll += (r_learned[i] - ml) * (r_learned[i] - ml);
    stl += (r_true[i] - mt) * (r_learned[i] - ml);
  }
  if (stt > 0.0 && sll > 0.0) out.pearson = std::clamp(stl / std::sqrt(stt * sll), -1.0, 1.0);
  return out;
}

ProbeReport slope1_probe(const TabularPolicy& policy, const World& world, double beta,
                         std::size_t responses_per_prompt, std::uint64_t seed) {
  ProbeReport report;
  Rng rng(seed);
  double sum_pearson = 0.0, sum_eps = 0.0;
  std::size_t n_pearson = 0;
  for (PromptId x = 0; x < world.prompts(); ++x) {
    std::vector<ResponseId> set;
    if (responses_per_prompt == kAllSupport) {
      set = world.rewards.support(x);
    } else {
      set = world.candidates(x);
      if (set.size() < responses_per_prompt)
        fail(ErrorKind::Config, fmt::format("prompt {}: only {} candidates for a {}-response probe",
                                            x, set.size(), responses_per_prompt));
      rng.shuffle(set);
      set.resize(responses_per_prompt);
      std::sort(set.begin(), set.end());
    }
    const auto learned = log_ratio_reward(policy, world, beta, x);
    std::vector<double> rt, rl;
    for (auto y : set) {
      rt.push_back(world.rewards.values(x, y));
      rl.push_back(learned[y]);
    }
    PromptProbe p = slope1_fit(rt, rl);
    p.prompt = x;
    p.responses = std::move(set);
    sum_eps += p.eps_hat;
    if (p.pearson) {
      sum_pearson += *p.pearson;
      ++n_pearson;
    }
    report.prompts.push_back(std::move(p));
  }
  const double P = static_cast<double>(world.prompts());
  report.mean_eps_hat = sum_eps / P;
  report.mean_pearson = n_pearson > 0 ? sum_pearson / static_cast<double>(n_pearson)
                                      : std::numeric_limits<double>::quiet_NaN();
  return report;
}

std::string probe_to_csv(const ProbeReport& report) {
  std::string out = "prompt,responses,pearson,b_hat,eps_hat\n";
  for (const auto& p : report.prompts)
    out += fmt::format("{},{},{},{:.17g},{:.17g}\n", p.prompt, p.responses.size(),
                       p.pearson ? fmt::format("{:.17g}", *p.pearson) : std::string(), p.b_hat,
                       p.eps_hat);
  return out;
}

json to_json(const ProbeReport& report) {
  json prompts = json::array();
  for (const auto& p : report.prompts)
    prompts.push_back({{"prompt", p.prompt},
                       {"responses", p.responses},
                       {"pearson", p.pearson ? json(*p.pearson) : json(nullptr)},
                       {"b_hat", p.b_hat},
                       {"eps_hat", p.eps_hat}});
  return {{"mean_pearson", number_or_null(report.mean_pearson)},
          {"mean_eps_hat", report.mean_eps_hat},
          {"prompts", std::move(prompts)}};
}

FrontierPoint policy_point(const TabularPolicy& policy, const World& world, double beta,
                           const std::string& method) {
  FrontierPoint pt;
  pt.method = method;
  pt.beta = beta;
  for (PromptId x = 0; x < world.prompts(); ++x) {
    const auto pi = policy.probabilities(x);
    pt.kl += kl_divergence(pi, world.reference.probabilities(x));
    pt.expected_true_reward += expected_reward(pi, world.rewards.row(x));
  }
  const double P = static_cast<double>(world.prompts());
  pt.kl /= P;
  pt.expected_true_reward /= P;
  return pt;
}

std::vector<FrontierPoint> kl_reward_frontier(const World& world,
                                              std::span<const PreferenceRecord> records,
                                              const LossConfig& loss_template,
                                              std::span<const double> betas,
                                              const TrainConfig& train_config,
                                              const std::string& method) {
  if (betas.empty()) fail(ErrorKind::Config, "frontier needs at least one beta");
  for (double b : betas)
    if (!(b > 0.0)) fail(ErrorKind::Config, fmt::format("frontier beta {} is not positive", b));
  std::vector<FrontierPoint> out;
  for (double beta : betas) {
    LossConfig lc = loss_template;
    lc.beta = beta;
    try {
      const auto result = train(world, records, lc, train_config);
      out.push_back(policy_point(result.policy, world, beta, method));
    } catch (const Error& e) {
      FrontierPoint pt;
      pt.method = method;
      pt.beta = beta;
      pt.ok = false;
      pt.error = e.what();
      pt.kl = std::numeric_limits<double>::quiet_NaN();
      pt.expected_true_reward = std::numeric_limits<double>::quiet_NaN();
      out.push_back(std::move(pt));
    }
  }
  return out;
}

std::optional<double> reward_at_kl(std::span<const FrontierPoint> frontier, double kl) {
  std::vector<FrontierPoint> pts;
  for (const auto& p : frontier)
    if (p.ok) pts.push_back(p);
  if (pts.empty()) return std::nullopt;
  std::sort(pts.begin(), pts.end(),
            [](const FrontierPoint& a, const FrontierPoint& b) { return a.kl < b.kl; });
  if (kl < pts.front().kl || kl > pts.back().kl) return std::nullopt;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const auto& a = pts[i];
    const auto& b = pts[i + 1];
    if (kl >= a.kl && kl <= b.kl) {
      if (b.kl == a.kl) return std::max(a.expected_true_reward, b.expected_true_reward);
      const double t = (kl - a.kl) / (b.kl - a.kl);
      return a.expected_true_reward + t * (b.expected_true_reward - a.expected_true_reward);
    }
  }
  return pts.back().expected_true_reward;
}

std::string frontier_to_csv(std::span<const FrontierPoint> points) {
  std::string out = "method,beta,kl,reward\n";
  for (const auto& p : points)
    out += fmt::format("{},{:.17g},{:.17g},{:.17g}\n", p.method, p.beta, p.kl,
                       p.expected_true_reward);
  return out;
}

json to_json(std::span<const FrontierPoint> points) {
  json arr = json::array();
  for (const auto& p : points) {
    json j = {{"method", p.method},
              {"beta", p.beta},
              {"kl", number_or_null(p.kl)},
              {"reward", number_or_null(p.expected_true_reward)},
              {"ok", p.ok}};
    if (!p.ok) j["error"] = p.error;
    arr.push_back(std::move(j));
  }
  return arr;
}

RewardVector minimizer_log_ratio(const World& world, PromptId x, double beta) {
  const auto opt = analytic_rlhf_minimizer(world, beta);
  const auto lp = opt.log_probabilities(x);
  const auto lr = world.reference.log_probabilities(x);
  RewardVector r(lp.size());
  for (std::size_t y = 0; y < r.size(); ++y) r[y] = lp[y] - lr[y];
  return r;
}

DegeneracyReport degeneracy_certificate(const World& world, PromptId x,
                                        const Matrix& pair_weights,
                                        std::span<const double> base_reward_row,
                                        ResponseId y_star, double A, double beta) {
  const std::size_t V = world.responses();
  if (x >= world.prompts()) fail(ErrorKind::Config, "prompt out of range");
  if (pair_weights.rows() != V || pair_weights.cols() != V)
    fail(ErrorKind::Shape, "pair weights must be V x V");
  if (y_star >= V) fail(ErrorKind::Config, "y_star out of range");
  for (std::size_t c = 0; c < V; ++c)
    if (pair_weights(y_star, c) != 0.0 || pair_weights(c, y_star) != 0.0)
      fail(ErrorKind::Config,
           fmt::format("pair weights put mass on a pair containing y_star={}", y_star));

  DegeneracyReport rep;
  const auto ref = world.reference.probabilities(x);
  const auto r_true = world.rewards.row(x);
  rep.base.assign(base_reward_row.begin(), base_reward_row.end());
  rep.alternative = btm_degenerate_transform(base_reward_row, ref, y_star, A);

  rep.likelihood_gap = std::abs(expected_bt_log_likelihood(rep.base, r_true, pair_weights) -
                                expected_bt_log_likelihood(rep.alternative, r_true, pair_weights));
  std::vector<double> pi(V), pi_alt(V);
  for (std::size_t y = 0; y < V; ++y) {
    pi[y] = ref[y] * std::exp(rep.base[y]);
    pi_alt[y] = ref[y] * std::exp(rep.alternative[y]);
  }
  rep.tv_distance = total_variation(pi, pi_alt);
  rep.rlhf_base = rlhf_loss(pi, r_true, ref, beta);
  rep.rlhf_alternative = rlhf_loss(pi_alt, r_true, ref, beta);
  rep.rlhf_gap = std::abs(rep.rlhf_base - rep.rlhf_alternative);
  rep.passed = rep.likelihood_gap < 1e-10 && rep.tv_distance > 1e-3 && rep.rlhf_gap > 1e-3;
  return rep;
}

json to_json(const DegeneracyReport& r) {
  return {{"likelihood_gap", r.likelihood_gap}, {"tv_distance", r.tv_distance},
          {"rlhf_base", number_or_null(r.rlhf_base)},
          {"rlhf_alternative", number_or_null(r.rlhf_alternative)},
          {"rlhf_gap", number_or_null(r.rlhf_gap)}, {"passed", r.passed}};
}

EdStationarityReport ed_stationarity_check(const World& world, const PerturbationKernel& kernel,
                                           PromptId x, std::size_t n_perturbations,
                                           double radius, std::uint64_t seed) {
  if (const auto v = validate_kernel(kernel); !v.empty())
    fail(ErrorKind::Config, "invalid kernel: " + v.front());
  const auto r_span = world.rewards.row(x);
  const std::vector<double> r(r_span.begin(), r_span.end());
  const auto target = ipm_distribution(r);
  const auto support = world.rewards.support(x);

  EdStationarityReport rep;
  rep.grad_max_norm = max_abs(ed_gradient_exact(r, kernel, target));
  const double base = exact_energy_discrepancy(r, kernel, target);

  Rng rng(seed);
  rep.perturbations = n_perturbations;
  rep.min_perturbation_gain = std::numeric_limits<double>::infinity();
  std::vector<double> delta(support.size());
  for (std::size_t t = 0; t < n_perturbations; ++t) {
    double mean = 0.0;
    for (auto& d : delta) {
      d = rng.uniform(-1.0, 1.0);
      mean += d;
    }
    mean /= static_cast<double>(delta.size());
    double norm = 0.0;
    for (auto& d : delta) {
      d -= mean;
      norm += d * d;
    }
    norm = std::sqrt(norm);
    auto moved = r;
    for (std::size_t i = 0; i < support.size(); ++i) moved[support[i]] += radius * delta[i] / norm;
    const double gain = exact_energy_discrepancy(moved, kernel, target) - base;
    rep.min_perturbation_gain = std::min(rep.min_perturbation_gain, gain);
    if (gain > 0.0) ++rep.positive_gains;
  }
  auto shifted = r;
  for (auto y : support) shifted[y] += 1.0;
  rep.shift_gap = std::abs(exact_energy_discrepancy(shifted, kernel, target) - base);
  rep.passed = rep.grad_max_norm < 1e-10 && rep.positive_gains == n_perturbations &&
               rep.shift_gap < 1e-12;
  return rep;
}

json to_json(const EdStationarityReport& r) {
  return {{"grad_max_norm", r.grad_max_norm},
          {"min_perturbation_gain", r.min_perturbation_gain},
          {"perturbations", r.perturbations},
          {"positive_gains", r.positive_gains},
          {"shift_gap", r.shift_gap},
          {"passed", r.passed}};
}

std::vector<ConvergenceRow> estimator_convergence_study(const World& world,
                                                        const PerturbationKernel& kernel,
                                                        PromptId x,
                                                        std::span<const std::size_t> M_list,
                                                        std::size_t n_seeds,
                                                        std::size_t n_positives,
                                                        std::uint64_t seed) {
  if (n_seeds < 10) fail(ErrorKind::Config, "convergence study needs at least 10 seeds");
  if (n_positives < 1) fail(ErrorKind::Config, "convergence study needs positives");
  for (std::size_t i = 1; i < M_list.size(); ++i)
    if (M_list[i] <= M_list[i - 1]) fail(ErrorKind::Config, "M_list must be increasing");
  const auto r_span = world.rewards.row(x);
  const std::vector<double> r(r_span.begin(), r_span.end());
  const auto target = ipm_distribution(r);
  const double exact = exact_energy_discrepancy(r, kernel, target);

  // Positive sets and statistic seeds are shared across M so the rows differ
  // only in the number of negatives.
  std::vector<std::vector<ResponseId>> positives(n_seeds);
  for (std::size_t s = 0; s < n_seeds; ++s) {
    Rng rng(Rng::derive(seed, 2 * s));
    for (std::size_t i = 0; i < n_positives; ++i) positives[s].push_back(rng.categorical(target));
  }

  std::vector<ConvergenceRow> rows;
  for (std::size_t M : M_list) {
    std::vector<double> errs(n_seeds);
    for (std::size_t s = 0; s < n_seeds; ++s)
      errs[s] = std::abs(ed_statistic(r, kernel, positives[s], M, Rng::derive(seed, 2 * s + 1)) -
                         exact);
    double mean = 0.0;
    for (double e : errs) mean += e;
    mean /= static_cast<double>(n_seeds);
    double var = 0.0;
    for (double e : errs) var += (e - mean) * (e - mean);
    var /= static_cast<double>(n_seeds - 1);
    rows.push_back({M, mean, std::sqrt(var / static_cast<double>(n_seeds))});
  }
  return rows;
}

std::string convergence_to_csv(std::span<const ConvergenceRow> rows) {
  std::string out = "M,mean_abs_error,std_error\n";
  for (const auto& r : rows)
    out += fmt::format("{},{:.17g},{:.17g}\n", r.M, r.mean_abs_error, r.std_error);
  return out;
}

json to_json(std::span<const ConvergenceRow> rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"M", r.M}, {"mean_abs_error", r.mean_abs_error}, {"std_error", r.std_error}});
  return arr;
}

}  // namespace epalab
