#include "epalab_cli/certificates.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "epalab/diagnostics.hpp"
#include "epalab/error.hpp"
#include "epalab/losses.hpp"
#include "epalab/numeric.hpp"
#include "epalab/objectives.hpp"
#include "epalab/rng.hpp"
#include "epalab/trainer.hpp"

namespace epalab::cli {

using nlohmann::json;

namespace {

constexpr double kGradTol = 1e-5;
constexpr double kLinearityTol = 1e-4;
constexpr double kTvTol = 1e-4;

Tricks tricks_from_mask(unsigned mask, double& margin) {
  Tricks t;
  t.remove_ref = mask & 1u;
  t.sft_coef = (mask & 2u) ? 0.5 : 0.0;
  t.len_penalty_alpha = (mask & 4u) ? 0.02 : 0.0;
  t.len_normalize = mask & 8u;
  margin = (mask & 16u) ? 1.4 : 0.0;
  t.on_policy_weight = mask & 32u;
  return t;
}

// Random records over distinct responses; listwise ones carry 3 strong negatives.
std::vector<PreferenceRecord> random_records(const World& world, std::size_t n,
                                             std::size_t n_strong, Rng& rng) {
  const std::size_t V = world.responses();
  std::vector<ResponseId> ids(V);
  std::vector<PreferenceRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t y = 0; y < V; ++y) ids[y] = y;
    rng.shuffle(ids);
    PreferenceRecord rec;
    rec.prompt = rng.below(world.prompts());
    rec.winner = ids[0];
    rec.strong.assign(ids.begin() + 1, ids.begin() + 1 + static_cast<std::ptrdiff_t>(n_strong));
    out.push_back(std::move(rec));
  }
  return out;
}

TabularPolicy perturbed_reference(const World& world, Rng& rng) {
  TabularPolicy p = world.reference;
  for (double& l : p.logits().data()) l += rng.uniform(-1.0, 1.0);
  return p;
}

double row_spread(std::span<const double> a, std::span<const double> b,
                  const std::vector<ResponseId>& ids) {
  double lo = kPosInf, hi = kNegInf;
  for (auto y : ids) {
    lo = std::min(lo, a[y] - b[y]);
    hi = std::max(hi, a[y] - b[y]);
  }
  return hi - lo;
}

}  // namespace

CertificateResult certify_gradients(const World& world, std::size_t batches_per_combo,
                                    std::uint64_t seed) {
  const std::vector<LossVariant> variants{LossVariant::Dpo,  LossVariant::EpaNarrow,
                                          LossVariant::EpaGeneral, LossVariant::EdStat,
                                          LossVariant::Ipo,  LossVariant::DpoPl};
  Rng rng(seed);
  CertificateResult res{"gradcheck", true, json::object()};
  double worst_overall = 0.0;
  std::size_t checks = 0;
  for (LossVariant v : variants) {
    double worst = 0.0;
    for (unsigned mask = 0; mask < 64; ++mask) {
      for (std::size_t b = 0; b < batches_per_combo; ++b) {
        LossConfig lc;
        lc.variant = v;
        lc.beta = rng.uniform(0.05, 1.0);
        lc.tricks = tricks_from_mask(mask, lc.margin_mc);
        const bool listwise = v == LossVariant::EpaGeneral || v == LossVariant::DpoPl;
        if (v == LossVariant::EpaNarrow || v == LossVariant::EpaGeneral) lc.n_weak = 2;
        const auto records = random_records(world, 4, listwise ? 3 : 1, rng);
        const Batch batch = assemble_batch(records, world, lc, rng);
        const auto policy = perturbed_reference(world, rng);
        const double err = check_loss_gradient(batch, policy, world, lc).relative_error;
        worst = std::max(worst, err);
        ++checks;
      }
    }
    res.details["max_relative_error"][to_string(v)] = worst;
    worst_overall = std::max(worst_overall, worst);
  }
  res.details["checks"] = checks;
  res.details["worst"] = worst_overall;
  res.details["tolerance"] = kGradTol;
  res.passed = worst_overall < kGradTol;
  return res;
}

CertificateResult certify_mle(std::uint64_t seed) {
  WorldParams p;
  p.seed = seed;
  p.prompts = 8;
  p.responses = 16;
  p.reward_spread = 1.0;
  p.weak_floor = -1.5;
  const World world = build_world(p);
  const double beta = 0.1;
  TrainConfig tc;
  tc.optimizer = Optimizer::Sgd;
  tc.learning_rate = 1.0 / (beta * beta);
  tc.steps = 200000;
  const auto fit = exact_mle_fit(world, beta, {}, tc);
  const auto star = analytic_rlhf_minimizer(world, beta);

  double spread = 0.0, tv = 0.0;
  for (PromptId x = 0; x < world.prompts(); ++x) {
    const auto r = log_ratio_reward(fit.policy, world, beta, x);
    spread = std::max(spread, row_spread(r, world.rewards.row(x), world.rewards.support(x)));
    tv = std::max(tv, total_variation(fit.policy.probabilities(x), star.probabilities(x)));
  }
  CertificateResult res{"mle", false, json::object()};
  res.details = {{"world_seed", seed},     {"prompts", p.prompts},
                 {"responses", p.responses}, {"beta", beta},
                 {"converged", fit.converged}, {"steps", fit.steps},
                 {"grad_max_norm", fit.grad_max_norm},
                 {"monotonicity_violations", fit.monotonicity_violations},
                 {"max_slope1_spread", spread}, {"max_tv_to_minimizer", tv}};
  res.passed = fit.converged && spread < kLinearityTol && tv < kTvTol;
  return res;
}

CertificateResult certify_degeneracy(const World& world, std::size_t instances, double A,
                                     std::uint64_t seed) {
  CertificateResult res{"degeneracy", true, json::object()};
  json rows = json::array();
  for (std::size_t i = 0; i < instances; ++i) {
    const PromptId x = i % world.prompts();
    const auto base = minimizer_log_ratio(world, x, 1.0);
    const auto ref = world.reference.probabilities(x);
    // y_star: a random candidate that the base policy does not already saturate
    auto cand = world.candidates(x);
    std::erase_if(cand, [&](ResponseId y) { return ref[y] * std::exp(base[y]) > 0.5; });
    if (cand.size() < 3)
      fail(ErrorKind::Config, fmt::format("prompt {}: too few candidates for the certificate", x));
    Rng rng(Rng::derive(seed, i));
    const ResponseId y_star = cand[rng.below(cand.size())];
    const auto pw = uniform_pair_weights(world, x, y_star);
    const auto rep = degeneracy_certificate(world, x, pw, base, y_star, A, 1.0);
    json row = to_json(rep);
    row["prompt"] = x;
    row["y_star"] = y_star;
    rows.push_back(std::move(row));
    res.passed = res.passed && rep.passed;
  }
  res.details = {{"A", A}, {"instances", std::move(rows)}};
  return res;
}

CertificateResult certify_ed_stationarity(const World& world, double stay_prob,
                                          std::uint64_t seed) {
  const auto kernel = make_symmetric_kernel(world.responses(), stay_prob);
  CertificateResult res{"ed", true, json::object()};
  json rows = json::array();
  for (PromptId x = 0; x < world.prompts(); ++x) {
    const auto rep = ed_stationarity_check(world, kernel, x, 100, 0.1, Rng::derive(seed, x));
    json row = to_json(rep);
    row["prompt"] = x;
    rows.push_back(std::move(row));
    res.passed = res.passed && rep.passed;
  }
  res.details = {{"stay_prob", stay_prob}, {"prompts", std::move(rows)}};
  return res;
}

CertificateResult certify_convergence(const World& world, double stay_prob, std::size_t n_seeds,
                                      std::size_t n_positives, std::uint64_t seed) {
  const auto kernel = make_symmetric_kernel(world.responses(), stay_prob);
  const std::vector<std::size_t> Ms{2, 8, 32, 128};
  const auto rows = estimator_convergence_study(world, kernel, 0, Ms, n_seeds, n_positives, seed);
  CertificateResult res{"convergence", false, json::object()};
  res.details = {{"prompt", 0},
                 {"seeds", n_seeds},
                 {"positives", n_positives},
                 {"rows", to_json(std::span<const ConvergenceRow>(rows))}};
  res.passed = rows.back().mean_abs_error < 0.5 * rows.front().mean_abs_error;
  return res;
}

std::vector<CertificateResult> run_certificates(const World& world,
                                                const std::vector<std::string>& only,
                                                const CertifyOptions& o) {
  for (const auto& name : only)
    if (std::find(certificate_names().begin(), certificate_names().end(), name) ==
        certificate_names().end())
      fail(ErrorKind::Config, fmt::format("unknown certificate '{}'", name));
  auto wanted = [&](const std::string& n) {
    return only.empty() || std::find(only.begin(), only.end(), n) != only.end();
  };
  std::vector<CertificateResult> out;
  if (wanted("gradcheck"))
    out.push_back(certify_gradients(world, o.gradcheck_batches, Rng::derive(o.seed, 1)));
  if (wanted("mle")) out.push_back(certify_mle(o.seed));
  if (wanted("degeneracy"))
    out.push_back(certify_degeneracy(world, o.degeneracy_instances, o.degeneracy_A,
                                     Rng::derive(o.seed, 3)));
  if (wanted("ed"))
    out.push_back(certify_ed_stationarity(world, o.ed_stay_prob, Rng::derive(o.seed, 4)));
  if (wanted("convergence"))
    out.push_back(certify_convergence(world, o.ed_stay_prob, o.convergence_seeds,
                                      o.convergence_positives, Rng::derive(o.seed, 5)));
  return out;
}

}  // namespace epalab::cli
