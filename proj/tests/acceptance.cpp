// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "epalab/datagen.hpp"
#include "epalab/diagnostics.hpp"
#include "epalab/losses.hpp"
#include "epalab/numeric.hpp"
#include "epalab/objectives.hpp"
#include "epalab/rng.hpp"
#include "epalab/trainer.hpp"
#include "epalab_cli/certificates.hpp"
#include "epalab_cli/cli.hpp"

using namespace epalab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;  // 0 = no runtime bound
  std::function<Outcome()> body;
};

Tricks random_tricks(Rng& rng, double& margin) {
  const unsigned mask = static_cast<unsigned>(rng.below(64));
  Tricks t;
  t.remove_ref = mask & 1u;
  t.sft_coef = (mask & 2u) ? rng.uniform(0.1, 1.0) : 0.0;
  t.len_penalty_alpha = (mask & 4u) ? rng.uniform(0.0, 0.05) : 0.0;
  t.len_normalize = mask & 8u;
  margin = (mask & 16u) ? rng.uniform(0.0, 2.0) : 0.0;
  t.on_policy_weight = mask & 32u;
  return t;
}

// 1. epa_general(1 strong, 0 weak), epa_narrow(0 weak) and dpo_pl(K=2) vs dpo.
Outcome reductions() {
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    WorldParams wp;
    wp.seed = rng.next();
    wp.prompts = 1 + rng.below(4);
    wp.responses = 4 + rng.below(13);
    wp.on_topic = wp.responses;
    wp.reward_spread = rng.uniform(0.5, 5.0);
    const World world = build_world(wp);

    TabularPolicy policy = world.reference;
    for (double& l : policy.logits().data()) l += rng.uniform(-3.0, 3.0);

    LossConfig lc;
    lc.beta = rng.uniform(0.01, 2.0);
    lc.tricks = random_tricks(rng, lc.margin_mc);

    Batch batch;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t k = 0; k < n; ++k) {
      BatchItem item;
      item.prompt = rng.below(world.prompts());
      item.winner = rng.below(world.responses());
      do item.strong = {rng.below(world.responses())};
      while (item.strong[0] == item.winner);
      batch.items.push_back(item);
    }
    const TabularPolicy frozen = policy;
    const LossOptions opt{&frozen};

    lc.variant = LossVariant::Dpo;
    const double dpo = dpo_loss(batch, policy, world, lc, opt).loss;
    lc.variant = LossVariant::EpaGeneral;
    const double general = epa_general_loss(batch, policy, world, lc, opt).loss;
    lc.variant = LossVariant::EpaNarrow;
    const double narrow = epa_narrow_loss(batch, policy, world, lc, opt).loss;
    lc.variant = LossVariant::DpoPl;
    const double pl = dpo_pl_loss(batch, policy, world, lc, opt).loss;
    worst = std::max({worst, std::abs(general - dpo), std::abs(narrow - dpo),
                      std::abs(pl - dpo)});
  }
  return {worst < 1e-12, fmt::format("1000 instances, max |diff| = {:.3e}", worst)};
}

// 2. Every variant, all 64 trick combinations, 20 batches each.
Outcome gradients() {
  const World world = build_world(WorldParams{.seed = 7, .prompts = 6, .responses = 12});
  const auto res = cli::certify_gradients(world, 20, 202);
  return {res.passed, fmt::format("{} checks, worst relative error = {:.3e}",
                                  res.details["checks"].get<std::size_t>(),
                                  res.details["worst"].get<double>())};
}

// 3. Exact IPM fit on P=8, V=16, beta=0.1.
Outcome mle() {
  const auto res = cli::certify_mle(303);
  const auto& d = res.details;
  return {res.passed,
          fmt::format("converged={} in {} steps, max spread = {:.3e}, max TV = {:.3e}",
                      d["converged"].get<bool>(), d["steps"].get<std::size_t>(),
                      d["max_slope1_spread"].get<double>(),
                      d["max_tv_to_minimizer"].get<double>())};
}

// 4. Degeneracy certificate on 10 instances.
Outcome degeneracy() {
  const World world = build_world(WorldParams{.seed = 404});
  const auto res = cli::certify_degeneracy(world, 10, -0.5, 404);
  double gap = 0.0, tv = kPosInf, rl = kPosInf;
  std::size_t ok = 0;
  for (const auto& row : res.details["instances"]) {
    gap = std::max(gap, row["likelihood_gap"].get<double>());
    tv = std::min(tv, row["tv_distance"].get<double>());
    rl = std::min(rl, row["rlhf_gap"].get<double>());
    ok += row["passed"].get<bool>();
  }
  return {res.passed && ok == 10,
          fmt::format("{}/10 passed, max ll gap = {:.3e}, min TV = {:.3e}, min RLHF gap = {:.3e}",
                      ok, gap, tv, rl)};
}

// 5. ED stationarity at r_true on every prompt of the default world.
Outcome ed_stationarity() {
  const World world = build_world(WorldParams{.seed = 505});
  const auto kernel = make_symmetric_kernel(world.responses(), 0.5);
  double grad = 0.0, gain = kPosInf, shift = 0.0;
  std::size_t positive = 0, total = 0;
  for (PromptId x = 0; x < world.prompts(); ++x) {
    const auto rep = ed_stationarity_check(world, kernel, x, 100, 0.1, Rng::derive(505, x));
    grad = std::max(grad, rep.grad_max_norm);
    gain = std::min(gain, rep.min_perturbation_gain);
    shift = std::max(shift, rep.shift_gap);
    positive += rep.positive_gains;
    total += rep.perturbations;
  }
  const bool ok = grad < 1e-10 && positive == total && gain > 0.0 && shift < 1e-12;
  return {ok, fmt::format("max |grad| = {:.3e}, {}/{} perturbations increase ED "
                          "(min gain {:.3e}), shift gap = {:.3e}",
                          grad, positive, total, gain, shift)};
}

// 6. ED statistic approaches the exact discrepancy.
Outcome convergence() {
  const World world = build_world(WorldParams{.seed = 606});
  const auto res = cli::certify_convergence(world, 0.5, 50, 64, 606);
  const auto& rows = res.details["rows"];
  return {res.passed,
          fmt::format("mean |err| M=2: {:.4f}, M=128: {:.4f}",
                      rows.front()["mean_abs_error"].get<double>(),
                      rows.back()["mean_abs_error"].get<double>())};
}

// 7. b_hat minimizes eps(b); the closed-form minimizer probes to zero residual.
Outcome probe() {
  Rng rng(707);
  double worst_grid = 0.0;
  bool beaten = false;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(19);
    std::vector<double> rt(n), rl(n);
    for (std::size_t k = 0; k < n; ++k) {
      rt[k] = rng.uniform(-5.0, 5.0);
      rl[k] = rng.uniform(-1.0, 1.0) * rt[k] + rng.uniform(-5.0, 5.0);
    }
    const auto fit = slope1_fit(rt, rl);
    // 10^4 points, spacing 1e-5, straddling b_hat
    double grid_min = kPosInf;
    for (int j = 0; j < 10000; ++j) {
      const double b = fit.b_hat + (j - 4999.5) * 1e-5;
      grid_min = std::min(grid_min, slope1_error(rt, rl, b));
    }
    worst_grid = std::max(worst_grid, std::abs(fit.eps_hat - grid_min));
    beaten = beaten || grid_min < fit.eps_hat - 1e-12;
  }

  double worst_eps = 0.0, worst_b = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const World world = build_world(WorldParams{.seed = 770 + s});
    const double beta = 0.05 + 0.2 * static_cast<double>(s);
    const auto report = slope1_probe(analytic_rlhf_minimizer(world, beta), world, beta);
    for (const auto& pp : report.prompts) {
      const auto ref = world.reference.log_probabilities(pp.prompt);
      const auto r = world.rewards.row(pp.prompt);
      std::vector<double> terms;
      for (ResponseId y : world.rewards.support(pp.prompt)) terms.push_back(ref[y] + r[y] / beta);
      const double b_star = -beta * log_sum_exp(terms);
      worst_eps = std::max(worst_eps, pp.eps_hat);
      worst_b = std::max(worst_b, std::abs(pp.b_hat - b_star));
    }
  }
  const bool ok = worst_grid <= 1e-9 && !beaten && worst_eps < 1e-12 && worst_b < 1e-8;
  return {ok, fmt::format("grid gap {:.3e}, minimizer eps_hat {:.3e}, |b_hat - b*| {:.3e}",
                          worst_grid, worst_eps, worst_b)};
}

// 8. EPA (1 winner : 1 strong : 2 weak) vs DPO on the same data and budget.
Outcome epa_vs_dpo() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    WorldParams wp;
    wp.seed = 800 + seed;
    wp.prompts = 16;
    wp.responses = 32;
    const World world = build_world(wp);
    SamplingScheme scheme;
    scheme.k = 4;
    Dataset ds = sample_preferences(world, scheme, 256, 1, Rng::derive(wp.seed, 10));
    ds = attach_weak_negatives(std::move(ds), world, 2, WeakMode::InBatchMarker,
                               Rng::derive(wp.seed, 11));

    TrainConfig tc;
    tc.steps = 5000;
    tc.learning_rate = 1e-2;
    tc.batch_size = 16;
    tc.seed = Rng::derive(wp.seed, 12);
    tc.checkpoint_every = 5000;

    auto eps = [&](LossVariant v, std::size_t n_weak) {
      LossConfig lc;
      lc.variant = v;
      lc.beta = 0.01;
      lc.n_weak = n_weak;
      const auto res = train(world, ds.records, lc, tc);
      return slope1_probe(res.policy, world, lc.beta).mean_eps_hat;
    };
    const double dpo = eps(LossVariant::Dpo, 0);
    const double epa = eps(LossVariant::EpaNarrow, 2);
    wins += epa < dpo;
    detail += fmt::format("{}[{:.1f} vs {:.1f}]", seed ? " " : "", epa, dpo);
  }
  return {wins >= 4, fmt::format("EPA wins {}/5; eps_hat EPA vs DPO: {}", wins, detail)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) files[e.path().filename().string()] = slurp(e.path());
  return files;
}

// 9. gen and train reruns with identical configs are byte-identical.
Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "epalab_acceptance_det";
  std::ostringstream sink;
  auto run_once = [&](const std::string& loss) {
    fs::remove_all(root);
    fs::create_directories(root / "gen");
    fs::create_directories(root / "train");
    const std::vector<std::string> gen{"gen", "--seed", "9", "--records", "128", "--n-weak",
                                       "2", "--out", (root / "gen").string()};
    const std::vector<std::string> tr{"train",   "--world", (root / "gen" / "world.json").string(),
                                      "--data",  (root / "gen" / "dataset.jsonl").string(),
                                      "--loss",  loss, "--n-weak", loss == "epa" ? "2" : "0",
                                      "--steps", "300", "--checkpoint-every", "50",
                                      "--seed", "3", "--out", (root / "train").string()};
    if (cli::run(gen, sink, sink) != 0 || cli::run(tr, sink, sink) != 0)
      throw std::runtime_error("cli run failed: " + sink.str());
    auto g = snapshot(root / "gen");
    for (auto& [k, v] : snapshot(root / "train")) g["train/" + k] = v;
    return g;
  };
  std::size_t files = 0;
  bool same = true;
  for (const std::string loss : {"dpo", "epa"}) {
    const auto a = run_once(loss);
    const auto b = run_once(loss);
    same = same && a == b;
    files += a.size();
  }
  fs::remove_all(root);
  return {same, fmt::format("{} output files compared across reruns", files)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "reduction identities", 5, reductions},
      {2, "gradient fidelity", 30, gradients},
      {3, "slope-1 linearity of the exact IPM fit", 60, mle},
      {4, "BTM degeneracy", 10, degeneracy},
      {5, "ED stationarity", 10, ed_stationarity},
      {6, "ED estimator convergence", 30, convergence},
      {7, "probe correctness", 10, probe},
      {8, "EPA beats DPO on eps_hat", 300, epa_vs_dpo},
      {9, "CLI determinism", 0, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0.0 || secs < c.budget_s;
    const bool ok = o.passed && in_time;
    failed += !ok;
    std::string budget = c.budget_s > 0.0 ? fmt::format(" / {:.0f}s", c.budget_s) : "";
    fmt::print("criterion {} {}: {} ({:.2f}s{}) {}{}\n", c.id, c.name, ok ? "PASS" : "FAIL",
                secs, budget, o.detail, in_time ? "" : " [over time budget]");
    std::fflush(stdout);
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
