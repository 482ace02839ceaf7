#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "epalab/datagen.hpp"
#include "epalab/diagnostics.hpp"
#include "epalab/error.hpp"
#include "epalab/numeric.hpp"
#include "epalab/objectives.hpp"
#include "test_util.hpp"

using namespace epalab;

TEST_CASE("slope1_fit examples") {
  const std::vector<double> rt{0.5, -1.0, 2.0, 3.5};
  std::vector<double> rl(rt);
  for (auto& v : rl) v += 1.0;
  const auto p = slope1_fit(rt, rl);
  CHECK(p.b_hat == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p.eps_hat < 1e-28);
  REQUIRE(p.pearson);
  CHECK(*p.pearson == doctest::Approx(1.0));

  const auto s2 = slope1_fit(std::vector<double>{0, 1, 2, 3}, std::vector<double>{0, 2, 4, 6});
  CHECK(s2.b_hat == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(s2.eps_hat == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(*s2.pearson == doctest::Approx(1.0).epsilon(1e-15));

  const auto flat = slope1_fit(std::vector<double>{1, 1, 1}, std::vector<double>{0, 2, 1});
  CHECK_FALSE(flat.pearson.has_value());
  CHECK_THROWS_AS(slope1_fit(std::vector<double>{1}, std::vector<double>{1}), Error);
}

TEST_CASE("slope-1 error is minimal at b_hat") {
  std::mt19937_64 gen(43);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> rt(6), rl(6);
    for (auto& v : rt) v = u(gen);
    for (auto& v : rl) v = u(gen);
    const auto p = slope1_fit(rt, rl);
    CHECK(p.eps_hat >= 0.0);
    CHECK(p.eps_hat <= slope1_error(rt, rl, p.b_hat + 0.1));
    CHECK(p.eps_hat <= slope1_error(rt, rl, p.b_hat - 0.1));
  }
}

TEST_CASE("slope1_probe of the analytic minimizer is exact") {
  const World w = build_world(47, 6, 24, 3.0, -10.0);
  for (double beta : {0.01, 0.1, 1.0}) {
    const auto star = analytic_rlhf_minimizer(w, beta);
    const auto rep = slope1_probe(star, w, beta);
    CHECK(rep.mean_eps_hat < 1e-12);
    CHECK(rep.mean_pearson == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& p : rep.prompts) {
      // -beta log Z with Z = sum ref * exp(r / beta)
      const auto ref = w.reference.probabilities(p.prompt);
      std::vector<double> terms(ref.size());
      for (std::size_t y = 0; y < ref.size(); ++y)
        terms[y] = std::log(ref[y]) + w.rewards.values(p.prompt, y) / beta;
      CHECK(std::abs(p.b_hat + beta * log_sum_exp(terms)) < 1e-8);
      CHECK(p.responses.size() == 24);
    }
  }
  const auto four = slope1_probe(w.reference, w, 0.1, 4, 3);
  for (const auto& p : four.prompts) {
    CHECK(p.responses.size() == 4);
    for (auto y : p.responses)
      CHECK(std::find(w.on_topic[p.prompt].begin(), w.on_topic[p.prompt].end(), y) !=
            w.on_topic[p.prompt].end());
  }
}

TEST_CASE("probe skips responses outside the support") {
  WorldParams p;
  p.seed = 2;
  p.responses = 12;
  p.support = 6;
  const World w = build_world(p);
  const auto rep = slope1_probe(analytic_rlhf_minimizer(w, 0.5), w, 0.5);
  for (const auto& pp : rep.prompts) CHECK(pp.responses.size() == 6);
  CHECK(rep.mean_eps_hat < 1e-12);
  CHECK(probe_to_csv(rep).rfind("prompt,responses,pearson,b_hat,eps_hat\n", 0) == 0);
}

TEST_CASE("reference policy sits at the origin of the frontier") {
  const World w = build_world(53, 4, 16, 3.0, -10.0);
  const auto pt = policy_point(w.reference, w, 0.1, "reference");
  CHECK(pt.kl == 0.0);
  double er = 0;
  for (PromptId x = 0; x < 4; ++x)
    er += expected_reward(w.reference.probabilities(x), w.rewards.row(x));
  CHECK(pt.expected_true_reward == doctest::Approx(er / 4).epsilon(1e-14));
}

TEST_CASE("kl_reward_frontier trains one point per beta") {
  const World w = build_world(59, 4, 16, 3.0, -10.0);
  SamplingScheme s;
  const auto ds = sample_preferences(w, s, 64, 1, 1);
  LossConfig lc;
  TrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 16;
  const std::vector<double> betas{0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.5};
  const auto f = kl_reward_frontier(w, ds.records, lc, betas, tc, "dpo");
  REQUIRE(f.size() == 7);
  for (const auto& p : f) {
    CHECK(p.ok);
    CHECK(p.kl >= 0.0);
    CHECK(p.method == "dpo");
  }
  CHECK(frontier_to_csv(f).rfind("method,beta,kl,reward\n", 0) == 0);
  CHECK(frontier_to_csv(f) == frontier_to_csv(kl_reward_frontier(w, ds.records, lc, betas, tc, "dpo")));

  // incompatible records fail per point instead of aborting the sweep
  SamplingScheme s4;
  const auto lists = sample_preferences(w, s4, 32, 3, 1);
  const auto bad = kl_reward_frontier(w, lists.records, lc, betas, tc, "dpo");
  for (const auto& p : bad) CHECK_FALSE(p.ok);

  const std::vector<double> none;
  CHECK_THROWS_AS(kl_reward_frontier(w, ds.records, lc, none, tc, "dpo"), Error);
}

TEST_CASE("reward_at_kl interpolates linearly") {
  std::vector<FrontierPoint> f{{"a", 0.5, 2.0, 1.0, true, ""}, {"a", 0.1, 0.0, 0.0, true, ""}};
  CHECK(*reward_at_kl(f, 1.0) == doctest::Approx(0.5));
  CHECK_FALSE(reward_at_kl(f, 3.0).has_value());
}

TEST_CASE("degeneracy certificate on the worked instance") {
  const World w = testutil::uniform_world(1, 3);
  Matrix pw(3, 3, 0.0);
  pw(0, 1) = pw(1, 0) = 0.5;
  const std::vector<double> base{0, 0, 0};
  const auto rep = degeneracy_certificate(w, 0, pw, base, 2, -std::log(2.0));
  CHECK(rep.likelihood_gap < 1e-10);
  CHECK(rep.alternative[2] == doctest::Approx(std::log(2.0)));
  CHECK(rep.tv_distance == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(rep.passed);
}

TEST_CASE("degeneracy certificate moves mass onto y_star") {
  std::mt19937_64 gen(61);
  const World w = testutil::random_world(gen, 1, 5);
  const auto pw = uniform_pair_weights(w, 0, ResponseId{4});
  const auto base = minimizer_log_ratio(w, 0, 1.0);
  const double A = -0.5;
  const auto rep = degeneracy_certificate(w, 0, pw, base, 4, A);
  const auto ref = w.reference.probabilities(0);
  const double pi_star = ref[4] * std::exp(base[4]);
  const double pi_alt = ref[4] * std::exp(rep.alternative[4]);
  CHECK(pi_alt - pi_star == doctest::Approx((1 - std::exp(A)) * (1 - pi_star)).epsilon(1e-12));
  CHECK(rep.passed);

  const auto tiny = degeneracy_certificate(w, 0, pw, base, 4, -1e-9);
  CHECK(tiny.tv_distance < 1e-8);
  CHECK_FALSE(tiny.passed);

  Matrix leaky = pw;
  leaky(4, 0) = 0.01;
  CHECK_THROWS_AS(degeneracy_certificate(w, 0, leaky, base, 4, A), Error);
}

TEST_CASE("ed stationarity holds on default worlds") {
  const World w = build_world(67, 4, 32, 3.0, -10.0);
  const auto k = make_symmetric_kernel(32, 0.5);
  for (PromptId x = 0; x < 4; ++x) {
    const auto rep = ed_stationarity_check(w, k, x, 100, 0.1, x);
    CHECK(rep.grad_max_norm < 1e-10);
    CHECK(rep.positive_gains == 100);
    CHECK(rep.shift_gap < 1e-12);
    CHECK(rep.passed);
  }
}

TEST_CASE("convergence study on a constant world is closed form") {
  const World w = testutil::uniform_world(1, 6);
  const auto k = make_symmetric_kernel(6, 0.3);
  const std::vector<std::size_t> Ms{1, 2, 8, 32};
  const auto rows = estimator_convergence_study(w, k, 0, Ms, 10, 8, 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double m = static_cast<double>(Ms[i]);
    CHECK(rows[i].mean_abs_error == doctest::Approx(std::log1p(1.0 / m)).epsilon(1e-12));
    CHECK(rows[i].std_error < 1e-14);
    if (i > 0) CHECK(rows[i].mean_abs_error < rows[i - 1].mean_abs_error);
  }
  CHECK_THROWS_AS(estimator_convergence_study(w, k, 0, Ms, 5, 8, 1), Error);
}

TEST_CASE("convergence study error shrinks with M on the default world") {
  const World w = build_world(71, 8, 32, 3.0, -10.0);
  const auto k = make_symmetric_kernel(32, 0.5);
  const std::vector<std::size_t> Ms{2, 8, 32, 128};
  const auto rows = estimator_convergence_study(w, k, 0, Ms, 20, 64, 2);
  CHECK(rows.back().mean_abs_error < rows.front().mean_abs_error);
  const auto more = estimator_convergence_study(w, k, 0, Ms, 80, 64, 2);
  CHECK(more.front().std_error < rows.front().std_error);
  CHECK(convergence_to_csv(rows).rfind("M,mean_abs_error,std_error\n", 0) == 0);
}
