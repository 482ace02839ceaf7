#include "epalab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "epalab/diagnostics.hpp"
#include "epalab/error.hpp"
#include "epalab/numeric.hpp"
#include "epalab/objectives.hpp"
#include "epalab/rng.hpp"

namespace epalab {

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "adam" || s == "adam-like") return Optimizer::AdamLike;
  fail(ErrorKind::Config, "unknown optimizer '" + s + "'");
}

const char* to_string(Optimizer o) noexcept {
  return o == Optimizer::Sgd ? "sgd" : "adam";
}

void validate_train_config(const TrainConfig& c, std::size_t dataset_size) {
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate))
    fail(ErrorKind::Config, "train.learning_rate must be a finite nonnegative number");
  if (c.batch_size < 1) fail(ErrorKind::Config, "train.batch_size must be >= 1");
  if (dataset_size > 0 && c.batch_size > dataset_size)
    fail(ErrorKind::Config, fmt::format("train.batch_size {} exceeds dataset size {}",
                                        c.batch_size, dataset_size));
  if (c.checkpoint_every < 1) fail(ErrorKind::Config, "train.checkpoint_every must be >= 1");
  if (c.optimizer == Optimizer::AdamLike &&
      !(c.adam_b1 >= 0.0 && c.adam_b1 < 1.0 && c.adam_b2 >= 0.0 && c.adam_b2 < 1.0 &&
        c.adam_eps > 0.0))
    fail(ErrorKind::Config, "train.adam parameters out of range");
}

std::string trajectory_to_csv(const Trajectory& t) {
  std::string out = "step,loss,probe_pearson,probe_eps_hat,kl_to_ref,exp_true_reward\n";
  for (const auto& p : t.points)
    out += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", p.step, p.loss,
                       p.probe_pearson, p.probe_eps_hat, p.kl_to_ref, p.exp_true_reward);
  return out;
}

namespace {

class OptimizerState {
 public:
  OptimizerState(const TrainConfig& c, std::size_t n) : c_(c) {
    if (c.optimizer == Optimizer::AdamLike) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
    }
  }

  void step(std::span<double> params, std::span<const double> grad) {
    if (c_.optimizer == Optimizer::Sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= c_.learning_rate * grad[i];
      return;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.adam_b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c_.adam_b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = c_.adam_b1 * m_[i] + (1.0 - c_.adam_b1) * grad[i];
      v_[i] = c_.adam_b2 * v_[i] + (1.0 - c_.adam_b2) * grad[i] * grad[i];
      const double mhat = m_[i] / bc1, vhat = v_[i] / bc2;
      params[i] -= c_.learning_rate * mhat / (std::sqrt(vhat) + c_.adam_eps);
    }
  }

 private:
  const TrainConfig& c_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : batch_(batch), rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

Checkpoint make_checkpoint(std::size_t step, double loss, const TabularPolicy& policy,
                           const World& world, double beta, bool keep) {
  Checkpoint cp;
  cp.step = step;
  cp.loss = loss;
  const auto probe = slope1_probe(policy, world, beta);
  cp.probe_pearson = probe.mean_pearson;
  cp.probe_eps_hat = probe.mean_eps_hat;
  const auto pt = policy_point(policy, world, beta, "");
  cp.kl_to_ref = pt.kl;
  cp.exp_true_reward = pt.expected_true_reward;
  if (keep) cp.snapshot = policy;
  return cp;
}

}  // namespace

TrainResult train(const World& world, std::span<const PreferenceRecord> records,
                  const LossConfig& loss_config, const TrainConfig& train_config) {
  if (records.empty()) fail(ErrorKind::Config, "training needs at least one record");
  validate_train_config(train_config, records.size());
  validate_loss_config(loss_config, train_config.batch_size);
  check_records_compatible(records, loss_config);
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].prompt >= world.prompts() || records[i].winner >= world.responses())
      fail(ErrorKind::Data, fmt::format("record {} references ids outside the world", i));

  TrainResult result;
  result.policy = world.reference;
  const double beta = loss_config.beta;

  BatchSampler sampler(records.size(), train_config.batch_size,
                       Rng::derive(train_config.seed, 1));
  Rng batch_rng(Rng::derive(train_config.seed, 2));
  OptimizerState opt(train_config, result.policy.logits().data().size());

  auto next_batch = [&] {
    const auto idx = sampler.next();
    std::vector<PreferenceRecord> picked;
    picked.reserve(idx.size());
    for (auto i : idx) picked.push_back(records[i]);
    return assemble_batch(picked, world, loss_config, batch_rng);
  };

  Batch batch = next_batch();
  LossOptions options{&result.policy};
  LossGradient lg = loss_gradient(batch, result.policy, world, loss_config, options);
  result.trajectory.points.push_back(
      make_checkpoint(0, lg.value.loss, result.policy, world, beta, train_config.keep_snapshots));

  for (std::size_t step = 1; step <= train_config.steps; ++step) {
    if (step > 1) {
      batch = next_batch();
      lg = loss_gradient(batch, result.policy, world, loss_config, options);
    }
    if (train_config.audit_every > 0 && step % train_config.audit_every == 0) {
      const auto check = check_loss_gradient(batch, result.policy, world, loss_config);
      result.audits.push_back({step, check.relative_error, check.relative_error < 1e-5});
    }
    opt.step(result.policy.logits().data(), lg.gradient.data());
    if (step % train_config.checkpoint_every == 0 || step == train_config.steps)
      result.trajectory.points.push_back(make_checkpoint(step, lg.value.loss, result.policy, world,
                                                         beta, train_config.keep_snapshots));
  }
  return result;
}

std::vector<double> finite_diff_gradient(const LossEvaluator& loss, const TabularPolicy& policy,
                                         double h, std::span<const GridEntry> entries) {
  if (!(h > 0.0)) fail(ErrorKind::Config, "finite-difference step must be positive");
  const double base = loss(policy);
  if (loss(policy) != base)
    fail(ErrorKind::Check, "loss evaluator is not deterministic under a fixed seed");
  TabularPolicy probe = policy;
  std::vector<double> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    double& theta = probe.logits()(e.prompt, e.response);
    const double saved = theta;
    theta = saved + h;
    const double up = loss(probe);
    theta = saved - h;
    const double down = loss(probe);
    theta = saved;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

std::vector<GridEntry> sample_entries(std::size_t prompts, std::size_t responses,
                                      std::size_t count, std::uint64_t seed) {
  const std::size_t n = prompts * responses;
  std::vector<std::size_t> flat(n);
  for (std::size_t i = 0; i < n; ++i) flat[i] = i;
  Rng rng(seed);
  count = std::min(count, n);
  for (std::size_t t = 0; t < count; ++t) std::swap(flat[t], flat[t + rng.below(n - t)]);
  std::vector<GridEntry> out;
  for (std::size_t t = 0; t < count; ++t) out.push_back({flat[t] / responses, flat[t] % responses});
  return out;
}

std::vector<GridEntry> row_entries(std::span<const PromptId> prompts, std::size_t responses) {
  std::vector<GridEntry> out;
  for (auto x : prompts)
    for (std::size_t y = 0; y < responses; ++y) out.push_back({x, y});
  return out;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::Shape, "relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

GradientCheck check_loss_gradient(const Batch& batch, const TabularPolicy& policy,
                                  const World& world, const LossConfig& config, double h) {
  const TabularPolicy frozen = policy;
  const LossOptions options{&frozen};
  const auto lg = loss_gradient(batch, policy, world, config, options);
  std::set<PromptId> rows;
  for (const auto& item : batch.items) rows.insert(item.prompt);
  const std::vector<PromptId> row_list(rows.begin(), rows.end());
  const auto entries = row_entries(row_list, world.responses());

  GradientCheck out;
  for (const auto& e : entries) out.analytic.push_back(lg.gradient(e.prompt, e.response));
  out.numeric = finite_diff_gradient(
      [&](const TabularPolicy& p) { return evaluate_loss(batch, p, world, config, options).loss; },
      policy, h, entries);
  out.relative_error = relative_error(out.analytic, out.numeric);
  return out;
}

double weighted_ipm_nll(const TabularPolicy& policy, const World& world, double beta,
                        std::span<const double> weights, Matrix* gradient) {
  if (!weights.empty() && weights.size() != world.prompts())
    fail(ErrorKind::Shape, "prompt_weights must have one entry per prompt");
  if (gradient) *gradient = Matrix(world.prompts(), world.responses(), 0.0);
  double total = 0.0;
  for (PromptId x = 0; x < world.prompts(); ++x) {
    const double w = weights.empty() ? 1.0 : weights[x];
    if (w == 0.0) continue;
    total += w * ipm_nll_exact(policy, world, beta, x);
    if (gradient) {
      const auto g = ipm_nll_gradient(policy, world, beta, x);
      auto row = gradient->row(x);
      for (std::size_t y = 0; y < g.size(); ++y) row[y] = w * g[y];
    }
  }
  return total;
}

ExactFitResult exact_mle_fit(const World& world, double beta,
                             std::span<const double> prompt_weights,
                             const TrainConfig& train_config) {
  if (!(beta > 0.0)) fail(ErrorKind::Config, "beta must be positive");
  validate_train_config(train_config, 0);
  for (double w : prompt_weights)
    if (w < 0.0) fail(ErrorKind::Config, "prompt weights must be nonnegative");

  ExactFitResult out;
  out.policy = world.reference;
  OptimizerState opt(train_config, out.policy.logits().data().size());
  Matrix grad;
  double prev = weighted_ipm_nll(out.policy, world, beta, prompt_weights, &grad);
  out.grad_max_norm = max_abs(grad.data());
  out.final_loss = prev;
  while (out.steps < train_config.steps) {
    if (out.grad_max_norm < train_config.convergence_tol) break;
    opt.step(out.policy.logits().data(), grad.data());
    ++out.steps;
    const double cur = weighted_ipm_nll(out.policy, world, beta, prompt_weights, &grad);
    if (cur > prev + 1e-14 * std::abs(prev)) ++out.monotonicity_violations;
    prev = cur;
    out.grad_max_norm = max_abs(grad.data());
    out.final_loss = cur;
  }
  out.converged = out.grad_max_norm < train_config.convergence_tol;
  return out;
}

}  // namespace epalab
