#include "epalab/core.hpp"

#include <cmath>
#include <fmt/format.h>

#include "epalab/error.hpp"
#include "epalab/numeric.hpp"

namespace epalab {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "config error";
    case ErrorKind::Data: return "data error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::EmptySupport: return "empty-support error";
    case ErrorKind::Io: return "io error";
    case ErrorKind::Integrity: return "integrity error";
    case ErrorKind::Check: return "check error";
  }
  return "error";
}

const char* to_string(LossVariant v) noexcept {
  switch (v) {
    case LossVariant::Dpo: return "dpo";
    case LossVariant::EpaNarrow: return "epa";
    case LossVariant::EpaGeneral: return "epa-general";
    case LossVariant::EdStat: return "ed-stat";
    case LossVariant::Ipo: return "ipo";
    case LossVariant::DpoPl: return "dpo-pl";
  }
  return "?";
}

LossVariant loss_variant_from_string(const std::string& s) {
  if (s == "dpo") return LossVariant::Dpo;
  if (s == "epa" || s == "epa-narrow") return LossVariant::EpaNarrow;
  if (s == "epa-general") return LossVariant::EpaGeneral;
  if (s == "ed-stat") return LossVariant::EdStat;
  if (s == "ipo") return LossVariant::Ipo;
  if (s == "dpo-pl") return LossVariant::DpoPl;
  fail(ErrorKind::Config, "unknown loss variant '" + s + "'");
}

bool RewardTable::in_support(PromptId x, ResponseId y) const {
  return !is_neg_inf(values(x, y));
}

std::vector<ResponseId> RewardTable::support(PromptId x) const {
  std::vector<ResponseId> out;
  for (ResponseId y = 0; y < responses(); ++y)
    if (in_support(x, y)) out.push_back(y);
  return out;
}

std::vector<double> TabularPolicy::probabilities(PromptId x) const {
  return softmax(logits_.row(x));
}

std::vector<double> TabularPolicy::log_probabilities(PromptId x) const {
  return log_softmax(logits_.row(x));
}

std::vector<ResponseId> World::candidates(PromptId x) const {
  if (x < on_topic.size() && !on_topic[x].empty()) return on_topic[x];
  return rewards.support(x);
}

void validate_loss_config(const LossConfig& config, std::size_t batch_size) {
  if (!(config.beta > 0.0) || !std::isfinite(config.beta))
    fail(ErrorKind::Config, "loss.beta must be a positive finite number");
  if (config.tricks.sft_coef < 0.0)
    fail(ErrorKind::Config, "loss.tricks.sft_coef must be nonnegative");
  if (config.tricks.len_penalty_alpha < 0.0)
    fail(ErrorKind::Config, "loss.tricks.len_penalty_alpha must be nonnegative");
  if (config.variant == LossVariant::EpaNarrow) {
    if (config.n_weak == 0)
      fail(ErrorKind::Config,
           "loss.n_weak = 0 with epa reduces to dpo; use the dpo loss instead");
    if (config.n_weak % 2 != 0)
      fail(ErrorKind::Config, "loss.n_weak must be even for epa (weak negatives come in pairs)");
  }
  if ((config.variant == LossVariant::Dpo || config.variant == LossVariant::Ipo ||
       config.variant == LossVariant::DpoPl) &&
      config.n_weak != 0)
    fail(ErrorKind::Config, fmt::format("loss.n_weak must be 0 for {}", to_string(config.variant)));
  if (config.variant == LossVariant::EdStat) {
    if (config.ed_negatives < 1) fail(ErrorKind::Config, "loss.ed_negatives must be >= 1");
    if (!(config.ed_stay_prob > 0.0 && config.ed_stay_prob < 1.0))
      fail(ErrorKind::Config, "loss.ed_stay_prob must lie in (0, 1)");
  }
  if (batch_size > 0 && config.weak_source == WeakSource::InBatch) {
    const std::size_t needed =
        config.variant == LossVariant::EpaNarrow ? config.n_weak / 2 : config.n_weak;
    if (config.variant == LossVariant::EpaNarrow && needed > batch_size - 1)
      fail(ErrorKind::Config,
           fmt::format("loss.n_weak/2 = {} exceeds batch_size - 1 = {}", needed, batch_size - 1));
    if (config.variant == LossVariant::EpaGeneral && batch_size < 2 && needed > 0)
      fail(ErrorKind::Config, "in-batch weak negatives need batch_size >= 2");
  }
}

std::vector<std::string> validate_world(const World& world) {
  std::vector<std::string> out;
  const std::size_t V = world.vocab.size();
  if (V < 2) out.push_back(fmt::format("vocab size {} < 2", V));
  for (std::size_t y = 0; y < V; ++y)
    if (world.vocab.lengths[y] < 1)
      out.push_back(fmt::format("response {}: length {} < 1", y, world.vocab.lengths[y]));

  const auto& R = world.rewards;
  if (R.responses() != V)
    out.push_back(fmt::format("rewards have {} columns, vocab has {}", R.responses(), V));
  if (world.reference.prompts() != R.prompts() || world.reference.responses() != R.responses()) {
    out.push_back(fmt::format("reference is {}x{}, rewards are {}x{}", world.reference.prompts(),
                              world.reference.responses(), R.prompts(), R.responses()));
    return out;
  }

  for (PromptId x = 0; x < R.prompts(); ++x) {
    std::size_t finite = 0;
    bool bounded = true;
    for (double r : R.row(x)) {
      if (std::isnan(r) || (std::isinf(r) && r > 0)) bounded = false;
      if (std::isfinite(r)) ++finite;
    }
    if (!bounded)
      out.push_back(fmt::format("row {}: reward not bounded above", x));
    else if (finite == 0)
      out.push_back(fmt::format("row {}: empty support", x));
    else if (finite == 1)
      out.push_back(fmt::format("row {}: degenerate support (one response)", x));
  }

  bool full_support = true;
  for (PromptId x = 0; x < R.prompts() && full_support; ++x) {
    for (double l : world.reference.logits().row(x))
      if (!std::isfinite(l)) full_support = false;
    for (double p : world.reference.probabilities(x))
      if (!(p > 0.0)) full_support = false;
  }
  if (!full_support) out.push_back("reference not full-support");

  for (PromptId x = 0; x < world.on_topic.size(); ++x)
    for (ResponseId y : world.on_topic[x])
      if (y >= V || !R.in_support(x, y))
        out.push_back(fmt::format("row {}: on-topic response {} outside support", x, y));
  return out;
}

std::vector<std::string> validate_kernel(const PerturbationKernel& kernel) {
  std::vector<std::string> out;
  const auto& K = kernel.transition;
  if (K.rows() != K.cols() || K.rows() < 2) {
    out.push_back("kernel must be square with at least 2 states");
    return out;
  }
  bool identity = true;
  for (std::size_t y = 0; y < K.rows(); ++y) {
    double s = 0.0;
    for (std::size_t z = 0; z < K.cols(); ++z) {
      if (K(y, z) < 0.0) out.push_back(fmt::format("row {}: negative entry", y));
      if (K(y, z) != K(z, y) && std::abs(K(y, z) - K(z, y)) > 1e-15)
        out.push_back(fmt::format("entry ({},{}) breaks symmetry", y, z));
      if (K(y, z) != (y == z ? 1.0 : 0.0)) identity = false;
      s += K(y, z);
    }
    if (std::abs(s - 1.0) > 1e-12) out.push_back(fmt::format("row {}: sums to {}", y, s));
  }
  if (identity) out.push_back("kernel is the identity (zero conditional variance)");
  return out;
}

PerturbationKernel make_symmetric_kernel(std::size_t vocab_size, double stay_prob) {
  if (vocab_size < 2) fail(ErrorKind::Config, "kernel needs at least 2 responses");
  if (!(stay_prob > 0.0 && stay_prob < 1.0))
    fail(ErrorKind::Config, fmt::format("stay_prob {} outside (0, 1)", stay_prob));
  const double move = (1.0 - stay_prob) / static_cast<double>(vocab_size - 1);
  PerturbationKernel k{Matrix(vocab_size, vocab_size, move)};
  for (std::size_t y = 0; y < vocab_size; ++y) k.transition(y, y) = stay_prob;
  return k;
}

}  // namespace epalab
