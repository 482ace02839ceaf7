#include "epalab/losses.hpp"

#include <cmath>
#include <numeric>
#include <optional>
#include <set>

#include <fmt/format.h>

#include "epalab/error.hpp"
#include "epalab/numeric.hpp"
#include "epalab/objectives.hpp"

namespace epalab {

double ContrastWeights::total() const {
  double t = positive;
  for (double s : strong) t += s;
  for (double s : weak) t += s;
  for (double s : sampled) t += s;
  return t;
}

TrickedRewards apply_tricks(const LossConfig& config, std::span<const double> log_policy,
                            std::span<const double> log_reference, const ResponseVocab& vocab) {
  const std::size_t V = log_policy.size();
  if (log_reference.size() != V || vocab.size() != V)
    fail(ErrorKind::Shape, "apply_tricks: row sizes disagree");
  const auto& t = config.tricks;
  TrickedRewards out{std::vector<double>(V), std::vector<double>(V)};
  for (std::size_t y = 0; y < V; ++y) {
    double r = t.remove_ref ? config.beta * log_policy[y]
                            : config.beta * (log_policy[y] - log_reference[y]);
    double slope = config.beta;
    const double len = static_cast<double>(vocab.lengths[y]);
    r -= t.len_penalty_alpha * len;
    if (t.len_normalize) {
      r /= len;
      slope /= len;
    }
    out.value[y] = r;
    out.slope[y] = slope;
  }
  return out;
}

double on_policy_weight(std::span<const double> probs, std::span<const ResponseId> ids) {
  double sum_sq = 0.0;
  for (double p : probs) sum_sq += p * p;
  double w = 1.0;
  for (ResponseId y : ids) w *= probs[y] / sum_sq;
  return w;
}

namespace {

enum class Form { Softmax, Ipo, Listwise };

struct RowCache {
  std::vector<double> probs;
  TrickedRewards rewards;
};

class RowTable {
 public:
  RowTable(const TabularPolicy& policy, const World& world, const LossConfig& config)
      : policy_(policy), world_(world), config_(config), rows_(policy.prompts()) {}

  const RowCache& get(PromptId x) {
    if (x >= rows_.size())
      fail(ErrorKind::Shape, fmt::format("prompt {} out of range ({} prompts)", x, rows_.size()));
    if (!rows_[x]) {
      const auto log_pi = policy_.log_probabilities(x);
      const auto log_ref = world_.reference.log_probabilities(x);
      RowCache c;
      c.probs = policy_.probabilities(x);
      c.rewards = apply_tricks(config_, log_pi, log_ref, world_.vocab);
      rows_[x] = std::move(c);
    }
    return *rows_[x];
  }

 private:
  const TabularPolicy& policy_;
  const World& world_;
  const LossConfig& config_;
  std::vector<std::optional<RowCache>> rows_;
};

void check_ids(const BatchItem& item, std::size_t V, std::size_t index) {
  auto check = [&](ResponseId y) {
    if (y >= V) fail(ErrorKind::Data, fmt::format("record {}: response id {} >= V={}", index, y, V));
  };
  check(item.winner);
  for (auto y : item.strong) check(y);
  for (auto y : item.weak) check(y);
  for (auto y : item.sampled) check(y);
}

void require_one_strong(const BatchItem& item, std::size_t index, LossVariant v) {
  if (item.strong.size() != 1)
    fail(ErrorKind::Config,
         fmt::format("{} needs exactly 1 strong negative per record; record {} has {}",
                     to_string(v), index, item.strong.size()));
}

// Adds scale * sum_j coef[j] * (e_j - pi) to a gradient row.
void accumulate(std::span<double> grad_row, std::span<const double> probs,
                const std::vector<std::pair<ResponseId, double>>& coefs, double scale) {
  double total = 0.0;
  for (const auto& [id, c] : coefs) {
    grad_row[id] += scale * c;
    total += c;
  }
  for (std::size_t j = 0; j < grad_row.size(); ++j) grad_row[j] -= scale * total * probs[j];
}

struct Term {
  ResponseId id;
  double offset;
};

LossValue evaluate(const Batch& batch, const TabularPolicy& policy, const World& world,
                   const LossConfig& config, LossOptions options, LossVariant variant,
                   Matrix* grad) {
  if (batch.items.empty()) fail(ErrorKind::Config, "empty batch");
  if (!(config.beta > 0.0)) fail(ErrorKind::Config, "loss.beta must be positive");
  if (policy.prompts() != world.prompts() || policy.responses() != world.responses())
    fail(ErrorKind::Shape, "policy and world dimensions differ");
  const std::size_t V = world.responses();
  const double B = static_cast<double>(batch.size());

  RowTable rows(policy, world, config);
  std::optional<RowTable> weight_rows;
  if (config.tricks.on_policy_weight && options.weight_policy != nullptr &&
      options.weight_policy != &policy)
    weight_rows.emplace(*options.weight_policy, world, config);

  LossValue out;
  out.per_record.reserve(batch.size());
  if (grad) *grad = Matrix(world.prompts(), V, 0.0);

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const BatchItem& item = batch.items[i];
    check_ids(item, V, i);
    const RowCache& row = rows.get(item.prompt);
    const auto& r = row.rewards;

    Form form = Form::Softmax;
    switch (variant) {
      case LossVariant::Dpo:
        require_one_strong(item, i, variant);
        if (!item.weak.empty() || !item.sampled.empty())
          fail(ErrorKind::Config, fmt::format("dpo takes no weak negatives (record {})", i));
        break;
      case LossVariant::EpaNarrow:
        require_one_strong(item, i, variant);
        if (item.weak.size() % 2 != 0)
          fail(ErrorKind::Config,
               fmt::format("epa needs weak negatives in (winner, loser) pairs; record {} has {}", i,
                           item.weak.size()));
        if (item.weak.empty() && out.warnings.empty())
          out.warnings.push_back("epa without weak negatives reduces to dpo");
        break;
      case LossVariant::EpaGeneral:
        if (item.strong.empty() && item.weak.empty())
          out.warnings.push_back(fmt::format("record {}: empty negative set, loss is 0", i));
        break;
      case LossVariant::EdStat:
        if (item.sampled.empty())
          fail(ErrorKind::Config, fmt::format("ed-stat record {} has no sampled negatives", i));
        break;
      case LossVariant::Ipo:
        require_one_strong(item, i, variant);
        form = Form::Ipo;
        break;
      case LossVariant::DpoPl: {
        std::set<ResponseId> seen{item.winner};
        for (auto y : item.strong)
          if (!seen.insert(y).second)
            fail(ErrorKind::Data, fmt::format("record {}: duplicate id {} in ranking", i, y));
        if (item.strong.empty())
          fail(ErrorKind::Data, fmt::format("record {}: ranking needs at least 2 items", i));
        form = Form::Listwise;
        break;
      }
    }

    double weight = 1.0;
    if (config.tricks.on_policy_weight) {
      std::vector<ResponseId> ids{item.winner};
      ids.insert(ids.end(), item.strong.begin(), item.strong.end());
      const auto& wprobs = weight_rows ? weight_rows->get(item.prompt).probs : row.probs;
      weight = on_policy_weight(wprobs, ids);
    }

    // coefficients of d loss / d r~(y), later mapped through slope and softmax
    std::vector<std::pair<ResponseId, double>> coefs;
    double record_loss = 0.0;

    if (form == Form::Softmax) {
      std::vector<Term> terms;
      terms.push_back({item.winner, 0.0});
      if (variant != LossVariant::EdStat) {
        for (auto y : item.strong) terms.push_back({y, config.margin_mc});
        for (auto y : item.weak) terms.push_back({y, 0.0});
      }
      for (auto y : item.sampled) terms.push_back({y, 0.0});

      std::vector<double> logits(terms.size());
      for (std::size_t k = 0; k < terms.size(); ++k)
        logits[k] = r.value[terms[k].id] + terms[k].offset;
      const double lse = log_sum_exp(logits);
      record_loss = lse - logits[0];
      if (variant == LossVariant::EdStat)
        record_loss -= std::log(static_cast<double>(item.sampled.size()));

      ContrastWeights cw;
      std::size_t k = 0;
      auto weight_of = [&](std::size_t idx) { return std::exp(logits[idx] - lse); };
      cw.positive = weight_of(k++);
      if (variant != LossVariant::EdStat) {
        for (std::size_t j = 0; j < item.strong.size(); ++j) cw.strong.push_back(weight_of(k++));
        for (std::size_t j = 0; j < item.weak.size(); ++j) cw.weak.push_back(weight_of(k++));
      }
      for (std::size_t j = 0; j < item.sampled.size(); ++j) cw.sampled.push_back(weight_of(k++));
      if (grad) {
        for (std::size_t t = 0; t < terms.size(); ++t) {
          const double c = weight_of(t) - (t == 0 ? 1.0 : 0.0);
          coefs.emplace_back(terms[t].id, c * r.slope[terms[t].id]);
        }
      }
      out.weights.push_back(std::move(cw));
    } else if (form == Form::Ipo) {
      const ResponseId w = item.winner, l = item.strong[0];
      const double delta = r.value[w] - (r.value[l] + config.margin_mc);
      const double resid = delta - config.ipo_tau;
      record_loss = resid * resid;
      if (grad) {
        coefs.emplace_back(w, 2.0 * resid * r.slope[w]);
        coefs.emplace_back(l, -2.0 * resid * r.slope[l]);
      }
    } else {
      std::vector<ResponseId> ranking{item.winner};
      ranking.insert(ranking.end(), item.strong.begin(), item.strong.end());
      std::vector<double> z(ranking.size());
      for (std::size_t k = 0; k < ranking.size(); ++k)
        z[k] = r.value[ranking[k]] + (k == 0 ? 0.0 : config.margin_mc);
      for (std::size_t k = 0; k + 1 < ranking.size(); ++k) {
        std::span<const double> suffix(z.data() + k, z.size() - k);
        const double lse = log_sum_exp(suffix);
        record_loss += lse - z[k];
        if (grad) {
          for (std::size_t j = k; j < ranking.size(); ++j) {
            const double c = std::exp(z[j] - lse) - (j == k ? 1.0 : 0.0);
            coefs.emplace_back(ranking[j], c * r.slope[ranking[j]]);
          }
        }
      }
    }

    if (config.tricks.sft_coef != 0.0) {
      record_loss += config.tricks.sft_coef * -std::log(row.probs[item.winner]);
      if (grad) coefs.emplace_back(item.winner, -config.tricks.sft_coef);
    }

    const double contribution = weight * record_loss;
    out.per_record.push_back(contribution);
    out.loss += contribution;
    if (grad) accumulate(grad->row(item.prompt), row.probs, coefs, weight / B);
  }
  out.loss /= B;
  return out;
}

}  // namespace

LossValue dpo_loss(const Batch& b, const TabularPolicy& p, const World& w, const LossConfig& c,
                   LossOptions o) {
  return evaluate(b, p, w, c, o, LossVariant::Dpo, nullptr);
}

LossValue epa_narrow_loss(const Batch& b, const TabularPolicy& p, const World& w,
                          const LossConfig& c, LossOptions o) {
  return evaluate(b, p, w, c, o, LossVariant::EpaNarrow, nullptr);
}

LossValue epa_general_loss(const Batch& b, const TabularPolicy& p, const World& w,
                           const LossConfig& c, LossOptions o) {
  return evaluate(b, p, w, c, o, LossVariant::EpaGeneral, nullptr);
}

LossValue ipo_loss(const Batch& b, const TabularPolicy& p, const World& w, const LossConfig& c,
                   LossOptions o) {
  return evaluate(b, p, w, c, o, LossVariant::Ipo, nullptr);
}

LossValue dpo_pl_loss(const Batch& b, const TabularPolicy& p, const World& w,
                      const LossConfig& c, LossOptions o) {
  return evaluate(b, p, w, c, o, LossVariant::DpoPl, nullptr);
}

LossValue ed_stat_loss(const Batch& b, const TabularPolicy& p, const World& w,
                       const LossConfig& c, LossOptions o) {
  return evaluate(b, p, w, c, o, LossVariant::EdStat, nullptr);
}

LossValue evaluate_loss(const Batch& b, const TabularPolicy& p, const World& w,
                        const LossConfig& c, LossOptions o) {
  return evaluate(b, p, w, c, o, c.variant, nullptr);
}

LossGradient loss_gradient(const Batch& b, const TabularPolicy& p, const World& w,
                           const LossConfig& c, LossOptions o) {
  LossGradient out;
  out.value = evaluate(b, p, w, c, o, c.variant, &out.gradient);
  return out;
}

Matrix epa_gradient(const Batch& b, const TabularPolicy& p, const World& w, const LossConfig& c,
                    LossOptions o) {
  const LossVariant v =
      c.variant == LossVariant::EpaNarrow ? LossVariant::EpaNarrow : LossVariant::EpaGeneral;
  Matrix g;
  evaluate(b, p, w, c, o, v, &g);
  return g;
}

void check_records_compatible(std::span<const PreferenceRecord> records,
                              const LossConfig& config) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const std::size_t k = rec.strong.size();
    switch (config.variant) {
      case LossVariant::Dpo:
      case LossVariant::Ipo:
      case LossVariant::EpaNarrow:
        if (k != 1)
          fail(ErrorKind::Config,
               fmt::format("loss {} needs pairwise records (1 strong negative) but record {} "
                           "has {} strong negatives",
                           to_string(config.variant), i, k));
        break;
      case LossVariant::DpoPl:
        if (k < 1)
          fail(ErrorKind::Config,
               fmt::format("loss dpo-pl needs rankings of at least 2 responses (record {})", i));
        break;
      case LossVariant::EpaGeneral:
      case LossVariant::EdStat:
        break;
    }
    if (config.n_weak > 0 && config.weak_source == WeakSource::Precomputed &&
        rec.weak.size() < config.n_weak)
      fail(ErrorKind::Config,
           fmt::format("record {} carries {} pre-computed weak negatives, loss needs {}", i,
                       rec.weak.size(), config.n_weak));
  }
}

Batch assemble_batch(std::span<const PreferenceRecord> records, const World& world,
                     const LossConfig& config, Rng& rng) {
  check_records_compatible(records, config);
  Batch batch;
  batch.items.reserve(records.size());
  std::optional<PerturbationKernel> kernel;
  if (config.variant == LossVariant::EdStat)
    kernel = make_symmetric_kernel(world.responses(), config.ed_stay_prob);

  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    BatchItem item{rec.prompt, rec.winner, rec.strong, {}, {}};
    if (config.n_weak > 0) {
      if (config.weak_source == WeakSource::Precomputed) {
        item.weak.assign(rec.weak.begin(), rec.weak.begin() + config.n_weak);
      } else if (config.variant == LossVariant::EpaNarrow) {
        // |I_wk| = n_weak / 2 distinct other records, each contributing its pair
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < records.size(); ++j)
          if (j != i) others.push_back(j);
        const std::size_t take = std::min(config.n_weak / 2, others.size());
        for (std::size_t t = 0; t < take; ++t) {
          const std::size_t pick = t + rng.below(others.size() - t);
          std::swap(others[t], others[pick]);
          const auto& src = records[others[t]];
          item.weak.push_back(src.winner);
          item.weak.push_back(src.strong.at(0));
        }
      } else {
        std::vector<ResponseId> pool;
        for (std::size_t j = 0; j < records.size(); ++j) {
          if (j == i) continue;
          if (records[j].winner != rec.winner) pool.push_back(records[j].winner);
          for (auto y : records[j].strong)
            if (y != rec.winner) pool.push_back(y);
        }
        const std::size_t take = std::min(config.n_weak, pool.size());
        for (std::size_t t = 0; t < take; ++t) {
          const std::size_t pick = t + rng.below(pool.size() - t);
          std::swap(pool[t], pool[pick]);
          item.weak.push_back(pool[t]);
        }
      }
    }
    if (kernel) {
      const ResponseId z0 = rng.categorical(kernel->row(rec.winner));
      for (std::size_t j = 0; j < config.ed_negatives; ++j)
        item.sampled.push_back(rng.categorical(kernel->row(z0)));
    }
    batch.items.push_back(std::move(item));
  }
  return batch;
}

double ed_statistic(std::span<const double> rewards, const PerturbationKernel& kernel,
                    std::span<const ResponseId> positives, std::size_t M, std::uint64_t seed) {
  if (M < 1) fail(ErrorKind::Config, "ed_statistic: M must be >= 1");
  if (positives.empty()) fail(ErrorKind::Config, "ed_statistic: need at least one positive");
  if (kernel.size() != rewards.size())
    fail(ErrorKind::Shape, "ed_statistic: kernel and reward sizes differ");
  Rng rng(seed);
  std::vector<double> terms(M + 1);
  double total = 0.0;
  for (ResponseId y : positives) {
    if (y >= rewards.size()) fail(ErrorKind::Data, fmt::format("positive id {} out of range", y));
    const ResponseId z0 = rng.categorical(kernel.row(y));
    // log(1 + sum_j exp(r(y_j) - r(y))) as a log-sum-exp over M+1 terms
    terms[0] = 0.0;
    for (std::size_t j = 0; j < M; ++j) {
      const ResponseId neg = rng.categorical(kernel.row(z0));
      terms[j + 1] = rewards[neg] - rewards[y];
    }
    total += log_sum_exp(terms);
  }
  return total / static_cast<double>(positives.size()) - std::log(static_cast<double>(M));
}

double ed_statistic(const World& world, const PerturbationKernel& kernel,
                    const TabularPolicy& policy, double beta, PromptId x,
                    std::span<const ResponseId> positives, std::size_t M, std::uint64_t seed) {
  const auto r = log_ratio_reward(policy, world, beta, x);
  return ed_statistic(r, kernel, positives, M, seed);
}

}  // namespace epalab
