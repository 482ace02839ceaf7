#include "epalab/datagen.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "epalab/error.hpp"
#include "epalab/numeric.hpp"
#include "epalab/rng.hpp"
#include "epalab/world_io.hpp"

namespace epalab {

World build_world(const WorldParams& prm) {
  const std::size_t P = prm.prompts, V = prm.responses;
  if (P < 1) fail(ErrorKind::Config, "world.prompts must be >= 1");
  if (V < 4) fail(ErrorKind::Config, "world.responses must be >= 4");
  if (!(prm.reward_spread > 0.0)) fail(ErrorKind::Config, "world.reward_spread must be positive");
  if (!(prm.weak_floor < -prm.reward_spread))
    fail(ErrorKind::Config, "world.weak_floor must be below -reward_spread");
  const std::size_t m = prm.on_topic == 0 ? std::min(V, std::max<std::size_t>(4, V / 4))
                                          : prm.on_topic;
  if (m < 2 || m > V) fail(ErrorKind::Config, "world.on_topic must lie in [2, V]");
  const std::size_t support = prm.support == 0 ? V : prm.support;
  if (support < m || support > V)
    fail(ErrorKind::Config, "world.support must lie in [on_topic, V]");
  if (prm.max_length < 1) fail(ErrorKind::Config, "world.max_length must be >= 1");
  if (!(prm.ref_temperature > 0.0)) fail(ErrorKind::Config, "world.ref_temperature must be positive");

  Rng rng(prm.seed);
  World w;
  w.seed = prm.seed;
  w.vocab.lengths.resize(V);
  for (auto& len : w.vocab.lengths)
    len = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(prm.max_length)));

  w.rewards.values = Matrix(P, V);
  Matrix ref(P, V);
  w.on_topic.resize(P);
  std::vector<ResponseId> order(V);
  for (PromptId x = 0; x < P; ++x) {
    for (std::size_t y = 0; y < V; ++y) order[y] = y;
    rng.shuffle(order);
    std::vector<ResponseId> topic(order.begin(), order.begin() + m);
    std::sort(topic.begin(), topic.end());
    for (std::size_t idx = 0; idx < V; ++idx) {
      const ResponseId y = order[idx];
      double r;
      if (idx < m)
        r = rng.uniform(-prm.reward_spread, prm.reward_spread);
      else if (idx < support)
        r = prm.weak_floor - rng.uniform(0.0, prm.reward_spread);
      else
        r = kNegInf;
      w.rewards.values(x, y) = r;
    }
    for (std::size_t y = 0; y < V; ++y) {
      const double r = w.rewards.values(x, y);
      const double base = is_neg_inf(r) ? prm.weak_floor - prm.reward_spread : r;
      ref(x, y) = prm.ref_temperature * (base + rng.uniform(-prm.ref_noise, prm.ref_noise));
    }
    w.on_topic[x] = std::move(topic);
  }
  w.reference = TabularPolicy(std::move(ref));
  return w;
}

World build_world(std::uint64_t seed, std::size_t prompts, std::size_t responses,
                  double reward_spread, double weak_floor) {
  WorldParams p;
  p.seed = seed;
  p.prompts = prompts;
  p.responses = responses;
  p.reward_spread = reward_spread;
  p.weak_floor = weak_floor;
  return build_world(p);
}

const char* to_string(SchemeKind kind) noexcept {
  switch (kind) {
    case SchemeKind::BestOfK: return "best-of-k";
    case SchemeKind::ExplicitPairDist: return "pair";
    case SchemeKind::DegenerateAvoidYStar: return "degenerate";
  }
  return "?";
}

SchemeKind scheme_kind_from_string(const std::string& s) {
  if (s == "best-of-k") return SchemeKind::BestOfK;
  if (s == "pair" || s == "explicit-pair") return SchemeKind::ExplicitPairDist;
  if (s == "degenerate") return SchemeKind::DegenerateAvoidYStar;
  fail(ErrorKind::Config, "unknown scheme '" + s + "'");
}

Matrix uniform_pair_weights(const World& world, PromptId x, std::optional<ResponseId> exclude) {
  auto cand = world.candidates(x);
  if (exclude) std::erase(cand, *exclude);
  if (cand.size() < 2)
    fail(ErrorKind::Config, fmt::format("prompt {}: fewer than 2 candidates for pairs", x));
  const std::size_t V = world.responses();
  Matrix w(V, V, 0.0);
  const double mass = 1.0 / static_cast<double>(cand.size() * (cand.size() - 1));
  for (auto a : cand)
    for (auto b : cand)
      if (a != b) w(a, b) = mass;
  return w;
}

namespace {

const Matrix& weights_for(const std::vector<Matrix>& weights, PromptId x) {
  return weights.size() == 1 ? weights[0] : weights.at(x);
}

std::vector<Matrix> resolve_pair_weights(const SamplingScheme& scheme, const World& world) {
  if (!scheme.pair_weights.empty()) return scheme.pair_weights;
  std::vector<Matrix> out;
  const auto exclude = scheme.kind == SchemeKind::DegenerateAvoidYStar ? scheme.y_star
                                                                       : std::nullopt;
  for (PromptId x = 0; x < world.prompts(); ++x)
    out.push_back(uniform_pair_weights(world, x, exclude));
  return out;
}

}  // namespace

std::vector<std::string> validate_scheme(const SamplingScheme& scheme, const World& world) {
  std::vector<std::string> out;
  const std::size_t V = world.responses();
  if (scheme.kind == SchemeKind::BestOfK) {
    if (scheme.k < 2) out.push_back("scheme.k must be >= 2");
    return out;
  }
  if (scheme.kind == SchemeKind::DegenerateAvoidYStar) {
    if (!scheme.y_star) {
      out.push_back("degenerate scheme requires y_star");
      return out;
    }
    if (*scheme.y_star >= V) out.push_back(fmt::format("y_star {} >= V={}", *scheme.y_star, V));
  }
  if (!scheme.pair_weights.empty() && scheme.pair_weights.size() != 1 &&
      scheme.pair_weights.size() != world.prompts()) {
    out.push_back("pair_weights: expected one matrix or one per prompt");
    return out;
  }
  for (std::size_t i = 0; i < scheme.pair_weights.size(); ++i) {
    const Matrix& w = scheme.pair_weights[i];
    if (w.rows() != V || w.cols() != V) {
      out.push_back(fmt::format("pair_weights[{}]: expected {}x{}", i, V, V));
      continue;
    }
    double total = 0.0;
    for (std::size_t a = 0; a < V; ++a) {
      for (std::size_t b = 0; b < V; ++b) {
        if (w(a, b) < 0.0) out.push_back(fmt::format("pair_weights[{}]: negative entry", i));
        total += w(a, b);
      }
      if (w(a, a) != 0.0) out.push_back(fmt::format("pair_weights[{}]: nonzero diagonal", i));
    }
    if (std::abs(total - 1.0) > 1e-9)
      out.push_back(fmt::format("pair_weights[{}]: total mass {} != 1", i, total));
    if (scheme.kind == SchemeKind::DegenerateAvoidYStar && scheme.y_star &&
        *scheme.y_star < V) {
      const auto ys = *scheme.y_star;
      for (std::size_t c = 0; c < V; ++c)
        if (w(ys, c) != 0.0 || w(c, ys) != 0.0) {
          out.push_back(fmt::format("pair_weights[{}]: mass on a pair containing y_star", i));
          break;
        }
    }
  }
  return out;
}

Dataset sample_preferences(const World& world, const SamplingScheme& scheme,
                           std::size_t n_records, std::size_t n_strong, std::uint64_t seed) {
  if (const auto v = validate_scheme(scheme, world); !v.empty())
    fail(ErrorKind::Config, "invalid sampling scheme: " + v.front());
  const std::size_t P = world.prompts(), V = world.responses();
  Dataset ds;
  ds.header.world_hash = world_hash(world);
  ds.header.scheme = to_string(scheme.kind);
  ds.header.seed = seed;
  ds.records.reserve(n_records);
  Rng rng(seed);

  if (scheme.kind == SchemeKind::BestOfK) {
    if (n_strong < 1 || n_strong > scheme.k - 1)
      fail(ErrorKind::Config,
           fmt::format("n_strong must lie in [1, K-1] = [1, {}], got {}", scheme.k - 1, n_strong));
    for (PromptId x = 0; x < P; ++x)
      if (world.candidates(x).size() < scheme.k)
        fail(ErrorKind::Config, fmt::format("prompt {}: on-topic subset has {} responses < K={}",
                                            x, world.candidates(x).size(), scheme.k));
    for (std::size_t i = 0; i < n_records; ++i) {
      const PromptId x = i % P;
      auto pool = world.candidates(x);
      const auto ref = world.reference.probabilities(x);
      std::vector<ResponseId> drawn;
      for (std::size_t t = 0; t < scheme.k; ++t) {
        std::vector<double> wts(pool.size());
        for (std::size_t j = 0; j < pool.size(); ++j) wts[j] = ref[pool[j]];
        const std::size_t pick = rng.categorical(wts);
        drawn.push_back(pool[pick]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      }
      std::vector<double> score(drawn.size());
      for (std::size_t j = 0; j < drawn.size(); ++j) {
        score[j] = world.rewards.values(x, drawn[j]);
        if (scheme.label_temperature > 0.0) score[j] += scheme.label_temperature * rng.gumbel();
      }
      std::vector<std::size_t> idx(drawn.size());
      for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
      PreferenceRecord rec;
      rec.prompt = x;
      rec.winner = drawn[idx[0]];
      std::vector<std::size_t> losers(idx.begin() + 1, idx.end());
      if (n_strong < losers.size()) {
        rng.shuffle(losers);
        losers.resize(n_strong);
        std::stable_sort(losers.begin(), losers.end(),
                         [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
      }
      for (auto j : losers) rec.strong.push_back(drawn[j]);
      ds.records.push_back(std::move(rec));
    }
    return ds;
  }

  if (n_strong != 1)
    fail(ErrorKind::Config, "pair schemes produce exactly 1 strong negative per record");
  const auto weights = resolve_pair_weights(scheme, world);
  for (std::size_t i = 0; i < n_records; ++i) {
    const PromptId x = i % P;
    const Matrix& w = weights_for(weights, x);
    const std::size_t flat = rng.categorical(w.data());
    ResponseId a = flat / V, b = flat % V;
    const double ra = world.rewards.values(x, a), rb = world.rewards.values(x, b);
    if (rng.uniform() >= sigmoid(ra - rb)) std::swap(a, b);
    ds.records.push_back(PreferenceRecord{x, a, {b}, {}, 0});
  }
  return ds;
}

Dataset attach_weak_negatives(Dataset dataset, const World& world, std::size_t n_weak,
                              WeakMode mode, std::uint64_t seed) {
  (void)world;
  if (mode == WeakMode::InBatchMarker) {
    for (auto& rec : dataset.records) {
      rec.weak.clear();
      rec.weak_n = n_weak;
    }
    return dataset;
  }
  if (n_weak < 1) fail(ErrorKind::Config, "pre-computed weak negatives need n_weak >= 1");
  Rng rng(seed);
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    auto& rec = dataset.records[i];
    std::vector<ResponseId> pool;
    for (const auto& src : dataset.records) {
      if (src.prompt == rec.prompt) continue;
      if (src.winner != rec.winner) pool.push_back(src.winner);
      for (auto y : src.strong)
        if (y != rec.winner) pool.push_back(y);
    }
    if (pool.empty())
      fail(ErrorKind::Data,
           fmt::format("record {}: no records with a different prompt to borrow weak negatives "
                       "from (insufficient sources)",
                       i));
    rec.weak.clear();
    rec.weak_n = 0;
    for (std::size_t t = 0; t < n_weak; ++t) {
      if (pool.size() >= n_weak) {
        const std::size_t pick = t + rng.below(pool.size() - t);
        std::swap(pool[t], pool[pick]);
        rec.weak.push_back(pool[t]);
      } else {
        rec.weak.push_back(pool[rng.below(pool.size())]);
      }
    }
  }
  return dataset;
}

RewardVector btm_degenerate_transform(std::span<const double> r, std::span<const double> ref,
                                      ResponseId y_star, double A) {
  if (!(A < 0.0)) fail(ErrorKind::Config, fmt::format("A must be negative, got {}", A));
  if (r.size() != ref.size()) fail(ErrorKind::Shape, "reward and reference rows differ in size");
  if (y_star >= r.size()) fail(ErrorKind::Config, fmt::format("y_star {} out of range", y_star));
  if (!(ref[y_star] > 0.0)) fail(ErrorKind::Data, "reference must be positive at y_star");
  double mass = 0.0;
  for (std::size_t y = 0; y < r.size(); ++y)
    if (!is_neg_inf(r[y])) mass += ref[y] * std::exp(r[y]);
  if (std::abs(mass - 1.0) > 1e-9)
    fail(ErrorKind::Data,
         fmt::format("reward row violates the log-ratio constraint: sum ref*exp(r) = {}", mass));
  RewardVector out(r.size());
  for (std::size_t y = 0; y < r.size(); ++y) out[y] = r[y] + A;
  out[y_star] = std::log(std::exp(r[y_star] + A) + (1.0 - std::exp(A)) / ref[y_star]);
  return out;
}

double expected_bt_log_likelihood(std::span<const double> r, std::span<const double> r_true,
                                  const Matrix& w) {
  const std::size_t V = r.size();
  if (r_true.size() != V || w.rows() != V || w.cols() != V)
    fail(ErrorKind::Shape, "expected_bt_log_likelihood: size mismatch");
  double ll = 0.0;
  for (std::size_t a = 0; a < V; ++a)
    for (std::size_t b = 0; b < V; ++b) {
      if (w(a, b) <= 0.0) continue;
      const double p_ab = sigmoid(r_true[a] - r_true[b]);
      double term = 0.0;
      if (p_ab > 0.0) term += p_ab * log_sigmoid(r[a] - r[b]);
      if (p_ab < 1.0) term += (1.0 - p_ab) * log_sigmoid(r[b] - r[a]);
      ll += w(a, b) * term;
    }
  return ll;
}

std::vector<std::string> validate_dataset(const Dataset& dataset, const World& world) {
  std::vector<std::string> out;
  const std::size_t P = world.prompts(), V = world.responses();
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& rec = dataset.records[i];
    if (rec.prompt >= P) out.push_back(fmt::format("record {}: prompt {} >= P={}", i, rec.prompt, P));
    if (rec.winner >= V) out.push_back(fmt::format("record {}: winner id {} >= V={}", i, rec.winner, V));
    auto check_negative = [&](ResponseId y, const char* kind) {
      if (y >= V) out.push_back(fmt::format("record {}: {} id {} >= V={}", i, kind, y, V));
      if (y == rec.winner)
        out.push_back(fmt::format("record {}: winner repeated among {} negatives", i, kind));
    };
    for (auto y : rec.strong) check_negative(y, "strong");
    for (auto y : rec.weak) check_negative(y, "weak");
  }
  return out;
}

}  // namespace epalab
