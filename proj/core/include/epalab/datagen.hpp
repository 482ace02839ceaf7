#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epalab/core.hpp"
#include "epalab/matrix.hpp"
#include "epalab/objectives.hpp"

namespace epalab {

struct WorldParams {
  std::uint64_t seed = 0;
  std::size_t prompts = 8;
  std::size_t responses = 32;
  double reward_spread = 3.0;
  double weak_floor = -10.0;
  std::size_t on_topic = 0;   // 0 selects min(V, max(4, V/4))
  std::size_t support = 0;    // finite-reward responses per prompt, 0 selects V
  double ref_temperature = 0.25;
  double ref_noise = 1.0;
  int max_length = 20;
};

/// Synthetic world. Each prompt gets an on-topic subset with rewards in
/// [-spread, spread]; every other response gets a reward at or below
/// weak_floor (or -inf when `support` < V). The reference policy is a
/// tempered softmax of a noisy copy of the rewards and has full support.
World build_world(const WorldParams& params);
World build_world(std::uint64_t seed, std::size_t prompts, std::size_t responses,
                  double reward_spread, double weak_floor);

enum class SchemeKind { BestOfK, ExplicitPairDist, DegenerateAvoidYStar };

const char* to_string(SchemeKind kind) noexcept;
SchemeKind scheme_kind_from_string(const std::string& s);

struct SamplingScheme {
  SchemeKind kind = SchemeKind::BestOfK;
  std::size_t k = 4;
  // p(y_w, y_l | x) with zero diagonal and unit mass. One matrix per prompt,
  // or a single matrix shared by all prompts. Empty selects uniform weights
  // over candidate pairs (excluding y_star for the degenerate scheme).
  std::vector<Matrix> pair_weights;
  std::optional<ResponseId> y_star;
  // Gumbel noise scale for best-of-K labeling; 0 is a noise-free argmax.
  double label_temperature = 0.0;
};

/// Uniform weights over ordered pairs of distinct candidates of prompt x,
/// skipping any pair that contains `exclude`.
Matrix uniform_pair_weights(const World& world, PromptId x,
                            std::optional<ResponseId> exclude = std::nullopt);

/// Violations of the scheme's invariants against a world, empty when valid.
std::vector<std::string> validate_scheme(const SamplingScheme& scheme, const World& world);

struct DatasetHeader {
  int version = 1;
  std::uint64_t world_hash = 0;
  std::string scheme;
  std::uint64_t seed = 0;
  std::string config_digest;  // optional, written when non-empty
};

struct Dataset {
  DatasetHeader header;
  std::vector<PreferenceRecord> records;
};

/// Records cycle through prompts (record i uses prompt i mod P).
Dataset sample_preferences(const World& world, const SamplingScheme& scheme,
                           std::size_t n_records, std::size_t n_strong, std::uint64_t seed);

enum class WeakMode { Precomputed, InBatchMarker };

/// Pre-computed mode stores n_weak response ids per record, drawn from the
/// winners/strong negatives of records with a different prompt. Marker mode
/// stores only the count and defers selection to batch assembly.
Dataset attach_weak_negatives(Dataset dataset, const World& world, std::size_t n_weak,
                              WeakMode mode, std::uint64_t seed);

/// Alternative log-ratio reward with identical pairwise differences away
/// from y_star:
///   r~(y) = r(y) + A                          for y != y_star
///   r~(y_star) = log(exp(r(y_star) + A) + (1 - exp(A)) / ref(y_star))
/// Input must satisfy sum ref * exp(r) = 1; so does the output.
RewardVector btm_degenerate_transform(std::span<const double> reward_row,
                                      std::span<const double> ref_row, ResponseId y_star,
                                      double A);

/// Expected Bradley-Terry log-likelihood of reward row r under pair
/// weights, with each pair oriented by sigma(r_true(a) - r_true(b)).
double expected_bt_log_likelihood(std::span<const double> r, std::span<const double> r_true,
                                  const Matrix& pair_weights);

/// Id-range and winner-exclusion violations of a dataset against a world.
std::vector<std::string> validate_dataset(const Dataset& dataset, const World& world);

// JSON-lines serialization: a header line then one record per line.
std::string dataset_to_jsonl(const Dataset& dataset);
Dataset dataset_from_jsonl(const std::string& text);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace epalab
