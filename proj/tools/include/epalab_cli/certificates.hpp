#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epalab/core.hpp"
#include "epalab/datagen.hpp"

namespace epalab::cli {

struct CertificateResult {
  std::string name;
  bool passed = false;
  nlohmann::json details;
};

inline const std::vector<std::string>& certificate_names() {
  static const std::vector<std::string> names{"gradcheck", "mle", "degeneracy", "ed",
                                              "convergence"};
  return names;
}

struct CertifyOptions {
  std::uint64_t seed = 0;
  std::size_t gradcheck_batches = 2;  // per variant and trick combination
  std::size_t degeneracy_instances = 10;
  double degeneracy_A = -0.5;
  double ed_stay_prob = 0.5;
  std::size_t convergence_seeds = 50;
  std::size_t convergence_positives = 64;
};

/// Analytic vs central-difference gradients for every loss variant and all 64
/// trick combinations, on random batches over `world`.
CertificateResult certify_gradients(const World& world, std::size_t batches_per_combo,
                                    std::uint64_t seed);

/// Exact IPM fit on a well-conditioned world drawn from the seed
/// (P=8, V=16, beta=0.1): convergence, slope-1 spread and distance to the
/// closed-form minimizer.
CertificateResult certify_mle(std::uint64_t seed);

CertificateResult certify_degeneracy(const World& world, std::size_t instances, double A,
                                     std::uint64_t seed);

CertificateResult certify_ed_stationarity(const World& world, double stay_prob,
                                          std::uint64_t seed);

CertificateResult certify_convergence(const World& world, double stay_prob, std::size_t n_seeds,
                                      std::size_t n_positives, std::uint64_t seed);

std::vector<CertificateResult> run_certificates(const World& world,
                                                const std::vector<std::string>& only,
                                                const CertifyOptions& options);

}  // namespace epalab::cli
