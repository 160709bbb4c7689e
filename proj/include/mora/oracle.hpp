#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "mora/ensemble.hpp"
#include "mora/tensor.hpp"

namespace mora {

struct OracleVerdict {
  bool vulnerable = false;
  std::optional<Tensor> witness;
  std::size_t grid_resolution = 0;
};

inline constexpr std::size_t kDefaultOracleResolution = 41;
inline constexpr std::size_t kMaxOracleDim = 3;

/// Exhaustive search of the grid {x_j + k eps / ((resolution - 1) / 2)},
/// clipped to [0,1], for a point the exact defense decision gets wrong.
/// Returns the first witness in row-major order (axis 0 slowest), whatever
/// the thread count.
OracleVerdict brute_force_robust(const Ensemble& ens, const Tensor& x, std::size_t y,
                                 double epsilon,
                                 std::size_t resolution = kDefaultOracleResolution,
                                 std::size_t threads = 1);

/// Which logit moves when h_m is differentiated in DL.
enum class WeightProbe {
  runner_up,  ///< z_r := z_y - DL; matches the closed form for every K
  label,      ///< z_y := z_r + DL; matches the closed form only when K = 2
};

/// Derivative oracle for the importance weights: for `trials` random logit
/// vectors with DL > 0 (M = 1), central-differences
///   h(DL) = E(z(DL))_y - E(z(DL))_r
/// in DL and compares it with importance_weight. Returns the largest
/// relative error. The difference quotient divides by the realised step.
double check_weight_formula(FormingMode mode, double tau, std::size_t num_classes,
                            std::size_t trials, std::uint64_t seed,
                            WeightProbe probe = WeightProbe::runner_up);

}  // namespace mora
