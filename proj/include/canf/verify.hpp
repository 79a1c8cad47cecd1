// Property suites shared by `canf verify` and the acceptance binary.

#ifndef CANF_VERIFY_HPP_
#define CANF_VERIFY_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "canf/model.hpp"

namespace canf {

struct SuiteResult {
  std::string name;
  Index passed = 0;
  Index total = 0;
  double worst = 0.0;  // largest error seen (0 for bitwise suites)
  std::vector<std::string> failures;
  std::string note;

  bool ok() const { return total > 0 && passed == total; }
};

/// Random conv layers (B in {1,2,4,8,32}, C in {4,8,64}, 1x1 / 3x3,
/// depthwise and dense) plus a few linear layers: fused grouped output vs the
/// per-sample loop, fp32 within 1e-5 and fp64 within 1e-10.
SuiteResult fusion_equivalence_suite(Index n_configs = 60, std::uint64_t seed = 0);

/// (W + W_c) x against W x + W_c x in fp64, within 1e-6. The fp32 gap is
/// reported in the note.
SuiteResult distributivity_suite(Index n_instances = 20, std::uint64_t seed = 0);

/// Every variant with freshly initialized generators / modulation heads /
/// kernel banks must reproduce its static counterpart bit for bit.
SuiteResult baseline_reduction_suite(Index n_inputs = 10, std::uint64_t seed = 0);

/// The small configs used for gradient checks (CAN with AdaNorm and tokens;
/// adaptive kernel selection).
std::vector<ModelConfig> grad_check_configs();

/// fp64 central differences over every parameter of each grad_check_configs()
/// model with all weights randomized, relative error within 1e-6.
SuiteResult grad_check_suite(std::uint64_t seed = 0);

}  // namespace canf

#endif  // CANF_VERIFY_HPP_
