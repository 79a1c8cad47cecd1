// Fixed training hyperparameters shared by every experiment arm.
#ifndef CANF_DEFAULTS_HPP_
#define CANF_DEFAULTS_HPP_

namespace canf::defaults {

inline constexpr double kLearningRate = 1e-3;
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;
// Global L2 norm clip applied before the Adam update.
inline constexpr double kGradClip = 1.0;

inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 0.02;
inline constexpr double kLabelDropout = 0.1;

}  // namespace canf::defaults

#endif  // CANF_DEFAULTS_HPP_
