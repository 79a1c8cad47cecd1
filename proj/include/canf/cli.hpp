// Command dispatch for the `canf` binary: train, sample, ablate, bench, verify.
//
// Failures print one JSON line to the error stream:
//   {"error":"<kind>","command":"<cmd>","message":"..."}
// Exit status: 0 success, 1 runtime or property failure, 2 bad usage/config.

#ifndef CANF_CLI_HPP_
#define CANF_CLI_HPP_

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "canf/diffusion.hpp"
#include "canf/model.hpp"

namespace canf {

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// [-1, 1] -> 0..255 binary PGM (P5).
std::string encode_pgm(const float* pixels, Index height, Index width);

/// Minimal .npy (format 1.0, little-endian float32, C order).
std::string encode_npy(const Tensor<float>& t);

}  // namespace canf

#endif  // CANF_CLI_HPP_
