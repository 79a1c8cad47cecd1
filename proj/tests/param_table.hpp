#ifndef CANF_TESTS_PARAM_TABLE_HPP_
#define CANF_TESTS_PARAM_TABLE_HPP_

#include <string>
#include <vector>

#include "canf/model_config.hpp"

namespace canf::testing {

struct CountCase {
  std::string name;
  ModelConfig config;
  Index static_params, generators;
};

// Totals worked out by hand from the layer list: embedder, patch embedding,
// positions, condition token, per-block norms / qkv / out / fc1 / dw / fc2 /
// AdaNorm / skip, final norm, head, plus P*d per generator (or K*(P+d) per
// kernel bank).
inline std::vector<CountCase> count_cases() {
  std::vector<CountCase> cases;
  cases.push_back({"uvit-default", ModelConfig{}, 241476, 868352});

  ModelConfig dit;
  dit.width = 32;
  dit.depth = 2;
  dit.mlp_ratio = 2;
  dit.cond_dim = 16;
  dit.n_classes = 4;
  dit.cond_aware_set = {LayerKind::Head, LayerKind::Mlp, LayerKind::QkvProj};
  dit.control = {.can = true, .ada_norm = true, .cond_tokens = false};
  dit.skip_connections = false;
  cases.push_back({"dit-adanorm", dit, 24212, 231424});

  ModelConfig aks;
  aks.image_size = 16;
  aks.in_channels = 3;
  aks.patch_size = 4;
  aks.width = 16;
  aks.depth = 3;
  aks.mlp_ratio = 2;
  aks.cond_dim = 8;
  aks.n_classes = 10;
  aks.cond_aware_set = {LayerKind::DwConv, LayerKind::OutProj};
  aks.selection_kernels = 3;
  cases.push_back({"rgb-kernel-bank", aks, 10424, 3456});
  return cases;
}

}  // namespace canf::testing

#endif  // CANF_TESTS_PARAM_TABLE_HPP_
