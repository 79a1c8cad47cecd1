#include "canf/verify.hpp"

#include <cmath>
#include <sstream>

#include "canf/diffusion.hpp"
#include "canf/grad_check.hpp"
#include "canf/ops.hpp"

namespace canf {

namespace {

Shape with_batch_shape(Index batch, const Shape& shape) {
  Shape out = shape;
  out.insert(out.begin(), batch);
  return out;
}

template <typename S>
struct LayerCase {
  CondAwareParam<S> layer;
  Tensor<S> x;
  Tensor<S> conditional;
};

struct CaseSpec {
  Index batch = 1, channels = 4, kernel = 3, size = 8;
  bool depthwise = true;
  bool conv = true;
  Index tokens = 4;
};

std::string describe(const CaseSpec& c) {
  std::ostringstream os;
  if (c.conv) {
    os << (c.depthwise ? "dw" : "dense") << " B=" << c.batch << " C=" << c.channels << " k=" << c.kernel;
  } else {
    os << "linear B=" << c.batch << " D=" << c.channels << " N=" << c.tokens;
  }
  return os.str();
}

// Values are drawn once in fp64 so the fp32 case sees the same numbers rounded.
LayerCase<double> make_case(const CaseSpec& spec, Rng& rng, double weight_std) {
  LayerCase<double> out;
  auto& layer = out.layer;
  const Index c = spec.channels;
  if (spec.conv) {
    layer.kind = LayerKind::DwConv;
    layer.conv = Conv2dParams{1, spec.kernel / 2, spec.depthwise ? c : 1};
    const Shape ws{c, spec.depthwise ? 1 : c, spec.kernel, spec.kernel};
    layer.static_weight = scale(randn<double>(ws, rng), weight_std);
    out.x = randn<double>({spec.batch, c, spec.size, spec.size}, rng);
    out.conditional = scale(randn<double>(with_batch_shape(spec.batch, ws), rng), weight_std);
  } else {
    layer.kind = LayerKind::OutProj;
    layer.static_weight = scale(randn<double>({c, c}, rng), weight_std);
    out.x = randn<double>({spec.batch, spec.tokens, c}, rng);
    out.conditional = scale(randn<double>({spec.batch, c, c}, rng), weight_std);
  }
  layer.bias = randn<double>({c}, rng);
  return out;
}

template <typename S>
LayerCase<S> cast_case(const LayerCase<double>& in) {
  LayerCase<S> out;
  out.layer.kind = in.layer.kind;
  out.layer.conv = in.layer.conv;
  out.layer.static_weight = in.layer.static_weight.template cast<S>();
  out.layer.bias = in.layer.bias->template cast<S>();
  out.x = in.x.template cast<S>();
  out.conditional = in.conditional.template cast<S>();
  return out;
}

template <typename S>
double fused_vs_loop(const LayerCase<S>& c) {
  auto fused = apply_fused_grouped(c.layer, c.x, c.conditional);
  auto loop = apply_condition_aware_reference(c.layer, c.x, c.conditional);
  return static_cast<double>(max_abs_diff(fused, loop));
}

template <typename T>
T pick(Rng& rng, std::initializer_list<T> options) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return *(options.begin() + d(rng));
}

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.width = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.cond_dim = 16;
  c.n_classes = 4;
  c.n_timesteps = 100;
  return c;
}

}  // namespace

SuiteResult fusion_equivalence_suite(Index n_configs, std::uint64_t seed) {
  NoGradGuard no_grad;
  SuiteResult result;
  result.name = "fusion-equivalence";
  Rng rng(seed);
  const Index n_linear = std::max<Index>(1, n_configs / 6);
  for (Index k = 0; k < n_configs; ++k) {
    CaseSpec spec;
    spec.conv = k >= n_linear;
    spec.batch = pick<Index>(rng, {1, 2, 4, 8, 32});
    spec.channels = pick<Index>(rng, {4, 8, 64});
    spec.kernel = pick<Index>(rng, {1, 3});
    spec.depthwise = pick<int>(rng, {0, 1}) == 1;
    spec.tokens = pick<Index>(rng, {1, 4, 16});
    // Cover the corners explicitly before sampling the rest.
    if (k - n_linear >= 0 && k - n_linear < 4) {
      spec.batch = 32;
      spec.channels = 64;
      spec.kernel = (k - n_linear) % 2 ? 3 : 1;
      spec.depthwise = (k - n_linear) < 2;
    }
    const auto base = make_case(spec, rng, 1.0 / std::sqrt(static_cast<double>(spec.kernel * spec.kernel)));
    const double e32 = fused_vs_loop(cast_case<float>(base));
    const double e64 = fused_vs_loop(base);
    result.worst = std::max(result.worst, e32);
    ++result.total;
    if (e32 <= 1e-5 && e64 <= 1e-10) {
      ++result.passed;
    } else {
      result.failures.push_back(describe(spec) + ": fp32 " + std::to_string(e32) + ", fp64 " +
                                std::to_string(e64));
    }
  }
  return result;
}

SuiteResult distributivity_suite(Index n_instances, std::uint64_t seed) {
  NoGradGuard no_grad;
  SuiteResult result;
  result.name = "distributivity";
  Rng rng(seed);
  double fp32_worst = 0.0;
  for (Index k = 0; k < n_instances; ++k) {
    CaseSpec spec;
    spec.conv = k % 4 != 3;
    spec.batch = pick<Index>(rng, {1, 2, 4, 8});
    spec.channels = pick<Index>(rng, {4, 8});
    spec.kernel = pick<Index>(rng, {1, 3});
    spec.depthwise = pick<int>(rng, {0, 1}) == 1;
    const Index fan_in = spec.conv ? (spec.depthwise ? 1 : spec.channels) * spec.kernel * spec.kernel
                                   : spec.channels;
    const auto c = make_case(spec, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    const double err = max_abs_diff(apply_fused_grouped(c.layer, c.x, c.conditional),
                                    apply_output_sum(c.layer, c.x, c.conditional));
    const auto c32 = cast_case<float>(c);
    fp32_worst = std::max<double>(fp32_worst, max_abs_diff(apply_fused_grouped(c32.layer, c32.x, c32.conditional),
                                                           apply_output_sum(c32.layer, c32.x, c32.conditional)));
    result.worst = std::max(result.worst, err);
    ++result.total;
    if (err <= 1e-6) {
      ++result.passed;
    } else {
      result.failures.push_back(describe(spec) + ": " + std::to_string(err));
    }
  }
  result.note = "fp64 check; fp32 worst " + std::to_string(fp32_worst);
  return result;
}

SuiteResult baseline_reduction_suite(Index n_inputs, std::uint64_t seed) {
  NoGradGuard no_grad;
  SuiteResult result;
  result.name = "baseline-reduction";
  using K = LayerKind;
  struct Arm {
    std::string name;
    ModelConfig config;
    bool reference_path = false;
  };
  for (bool uvit : {true, false}) {
    ModelConfig base = small_config();
    base.skip_connections = uvit;
    base.control = ControlMethods{false, false, uvit};
    base.cond_aware_set.clear();
    const std::string family = uvit ? "uvit/" : "dit/";

    std::vector<Arm> arms;
    auto can_arm = [&](std::string name, std::set<LayerKind> set) {
      ModelConfig c = base;
      c.control.can = true;
      c.cond_aware_set = std::move(set);
      arms.push_back({family + name, c});
    };
    can_arm("dw", {K::DwConv});
    can_arm("dw+patch", {K::DwConv, K::PatchEmbed});
    can_arm("dw+head", {K::DwConv, K::Head});
    can_arm("dw+patch+outproj", {K::DwConv, K::PatchEmbed, K::OutProj});
    can_arm("all-kinds", {K::DwConv, K::PatchEmbed, K::OutProj, K::QkvProj, K::Mlp, K::Head});
    for (auto src : {ConditionSources::class_only(), ConditionSources::timestep_only()}) {
      ModelConfig c = arms[3].config;
      c.cond_sources = src;
      arms.push_back({family + (src.class_label ? "class-only" : "timestep-only"), c});
    }
    {
      ModelConfig c = base;
      c.control.ada_norm = true;
      arms.push_back({family + "adanorm", c});
      c.control.can = true;
      c.cond_aware_set = {K::DwConv, K::PatchEmbed, K::OutProj};
      arms.push_back({family + "can+adanorm", c});
      ModelConfig aks = arms[3].config;
      aks.selection_kernels = 3;
      arms.push_back({family + "aks-k3", aks});
      arms.push_back({family + "dw+patch+outproj/reference", arms[3].config, true});
    }

    const auto baseline = build_model<float>(base, seed);
    Rng rng(seed + (uvit ? 1 : 2));
    std::vector<Tensor<float>> xs;
    std::vector<std::vector<Index>> ts, ys;
    std::uniform_int_distribution<Index> pick_t(0, base.n_timesteps - 1), pick_y(0, base.n_classes);
    for (Index i = 0; i < n_inputs; ++i) {
      const Index batch = 1 + i % 4;
      xs.push_back(randn<float>({batch, base.in_channels, base.image_size, base.image_size}, rng));
      ts.emplace_back();
      ys.emplace_back();
      for (Index b = 0; b < batch; ++b) {
        ts.back().push_back(pick_t(rng));
        ys.back().push_back(pick_y(rng));
      }
    }
    std::vector<Tensor<float>> expected;
    for (Index i = 0; i < n_inputs; ++i) expected.push_back(forward(baseline, xs[i], ts[i], ys[i]));

    for (const auto& arm : arms) {
      const auto model = build_model<float>(arm.config, seed);
      Index matches = 0;
      for (Index i = 0; i < n_inputs; ++i) {
        auto got = forward(model, xs[i], ts[i], ys[i], ForwardOptions{arm.reference_path});
        if (bitwise_equal(got, expected[i])) ++matches;
      }
      ++result.total;
      if (matches == n_inputs) {
        ++result.passed;
      } else {
        result.failures.push_back(arm.name + ": " + std::to_string(n_inputs - matches) + "/" +
                                  std::to_string(n_inputs) + " inputs differ");
      }
    }
  }
  return result;
}

std::vector<ModelConfig> grad_check_configs() {
  ModelConfig can;
  can.image_size = 4;
  can.patch_size = 2;
  can.width = 8;
  can.depth = 2;
  can.heads = 2;
  can.mlp_ratio = 2;
  can.cond_dim = 4;
  can.n_classes = 2;
  can.n_timesteps = 50;
  can.control = ControlMethods{true, true, true};
  can.cond_aware_set = {LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj, LayerKind::Head};
  ModelConfig aks = can;
  aks.control = ControlMethods{true, false, false};
  aks.skip_connections = false;
  aks.cond_aware_set = {LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj};
  aks.selection_kernels = 2;
  return {can, aks};
}

SuiteResult grad_check_suite(std::uint64_t seed) {
  SuiteResult result;
  result.name = "grad-check";
  Index case_id = 0;
  for (const auto& config : grad_check_configs()) {
    auto model = build_model<double>(config, seed);
    auto params = model.named_parameters();
    Rng rng(seed + 17 + static_cast<std::uint64_t>(case_id));
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& [name, p] : params)
      for (auto& v : p.mutable_data()) v += jitter(rng);

    const auto schedule = make_schedule(config.n_timesteps);
    const Index batch = 3;
    auto x0 = randn<double>({batch, config.in_channels, config.image_size, config.image_size}, rng);
    DenoiseDraw<double> draw;
    draw.timesteps = {3, 21, 44};
    draw.labels = {0, 1, config.n_classes};
    draw.eps = randn<double>(x0.shape(), rng);
    EpsPredictor<double> pred = [&model](const Tensor<double>& x, const std::vector<Index>& t,
                                         const std::vector<Index>& y) { return forward(model, x, t, y); };
    auto loss_fn = [&] { return denoise_loss(pred, x0, draw, schedule); };
    const auto r = grad_check<double>(loss_fn, params, 1e-5);
    result.worst = std::max(result.worst, r.max_rel_error);
    ++result.total;
    const std::string label = config.selection_kernels > 0 ? "aks" : "can";
    if (r.max_rel_error <= 1e-6) {
      ++result.passed;
    } else {
      result.failures.push_back(label + ": " + r.worst_param + " rel err " + std::to_string(r.max_rel_error));
    }
    ++case_id;
  }
  return result;
}

}  // namespace canf
