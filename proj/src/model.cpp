#include "canf/model.hpp"

#include <cmath>
#include <random>

namespace canf {

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* field) {
    if (v < 1) throw ConfigError(std::string(field) + ": must be >= 1, got " + std::to_string(v));
  };
  positive(image_size, "image_size");
  positive(in_channels, "in_channels");
  positive(patch_size, "patch_size");
  positive(width, "width");
  positive(depth, "depth");
  positive(heads, "heads");
  positive(mlp_ratio, "mlp_ratio");
  positive(cond_dim, "cond_dim");
  positive(n_timesteps, "n_timesteps");
  if (n_classes < 2) throw ConfigError("n_classes: must be >= 2, got " + std::to_string(n_classes));
  if (image_size % patch_size != 0) {
    throw ConfigError("patch_size: " + std::to_string(patch_size) + " does not divide image_size " +
                      std::to_string(image_size));
  }
  if (width % heads != 0) {
    throw ConfigError("heads: " + std::to_string(heads) + " does not divide width " +
                      std::to_string(width));
  }
  if (!cond_aware_set.empty() && !control.can) {
    throw ConfigError("cond_aware_set: must be empty unless control_method includes CAN");
  }
  if (!cond_sources.class_label && !cond_sources.timestep) {
    throw ConfigError("cond_sources: at least one source is required");
  }
  if (selection_kernels < 0) throw ConfigError("selection_kernels: must be >= 0");
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename S>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : seed_(seed) {}

  Tensor<S> xavier(const std::string& name, const Shape& shape, Index fan_in, Index fan_out) const {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    auto rng = stream(name);
    std::uniform_real_distribution<double> dist(-bound, bound);
    return fill(shape, [&] { return dist(rng); });
  }
  Tensor<S> normal(const std::string& name, const Shape& shape, double stddev) const {
    auto rng = stream(name);
    std::normal_distribution<double> dist(0.0, stddev);
    return fill(shape, [&] { return dist(rng); });
  }
  static Tensor<S> constant(const Shape& shape, S value) {
    Tensor<S> t(shape, value);
    t.set_param();
    return t;
  }

 private:
  std::mt19937_64 stream(const std::string& name) const {
    return std::mt19937_64(splitmix(seed_ ^ splitmix(name_hash(name))));
  }
  template <typename Draw>
  static Tensor<S> fill(const Shape& shape, Draw draw) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(draw());
    Tensor<S> t(shape, std::move(v));
    t.set_param();
    return t;
  }
  std::uint64_t seed_;
};

template <typename S>
CondAwareParam<S> make_linear(const Initializer<S>& init, const std::string& name, LayerKind kind,
                              Index out, Index in) {
  CondAwareParam<S> p;
  p.kind = kind;
  p.static_weight = init.xavier(name + ".weight", Shape{out, in}, in, out);
  p.bias = Initializer<S>::constant(Shape{out}, S(0));
  return p;
}

template <typename S>
std::shared_ptr<AdaptiveKernelBank<S>> make_bank(const Initializer<S>& init, const std::string& name,
                                                 const Shape& kernel_shape, Index kernels,
                                                 Index cond_dim) {
  auto bank = std::make_shared<AdaptiveKernelBank<S>>();
  Shape bshape = kernel_shape;
  bshape.insert(bshape.begin(), kernels);
  bank->base_kernels = Initializer<S>::constant(bshape, S(0));
  bank->router = init.normal(name + ".bank.router", Shape{kernels, cond_dim},
                             1.0 / std::sqrt(static_cast<double>(cond_dim)));
  return bank;
}

template <typename S>
void attach_source(const ModelConfig& config, const Initializer<S>& init, const std::string& name,
                   CondAwareParam<S>& layer) {
  if (!config.condition_aware(layer.kind)) return;
  const Shape& shape = layer.static_weight.shape();
  if (config.selection_kernels > 0)
    layer.bank = make_bank(init, name, shape, config.selection_kernels, config.cond_dim);
  else
    layer.generator = std::make_shared<WeightGenerator<S>>(make_generator<S>(shape, config.cond_dim));
}

template <typename S>
Tensor<S> run_layer(const CondAwareParam<S>& layer, const Tensor<S>& x, const Tensor<S>& c_gen,
                    const std::type_identity_t<std::optional<Tensor<S>>>& precomputed,
                    bool reference) {
  if (!layer.condition_aware()) return apply_static(layer, x);
  Tensor<S> wc = precomputed ? *precomputed : conditional_weight(layer, c_gen);
  return reference ? apply_condition_aware_reference(layer, x, wc)
                   : apply_fused_grouped(layer, x, wc);
}

template <typename S>
void push_layer(NamedTensors<S>& out, const std::string& name, const CondAwareParam<S>& layer,
                bool include_source) {
  out.emplace_back(name + ".weight", layer.static_weight);
  if (layer.bias) out.emplace_back(name + ".bias", *layer.bias);
  if (!include_source) return;
  if (layer.generator) out.emplace_back(name + ".generator", layer.generator->map_weights);
  if (layer.bank) {
    out.emplace_back(name + ".bank.kernels", layer.bank->base_kernels);
    out.emplace_back(name + ".bank.router", layer.bank->router);
  }
}

}  // namespace

template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer<S> init(seed);
  Model<S> m;
  m.config = config;
  const Index d = config.cond_dim, w = config.width, hid = config.hidden();

  auto& e = m.embedder;
  e.dim = d;
  e.n_classes = config.n_classes;
  e.n_timesteps = config.n_timesteps;
  e.class_table = init.normal("embed.class_table", Shape{config.n_classes + 1, d}, 1.0);
  e.time_w1 = init.xavier("embed.time_w1", Shape{d, d}, d, d);
  e.time_b1 = Initializer<S>::constant(Shape{d}, S(0));
  e.time_w2 = init.xavier("embed.time_w2", Shape{d, d}, d, d);
  e.time_b2 = Initializer<S>::constant(Shape{d}, S(0));

  const Index p = config.patch_size, c_in = config.in_channels;
  m.patch_embed.kind = LayerKind::PatchEmbed;
  m.patch_embed.static_weight =
      init.xavier("patch_embed.weight", Shape{w, c_in, p, p}, c_in * p * p, w);
  m.patch_embed.bias = Initializer<S>::constant(Shape{w}, S(0));
  m.patch_embed.conv = Conv2dParams{.stride = p, .padding = 0, .groups = 1};
  attach_source(config, init, "patch_embed", m.patch_embed);

  m.pos_embed = init.normal("pos_embed", Shape{config.tokens(), w}, 0.02);
  if (config.control.cond_tokens) {
    m.token_w = init.xavier("cond_token.weight", Shape{w, d}, d, w);
    m.token_b = Initializer<S>::constant(Shape{w}, S(0));
  }

  if (config.condition_aware(LayerKind::OutProj)) {
    if (config.selection_kernels > 0)
      m.out_proj_bank = make_bank(init, "out_proj_shared", Shape{w, w}, config.selection_kernels, d);
    else
      m.out_proj_generator =
          std::make_shared<WeightGenerator<S>>(make_generator<S>(Shape{w, w}, d, true));
  }

  const Index n_in = config.depth / 2;
  const Index first_out = config.depth - n_in;
  for (Index i = 0; i < config.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i);
    Block<S> b;
    b.ln1_gamma = Initializer<S>::constant(Shape{w}, S(1));
    b.ln1_beta = Initializer<S>::constant(Shape{w}, S(0));
    b.ln2_gamma = Initializer<S>::constant(Shape{w}, S(1));
    b.ln2_beta = Initializer<S>::constant(Shape{w}, S(0));
    b.qkv = make_linear(init, pre + ".attn.qkv", LayerKind::QkvProj, 3 * w, w);
    attach_source(config, init, pre + ".attn.qkv", b.qkv);
    b.out_proj = make_linear(init, pre + ".attn.out", LayerKind::OutProj, w, w);
    b.out_proj.generator = m.out_proj_generator;
    b.out_proj.bank = m.out_proj_bank;
    b.fc1 = make_linear(init, pre + ".ffn.fc1", LayerKind::Mlp, hid, w);
    attach_source(config, init, pre + ".ffn.fc1", b.fc1);
    b.dw.kind = LayerKind::DwConv;
    b.dw.static_weight = init.xavier(pre + ".ffn.dw.weight", Shape{hid, 1, 3, 3}, 9, 9);
    b.dw.bias = Initializer<S>::constant(Shape{hid}, S(0));
    b.dw.conv = Conv2dParams{.stride = 1, .padding = 1, .groups = hid};
    attach_source(config, init, pre + ".ffn.dw", b.dw);
    b.fc2 = make_linear(init, pre + ".ffn.fc2", LayerKind::Mlp, w, hid);
    attach_source(config, init, pre + ".ffn.fc2", b.fc2);
    if (config.control.ada_norm) {
      b.ada_w = Initializer<S>::constant(Shape{4 * w, d}, S(0));
      b.ada_b = Initializer<S>::constant(Shape{4 * w}, S(0));
    }
    if (config.skip_connections && i >= first_out && n_in > 0) {
      b.skip_w = init.xavier(pre + ".skip.weight", Shape{w, 2 * w}, 2 * w, w);
      b.skip_b = Initializer<S>::constant(Shape{w}, S(0));
    }
    m.blocks.push_back(std::move(b));
  }

  m.final_gamma = Initializer<S>::constant(Shape{w}, S(1));
  m.final_beta = Initializer<S>::constant(Shape{w}, S(0));
  m.head = make_linear(init, "head", LayerKind::Head, config.patch_dim(), w);
  attach_source(config, init, "head", m.head);
  return m;
}

template <typename S>
NamedTensors<S> Model<S>::named_parameters() const {
  NamedTensors<S> out;
  out.emplace_back("embed.class_table", embedder.class_table);
  out.emplace_back("embed.time_w1", embedder.time_w1);
  out.emplace_back("embed.time_b1", embedder.time_b1);
  out.emplace_back("embed.time_w2", embedder.time_w2);
  out.emplace_back("embed.time_b2", embedder.time_b2);
  push_layer(out, "patch_embed", patch_embed, true);
  out.emplace_back("pos_embed", pos_embed);
  if (token_w) {
    out.emplace_back("cond_token.weight", *token_w);
    out.emplace_back("cond_token.bias", *token_b);
  }
  if (out_proj_generator) out.emplace_back("out_proj_shared.generator", out_proj_generator->map_weights);
  if (out_proj_bank) {
    out.emplace_back("out_proj_shared.bank.kernels", out_proj_bank->base_kernels);
    out.emplace_back("out_proj_shared.bank.router", out_proj_bank->router);
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string pre = "blocks." + std::to_string(i);
    out.emplace_back(pre + ".ln1.gamma", b.ln1_gamma);
    out.emplace_back(pre + ".ln1.beta", b.ln1_beta);
    push_layer(out, pre + ".attn.qkv", b.qkv, true);
    push_layer(out, pre + ".attn.out", b.out_proj, false);
    out.emplace_back(pre + ".ln2.gamma", b.ln2_gamma);
    out.emplace_back(pre + ".ln2.beta", b.ln2_beta);
    push_layer(out, pre + ".ffn.fc1", b.fc1, true);
    push_layer(out, pre + ".ffn.dw", b.dw, true);
    push_layer(out, pre + ".ffn.fc2", b.fc2, true);
    if (b.ada_w) {
      out.emplace_back(pre + ".ada.weight", *b.ada_w);
      out.emplace_back(pre + ".ada.bias", *b.ada_b);
    }
    if (b.skip_w) {
      out.emplace_back(pre + ".skip.weight", *b.skip_w);
      out.emplace_back(pre + ".skip.bias", *b.skip_b);
    }
  }
  out.emplace_back("final_ln.gamma", final_gamma);
  out.emplace_back("final_ln.beta", final_beta);
  push_layer(out, "head", head, true);
  return out;
}

template <typename S>
std::size_t Model<S>::weight_source_count() const {
  std::size_t n = 0;
  auto has = [](const CondAwareParam<S>& l) { return l.condition_aware() ? 1u : 0u; };
  n += has(patch_embed) + has(head);
  if (out_proj_generator || out_proj_bank) ++n;
  for (const auto& b : blocks) n += has(b.qkv) + has(b.fc1) + has(b.dw) + has(b.fc2);
  return n;
}

template <typename S>
ParameterCount count_parameters(const Model<S>& model) {
  ParameterCount count;
  for (const auto& [name, t] : model.named_parameters()) {
    const bool source = name.ends_with(".generator") || name.find(".bank.") != std::string::npos;
    (source ? count.generators : count.static_params) += t.numel();
  }
  count.total = count.static_params + count.generators;
  return count;
}

template <typename S>
Tensor<S> patchify(const Tensor<S>& x, Index patch) {
  if (x.rank() != 4 || x.dim(2) % patch != 0 || x.dim(3) % patch != 0 || x.dim(2) != x.dim(3)) {
    throw DimensionError("patchify: image " + shape_str(x.shape()) + " not tiled by patch " +
                         std::to_string(patch));
  }
  const Index b = x.dim(0), c = x.dim(1), g = x.dim(2) / patch;
  auto six = reshape(x, Shape{b, c, g, patch, g, patch});
  auto perm = permute(six, {0, 2, 4, 1, 3, 5});
  return reshape(perm, Shape{b, g * g, c * patch * patch});
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, Index patch, Index channels, Index image_size) {
  const Index g = image_size / patch;
  if (tokens.rank() != 3 || tokens.dim(1) != g * g || tokens.dim(2) != channels * patch * patch) {
    throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not form a " +
                         std::to_string(g) + "x" + std::to_string(g) + " grid of " +
                         std::to_string(channels) + "x" + std::to_string(patch) + "x" +
                         std::to_string(patch) + " patches");
  }
  const Index b = tokens.dim(0);
  auto six = reshape(tokens, Shape{b, g, g, channels, patch, patch});
  auto perm = permute(six, {0, 3, 1, 4, 2, 5});
  return reshape(perm, Shape{b, channels, image_size, image_size});
}

template <typename S>
Tensor<S> patch_embed(const CondAwareParam<S>& layer, const Tensor<S>& x, const Tensor<S>& c_gen,
                      bool reference_path) {
  const Index patch = layer.static_weight.dim(2);
  if (x.rank() != 4 || x.dim(2) != x.dim(3) || x.dim(2) % patch != 0) {
    throw DimensionError("patch_embed: image " + shape_str(x.shape()) + " not tiled by patch " +
                         std::to_string(patch));
  }
  auto y = run_layer<S>(layer, x, c_gen, std::nullopt, reference_path);
  const Index b = y.dim(0), w = y.dim(1), n = y.dim(2) * y.dim(3);
  return permute(reshape(y, Shape{b, w, n}), {0, 2, 1});
}

template <typename S>
Tensor<S> block_forward(const Block<S>& block, const ModelConfig& config, const Tensor<S>& tokens,
                        const BlockContext<S>& ctx) {
  const Index b = tokens.dim(0), t = tokens.dim(1), w = config.width;
  const Index heads = config.heads, dh = w / heads, hid = config.hidden();
  const Index spatial = ctx.has_cond_token ? t - 1 : t;
  const Index g = config.grid();
  if (tokens.rank() != 3 || tokens.dim(2) != w || spatial != g * g) {
    throw DimensionError("block_forward: tokens " + shape_str(tokens.shape()) + " do not match a " +
                         std::to_string(g) + "x" + std::to_string(g) + " grid of width " +
                         std::to_string(w));
  }
  const bool ada = block.ada_w.has_value();
  std::optional<Tensor<S>> mod;
  if (ada) mod = linear(silu(ctx.c_full), *block.ada_w, *block.ada_b);
  auto piece = [&](Index k) { return slice(*mod, 1, k * w, w); };

  auto a = layer_norm(tokens, block.ln1_gamma, block.ln1_beta, S(1e-6));
  if (ada) a = modulate(a, piece(0), piece(1));
  auto qkv = run_layer(block.qkv, a, ctx.c_gen, std::nullopt, ctx.reference_path);
  auto split = permute(reshape(qkv, Shape{b, t, 3, heads, dh}), {2, 0, 3, 1, 4});
  auto head_view = [&](Index k) { return reshape(slice(split, 0, k, 1), Shape{b * heads, t, dh}); };
  auto q = head_view(0), k = head_view(1), v = head_view(2);
  auto probs = softmax(scale(bmm(q, k, true), S(1) / std::sqrt(static_cast<S>(dh))));
  auto attended = permute(reshape(bmm(probs, v), Shape{b, heads, t, dh}), {0, 2, 1, 3});
  auto merged = reshape(attended, Shape{b, t, w});
  auto h = add(tokens, run_layer(block.out_proj, merged, ctx.c_gen, ctx.out_proj_conditional,
                                 ctx.reference_path));

  auto m = layer_norm(h, block.ln2_gamma, block.ln2_beta, S(1e-6));
  if (ada) m = modulate(m, piece(2), piece(3));
  auto f = gelu(run_layer(block.fc1, m, ctx.c_gen, std::nullopt, ctx.reference_path));
  auto grid_part = ctx.has_cond_token ? slice(f, 1, 1, spatial) : f;
  auto img = reshape(permute(grid_part, {0, 2, 1}), Shape{b, hid, g, g});
  auto conv = run_layer(block.dw, img, ctx.c_gen, std::nullopt, ctx.reference_path);
  auto back = gelu(permute(reshape(conv, Shape{b, hid, spatial}), {0, 2, 1}));
  if (ctx.has_cond_token) back = concat(std::vector<Tensor<S>>{slice(f, 1, 0, 1), back}, 1);
  return add(h, run_layer(block.fc2, back, ctx.c_gen, std::nullopt, ctx.reference_path));
}

template <typename S>
Tensor<S> unpatchify_head(const CondAwareParam<S>& head, const ModelConfig& config,
                          const Tensor<S>& tokens, const Tensor<S>& c_gen, bool reference_path) {
  if (tokens.rank() != 3 || tokens.dim(1) != config.tokens()) {
    throw DimensionError("unpatchify_head: " + shape_str(tokens.shape()) + " vs " +
                         std::to_string(config.tokens()) + " patch tokens");
  }
  auto y = run_layer<S>(head, tokens, c_gen, std::nullopt, reference_path);
  return unpatchify(y, config.patch_size, config.in_channels, config.image_size);
}

template <typename S>
Tensor<S> forward(const Model<S>& model, const Tensor<S>& x, const std::vector<Index>& timesteps,
                  const std::vector<Index>& labels, ForwardOptions options) {
  const auto& cfg = model.config;
  const Shape expected{static_cast<Index>(labels.size()), cfg.in_channels, cfg.image_size,
                       cfg.image_size};
  if (x.shape() != expected) {
    throw DimensionError("forward: input " + shape_str(x.shape()) + " vs expected " +
                         shape_str(expected));
  }
  BlockContext<S> ctx;
  ctx.c_full = embed_condition(model.embedder, labels, timesteps, ConditionSources::all());
  ctx.c_gen = cfg.cond_sources == ConditionSources::all()
                  ? ctx.c_full
                  : embed_condition(model.embedder, labels, timesteps, cfg.cond_sources);
  ctx.has_cond_token = cfg.control.cond_tokens;
  ctx.reference_path = options.reference_path;
  if (model.out_proj_generator)
    ctx.out_proj_conditional = generate_conditional_weight(*model.out_proj_generator, ctx.c_gen);
  else if (model.out_proj_bank)
    ctx.out_proj_conditional = mix_kernels(*model.out_proj_bank, ctx.c_gen);

  const Index b = x.dim(0), w = cfg.width;
  auto h = add_each(patch_embed(model.patch_embed, x, ctx.c_gen, options.reference_path),
                    model.pos_embed);
  if (ctx.has_cond_token) {
    auto tok = reshape(linear(ctx.c_full, *model.token_w, *model.token_b), Shape{b, 1, w});
    h = concat(std::vector<Tensor<S>>{tok, h}, 1);
  }
  std::vector<Tensor<S>> skips;
  const Index n_in = cfg.depth / 2;
  for (Index i = 0; i < cfg.depth; ++i) {
    const auto& block = model.blocks[static_cast<std::size_t>(i)];
    if (block.skip_w) {
      auto skip = skips.back();
      skips.pop_back();
      h = linear(concat(std::vector<Tensor<S>>{h, skip}, 2), *block.skip_w, *block.skip_b);
    }
    h = block_forward(block, cfg, h, ctx);
    if (cfg.skip_connections && i < n_in) skips.push_back(h);
  }
  h = layer_norm(h, model.final_gamma, model.final_beta, S(1e-6));
  if (ctx.has_cond_token) h = slice(h, 1, 1, cfg.tokens());
  return unpatchify_head(model.head, cfg, h, ctx.c_gen, options.reference_path);
}

#define CANF_INSTANTIATE(S)                                                                      \
  template struct Model<S>;                                                                      \
  template Model<S> build_model<S>(const ModelConfig&, std::uint64_t);                           \
  template ParameterCount count_parameters(const Model<S>&);                                     \
  template Tensor<S> patchify(const Tensor<S>&, Index);                                          \
  template Tensor<S> unpatchify(const Tensor<S>&, Index, Index, Index);                          \
  template Tensor<S> patch_embed(const CondAwareParam<S>&, const Tensor<S>&, const Tensor<S>&,   \
                                 bool);                                                          \
  template Tensor<S> block_forward(const Block<S>&, const ModelConfig&, const Tensor<S>&,        \
                                   const BlockContext<S>&);                                      \
  template Tensor<S> unpatchify_head(const CondAwareParam<S>&, const ModelConfig&,               \
                                     const Tensor<S>&, const Tensor<S>&, bool);                  \
  template Tensor<S> forward(const Model<S>&, const Tensor<S>&, const std::vector<Index>&,       \
                             const std::vector<Index>&, ForwardOptions);

CANF_INSTANTIATE(float)
CANF_INSTANTIATE(double)

#undef CANF_INSTANTIATE

}  // namespace canf
