#include "canf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "canf/config.hpp"
#include "canf/ops.hpp"

namespace canf {

namespace {

constexpr std::uint64_t kEvalStream = 0x65766131ULL;
constexpr std::uint64_t kSampleStream = 0x73616d70ULL;
constexpr std::uint64_t kOrderStream = 0x6f726472ULL;
constexpr std::uint64_t kNoiseStream = 0x6e6f6973ULL;

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

std::vector<float> smooth_template(Rng& rng, Index size) {
  std::uniform_real_distribution<double> freq(0.5, 2.0), phase(0.0, 2.0 * M_PI), amp(0.3, 1.0);
  std::vector<double> img(static_cast<std::size_t>(size * size), 0.0);
  for (int wave = 0; wave < 3; ++wave) {
    const double fx = freq(rng), fy = freq(rng), ph = phase(rng), a = amp(rng);
    for (Index i = 0; i < size; ++i)
      for (Index j = 0; j < size; ++j)
        img[i * size + j] += a * std::sin(2.0 * M_PI * (fx * i + fy * j) / size + ph);
  }
  double peak = 0.0;
  for (double v : img) peak = std::max(peak, std::abs(v));
  std::vector<float> out(img.size());
  for (std::size_t k = 0; k < img.size(); ++k) out[k] = static_cast<float>(0.9 * img[k] / peak);
  return out;
}

double l2(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (double(a[k]) - b[k]) * (double(a[k]) - b[k]);
  return std::sqrt(s);
}

void fill_split(Rng& rng, const std::vector<std::vector<float>>& templates, Index per_class,
                Index size, double jitter, Tensor<float>& images, std::vector<Index>& labels) {
  std::normal_distribution<double> noise(0.0, jitter);
  const Index n_classes = static_cast<Index>(templates.size());
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(n_classes * per_class * size * size));
  for (Index k = 0; k < per_class; ++k) {
    for (Index c = 0; c < n_classes; ++c) {
      for (float v : templates[c]) values.push_back(static_cast<float>(std::clamp(v + noise(rng), -1.0, 1.0)));
      labels.push_back(c);
    }
  }
  images = Tensor<float>({n_classes * per_class, 1, size, size}, std::move(values));
}

Tensor<float> gather_images(const Tensor<float>& images, const std::vector<Index>& idx) {
  const Index inner = images.numel() / images.dim(0);
  std::vector<float> out;
  out.reserve(idx.size() * static_cast<std::size_t>(inner));
  auto d = images.data();
  for (Index i : idx) out.insert(out.end(), d.begin() + i * inner, d.begin() + (i + 1) * inner);
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(idx.size());
  return Tensor<float>(shape, std::move(out));
}

EpsPredictor<float> predictor_for(const Model<float>& model) {
  return [&model](const Tensor<float>& x, const std::vector<Index>& t, const std::vector<Index>& y) {
    return forward(model, x, t, y);
  };
}

}  // namespace

SyntheticDataset gen_dataset(std::uint64_t seed, Index n_classes, Index n_per_class,
                             Index eval_per_class, Index image_size, double jitter) {
  if (n_classes < 2) throw ConfigError("n_classes: need at least 2, got " + std::to_string(n_classes));
  if (n_per_class < 1) throw ConfigError("n_per_class: must be >= 1");
  if (eval_per_class < 1) throw ConfigError("eval_per_class: must be >= 1");
  if (image_size < 2) throw ConfigError("image_size: must be >= 2");
  if (!(jitter >= 0.0)) throw ConfigError("jitter: must be >= 0");

  Rng rng(seed);
  std::vector<std::vector<float>> templates;
  while (static_cast<Index>(templates.size()) < n_classes) {
    auto candidate = smooth_template(rng, image_size);
    bool separated = std::all_of(templates.begin(), templates.end(),
                                 [&](const auto& t) { return l2(t, candidate) > 0.5; });
    if (separated) templates.push_back(std::move(candidate));
  }

  SyntheticDataset data;
  data.seed = seed;
  data.n_classes = n_classes;
  data.n_per_class = n_per_class;
  data.image_size = image_size;
  std::vector<float> flat;
  for (const auto& t : templates) flat.insert(flat.end(), t.begin(), t.end());
  data.templates = Tensor<float>({n_classes, 1, image_size, image_size}, std::move(flat));
  fill_split(rng, templates, n_per_class, image_size, jitter, data.train_images, data.train_labels);
  fill_split(rng, templates, eval_per_class, image_size, jitter, data.eval_images, data.eval_labels);
  return data;
}

Adam::Adam(NamedTensors<float> params) : params_(std::move(params)) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
  }
}

void Adam::step(const Gradients<float>& grads) {
  std::vector<Tensor<float>> g;
  double norm2 = 0.0;
  for (const auto& [name, p] : params_) {
    g.push_back(grads[p]);
    for (float v : g.back().data()) norm2 += double(v) * v;
  }
  const double norm = std::sqrt(norm2);
  const double clip = norm > defaults::kGradClip ? defaults::kGradClip / norm : 1.0;
  ++steps_;
  const double b1 = defaults::kAdamBeta1, b2 = defaults::kAdamBeta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k].second.mutable_data();
    auto gd = g[k].data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = gd[i] * clip;
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
      const double mhat = m[i] / corr1, vhat = v[i] / corr2;
      w[i] = static_cast<float>(w[i] - defaults::kLearningRate * mhat / (std::sqrt(vhat) + defaults::kAdamEps));
    }
  }
}

double held_out_loss(const Model<float>& model, const SyntheticDataset& data,
                     const NoiseSchedule& schedule, Index repeats) {
  NoGradGuard no_grad;
  Rng rng(mix(data.seed, kEvalStream));
  const Index n = data.eval_images.dim(0);
  const Index chunk = 64;
  double total = 0.0;
  Index count = 0;
  for (Index r = 0; r < repeats; ++r) {
    for (Index start = 0; start < n; start += chunk) {
      const Index len = std::min(chunk, n - start);
      auto x0 = slice(data.eval_images, 0, start, len);
      std::vector<Index> labels(data.eval_labels.begin() + start, data.eval_labels.begin() + start + len);
      auto draw = draw_denoise<float>(x0.shape(), labels, schedule, rng, 0.0, 0);
      total += denoise_loss(predictor_for(model), x0, draw, schedule).item() * static_cast<double>(len);
      count += len;
    }
  }
  return total / static_cast<double>(count);
}

double sample_fidelity(const Model<float>& model, const SyntheticDataset& data,
                       const NoiseSchedule& schedule, const TrainSettings& settings) {
  Rng rng(mix(settings.seed, kSampleStream));
  std::vector<Index> labels;
  for (Index c = 0; c < data.n_classes; ++c)
    for (Index k = 0; k < settings.samples_per_class; ++k) labels.push_back(c);
  GuidanceSpec guidance{settings.guidance, model.embedder.null_class(), true};
  auto samples = ddim_sample(predictor_for(model), labels, schedule, settings.sample_steps, guidance, rng,
                             {1, data.image_size, data.image_size});
  const Index inner = samples.numel() / samples.dim(0);
  auto s = samples.data();
  auto t = data.templates.data();
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    double err = 0.0;
    for (Index i = 0; i < inner; ++i) {
      const double d = double(s[b * inner + i]) - t[labels[b] * inner + i];
      err += d * d;
    }
    total += std::sqrt(err / static_cast<double>(inner));
  }
  return total / static_cast<double>(labels.size());
}

ExperimentReport run_train(const ModelConfig& config, const TrainSettings& settings,
                           const SyntheticDataset& data, Index epochs, std::uint64_t seed,
                           Model<float>* trained_model) {
  if (epochs < 0) throw ConfigError("epochs: must be >= 0");
  if (settings.batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (data.n_classes != config.n_classes) {
    throw ConfigError("n_classes: config has " + std::to_string(config.n_classes) + ", dataset has " +
                      std::to_string(data.n_classes));
  }
  if (data.image_size != config.image_size || config.in_channels != 1) {
    throw ConfigError("image_size/in_channels: model must take 1x" + std::to_string(data.image_size) +
                      "x" + std::to_string(data.image_size) + " images");
  }

  RunConfig rc{config, settings};
  rc.train.seed = seed;
  rc.train.epochs = epochs;
  ExperimentReport report;
  report.seed = seed;
  report.config_hash = config_hash(rc);
  report.config_snapshot = serialize_config(rc);

  auto schedule = make_schedule(config.n_timesteps, settings.beta_start, settings.beta_end);
  Model<float> model = build_model<float>(config, seed);
  Adam adam(model.named_parameters());
  const Index null_class = model.embedder.null_class();

  // Data order and noise draws depend on the seed only, never on the config.
  Rng order_rng(mix(seed, kOrderStream));
  Rng noise_rng(mix(seed, kNoiseStream));
  const Index n = data.train_images.dim(0);
  std::vector<Index> order(static_cast<std::size_t>(n));

  report.initial_eval_loss = held_out_loss(model, data, schedule, settings.eval_repeats);
  for (Index epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0, ms_sum = 0.0;
    Index steps = 0;
    for (Index start = 0; start < n; start += settings.batch_size) {
      const auto t0 = std::chrono::steady_clock::now();
      const Index len = std::min(settings.batch_size, n - start);
      std::vector<Index> idx(order.begin() + start, order.begin() + start + len);
      std::vector<Index> labels;
      for (Index i : idx) labels.push_back(data.train_labels[i]);
      auto x0 = gather_images(data.train_images, idx);
      auto loss = denoise_loss(predictor_for(model), x0, labels, schedule, noise_rng, settings.p_null,
                               null_class);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("training diverged: loss " + std::to_string(value) + " at epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(adam.steps() + 1));
      }
      adam.step(backward(loss));
      loss_sum += value;
      ms_sum += elapsed_ms(t0);
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(steps);
    rec.eval_loss = held_out_loss(model, data, schedule, settings.eval_repeats);
    rec.step_ms = ms_sum / static_cast<double>(steps);
    if (!std::isfinite(rec.eval_loss)) {
      throw NumericError("held-out loss is not finite after epoch " + std::to_string(epoch));
    }
    report.epochs.push_back(rec);
  }
  report.fidelity = settings.samples_per_class > 0 ? sample_fidelity(model, data, schedule, settings) : 0.0;
  if (trained_model) *trained_model = std::move(model);
  return report;
}

std::optional<AblationSuite> ablation_suite_from_string(const std::string& name) {
  if (name == "module-sets") return AblationSuite::ModuleSets;
  if (name == "condition-sources") return AblationSuite::ConditionSources;
  if (name == "control-methods") return AblationSuite::ControlMethods;
  if (name == "can-vs-aks") return AblationSuite::CanVsAks;
  return std::nullopt;
}

std::string to_string(AblationSuite suite) {
  switch (suite) {
    case AblationSuite::ModuleSets: return "module-sets";
    case AblationSuite::ConditionSources: return "condition-sources";
    case AblationSuite::ControlMethods: return "control-methods";
    case AblationSuite::CanVsAks: return "can-vs-aks";
  }
  return "unknown";
}

Index matched_selection_kernels(const ModelConfig& config, Index cap) {
  ModelConfig probe = config;
  probe.selection_kernels = 0;
  probe.control.can = true;
  const auto model = build_model<float>(probe, 0);
  Index generator_cost = 0, per_kernel = 0;
  for (const auto& [name, p] : model.named_parameters()) {
    if (name.size() >= 10 && name.compare(name.size() - 10, 10, ".generator") == 0) {
      generator_cost += p.numel();
      const Index weight = p.dim(0);
      per_kernel += weight + config.cond_dim;
    }
  }
  Index k = 0;
  while (k < cap && (k + 1) * per_kernel <= generator_cost) ++k;
  return k;
}

std::vector<AblationVariant> ablation_variants(AblationSuite suite, const ModelConfig& base) {
  using K = LayerKind;
  std::vector<AblationVariant> out;
  auto with_set = [&](std::string name, std::set<LayerKind> set) {
    ModelConfig c = base;
    c.selection_kernels = 0;
    c.cond_aware_set = set;
    c.control.can = !set.empty();
    out.push_back({std::move(name), c});
  };
  switch (suite) {
    case AblationSuite::ModuleSets:
      with_set("baseline", {});
      with_set("dw", {K::DwConv});
      with_set("dw+patch", {K::DwConv, K::PatchEmbed});
      with_set("dw+head", {K::DwConv, K::Head});
      with_set("dw+patch+outproj", {K::DwConv, K::PatchEmbed, K::OutProj});
      break;
    case AblationSuite::ConditionSources: {
      const std::pair<const char*, ConditionSources> arms[] = {
          {"timestep-only", ConditionSources::timestep_only()},
          {"class-only", ConditionSources::class_only()},
          {"all", ConditionSources::all()}};
      for (const auto& [name, src] : arms) {
        ModelConfig c = base;
        c.cond_sources = src;
        out.push_back({name, c});
      }
      break;
    }
    case AblationSuite::ControlMethods: {
      std::set<LayerKind> set = base.cond_aware_set.empty()
                                    ? std::set<LayerKind>{K::DwConv, K::PatchEmbed, K::OutProj}
                                    : base.cond_aware_set;
      auto arm = [&](std::string name, bool skips, bool can, bool ada, bool tokens) {
        ModelConfig c = base;
        c.selection_kernels = 0;
        c.skip_connections = skips;
        c.control = ControlMethods{can, ada, tokens};
        c.cond_aware_set = can ? set : std::set<LayerKind>{};
        out.push_back({std::move(name), c});
      };
      arm("dit:adanorm", false, false, true, false);
      arm("dit:can", false, true, false, false);
      arm("dit:can+adanorm", false, true, true, false);
      arm("uvit:condtokens", true, false, false, true);
      arm("uvit:can", true, true, false, false);
      arm("uvit:can+condtokens", true, true, false, true);
      break;
    }
    case AblationSuite::CanVsAks: {
      ModelConfig can = base;
      can.selection_kernels = 0;
      out.push_back({"can", can});
      ModelConfig aks = can;
      aks.selection_kernels = matched_selection_kernels(can);
      if (aks.selection_kernels < 1) {
        throw ConfigError("selection_kernels: no K >= 1 fits within the generator parameter budget");
      }
      out.push_back({"aks-k" + std::to_string(aks.selection_kernels), aks});
      break;
    }
  }
  for (const auto& v : out) v.config.validate();
  return out;
}

std::optional<double> AblationTable::median_final_loss(const std::string& variant) const {
  std::vector<double> losses;
  for (const auto& r : rows)
    if (r.variant == variant && !r.error) losses.push_back(r.final_eval_loss());
  if (losses.empty()) return std::nullopt;
  std::sort(losses.begin(), losses.end());
  const std::size_t mid = losses.size() / 2;
  return losses.size() % 2 ? losses[mid] : 0.5 * (losses[mid - 1] + losses[mid]);
}

std::vector<std::string> AblationTable::variants() const {
  std::vector<std::string> names;
  for (const auto& r : rows)
    if (std::find(names.begin(), names.end(), r.variant) == names.end()) names.push_back(r.variant);
  return names;
}

unsigned worker_threads() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CANF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return hw;
}

AblationTable run_ablation(AblationSuite suite, const ModelConfig& base, const TrainSettings& settings,
                           const std::vector<std::uint64_t>& seeds, unsigned threads) {
  const auto variants = ablation_variants(suite, base);
  const auto data = gen_dataset(settings.seed, base.n_classes, settings.n_per_class,
                                settings.eval_per_class, base.image_size, settings.jitter);
  AblationTable table;
  table.suite = to_string(suite);
  table.rows.resize(variants.size() * seeds.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t job; (job = next.fetch_add(1)) < table.rows.size();) {
      const auto& variant = variants[job / seeds.size()];
      const auto seed = seeds[job % seeds.size()];
      ExperimentReport report;
      try {
        report = run_train(variant.config, settings, data, settings.epochs, seed);
      } catch (const std::exception& e) {
        report = ExperimentReport{};
        report.seed = seed;
        report.error = e.what();
      }
      report.suite = table.suite;
      report.variant = variant.name;
      report.run_id = table.suite + "/" + variant.name + "/s" + std::to_string(seed);
      table.rows[job] = std::move(report);  // each job owns its slot
    }
  };
  const unsigned n_workers =
      std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(table.rows.size())));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return table;
}

std::vector<BenchRow> run_bench(const std::vector<BenchShape>& shapes,
                                const std::vector<Index>& batch_sizes, Index repeats,
                                std::uint64_t seed,
                                const std::function<Tensor<float>(const Tensor<float>&)>& fused_filter) {
  if (repeats < 3) throw ConfigError("repeats: need at least 3, got " + std::to_string(repeats));
  NoGradGuard no_grad;
  const Index d = 64;
  std::vector<BenchRow> rows;
  Rng rng(seed);
  for (const auto& shape : shapes) {
    if (shape.channels < 1 || shape.size < 1 || shape.kernel < 1 || shape.kernel % 2 == 0) {
      throw ConfigError("bench shape: channels/size must be >= 1 and kernel odd");
    }
    CondAwareParam<float> layer;
    layer.kind = LayerKind::DwConv;
    layer.conv = Conv2dParams{1, shape.kernel / 2, shape.depthwise ? shape.channels : 1};
    const Index cin_g = shape.depthwise ? 1 : shape.channels;
    const Shape wshape{shape.channels, cin_g, shape.kernel, shape.kernel};
    layer.static_weight = randn<float>(wshape, rng);
    layer.bias = randn<float>({shape.channels}, rng);
    auto gen = make_generator<float>(wshape, d);
    gen.map_weights = scale(randn<float>(gen.map_weights.shape(), rng), 0.1f);
    layer.generator = std::make_shared<WeightGenerator<float>>(gen);

    for (Index batch : batch_sizes) {
      if (batch < 1) throw ConfigError("batch: sizes must be >= 1");
      auto x = randn<float>({batch, shape.channels, shape.size, shape.size}, rng);
      auto c = randn<float>({batch, d}, rng);
      auto per_sample = [&] {
        return apply_condition_aware_reference(layer, x, generate_conditional_weight(gen, c));
      };
      auto fused = [&] {
        auto y = apply_fused_grouped_from_condition(layer, x, c);
        return fused_filter ? fused_filter(y) : y;
      };
      auto fixed = [&] { return apply_static(layer, x); };

      BenchRow row;
      row.shape = shape;
      row.batch = batch;
      row.max_abs_diff = max_abs_diff(per_sample(), fused());
      if (!(row.max_abs_diff <= 1e-5)) {
        throw BenchIntegrityError("per-sample and fused outputs disagree by " +
                                  std::to_string(row.max_abs_diff) + " at C=" +
                                  std::to_string(shape.channels) + ", B=" + std::to_string(batch));
      }
      auto median_ms = [&](auto&& fn) {
        fn();  // warmup
        std::vector<double> times;
        for (Index r = 0; r < repeats; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          auto out = fn();
          times.push_back(elapsed_ms(t0));
        }
        std::sort(times.begin(), times.end());
        return times[times.size() / 2];
      };
      row.per_sample_ms = median_ms(per_sample);
      row.fused_ms = median_ms(fused);
      row.static_ms = median_ms(fixed);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "channels,size,kernel,depthwise,batch,per_sample_ms,fused_ms,static_ms,speedup,overhead_pct,"
        "max_abs_diff\n";
  for (const auto& r : rows) {
    os << r.shape.channels << ',' << r.shape.size << ',' << r.shape.kernel << ','
       << (r.shape.depthwise ? "true" : "false") << ',' << r.batch << ',' << format_double(r.per_sample_ms)
       << ',' << format_double(r.fused_ms) << ',' << format_double(r.static_ms) << ','
       << format_double(r.speedup()) << ',' << format_double(r.overhead_pct()) << ','
       << format_double(r.max_abs_diff) << '\n';
  }
  return os.str();
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

std::string reports_csv(const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  os << "run_id,suite,variant,seed,config_hash,epoch,train_loss,eval_loss,fidelity,step_ms,error\n";
  for (const auto& r : reports) {
    auto prefix = [&] {
      os << csv_field(r.run_id) << ',' << csv_field(r.suite) << ',' << csv_field(r.variant) << ','
         << r.seed << ',' << r.config_hash << ',';
    };
    if (r.error) {
      prefix();
      os << ",,,,," << csv_field(*r.error) << '\n';
      continue;
    }
    prefix();
    os << "0,," << format_double(r.initial_eval_loss) << ',' << format_double(r.fidelity) << ",,\n";
    for (const auto& e : r.epochs) {
      prefix();
      os << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.eval_loss) << ','
         << format_double(r.fidelity) << ',' << format_double(e.step_ms) << ",\n";
    }
  }
  return os.str();
}

std::string reports_jsonl(const std::vector<ExperimentReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    auto base = [&] {
      nlohmann::ordered_json j;
      j["run_id"] = r.run_id;
      j["suite"] = r.suite;
      j["variant"] = r.variant;
      j["seed"] = r.seed;
      j["config_hash"] = r.config_hash;
      return j;
    };
    if (r.error) {
      auto j = base();
      j["error"] = *r.error;
      out += j.dump() + "\n";
      continue;
    }
    auto j = base();
    j["epoch"] = 0;
    j["train_loss"] = nullptr;
    j["eval_loss"] = r.initial_eval_loss;
    j["fidelity"] = r.fidelity;
    j["step_ms"] = nullptr;
    out += j.dump() + "\n";
    for (const auto& e : r.epochs) {
      auto row = base();
      row["epoch"] = e.epoch;
      row["train_loss"] = e.train_loss;
      row["eval_loss"] = e.eval_loss;
      row["fidelity"] = r.fidelity;
      row["step_ms"] = e.step_ms;
      out += row.dump() + "\n";
    }
  }
  return out;
}

}  // namespace canf
