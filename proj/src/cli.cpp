#include "canf/cli.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "canf/checkpoint.hpp"
#include "canf/config.hpp"
#include "canf/harness.hpp"
#include "canf/verify.hpp"

namespace canf {

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::optional<Index> steps;
  std::optional<Index> label;
  std::optional<double> guidance;
  std::string batch;
  std::string checkpoint;
  std::string suite;
  Index seeds = 3;
  Index repeats = 5;
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

RunConfig load_run_config(const Options& o) {
  std::optional<std::filesystem::path> path;
  if (!o.config_path.empty()) path = o.config_path;
  auto config = parse_config(path, o.sets);
  if (o.seed) config.train.seed = *o.seed;
  if (o.steps) config.train.sample_steps = *o.steps;
  if (o.guidance) config.train.guidance = *o.guidance;
  return config;
}

std::vector<Index> parse_index_list(const std::string& text, const char* flag) {
  std::vector<Index> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      values.push_back(v);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": expected positive integers like 1,8,32, got '" + text + "'");
    }
  }
  if (values.empty()) throw UsageError(std::string(flag) + ": empty list");
  return values;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::filesystem::path prepare_out(const Options& o) {
  std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  return dir;
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto config = load_run_config(o);
  const auto& t = config.train;
  const auto data = gen_dataset(t.seed, config.model.n_classes, t.n_per_class, t.eval_per_class,
                                config.model.image_size, t.jitter);
  Model<float> model;
  auto report = run_train(config.model, t, data, t.epochs, t.seed, &model);
  report.suite = "train";
  report.variant = "single";
  report.run_id = "train/s" + std::to_string(t.seed);
  const auto dir = prepare_out(o);
  save_checkpoint(dir / "model.canf", model, config);
  write_file(dir / "train.csv", reports_csv({report}));
  write_file(dir / "train.jsonl", reports_jsonl({report}));
  out << "epoch 0 eval_loss " << format_double(report.initial_eval_loss) << "\n";
  for (const auto& e : report.epochs) {
    out << "epoch " << e.epoch << " train_loss " << format_double(e.train_loss) << " eval_loss "
        << format_double(e.eval_loss) << " step_ms " << std::fixed << std::setprecision(2) << e.step_ms
        << std::defaultfloat << "\n";
  }
  out << "fidelity " << format_double(report.fidelity) << "\n";
  out << "config_hash " << report.config_hash << "\n";
  out << "wrote " << (dir / "model.canf").string() << "\n";
  return 0;
}

int cmd_sample(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw UsageError("sample: --checkpoint PATH is required");
  auto loaded = load_checkpoint<float>(o.checkpoint);
  auto& config = loaded.config;
  if (o.seed) config.train.seed = *o.seed;
  if (o.steps) config.train.sample_steps = *o.steps;
  if (o.guidance) config.train.guidance = *o.guidance;
  const Index count = o.batch.empty() ? 4 : parse_index_list(o.batch, "--batch").front();
  std::vector<Index> labels;
  for (Index i = 0; i < count; ++i) {
    const Index label = o.label ? *o.label : i % config.model.n_classes;
    if (label < 0 || label >= config.model.n_classes) {
      throw UsageError("--class: " + std::to_string(label) + " outside [0, " +
                       std::to_string(config.model.n_classes) + ")");
    }
    labels.push_back(label);
  }
  const auto schedule = make_schedule(config.model.n_timesteps, config.train.beta_start, config.train.beta_end);
  Rng rng(config.train.seed);
  const auto& model = loaded.model;
  EpsPredictor<float> pred = [&model](const Tensor<float>& x, const std::vector<Index>& t,
                                      const std::vector<Index>& y) { return forward(model, x, t, y); };
  GuidanceSpec guidance{config.train.guidance, model.embedder.null_class(), true};
  const Index s = config.model.image_size;
  auto samples = ddim_sample(pred, labels, schedule, config.train.sample_steps, guidance, rng,
                             {config.model.in_channels, s, s});
  const auto dir = prepare_out(o);
  write_file(dir / "samples.npy", encode_npy(samples));
  const Index plane = s * s;
  for (Index i = 0; i < count; ++i) {
    for (Index c = 0; c < config.model.in_channels; ++c) {
      std::ostringstream name;
      name << "sample_" << std::setw(3) << std::setfill('0') << i << "_class" << labels[i];
      if (config.model.in_channels > 1) name << "_ch" << c;
      name << ".pgm";
      const float* px = samples.data().data() + (i * config.model.in_channels + c) * plane;
      write_file(dir / name.str(), encode_pgm(px, s, s));
    }
  }
  out << "wrote " << count << " samples to " << dir.string() << "\n";
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const auto suite = ablation_suite_from_string(o.suite);
  if (!suite) {
    throw UsageError("--suite: unknown suite '" + o.suite +
                     "' (module-sets, condition-sources, control-methods, can-vs-aks)");
  }
  if (o.seeds < 1) throw UsageError("--seeds: must be >= 1");
  const auto config = load_run_config(o);
  std::vector<std::uint64_t> seeds;
  for (Index k = 0; k < o.seeds; ++k) seeds.push_back(config.train.seed + static_cast<std::uint64_t>(k));
  const auto table = run_ablation(*suite, config.model, config.train, seeds, worker_threads());
  const auto dir = prepare_out(o);
  write_file(dir / (table.suite + ".csv"), reports_csv(table.rows));
  write_file(dir / (table.suite + ".jsonl"), reports_jsonl(table.rows));
  out << "variant,median_final_eval_loss,runs_ok\n";
  int failed_rows = 0;
  for (const auto& v : table.variants()) {
    Index ok = 0, total = 0;
    for (const auto& r : table.rows) {
      if (r.variant != v) continue;
      ++total;
      if (!r.error) ++ok;
    }
    failed_rows += static_cast<int>(total - ok);
    const auto m = table.median_final_loss(v);
    out << v << "," << (m ? format_double(*m) : std::string("nan")) << "," << ok << "/" << total << "\n";
  }
  return failed_rows == 0 ? 0 : 1;
}

int cmd_bench(const Options& o, std::ostream& out) {
  const auto batches = parse_index_list(o.batch.empty() ? "1,8,32" : o.batch, "--batch");
  const std::vector<BenchShape> shapes{{64, 8, 3, true}, {64, 4, 3, true}, {8, 8, 3, false}};
  const auto rows = run_bench(shapes, batches, o.repeats, o.seed.value_or(0));
  const auto csv = bench_csv(rows);
  if (o.out_dir != ".") write_file(prepare_out(o) / "bench.csv", csv);
  out << csv;
  return 0;
}

int cmd_verify(const Options& o, std::ostream& out) {
  const std::uint64_t seed = o.seed.value_or(0);
  std::vector<SuiteResult> results{fusion_equivalence_suite(60, seed), distributivity_suite(20, seed),
                                   baseline_reduction_suite(10, seed), grad_check_suite(seed)};
  bool ok = true;
  for (const auto& r : results) {
    out << r.name << " " << r.passed << "/" << r.total << " worst " << r.worst;
    if (!r.note.empty()) out << " (" << r.note << ")";
    out << (r.ok() ? " ok" : " FAILED") << "\n";
    for (const auto& f : r.failures) out << "  " << f << "\n";
    ok = ok && r.ok();
  }
  return ok ? 0 : 1;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const VersionError*>(&e)) return "version";
  if (dynamic_cast<const IntegrityError*>(&e)) return "integrity";
  if (dynamic_cast<const ShapeMismatchError*>(&e)) return "shape";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const BenchIntegrityError*>(&e)) return "bench-integrity";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const RangeError*>(&e)) return "range";
  return "runtime";
}

void error_record(std::ostream& err, const std::string& kind, const std::string& command,
                  const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["command"] = command;
  j["message"] = message;
  err << j.dump() << "\n";
}

}  // namespace

std::string encode_pgm(const float* pixels, Index height, Index width) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (Index i = 0; i < height * width; ++i) {
    const double v = std::clamp(static_cast<double>(pixels[i]), -1.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround((v + 1.0) * 127.5))));
  }
  return out;
}

std::string encode_npy(const Tensor<float>& t) {
  std::string shape = "(";
  for (Index d : t.shape()) shape += std::to_string(d) + ",";
  if (t.rank() > 1) shape.pop_back();
  shape += ")";
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.push_back(static_cast<char>(len & 0xff));
  out.push_back(static_cast<char>(len >> 8));
  out += header;
  for (float v : t.data()) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  return out;
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Condition-aware neural network toy engine"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.sets, "override one key (repeatable), e.g. --set width=32");
    sub->add_option("--seed", o.seed, "run seed");
    sub->add_option("--out", o.out_dir, "output directory");
  };
  auto* train = app.add_subcommand("train", "train one model, write checkpoint and reports");
  common(train);
  auto* sample = app.add_subcommand("sample", "generate samples from a checkpoint");
  common(sample);
  sample->add_option("--checkpoint", o.checkpoint, "checkpoint archive")->required();
  sample->add_option("--steps", o.steps, "DDIM steps");
  sample->add_option("--class", o.label, "class label for every sample");
  sample->add_option("--guidance", o.guidance, "classifier-free guidance scale");
  sample->add_option("--batch", o.batch, "number of samples");
  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  common(ablate);
  ablate->add_option("--suite", o.suite, "module-sets | condition-sources | control-methods | can-vs-aks")
      ->required();
  ablate->add_option("--seeds", o.seeds, "seeds per variant (consecutive from --seed)");
  auto* bench = app.add_subcommand("bench", "per-sample vs fused grouped layer timing");
  common(bench);
  bench->add_option("--batch", o.batch, "batch sizes, e.g. 1,8,32");
  bench->add_option("--repeats", o.repeats, "timed repeats per cell (>= 3)");
  auto* verify = app.add_subcommand("verify", "fusion / distributivity / baseline / gradient checks");
  verify->add_option("--seed", o.seed, "suite seed");

  std::string command = argc > 1 ? argv[1] : "";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    error_record(err, "usage", command, e.what());
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(o, out);
    if (sample->parsed()) return cmd_sample(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out);
    if (bench->parsed()) return cmd_bench(o, out);
    if (verify->parsed()) return cmd_verify(o, out);
  } catch (const std::exception& e) {
    const auto kind = error_kind(e);
    error_record(err, kind, command, e.what());
    return kind == "config" || kind == "usage" ? 2 : 1;
  }
  return 2;
}

}  // namespace canf
