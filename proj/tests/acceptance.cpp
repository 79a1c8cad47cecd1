// Acceptance run: one PASS/FAIL line per criterion.
//
//   canf_acceptance [--only 1,2,...] [--expect-fail 8,9] [--config PATH]
//
// Exit status is 0 when every selected criterion passes, or fails only where
// --expect-fail allows it. Expected failures still print FAIL.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "canf/checkpoint.hpp"
#include "canf/cli.hpp"
#include "canf/config.hpp"
#include "canf/harness.hpp"
#include "canf/ops.hpp"
#include "canf/verify.hpp"
#include "param_table.hpp"

namespace canf {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

Outcome suite_outcome(const SuiteResult& r, double elapsed, double budget_s) {
  std::ostringstream d;
  d << r.passed << "/" << r.total << " worst " << fmt(r.worst) << " in " << fmt(elapsed, "%.2f") << "s";
  if (!r.note.empty()) d << " (" << r.note << ")";
  for (const auto& f : r.failures) d << "; " << f;
  const bool in_time = elapsed < budget_s;
  if (!in_time) d << "; over the " << budget_s << "s budget";
  return {r.ok() && in_time, d.str()};
}

Outcome fusion() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = fusion_equivalence_suite(60, 0);
  return suite_outcome(r, seconds_since(t0), 60.0);
}

Outcome distributivity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = distributivity_suite(20, 0);
  return suite_outcome(r, seconds_since(t0), 1e9);
}

Outcome baseline_reduction() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = baseline_reduction_suite(10, 0);
  return suite_outcome(r, seconds_since(t0), 1e9);
}

Outcome gradients() {
  Index largest = 0;
  for (const auto& c : grad_check_configs())
    largest = std::max(largest, count_parameters(build_model<double>(c, 0)).total);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = grad_check_suite(0);
  auto out = suite_outcome(r, seconds_since(t0), 300.0);
  out.detail += "; largest model " + std::to_string(largest) + " params";
  if (largest > 5000) {
    out.pass = false;
    out.detail += " (over 5000)";
  }
  return out;
}

Outcome parameter_accounting() {
  Outcome out{true, ""};
  for (const auto& c : testing::count_cases()) {
    const auto n = count_parameters(build_model<float>(c.config, 0));
    const bool ok = n.static_params == c.static_params && n.generators == c.generators &&
                    n.total == c.static_params + c.generators;
    out.pass = out.pass && ok;
    out.detail += c.name + " " + std::to_string(n.total) + (ok ? " = " : " != ") +
                  std::to_string(c.static_params + c.generators) + "; ";
  }
  return out;
}

struct AblationInputs {
  RunConfig config;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

std::string medians(const AblationTable& t) {
  std::string s;
  for (const auto& v : t.variants()) {
    const auto m = t.median_final_loss(v);
    s += v + "=" + (m ? fmt(*m, "%.5f") : std::string("error")) + " ";
  }
  return s;
}

double median_or_inf(const AblationTable& t, const std::string& v) {
  return t.median_final_loss(v).value_or(std::numeric_limits<double>::infinity());
}

Outcome module_sets(const AblationInputs& in) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto t = run_ablation(AblationSuite::ModuleSets, in.config.model, in.config.train, in.seeds, worker_threads());
  const double elapsed = seconds_since(t0);
  const double base = median_or_inf(t, "baseline"), dw = median_or_inf(t, "dw"),
               full = median_or_inf(t, "dw+patch+outproj");
  const double gain = (base - full) / base;
  const bool pass = base > dw && dw > full && gain >= 0.10 && elapsed <= 1800.0;
  return {pass, medians(t) + "| gain " + fmt(100.0 * gain, "%.1f") + "% in " + fmt(elapsed, "%.0f") + "s"};
}

Outcome can_vs_aks(const AblationInputs& in) {
  const auto variants = ablation_variants(AblationSuite::CanVsAks, in.config.model);
  const auto can_params = count_parameters(build_model<float>(variants[0].config, 0)).total;
  const auto aks_params = count_parameters(build_model<float>(variants[1].config, 0)).total;
  const auto t = run_ablation(AblationSuite::CanVsAks, in.config.model, in.config.train, in.seeds, worker_threads());
  const double can = median_or_inf(t, variants[0].name), aks = median_or_inf(t, variants[1].name);
  return {can <= aks && aks_params <= can_params,
          medians(t) + "| params can " + std::to_string(can_params) + " aks " + std::to_string(aks_params)};
}

Outcome condition_sources(const AblationInputs& in) {
  const auto t = run_ablation(AblationSuite::ConditionSources, in.config.model, in.config.train, in.seeds,
                              worker_threads());
  const double all = median_or_inf(t, "all"), cls = median_or_inf(t, "class-only"),
               tim = median_or_inf(t, "timestep-only");
  const bool rows = t.variants().size() == 3 && t.rows.size() == 3 * in.seeds.size();
  std::string d = medians(t) + "| all<=class " + (all <= cls ? "yes" : "NO") + ", class<=timestep " +
                  (cls <= tim ? "yes" : "NO") + ", rows emitted " + (rows ? "3/3" : "missing");
  return {rows && all <= cls && cls <= tim, d};
}

Outcome bench() {
  const BenchShape shape{64, 8, 3, true};
  auto rows = run_bench({shape}, {1, 32}, 21, 0);
  const auto& b32 = rows.back();
  // A corrupted strategy must stop the bench before any timing.
  bool refused = false;
  try {
    run_bench({shape}, {32}, 3, 0, [](const Tensor<float>& y) { return scale(y, 1.001f); });
  } catch (const BenchIntegrityError&) {
    refused = true;
  }
  const bool agree = std::all_of(rows.begin(), rows.end(), [](const BenchRow& r) { return r.max_abs_diff <= 1e-5; });
  std::string d = "B=1 ratio " + fmt(rows.front().speedup(), "%.2f") + ", B=32 ratio " + fmt(b32.speedup(), "%.2f") +
                  " (need >= 1.5), fused-vs-static overhead " + fmt(b32.overhead_pct(), "%.1f") + "%, max diff " +
                  fmt(b32.max_abs_diff) + ", planted mismatch refused " + (refused ? "yes" : "no");
  return {agree && refused && b32.speedup() >= 1.5, d};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "canf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

Outcome determinism(const AblationInputs& in) {
  const fs::path dir = fs::temp_directory_path() / "canf_acceptance";
  fs::remove_all(dir);
  std::vector<std::string> sets{"--set", "width=16", "--set", "depth=2",  "--set", "heads=2",
                                "--set", "cond_dim=16", "--set", "epochs=3", "--set", "n_per_class=16"};
  std::vector<std::string> failures;

  for (const char* sub : {"a", "b"}) {
    auto args = sets;
    args.insert(args.begin(), {"train", "--seed", "11", "--out", (dir / sub).string()});
    if (run_cli(args) != 0) failures.push_back(std::string("train ") + sub);
    if (run_cli({"sample", "--checkpoint", (dir / "a" / "model.canf").string(), "--batch", "8", "--seed", "5",
                 "--out", (dir / sub / "s").string()}) != 0)
      failures.push_back(std::string("sample ") + sub);
  }
  // Loss trajectories: every column except wall-clock.
  auto losses = [](const std::string& csv) {
    std::istringstream lines(csv);
    std::string out;
    for (std::string l; std::getline(lines, l);) {
      std::stringstream ss(l);
      std::string cell;
      for (int k = 0; std::getline(ss, cell, ','); ++k)
        if (k != 9) out += cell + ",";
      out += "\n";
    }
    return out;
  };
  const auto csv_a = slurp(dir / "a" / "train.csv");
  if (csv_a.empty() || losses(csv_a) != losses(slurp(dir / "b" / "train.csv"))) failures.push_back("train losses");
  if (slurp(dir / "a" / "model.canf") != slurp(dir / "b" / "model.canf")) failures.push_back("checkpoint bytes");
  Index pgms = 0;
  for (const auto& e : fs::directory_iterator(dir / "a" / "s")) {
    if (e.path().extension() != ".pgm") continue;
    ++pgms;
    if (slurp(e.path()) != slurp(dir / "b" / "s" / e.path().filename())) failures.push_back("pgm bytes");
  }
  if (pgms != 8) failures.push_back("pgm count " + std::to_string(pgms));

  // Checkpoint save -> load -> save reproduces the same bytes.
  auto loaded = load_checkpoint<float>(dir / "a" / "model.canf");
  const auto reencoded = encode_checkpoint(loaded.model, loaded.config);
  const auto original = slurp(dir / "a" / "model.canf");
  if (std::string(reencoded.begin(), reencoded.end()) != original) failures.push_back("checkpoint roundtrip");

  // Ablation rows reproduce.
  auto small = in.config;
  small.train.epochs = 2;
  const auto t1 = run_ablation(AblationSuite::ConditionSources, small.model, small.train, {7}, worker_threads());
  const auto t2 = run_ablation(AblationSuite::ConditionSources, small.model, small.train, {7}, 1);
  for (std::size_t i = 0; i < t1.rows.size(); ++i) {
    if (t1.rows[i].epochs.size() != t2.rows[i].epochs.size()) failures.push_back("ablate rows");
    for (std::size_t e = 0; e < t1.rows[i].epochs.size(); ++e)
      if (t1.rows[i].epochs[e].eval_loss != t2.rows[i].epochs[e].eval_loss ||
          t1.rows[i].epochs[e].train_loss != t2.rows[i].epochs[e].train_loss)
        failures.push_back("ablate losses " + t1.rows[i].run_id);
  }
  fs::remove_all(dir);

  std::string d = "train x2, sample x2 (" + std::to_string(pgms) + " PGMs), checkpoint roundtrip, ablate x2";
  for (const auto& f : failures) d += "; mismatch: " + f;
  return {failures.empty(), d};
}

}  // namespace
}  // namespace canf

int main(int argc, char** argv) {
  using namespace canf;
  CLI::App app{"acceptance criteria"};
  std::string only, expect_fail;
  std::string config_path = CANF_ABLATION_CONFIG;
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--expect-fail", expect_fail, "criteria allowed to fail without a nonzero exit");
  app.add_option("--config", config_path, "ablation config for criteria 6-8 and 10");
  CLI11_PARSE(app, argc, argv);

  auto parse_set = [](const std::string& s) {
    std::set<int> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
      if (!item.empty()) out.insert(std::stoi(item));
    return out;
  };
  const auto selected = parse_set(only);
  const auto allowed = parse_set(expect_fail);

  AblationInputs inputs;
  inputs.config = parse_config(fs::path(config_path));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"fusion-equivalence", fusion},
      {"distributivity", distributivity},
      {"baseline-reduction", baseline_reduction},
      {"gradient-check", gradients},
      {"parameter-accounting", parameter_accounting},
      {"module-sets-ordering", [&] { return module_sets(inputs); }},
      {"can-vs-kernel-selection", [&] { return can_vs_aks(inputs); }},
      {"condition-sources-ordering", [&] { return condition_sources(inputs); }},
      {"bench-integrity", bench},
      {"determinism-persistence", [&] { return determinism(inputs); }},
  };

  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << " " << criteria[i].first << ": " << o.detail;
    if (!o.pass && allowed.count(id)) std::cout << " [expected]";
    std::cout << std::endl;
    if (!o.pass && !allowed.count(id)) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
