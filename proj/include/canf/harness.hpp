// Desk-scale experiments: synthetic class-conditional images, the training
// loop, ablation suites and the per-sample vs fused benchmark.

#ifndef CANF_HARNESS_HPP_
#define CANF_HARNESS_HPP_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "canf/defaults.hpp"
#include "canf/diffusion.hpp"
#include "canf/model.hpp"

namespace canf {

struct SyntheticDataset {
  std::uint64_t seed = 0;
  Index n_classes = 0;
  Index n_per_class = 0;
  Index image_size = 8;
  Tensor<float> templates;  // [n_classes, 1, S, S]
  Tensor<float> train_images;
  std::vector<Index> train_labels;
  Tensor<float> eval_images;
  std::vector<Index> eval_labels;
};

/// Each class is a smooth random 8x8 template in [-1, 1]; samples add small
/// Gaussian jitter. Templates are redrawn until every pair is more than
/// min_distance apart in L2. Same seed, same bytes.
SyntheticDataset gen_dataset(std::uint64_t seed, Index n_classes, Index n_per_class,
                             Index eval_per_class = 16, Index image_size = 8, double jitter = 0.05);

/// Run-level knobs. Optimizer constants live in defaults.hpp.
struct TrainSettings {
  Index epochs = 12;
  Index batch_size = 32;
  Index n_per_class = 64;
  Index eval_per_class = 16;
  Index eval_repeats = 4;
  double jitter = 0.05;
  double p_null = defaults::kLabelDropout;
  double beta_start = defaults::kBetaStart;
  double beta_end = defaults::kBetaEnd;
  Index sample_steps = 20;
  double guidance = 2.0;
  Index samples_per_class = 4;
  std::uint64_t seed = 0;

  bool operator==(const TrainSettings&) const = default;
};

/// Adam with global-norm clipping; hyperparameters from defaults.hpp.
class Adam {
 public:
  explicit Adam(NamedTensors<float> params);
  void step(const Gradients<float>& grads);
  Index steps() const { return steps_; }

 private:
  NamedTensors<float> params_;
  std::vector<std::vector<float>> m_, v_;
  Index steps_ = 0;
};

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double step_ms = 0.0;
};

struct ExperimentReport {
  std::string run_id;
  std::string suite;
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string config_snapshot;
  double initial_eval_loss = 0.0;
  std::vector<EpochRecord> epochs;
  double fidelity = 0.0;  // mean RMS distance of guided samples to their template
  std::optional<std::string> error;

  double final_eval_loss() const { return epochs.empty() ? initial_eval_loss : epochs.back().eval_loss; }
};

/// Held-out denoising loss over fixed (t, eps) draws derived from the
/// dataset seed only, so every arm is scored on identical noise.
double held_out_loss(const Model<float>& model, const SyntheticDataset& data,
                     const NoiseSchedule& schedule, Index repeats);

/// Mean RMS distance between guided DDIM samples and their class template.
double sample_fidelity(const Model<float>& model, const SyntheticDataset& data,
                       const NoiseSchedule& schedule, const TrainSettings& settings);

/// Trains a fresh model. Throws NumericError on a non-finite loss. If
/// trained_model is given it receives the final weights.
ExperimentReport run_train(const ModelConfig& config, const TrainSettings& settings,
                           const SyntheticDataset& data, Index epochs, std::uint64_t seed,
                           Model<float>* trained_model = nullptr);

enum class AblationSuite { ModuleSets, ConditionSources, ControlMethods, CanVsAks };

std::optional<AblationSuite> ablation_suite_from_string(const std::string& name);
std::string to_string(AblationSuite suite);

struct AblationVariant {
  std::string name;
  ModelConfig config;
};

/// The arms of a suite built on top of base.
std::vector<AblationVariant> ablation_variants(AblationSuite suite, const ModelConfig& base);

/// Largest K <= cap whose bank cost K * (P + d) stays within the generator
/// cost P * d, summed over the condition-aware layers of config.
Index matched_selection_kernels(const ModelConfig& config, Index cap = 4);

struct AblationTable {
  std::string suite;
  std::vector<ExperimentReport> rows;  // variant-major, then seed

  /// Median over seeds of the final held-out loss; absent if every seed failed.
  std::optional<double> median_final_loss(const std::string& variant) const;
  std::vector<std::string> variants() const;
};

/// One run per variant per seed. Rows run on up to `threads` workers; a
/// failing row records its error and the suite continues.
AblationTable run_ablation(AblationSuite suite, const ModelConfig& base,
                           const TrainSettings& settings, const std::vector<std::uint64_t>& seeds,
                           unsigned threads = 1);

/// Worker cap from CANF_THREADS, else hardware concurrency.
unsigned worker_threads();

struct BenchShape {
  Index channels = 64;
  Index size = 8;
  Index kernel = 3;
  bool depthwise = true;
};

struct BenchRow {
  BenchShape shape;
  Index batch = 1;
  double per_sample_ms = 0.0;
  double fused_ms = 0.0;
  double static_ms = 0.0;
  double max_abs_diff = 0.0;

  double speedup() const { return per_sample_ms / fused_ms; }
  double overhead_pct() const { return 100.0 * (fused_ms - static_ms) / static_ms; }
};

class BenchIntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Median forward wall-clock of per-sample loop, fused grouped and static
/// layer. Outputs are compared first; any disagreement above 1e-5 throws
/// BenchIntegrityError and nothing is timed.
/// fused_filter, if set, is applied to the fused output before the check so
/// a faulty strategy can be planted.
std::vector<BenchRow> run_bench(const std::vector<BenchShape>& shapes,
                                const std::vector<Index>& batch_sizes, Index repeats = 5,
                                std::uint64_t seed = 0,
                                const std::function<Tensor<float>(const Tensor<float>&)>& fused_filter = {});

std::string bench_csv(const std::vector<BenchRow>& rows);

/// Comma-separated table, one line per epoch per report (epoch 0 is the
/// initial evaluation).
std::string reports_csv(const std::vector<ExperimentReport>& reports);
/// One JSON object per line with the same fields.
std::string reports_jsonl(const std::vector<ExperimentReport>& reports);

}  // namespace canf

#endif  // CANF_HARNESS_HPP_
