#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "canf/config.hpp"
#include "canf/harness.hpp"
#include "canf/ops.hpp"
#include "json.hpp"

namespace canf {
namespace {

TEST(Dataset, SameSeedSameBytes) {
  const auto a = gen_dataset(5, 4, 8), b = gen_dataset(5, 4, 8), c = gen_dataset(6, 4, 8);
  EXPECT_TRUE(bitwise_equal(a.train_images, b.train_images));
  EXPECT_TRUE(bitwise_equal(a.eval_images, b.eval_images));
  EXPECT_EQ(a.train_labels, b.train_labels);
  EXPECT_FALSE(bitwise_equal(a.templates, c.templates));
}

TEST(Dataset, ShapesLabelsAndRange) {
  const auto d = gen_dataset(1, 5, 6, 3);
  EXPECT_EQ(d.templates.shape(), (Shape{5, 1, 8, 8}));
  EXPECT_EQ(d.train_images.shape(), (Shape{30, 1, 8, 8}));
  EXPECT_EQ(d.eval_images.shape(), (Shape{15, 1, 8, 8}));
  std::vector<Index> per_class(5, 0);
  for (Index l : d.train_labels) ++per_class.at(static_cast<std::size_t>(l));
  for (Index n : per_class) EXPECT_EQ(n, 6);
  for (float v : d.train_images.data()) ASSERT_LE(std::abs(v), 1.0f);
}

TEST(Dataset, TemplatesAreSeparatedAndSamplesNearTheirTemplate) {
  const auto d = gen_dataset(2, 8, 4, 4, 8, 0.05);
  const Index p = 64;
  auto dist = [&](const Tensor<float>& a, Index i, const Tensor<float>& b, Index j) {
    double s = 0.0;
    for (Index k = 0; k < p; ++k) s += std::pow(a[i * p + k] - b[j * p + k], 2);
    return std::sqrt(s);
  };
  for (Index i = 0; i < 8; ++i)
    for (Index j = i + 1; j < 8; ++j) EXPECT_GT(dist(d.templates, i, d.templates, j), 0.5);
  for (Index n = 0; n < 32; ++n) {
    const Index own = d.train_labels[static_cast<std::size_t>(n)];
    const double mine = dist(d.train_images, n, d.templates, own);
    for (Index k = 0; k < 8; ++k)
      if (k != own) {
        EXPECT_LT(mine, dist(d.train_images, n, d.templates, k));
      }
  }
}

TEST(Dataset, RejectsBadArguments) {
  EXPECT_THROW(gen_dataset(0, 1, 4), ConfigError);
  EXPECT_THROW(gen_dataset(0, 4, 0), ConfigError);
  EXPECT_THROW(gen_dataset(0, 4, 4, 4, 8, -0.1), ConfigError);
}

RunConfig tiny() {
  RunConfig c;
  c.model.width = 16;
  c.model.depth = 2;
  c.model.heads = 2;
  c.model.mlp_ratio = 2;
  c.model.cond_dim = 8;
  c.model.n_classes = 3;
  c.model.n_timesteps = 100;
  c.train.epochs = 2;
  c.train.batch_size = 8;
  c.train.n_per_class = 8;
  c.train.eval_per_class = 4;
  c.train.eval_repeats = 1;
  c.train.sample_steps = 5;
  c.train.samples_per_class = 1;
  return c;
}

TEST(Train, DeterministicAndLearning) {
  auto c = tiny();
  c.train.epochs = 4;
  const auto data = gen_dataset(3, 3, 8, 4);
  const auto a = run_train(c.model, c.train, data, c.train.epochs, 3);
  const auto b = run_train(c.model, c.train, data, c.train.epochs, 3);
  ASSERT_EQ(a.epochs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.epochs[i].train_loss, b.epochs[i].train_loss);
    EXPECT_EQ(a.epochs[i].eval_loss, b.epochs[i].eval_loss);
  }
  EXPECT_EQ(a.fidelity, b.fidelity);
  EXPECT_LT(a.final_eval_loss(), a.initial_eval_loss);
  EXPECT_EQ(a.config_hash.size(), 16u);
  EXPECT_TRUE(std::isfinite(a.fidelity));
}

TEST(Train, HeldOutLossIgnoresTrainingSeed) {
  const auto c = tiny();
  const auto data = gen_dataset(3, 3, 8, 4);
  const auto s = make_schedule(c.model.n_timesteps);
  auto m = build_model<float>(c.model, 1);
  EXPECT_EQ(held_out_loss(m, data, s, 2), held_out_loss(m, data, s, 2));
}

TEST(Ablation, SuiteNames) {
  for (auto s : {AblationSuite::ModuleSets, AblationSuite::ConditionSources, AblationSuite::ControlMethods,
                 AblationSuite::CanVsAks}) {
    EXPECT_EQ(ablation_suite_from_string(to_string(s)), s);
  }
  EXPECT_FALSE(ablation_suite_from_string("modules").has_value());
}

std::vector<std::string> names(const std::vector<AblationVariant>& vs) {
  std::vector<std::string> out;
  for (const auto& v : vs) out.push_back(v.name);
  return out;
}

TEST(Ablation, VariantLists) {
  const ModelConfig base;
  EXPECT_EQ(names(ablation_variants(AblationSuite::ModuleSets, base)),
            (std::vector<std::string>{"baseline", "dw", "dw+patch", "dw+head", "dw+patch+outproj"}));
  EXPECT_EQ(names(ablation_variants(AblationSuite::ConditionSources, base)),
            (std::vector<std::string>{"timestep-only", "class-only", "all"}));
  const auto control = ablation_variants(AblationSuite::ControlMethods, base);
  EXPECT_EQ(control.size(), 6u);
  for (const auto& v : control) {
    EXPECT_NO_THROW(v.config.validate()) << v.name;
    if (v.name.starts_with("dit:")) {
      EXPECT_FALSE(v.config.skip_connections) << v.name;
    }
  }
  const auto modules = ablation_variants(AblationSuite::ModuleSets, base);
  EXPECT_FALSE(modules[0].config.control.can);
  EXPECT_TRUE(modules[0].config.cond_aware_set.empty());
  EXPECT_EQ(modules[4].config.cond_aware_set,
            (std::set<LayerKind>{LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj}));
}

TEST(Ablation, KernelSelectionFitsGeneratorBudget) {
  ModelConfig base;
  base.width = 32;
  base.depth = 2;
  base.heads = 2;
  base.cond_dim = 32;
  const auto vs = ablation_variants(AblationSuite::CanVsAks, base);
  ASSERT_EQ(vs.size(), 2u);
  const auto can = count_parameters(build_model<float>(vs[0].config, 0));
  const auto aks = count_parameters(build_model<float>(vs[1].config, 0));
  EXPECT_EQ(vs[1].name, "aks-k" + std::to_string(vs[1].config.selection_kernels));
  EXPECT_GE(vs[1].config.selection_kernels, 1);
  EXPECT_LE(aks.total, can.total);
  EXPECT_EQ(aks.static_params, can.static_params);
}

TEST(Ablation, RunsEveryRowAndFormatsReports) {
  auto c = tiny();
  c.train.epochs = 1;
  c.train.samples_per_class = 0;
  const auto table = run_ablation(AblationSuite::ConditionSources, c.model, c.train, {1, 2}, 2);
  ASSERT_EQ(table.rows.size(), 6u);
  EXPECT_EQ(table.variants(), (std::vector<std::string>{"timestep-only", "class-only", "all"}));
  for (const auto& r : table.rows) {
    EXPECT_FALSE(r.error.has_value()) << *r.error;
    EXPECT_EQ(r.run_id, "condition-sources/" + r.variant + "/s" + std::to_string(r.seed));
  }
  ASSERT_TRUE(table.median_final_loss("all").has_value());
  const auto again = run_ablation(AblationSuite::ConditionSources, c.model, c.train, {1, 2}, 1);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(table.rows[i].final_eval_loss(), again.rows[i].final_eval_loss());

  const auto csv = reports_csv(table.rows);
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "run_id,suite,variant,seed,config_hash,epoch,train_loss,eval_loss,fidelity,step_ms,error");
  Index n = 0;
  for (std::string l; std::getline(lines, l);) ++n;
  EXPECT_EQ(n, 12);

  std::istringstream jl(reports_jsonl(table.rows));
  std::string first;
  std::getline(jl, first);
  const auto j = nlohmann::json::parse(first);
  EXPECT_EQ(j["epoch"], 0);
  EXPECT_TRUE(j["train_loss"].is_null());
  EXPECT_EQ(j["suite"], "condition-sources");
}

TEST(Ablation, FailingRowIsRecordedNotFatal) {
  auto c = tiny();
  c.train.epochs = 1;
  c.train.sample_steps = 1000;  // more than n_timesteps
  c.train.samples_per_class = 1;
  const auto table = run_ablation(AblationSuite::ConditionSources, c.model, c.train, {1}, 1);
  ASSERT_EQ(table.rows.size(), 3u);
  for (const auto& r : table.rows) {
    ASSERT_TRUE(r.error.has_value());
    EXPECT_NE(r.error->find("sample_steps"), std::string::npos);
  }
  EXPECT_FALSE(table.median_final_loss("all").has_value());
  EXPECT_NE(reports_csv(table.rows).find("sample_steps"), std::string::npos);
}

TEST(Bench, ProducesRowsAndChecksAgreement) {
  const auto rows = run_bench({{8, 6, 3, true}, {4, 6, 1, false}}, {1, 4}, 3, 0);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_LE(r.max_abs_diff, 1e-5);
    EXPECT_GT(r.per_sample_ms, 0.0);
    EXPECT_GT(r.fused_ms, 0.0);
    EXPECT_GT(r.static_ms, 0.0);
  }
  EXPECT_EQ(bench_csv(rows).substr(0, bench_csv(rows).find('\n')),
            "channels,size,kernel,depthwise,batch,per_sample_ms,fused_ms,static_ms,speedup,overhead_pct,max_abs_diff");
  EXPECT_THROW(run_bench({{8, 6, 3, true}}, {1}, 2, 0), ConfigError);
  // one flipped output value is enough to withhold every timing
  auto corrupt = [](const Tensor<float>& y) {
    auto v = std::vector<float>(y.data().begin(), y.data().end());
    v[3] += 1e-3f;
    return Tensor<float>(y.shape(), std::move(v));
  };
  EXPECT_THROW(run_bench({{8, 6, 3, true}}, {4}, 3, 0, corrupt), BenchIntegrityError);
}

}  // namespace
}  // namespace canf
