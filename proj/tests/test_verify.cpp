#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "coswin/verify.hpp"

using namespace coswin;
using namespace coswin::verify;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 8;
  cfg.in_channels = 2;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.stage_depths = {2};
  cfg.num_heads = {2};
  cfg.window_size = 2;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 4;
  cfg.drop_path_max = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("swin collapse: gamma 0 matches the conv-free variant") {
  auto rep = swin_equivalence_check<float>(small_cfg(), 3, /*gamma=*/0.0, 8, 2);
  INFO("forward diff ", rep.max_forward_diff, " grad rel ", rep.max_grad_rel, " at ",
       rep.first_divergence);
  CHECK(rep.pass);
  CHECK(rep.max_forward_diff < 1e-6);
  CHECK(rep.max_grad_rel < 1e-5);
}

TEST_CASE("swin collapse negative control: gamma 0.1 must fail") {
  auto rep = swin_equivalence_check<float>(small_cfg(), 3, /*gamma=*/0.1, 8, 2);
  CHECK_FALSE(rep.pass);
  CHECK_FALSE(rep.first_divergence.empty());
}

TEST_CASE("swin collapse in double precision is below 1e-12") {
  auto rep = swin_equivalence_check<double>(small_cfg(), 4, 0.0, 4, 2, 1e-12, 1e-10);
  INFO("forward diff ", rep.max_forward_diff);
  CHECK(rep.max_forward_diff < 1e-12);
}

TEST_CASE("fusion gradient probe holds all three properties") {
  auto rep = fusion_gradient_probe(6, 6, 4, 12);
  INFO("inner ", rep.gamma_inner_product_rel, " linearity ", rep.linearity_rel,
       " zero-path ", rep.zero_gamma_input_grad);
  CHECK(rep.gamma_inner_product_rel < 1e-6);
  CHECK(rep.linearity_rel < 1e-6);
  CHECK(rep.zero_gamma_input_grad == 0.0);
  CHECK(rep.pass);
}

TEST_CASE("attention oracle sweep across window sizes and head counts") {
  for (std::size_t m : {2, 4}) {
    for (std::size_t heads : {1, 2, 3}) {
      CHECK(attention_oracle_max_diff<float>(m, heads, 10, 90 + m * 10 + heads) < 1e-5);
    }
  }
  CHECK(attention_oracle_max_diff<float>(7, 2, 3, 97) < 1e-5);
}

TEST_CASE("variant mapping matches the ablation table rows") {
  auto a = variant_from_tag('a');
  CHECK((!a.conv1 && !a.conv2 && !a.gamma));
  auto b = variant_from_tag('b');
  CHECK((b.conv1 && b.conv2 && !b.gamma));
  auto c = variant_from_tag('c');
  CHECK((c.conv1 && !c.conv2 && c.gamma));
  auto d = variant_from_tag('d');
  CHECK((d.conv1 && d.conv2 && d.gamma));
  CHECK_THROWS_AS(variant_from_tag('x'), ConfigError);
}

TEST_CASE("variant a has no enhancer parameters; variant b has no gamma") {
  CoSwinModel<float> a(apply_variant(small_cfg(), variant_from_tag('a')), 1);
  for (auto& [name, p] : a.parameters()) {
    CHECK(name.find("enhancer") == std::string::npos);
  }
  CoSwinModel<float> b(apply_variant(small_cfg(), variant_from_tag('b')), 1);
  bool has_conv = false;
  for (auto& [name, p] : b.parameters()) {
    CHECK(name.find("gamma") == std::string::npos);  // frozen-at-1, not optimized
    has_conv |= name.find("enhancer.conv2.weight") != std::string::npos;
  }
  CHECK(has_conv);
  // variant c: single conv closing the shapes directly, with gamma
  CoSwinModel<float> c(apply_variant(small_cfg(), variant_from_tag('c')), 1);
  bool has_gamma = false, has_conv2 = false;
  for (auto& [name, p] : c.parameters()) {
    if (name.find("enhancer.conv1.weight") != std::string::npos) {
      CHECK(p->shape() == Shape{3, 3, 8, 8});  // expansion disabled
    }
    has_gamma |= name.find("gamma") != std::string::npos;
    has_conv2 |= name.find("conv2") != std::string::npos;
  }
  CHECK(has_gamma);
  CHECK_FALSE(has_conv2);
}

TEST_CASE("ablation harness produces a four-row report with matching counts") {
  auto ds = data::synthetic_dataset(13, 24, 8, 8, 2, 4);
  ds.mean.assign(2, 0.5);
  ds.stddev.assign(2, 0.25);
  auto test = data::synthetic_dataset(14, 8, 8, 8, 2, 4);
  test.mean.assign(2, 0.5);
  test.stddev.assign(2, 0.25);
  train::TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 8;
  tcfg.warmup_epochs = 0.5;
  tcfg.augment = false;

  auto report = run_ablation(ds, &test, small_cfg(), tcfg, {'a', 'b', 'c', 'd'}, {7});
  REQUIRE(report.runs.size() == 4);
  for (const auto& run : report.runs) {
    CHECK_FALSE(run.failed);
    CHECK(run.param_count == run.expected_params);
    CHECK(run.test_top1 >= 0.0);
  }
  CHECK(report.runs[0].param_count < report.runs[2].param_count);  // a < c
  CHECK(report.runs[2].param_count < report.runs[1].param_count);  // c < b
  CHECK(report.runs[1].param_count ==
        report.runs[3].param_count - small_cfg().total_blocks());  // d = b + gammas

  const auto md = report.to_markdown();
  CHECK(md.find("| a |") != std::string::npos);
  CHECK(md.find("| d |") != std::string::npos);
  CHECK(md.find("Convolution-1") != std::string::npos);
  CHECK(md.find("Influence Weight") != std::string::npos);
  const auto csv = report.to_csv();
  CHECK(csv.find("variant,seed,params") != std::string::npos);

  // single-variant run: one row
  auto single = run_ablation(ds, nullptr, small_cfg(), tcfg, {'a'}, {7});
  CHECK(single.runs.size() == 1);
}

TEST_CASE("ablation records per-variant failures without aborting the rest") {
  auto ds = data::synthetic_dataset(15, 16, 16, 16, 1, 4);  // wrong geometry for cfg
  ds.mean.assign(1, 0.5);
  ds.stddev.assign(1, 0.25);
  train::TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.batch_size = 8;
  tcfg.warmup_epochs = 0;
  auto report = run_ablation(ds, nullptr, small_cfg(), tcfg, {'a', 'd'}, {1});
  REQUIRE(report.runs.size() == 2);
  for (const auto& run : report.runs) {
    CHECK(run.failed);
    CHECK_FALSE(run.error.empty());
  }
}

TEST_CASE("gradcheck report carries eps, coverage and argmax positions") {
  Rng rng(41);
  auto x = Tensor<double>::randn(rng, {3, 3});
  auto r = Tensor<double>::randn(rng, {3, 3});
  auto rep = finite_diff_gradcheck([&] { return sum(mul(relu(x), r)); }, {{"x", &x}},
                                   1e-4, 7);
  CHECK(rep.eps == 1e-4);
  CHECK(rep.precision == "double");
  REQUIRE(rep.items.size() == 1);
  CHECK(rep.items[0].name == "x");
  CHECK(rep.items[0].coords_checked == 9);
  CHECK(rep.items[0].argmax_flat < 9);
  CHECK_THROWS_AS(
      finite_diff_gradcheck([&] { return relu(x); }, {{"x", &x}}, 1e-4, 7),
      ContractError);
}
