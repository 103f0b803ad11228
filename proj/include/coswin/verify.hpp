#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "coswin/model.hpp"
#include "coswin/train.hpp"

namespace coswin::verify {

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0;
  std::size_t argmax_flat = 0;
  double analytic = 0, numeric = 0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  double eps = 1e-4;
  std::string precision = "double";
  std::vector<GradCheckItem> items;

  double worst() const {
    double m = 0;
    for (const auto& it : items) m = std::max(m, it.max_rel_err);
    return m;
  }
  const GradCheckItem* worst_item() const {
    const GradCheckItem* w = nullptr;
    for (const auto& it : items) {
      if (!w || it.max_rel_err > w->max_rel_err) w = &it;
    }
    return w;
  }
  bool pass(double tol) const { return worst() < tol; }
};

// Central differences (f(x+eps) - f(x-eps)) / 2eps against reverse-mode
// gradients. loss_fn must be a pure function of the listed parameters.
// All coordinates are probed for tensors up to 512 elements, 64 seeded
// random coordinates otherwise. rel = |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport finite_diff_gradcheck(
    const std::function<Tensor<double>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<double>*>>& params, double eps = 1e-4,
    std::uint64_t seed = 0) {
  GradCheckReport report;
  report.eps = eps;
  std::vector<std::vector<double>> analytic;
  {
    GradTape<double> tape;
    for (const auto& [name, p] : params) tape.watch(*p);
    auto loss = loss_fn();
    if (loss.numel() != 1) {
      throw ContractError("finite_diff_gradcheck: function output is not scalar, shape " +
                          shape_str(loss.shape()));
    }
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      auto g = tape.grad(*p);
      analytic.emplace_back(g.data().begin(), g.data().end());
    }
  }  // tape dies here; the probes below run tape-free

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, p] = params[pi];
    GradCheckItem item;
    item.name = name;
    const std::size_t n = p->numel();
    std::vector<std::size_t> coords;
    if (n <= 512) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      Rng rng = Rng::for_stream(seed, "gradcheck-" + name);
      std::set<std::size_t> picked;
      while (picked.size() < 64) picked.insert(rng.below(n));
      coords.assign(picked.begin(), picked.end());
    }
    auto data = p->mutable_data();
    for (const std::size_t c : coords) {
      const double orig = data[c];
      data[c] = orig + eps;
      const double fp = loss_fn().item();
      data[c] = orig - eps;
      const double fm = loss_fn().item();
      data[c] = orig;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic[pi][c];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > item.max_rel_err) {
        item.max_rel_err = rel;
        item.argmax_flat = c;
        item.analytic = a;
        item.numeric = numeric;
      }
      ++item.coords_checked;
    }
    report.items.push_back(std::move(item));
  }
  return report;
}

// Forward-identity with a deliberately wrong backward rule (off by 1.5x).
// Negative control: the gradcheck suite must flag it.
template <typename T>
Tensor<T> buggy_identity(const Tensor<T>& x) {
  Tensor<T> out = x.clone();
  if (auto* tape = detail::common_tape<T>({&x})) {
    const int nx = x.node();
    const int no = tape->add_node(out.numel());
    tape->set_backward(no, [nx, no](GradTape<T>& tp) {
      if (nx >= 0) detail::axpy(tp.grad_acc(nx), tp.grad_of(no), T(1.5));
    });
    out.bind(tape, no);
  }
  return out;
}

// ---------------------------------------------------------------------------
// scalar-loop attention oracle (Eqs. 6-8), sharing no matrix code with the
// fast path
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> attention_oracle(const Tensor<T>& window, const AttentionP<T>& p,
                           std::size_t heads,
                           const std::optional<Tensor<T>>& mask_slice = std::nullopt) {
  const std::size_t m2 = window.dim(0), d = window.dim(1);
  const std::size_t dh = d / heads;
  const std::size_t m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(m2))));
  const auto rel = relative_index_table(m);
  auto xv = window.data();
  auto wq = p.qkv_weight.data();
  auto bq = p.qkv_bias.data();
  auto tb = p.bias_table.data();
  const std::size_t nheads = heads;

  auto qkv_at = [&](std::size_t token, std::size_t which, std::size_t head,
                    std::size_t t) -> double {
    const std::size_t col = which * d + head * dh + t;
    double acc = static_cast<double>(bq[col]);
    for (std::size_t c = 0; c < d; ++c) {
      acc += static_cast<double>(xv[token * d + c]) * static_cast<double>(wq[c * 3 * d + col]);
    }
    return acc;
  };

  std::vector<double> ctx(m2 * d, 0.0);
  for (std::size_t h = 0; h < nheads; ++h) {
    for (std::size_t i = 0; i < m2; ++i) {
      // explicit per-pair logits
      std::vector<double> logits(m2);
      for (std::size_t j = 0; j < m2; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < dh; ++t) {
          dot += qkv_at(i, 0, h, t) * qkv_at(j, 1, h, t);
        }
        double l = dot / std::sqrt(static_cast<double>(dh));
        l += static_cast<double>(tb[static_cast<std::size_t>(rel[i * m2 + j]) * nheads + h]);
        if (mask_slice.has_value()) {
          l += static_cast<double>(mask_slice->data()[i * m2 + j]);
        }
        logits[j] = l;
      }
      double maxv = logits[0];
      for (double l : logits) maxv = std::max(maxv, l);
      std::vector<double> expv(m2);
      double denom = 0;
      for (std::size_t j = 0; j < m2; ++j) {
        expv[j] = std::exp(logits[j] - maxv);
        denom += expv[j];
      }
      for (std::size_t t = 0; t < dh; ++t) {
        double acc = 0;
        for (std::size_t j = 0; j < m2; ++j) {
          acc += (expv[j] / denom) * qkv_at(j, 2, h, t);
        }
        ctx[i * d + h * dh + t] = acc;
      }
    }
  }

  Tensor<T> out = Tensor<T>::zeros({m2, d});
  auto ov = out.mutable_data();
  auto pw = p.proj_weight.data();
  auto pb = p.proj_bias.data();
  for (std::size_t i = 0; i < m2; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = static_cast<double>(pb[c]);
      for (std::size_t cc = 0; cc < d; ++cc) {
        acc += ctx[i * d + cc] * static_cast<double>(pw[cc * d + c]);
      }
      ov[i * d + c] = static_cast<T>(acc);
    }
  }
  return out;
}

// Random attention parameters for oracle and gradcheck fixtures.
template <typename T>
AttentionP<T> random_attention(Rng& rng, std::size_t d, std::size_t heads, std::size_t m,
                               double scale = 0.5) {
  AttentionP<T> p;
  p.qkv_weight = Tensor<T>::randn(rng, {d, 3 * d}, scale);
  p.qkv_bias = Tensor<T>::randn(rng, {3 * d}, scale);
  p.proj_weight = Tensor<T>::randn(rng, {d, d}, scale);
  p.proj_bias = Tensor<T>::randn(rng, {d}, scale);
  p.bias_table = Tensor<T>::randn(rng, {(2 * m - 1) * (2 * m - 1), heads}, scale);
  return p;
}

template <typename T>
EnhancerP<T> random_enhancer(Rng& rng, std::size_t d, std::size_t hidden, bool conv2,
                             bool gamma, double gamma_value = 0.3, double scale = 0.5) {
  EnhancerP<T> e;
  e.conv1_weight = Tensor<T>::randn(rng, {3, 3, d, hidden}, scale);
  e.conv1_bias = Tensor<T>::randn(rng, {hidden}, scale);
  if (conv2) {
    e.conv2_weight = Tensor<T>::randn(rng, {3, 3, hidden, d}, scale);
    e.conv2_bias = Tensor<T>::randn(rng, {d}, scale);
  }
  if (gamma) e.gamma = Tensor<T>::scalar(static_cast<T>(gamma_value));
  return e;
}

// FD probes step each coordinate by eps; a relu pre-activation within that
// step of zero would put the kink inside the probe interval and corrupt the
// numeric derivative. Shifts conv1 bias channels until every pre-activation
// on the probe input clears the margin, so fixtures are differentiable at
// the probed point.
inline void clear_relu_margin(EnhancerP<double>& e, const Tensor<double>& grid,
                              double margin = 1e-2) {
  const std::size_t co = e.conv1_bias.numel();
  for (int guard = 0; guard < 64; ++guard) {
    auto pre = conv2d_3x3(grid.detached(), e.conv1_weight.detached(),
                          e.conv1_bias.detached());
    std::vector<bool> bad(co, false);
    bool any = false;
    auto pv = pre.data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (std::abs(pv[i]) < margin) {
        bad[i % co] = true;
        any = true;
      }
    }
    if (!any) return;
    auto bv = e.conv1_bias.mutable_data();
    for (std::size_t c = 0; c < co; ++c) {
      if (bad[c]) bv[c] += 3.7 * margin;
    }
  }
  throw ContractError("clear_relu_margin: no kink-free bias shift found");
}

template <typename T>
BlockP<T> make_test_block(Rng& rng, std::size_t d, std::size_t heads, std::size_t m,
                          bool shifted, double drop_path = 0.0) {
  BlockP<T> blk;
  blk.shifted = shifted;
  blk.drop_path = drop_path;
  blk.norm1 = {Tensor<T>::randn(rng, {d}, 0.2), Tensor<T>::randn(rng, {d}, 0.2)};
  // keep LN gains near 1 so activations stay in a well-scaled range
  for (auto& v : blk.norm1.gain.mutable_data()) v += T(1);
  blk.attn = random_attention<T>(rng, d, heads, m, 0.3);
  const std::size_t hidden_c = static_cast<std::size_t>(
      std::ceil(1.10 * static_cast<double>(d) - 1e-9));
  blk.enhancer = random_enhancer<T>(rng, d, hidden_c, /*conv2=*/true, /*gamma=*/true, 0.3, 0.3);
  blk.norm2 = {Tensor<T>::randn(rng, {d}, 0.2), Tensor<T>::randn(rng, {d}, 0.2)};
  for (auto& v : blk.norm2.gain.mutable_data()) v += T(1);
  const std::size_t mh = 2 * d;
  blk.fc1 = {Tensor<T>::randn(rng, {d, mh}, 0.3), Tensor<T>::randn(rng, {mh}, 0.3)};
  blk.fc2 = {Tensor<T>::randn(rng, {mh, d}, 0.3), Tensor<T>::randn(rng, {d}, 0.3)};
  return blk;
}

// Differential test of the fast attention path against the scalar oracle.
// Returns the max abs diff over `cases` random windows.
template <typename T>
double attention_oracle_max_diff(std::size_t m, std::size_t heads, std::size_t cases,
                                 std::uint64_t seed, bool masked = false) {
  double worst = 0;
  for (std::size_t k = 0; k < cases; ++k) {
    Rng rng = Rng::for_stream(seed, "attn-oracle-" + std::to_string(m) + "-" +
                                        std::to_string(heads) + "-" + std::to_string(k));
    const std::size_t d = heads * (1 + rng.below(4));  // head dim 1..4
    auto p = random_attention<T>(rng, d, heads, m);
    auto window = Tensor<T>::randn(rng, {m * m, d});
    std::optional<Tensor<T>> mask;
    if (masked) {
      mask = Tensor<T>::zeros({m * m, m * m});
      auto mv = mask->mutable_data();
      for (auto& v : mv) v = rng.bernoulli(0.3) ? T(-1e4) : T(0);
      // keep the diagonal open so no row is fully masked
      for (std::size_t i = 0; i < m * m; ++i) mv[i * m * m + i] = T(0);
    }
    std::optional<Tensor<T>> mask3;
    if (mask) mask3 = reshape(*mask, {std::size_t{1}, m * m, m * m});
    auto fast = window_attention(reshape(window, {std::size_t{1}, m * m, d}),
                                 p, heads, mask3);
    auto ref = attention_oracle<T>(window, p, heads, mask);
    auto fv = fast.data();
    auto rv = ref.data();
    for (std::size_t i = 0; i < fv.size(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(fv[i] - rv[i])));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Swin-collapse equivalence (fusion with zero influence weight == no branch)
// ---------------------------------------------------------------------------

struct EquivalenceReport {
  bool pass = false;
  double max_forward_diff = 0;
  double max_grad_rel = 0;
  std::string first_divergence;
  std::size_t batches = 0;
};

// Builds, from one seed, the full model with the influence weight forced to
// gamma_value, and the conv-branch-free model; shared parameters are
// bit-identical by construction. Compares forward logits and shared-parameter
// gradients over random batches.
template <typename T>
EquivalenceReport swin_equivalence_check(const ModelConfig& base, std::uint64_t seed,
                                         double gamma_value, std::size_t n_batches = 20,
                                         std::size_t batch = 2, double fwd_tol = 1e-6,
                                         double grad_tol = 1e-5) {
  ModelConfig full_cfg = base;
  full_cfg.conv1_enabled = true;
  full_cfg.conv2_enabled = true;
  full_cfg.gamma_enabled = true;
  full_cfg.gamma_init = gamma_value;
  ModelConfig a_cfg = base;
  a_cfg.conv1_enabled = false;
  a_cfg.conv2_enabled = false;
  a_cfg.gamma_enabled = false;

  CoSwinModel<T> full(full_cfg, seed);
  CoSwinModel<T> plain(a_cfg, seed);

  EquivalenceReport rep;
  rep.batches = n_batches;
  auto plain_params = plain.parameters();
  auto full_params = full.parameters();

  for (std::size_t bi = 0; bi < n_batches; ++bi) {
    Rng rng = Rng::for_stream(seed, "equiv-batch-" + std::to_string(bi));
    auto images = Tensor<T>::randn(
        rng, {batch, base.image_h, base.image_w, base.in_channels});
    std::vector<int> labels(batch);
    for (auto& y : labels) y = static_cast<int>(rng.below(base.num_classes));

    GradTape<T> tape_f, tape_p;
    full.watch_all(tape_f);
    plain.watch_all(tape_p);
    auto logits_f = full.forward(images, RunMode::kEval);
    auto logits_p = plain.forward(images, RunMode::kEval);
    auto lf = logits_f.data();
    auto lp = logits_p.data();
    for (std::size_t i = 0; i < lf.size(); ++i) {
      rep.max_forward_diff = std::max(
          rep.max_forward_diff, static_cast<double>(std::abs(lf[i] - lp[i])));
    }
    if (rep.max_forward_diff >= fwd_tol && rep.first_divergence.empty()) {
      rep.first_divergence = "forward logits (batch " + std::to_string(bi) + ")";
    }
    tape_f.backward(cross_entropy_mean(logits_f, labels));
    tape_p.backward(cross_entropy_mean(logits_p, labels));
    for (auto& [name, pp] : plain_params) {
      Tensor<T>* fp = nullptr;
      for (auto& [fname, fptr] : full_params) {
        if (fname == name) {
          fp = fptr;
          break;
        }
      }
      if (!fp) continue;
      auto gp = tape_p.grad(*pp);
      auto gf = tape_f.grad(*fp);
      auto gpv = gp.data();
      auto gfv = gf.data();
      for (std::size_t i = 0; i < gpv.size(); ++i) {
        const double a = gfv[i], b = gpv[i];
        const double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
        if (rel > rep.max_grad_rel) rep.max_grad_rel = rel;
        if (rel >= grad_tol && rep.first_divergence.empty()) {
          rep.first_divergence = "grad " + name;
        }
      }
    }
  }
  rep.pass = rep.max_forward_diff < fwd_tol && rep.max_grad_rel < grad_tol;
  return rep;
}

// ---------------------------------------------------------------------------
// fusion gradient probe (the Appendix gradient path through the conv branch)
// ---------------------------------------------------------------------------

struct FusionProbeReport {
  double gamma_inner_product_rel = 0;  // dL/dGamma vs <upstream, F_conv>
  double linearity_rel = 0;            // conv grads at 2c vs twice those at c
  double zero_gamma_input_grad = 0;    // max |grad through conv path| at 0
  bool pass = false;
};

inline FusionProbeReport fusion_gradient_probe(std::size_t h, std::size_t w, std::size_t d,
                                               std::uint64_t seed) {
  Rng rng = Rng::for_stream(seed, "fusion-probe");
  const std::size_t hidden = static_cast<std::size_t>(
      std::ceil(1.10 * static_cast<double>(d) - 1e-9));
  auto grid_v = Tensor<double>::randn(rng, {h, w, d});
  auto a = Tensor<double>::randn(rng, {h, w, d});
  auto upstream = Tensor<double>::randn(rng, {h, w, d});
  FusionProbeReport rep;

  // y = a + gamma * F_conv(x); loss = <upstream, y>
  EnhancerP<double> e =
      random_enhancer<double>(rng, d, hidden, /*conv2=*/true, /*gamma=*/true, 0.7);

  // (i) dL/dGamma equals <upstream, F_conv(x)>
  {
    GradTape<double> tape;
    tape.watch(e.gamma);
    auto y = add(a, local_feature_enhance(grid_v, e));
    tape.backward(sum(mul(y, upstream)));
    const double dgamma = tape.grad(e.gamma).item();
    // independent F_conv without the weighting
    EnhancerP<double> plain = e;
    plain.gamma = Tensor<double>{};
    auto f = local_feature_enhance(grid_v, plain);
    double inner = 0;
    auto fv = f.data();
    auto uv = upstream.data();
    for (std::size_t i = 0; i < fv.size(); ++i) inner += fv[i] * uv[i];
    rep.gamma_inner_product_rel =
        std::abs(dgamma - inner) / std::max({std::abs(dgamma), std::abs(inner), 1e-8});
  }

  // (ii) conv-weight gradients scale exactly linearly in gamma
  {
    auto grads_at = [&](double gv) {
      EnhancerP<double> enh = e;
      enh.gamma = Tensor<double>::scalar(gv);
      GradTape<double> tape;
      tape.watch(enh.conv1_weight);
      tape.watch(enh.conv2_weight);
      auto y = add(a, local_feature_enhance(grid_v, enh));
      tape.backward(sum(mul(y, upstream)));
      std::vector<double> g;
      for (const double v : tape.grad(enh.conv1_weight).data()) g.push_back(v);
      for (const double v : tape.grad(enh.conv2_weight).data()) g.push_back(v);
      return g;
    };
    const auto g1 = grads_at(0.4);
    const auto g2 = grads_at(0.8);
    for (std::size_t i = 0; i < g1.size(); ++i) {
      const double a2 = 2.0 * g1[i];
      const double rel = std::abs(g2[i] - a2) / std::max({std::abs(g2[i]), std::abs(a2), 1e-8});
      rep.linearity_rel = std::max(rep.linearity_rel, rel);
    }
  }

  // (iii) gradient reaching x through the conv path is exactly zero at gamma=0
  {
    EnhancerP<double> enh = e;
    enh.gamma = Tensor<double>::scalar(0.0);
    Tensor<double> x = grid_v.clone();
    GradTape<double> tape;
    tape.watch(x);
    auto y = add(a, local_feature_enhance(x, enh));
    tape.backward(sum(mul(y, upstream)));
    for (const double v : tape.grad(x).data()) {
      rep.zero_gamma_input_grad = std::max(rep.zero_gamma_input_grad, std::abs(v));
    }
  }

  rep.pass = rep.gamma_inner_product_rel < 1e-6 && rep.linearity_rel < 1e-6 &&
             rep.zero_gamma_input_grad == 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// gradcheck suites (cmd_gradcheck scopes)
// ---------------------------------------------------------------------------

struct SuiteResult {
  std::vector<std::pair<std::string, GradCheckReport>> reports;
  bool pass(double tol) const {
    for (const auto& [name, r] : reports) {
      if (!r.pass(tol)) return false;
    }
    return true;
  }
  double worst() const {
    double m = 0;
    for (const auto& [name, r] : reports) m = std::max(m, r.worst());
    return m;
  }
  std::string summary(double tol) const {
    std::ostringstream os;
    for (const auto& [name, r] : reports) {
      os << (r.pass(tol) ? "pass" : "FAIL") << "  " << name
         << "  max_rel_err=" << r.worst();
      if (const auto* w = r.worst_item()) os << "  (" << w->name << ")";
      os << "\n";
    }
    return os.str();
  }
};

SuiteResult gradcheck_ops_suite(std::uint64_t seed);
SuiteResult gradcheck_block_suite(std::uint64_t seed);
SuiteResult gradcheck_model_suite(std::uint64_t seed);

// ---------------------------------------------------------------------------
// ablation harness (Table III variants)
// ---------------------------------------------------------------------------

struct AblationVariant {
  char tag = 'd';
  bool conv1 = true, conv2 = true, gamma = true;
};

inline AblationVariant variant_from_tag(char t) {
  switch (t) {
    case 'a':
      return {'a', false, false, false};
    case 'b':
      return {'b', true, true, false};
    case 'c':
      return {'c', true, false, true};
    case 'd':
      return {'d', true, true, true};
    default:
      throw ConfigError(std::string("unknown ablation variant '") + t + "' (use a-d)");
  }
}

inline ModelConfig apply_variant(ModelConfig cfg, const AblationVariant& v) {
  cfg.conv1_enabled = v.conv1;
  cfg.conv2_enabled = v.conv2;
  cfg.gamma_enabled = v.gamma;
  return cfg;
}

struct AblationRun {
  char tag = '?';
  std::uint64_t seed = 0;
  std::size_t param_count = 0;
  std::size_t expected_params = 0;
  double final_train_loss = 0;
  double test_top1 = -1;
  bool failed = false;
  std::string error;
};

struct AblationReport {
  std::vector<AblationRun> runs;

  std::string to_csv() const {
    std::ostringstream os;
    os << "variant,seed,params,final_train_loss,test_top1\n";
    for (const auto& r : runs) {
      os << r.tag << ',' << r.seed << ',' << r.param_count << ',';
      if (r.failed) {
        os << "error,error";
      } else {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.10g,%.10g", r.final_train_loss, r.test_top1);
        os << buf;
      }
      os << '\n';
    }
    return os.str();
  }

  double mean_top1(char tag) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : runs) {
      if (r.tag == tag && !r.failed) {
        s += r.test_top1;
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : -1;
  }

  std::string to_markdown() const {
    std::ostringstream os;
    os << "| Method | Convolution-1 | Convolution-2 | Influence Weight | Params | "
          "Top-1 (per seed) | Mean | Delta vs a |\n";
    os << "|---|---|---|---|---|---|---|---|\n";
    const double base = mean_top1('a');
    for (char tag : {'a', 'b', 'c', 'd'}) {
      std::vector<const AblationRun*> rs;
      for (const auto& r : runs) {
        if (r.tag == tag) rs.push_back(&r);
      }
      if (rs.empty()) continue;
      const auto v = variant_from_tag(tag);
      os << "| " << tag << " | " << (v.conv1 ? "yes" : "no") << " | "
         << (v.conv2 ? "yes" : "no") << " | " << (v.gamma ? "yes" : "no") << " | "
         << rs[0]->param_count << " | ";
      for (std::size_t i = 0; i < rs.size(); ++i) {
        if (i) os << ", ";
        if (rs[i]->failed) {
          os << "error";
        } else {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.4f", rs[i]->test_top1);
          os << buf;
        }
      }
      const double m = mean_top1(tag);
      char buf[64];
      std::snprintf(buf, sizeof buf, " | %.4f | %+.4f |", m,
                    (m >= 0 && base >= 0) ? m - base : 0.0);
      os << buf << '\n';
    }
    return os.str();
  }
};

// Trains each variant under identical data order and budget. Per-variant
// errors are recorded without aborting the other runs; the d-vs-a delta is
// reported, not asserted.
inline AblationReport run_ablation(const data::Dataset& train_ds,
                                   const data::Dataset* test_ds, const ModelConfig& base,
                                   const train::TrainConfig& tcfg,
                                   const std::vector<char>& variants,
                                   const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("run_ablation: need at least one seed");
  AblationReport report;
  for (const char tag : variants) {
    const auto v = variant_from_tag(tag);
    for (const std::uint64_t seed : seeds) {
      AblationRun run;
      run.tag = tag;
      run.seed = seed;
      try {
        ModelConfig cfg = apply_variant(base, v);
        cfg.validate();
        run.expected_params = expected_param_count(cfg);
        CoSwinModel<float> model(cfg, seed);
        run.param_count = model.param_count();
        train::TrainConfig tc = tcfg;
        tc.seed = seed;  // same seed => identical batch order for every variant
        auto res = train::train(model, train_ds, test_ds, tc);
        if (res.aborted) {
          run.failed = true;
          run.error = res.abort_reason;
        } else {
          run.final_train_loss = res.history.empty() ? 0 : res.history.back().train_loss;
          run.test_top1 = res.history.empty() ? -1 : res.history.back().test_acc;
        }
      } catch (const Error& e) {
        run.failed = true;
        run.error = e.what();
      }
      report.runs.push_back(std::move(run));
    }
  }
  return report;
}

}  // namespace coswin::verify
