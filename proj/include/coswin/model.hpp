#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "coswin/ops.hpp"
#include "coswin/rng.hpp"
#include "coswin/tensor.hpp"

namespace coswin {

enum class RunMode { kTrain, kEval };

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t in_channels = 3;
  std::size_t patch_size = 2;
  std::size_t embed_dim = 48;
  std::vector<std::size_t> stage_depths{2, 2, 2};
  std::vector<std::size_t> num_heads{2, 4, 8};
  std::size_t window_size = 4;
  double mlp_ratio = 4.0;
  double conv_expand_ratio = 1.10;
  double gamma_init = 0.1;
  double drop_path_max = 0.1;
  std::size_t num_classes = 10;
  // Local-feature branch toggles (ablation rows a-d keep these in sync).
  bool conv1_enabled = true;
  bool conv2_enabled = true;
  bool gamma_enabled = true;

  std::size_t num_stages() const { return stage_depths.size(); }
  std::size_t stage_dim(std::size_t i) const { return embed_dim << i; }
  std::size_t stage_h(std::size_t i) const { return (image_h / patch_size) >> i; }
  std::size_t stage_w(std::size_t i) const { return (image_w / patch_size) >> i; }
  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (auto d : stage_depths) n += d;
    return n;
  }
  // Shift stride M/2, rounded down for odd window sizes.
  std::size_t shift_size() const { return window_size / 2; }
  std::size_t conv_hidden(std::size_t d) const {
    if (!conv2_enabled) return d;  // single-conv variant closes shapes directly
    // ceil with a tolerance so an exactly-integral expansion (e.g. 1.1 * 40)
    // is not pushed up by floating-point representation error
    return static_cast<std::size_t>(
        std::ceil(conv_expand_ratio * static_cast<double>(d) - 1e-9));
  }

  void validate() const {
    if (stage_depths.empty()) throw ConfigError("config: at least one stage required");
    if (stage_depths.size() != num_heads.size()) {
      throw ConfigError("config: stage_depths and num_heads lengths differ");
    }
    if (patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0) {
      throw ConfigError("config: image " + std::to_string(image_h) + "x" +
                        std::to_string(image_w) + " not divisible by patch size " +
                        std::to_string(patch_size));
    }
    if (window_size == 0) throw ConfigError("config: window_size must be positive");
    if (num_classes == 0) throw ConfigError("config: num_classes must be positive");
    for (std::size_t i = 0; i < stage_depths.size(); ++i) {
      if (stage_depths[i] == 0 || stage_depths[i] % 2 != 0) {
        throw ConfigError("config: stage depth " + std::to_string(stage_depths[i]) +
                          " at stage " + std::to_string(i) +
                          " (blocks come in window/shifted pairs)");
      }
      if (num_heads[i] == 0 || stage_dim(i) % num_heads[i] != 0) {
        throw ConfigError("config: embed dim " + std::to_string(stage_dim(i)) +
                          " not divisible by " + std::to_string(num_heads[i]) +
                          " heads at stage " + std::to_string(i));
      }
      if (i > 0 && (stage_h(i - 1) % 2 != 0 || stage_w(i - 1) % 2 != 0)) {
        throw ConfigError("config: stage " + std::to_string(i - 1) +
                          " grid is odd, cannot merge patches");
      }
      if (stage_h(i) % window_size != 0 || stage_w(i) % window_size != 0) {
        throw ConfigError("config: stage " + std::to_string(i) + " grid " +
                          std::to_string(stage_h(i)) + "x" + std::to_string(stage_w(i)) +
                          " not divisible by window size " + std::to_string(window_size));
      }
    }
    if ((conv2_enabled || gamma_enabled) && !conv1_enabled) {
      throw ConfigError("config: conv2/gamma require conv1");
    }
    if (drop_path_max < 0 || drop_path_max > 1) {
      throw ConfigError("config: drop_path_max outside [0, 1]");
    }
  }
};

// ---------------------------------------------------------------------------
// parameter bundles
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormP {
  Tensor<T> gain, bias;
};

template <typename T>
struct LinearP {
  Tensor<T> weight, bias;  // weight [in, out]
};

template <typename T>
struct AttentionP {
  Tensor<T> qkv_weight;   // [d, 3d]
  Tensor<T> qkv_bias;     // [3d]
  Tensor<T> proj_weight;  // [d, d]
  Tensor<T> proj_bias;    // [d]
  Tensor<T> bias_table;   // [(2M-1)^2, heads]
};

template <typename T>
struct EnhancerP {
  Tensor<T> conv1_weight, conv1_bias;
  Tensor<T> conv2_weight, conv2_bias;  // undefined when conv2 disabled
  Tensor<T> gamma;                     // undefined when the influence weight is disabled
};

template <typename T>
struct BlockP {
  LayerNormP<T> norm1;
  AttentionP<T> attn;
  std::optional<EnhancerP<T>> enhancer;
  LayerNormP<T> norm2;
  LinearP<T> fc1, fc2;
  bool shifted = false;
  double drop_path = 0.0;
};

template <typename T>
struct PatchMergeP {
  LayerNormP<T> norm;   // over 4d
  LinearP<T> reduction; // [4d, 2d]
};

template <typename T>
struct StageP {
  std::optional<PatchMergeP<T>> merge;
  std::vector<BlockP<T>> blocks;
  Tensor<T> shift_mask;  // [S, M^2, M^2] additive mask, constant
};

// ---------------------------------------------------------------------------
// window / patch plumbing
// ---------------------------------------------------------------------------

// Relative-coordinate lookup shared by every window: entry (i, j) indexes the
// (2M-1)^2 bias table by the (row, col) offset of token i relative to token j.
inline std::vector<std::int32_t> relative_index_table(std::size_t m) {
  const std::int64_t span = 2 * static_cast<std::int64_t>(m) - 1;
  std::vector<std::int32_t> idx(m * m * m * m);
  for (std::size_t i = 0; i < m * m; ++i) {
    const std::int64_t r1 = static_cast<std::int64_t>(i / m), c1 = static_cast<std::int64_t>(i % m);
    for (std::size_t j = 0; j < m * m; ++j) {
      const std::int64_t r2 = static_cast<std::int64_t>(j / m), c2 = static_cast<std::int64_t>(j % m);
      const std::int64_t dr = r1 - r2 + static_cast<std::int64_t>(m) - 1;
      const std::int64_t dc = c1 - c2 + static_cast<std::int64_t>(m) - 1;
      idx[i * m * m + j] = static_cast<std::int32_t>(dr * span + dc);
    }
  }
  return idx;
}

// [batch, h, w, d] -> [batch * S, M^2, d], windows row-major over the window
// grid, tokens row-major within each window.
template <typename T>
Tensor<T> window_partition_batched(const Tensor<T>& grid, std::size_t m) {
  const std::size_t b = grid.dim(0), h = grid.dim(1), w = grid.dim(2), d = grid.dim(3);
  if (h % m != 0 || w % m != 0) {
    throw ShapeError("window_partition: grid " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by window " + std::to_string(m));
  }
  auto x = reshape(grid, {b, h / m, m, w / m, m, d});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {b * (h / m) * (w / m), m * m, d});
}

template <typename T>
Tensor<T> window_merge_batched(const Tensor<T>& windows, std::size_t h, std::size_t w,
                               std::size_t batch) {
  const std::size_t m2 = windows.dim(1), d = windows.dim(2);
  const std::size_t m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(m2))));
  if (m * m != m2 || windows.dim(0) != batch * (h / m) * (w / m)) {
    throw ShapeError("window_merge: windows " + shape_str(windows.shape()) +
                     " do not tile a " + std::to_string(h) + "x" + std::to_string(w) +
                     " grid");
  }
  auto x = reshape(windows, {batch, h / m, w / m, m, m, d});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {batch, h, w, d});
}

// Spec-shaped single-image forms.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& grid, std::size_t m) {
  if (grid.ndim() != 3) {
    throw ShapeError("window_partition: grid must be [h,w,d], got " + shape_str(grid.shape()));
  }
  auto g = reshape(grid, {std::size_t{1}, grid.dim(0), grid.dim(1), grid.dim(2)});
  return window_partition_batched(g, m);
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, std::size_t h, std::size_t w) {
  auto g = window_merge_batched(windows, h, w, 1);
  return reshape(g, {h, w, g.dim(3)});
}

// Token sequence [N, d] -> [sqrt(N), sqrt(N), d] grid; N must be a perfect
// square. Pure view: grid_to_tokens restores the sequence bit-exactly.
template <typename T>
Tensor<T> patch_convert(const Tensor<T>& tokens) {
  if (tokens.ndim() != 2) {
    throw ContractError("patch_convert: tokens must be [N, d], got " +
                        shape_str(tokens.shape()));
  }
  const std::size_t n = tokens.dim(0);
  const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) {
    throw ContractError("patch_convert: N = " + std::to_string(n) +
                        " is not a perfect square");
  }
  return reshape(tokens, {side, side, tokens.dim(1)});
}

template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
  if (grid.ndim() != 3) {
    throw ContractError("grid_to_tokens: grid must be [h,w,d], got " + shape_str(grid.shape()));
  }
  return reshape(grid, {grid.dim(0) * grid.dim(1), grid.dim(2)});
}

// Additive attention mask for shifted windows. After the grid is cyclically
// shifted by (-M/2, -M/2), shifted rows [0, s) hold wrapped content; token
// pairs whose (row band, col band) labels differ are not spatially adjacent
// in the original image and get -1e4.
template <typename T>
Tensor<T> build_shift_mask(std::size_t h, std::size_t w, std::size_t m) {
  if (h % m != 0 || w % m != 0) {
    throw ShapeError("build_shift_mask: grid " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by window " + std::to_string(m));
  }
  const std::size_t s = m / 2;
  auto band = [&](std::size_t i) -> int { return i < s ? 0 : (i < m ? 1 : 2); };
  std::vector<int> label(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) label[i * w + j] = band(i) * 3 + band(j);
  }
  const std::size_t wh = h / m, ww = w / m, m2 = m * m;
  Tensor<T> mask = Tensor<T>::zeros({wh * ww, m2, m2});
  auto mv = mask.mutable_data();
  std::vector<int> wl(m2);
  for (std::size_t wy = 0; wy < wh; ++wy) {
    for (std::size_t wx = 0; wx < ww; ++wx) {
      for (std::size_t a = 0; a < m2; ++a) {
        wl[a] = label[(wy * m + a / m) * w + (wx * m + a % m)];
      }
      T* slab = mv.data() + (wy * ww + wx) * m2 * m2;
      for (std::size_t a = 0; a < m2; ++a) {
        for (std::size_t bb = 0; bb < m2; ++bb) {
          slab[a * m2 + bb] = wl[a] == wl[bb] ? T(0) : T(-1e4);
        }
      }
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// attention and fusion
// ---------------------------------------------------------------------------

// windows [S, M^2, d]; optional additive mask [S0, M^2, M^2] with S0 | S
// (repeats with period S0 across a batch of images).
template <typename T>
Tensor<T> window_attention(const Tensor<T>& windows, const AttentionP<T>& p,
                           std::size_t heads,
                           const std::optional<Tensor<T>>& mask = std::nullopt) {
  if (windows.ndim() != 3) {
    throw ShapeError("window_attention: windows must be [S, M^2, d], got " +
                     shape_str(windows.shape()));
  }
  const std::size_t s = windows.dim(0), m2 = windows.dim(1), d = windows.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("window_attention: dim " + std::to_string(d) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const std::size_t m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(m2))));
  if (m * m != m2) {
    throw ShapeError("window_attention: window token count " + std::to_string(m2) +
                     " is not a square");
  }

  auto flat = reshape(windows, {s * m2, d});
  auto qkv = add_bias(matmul(flat, p.qkv_weight), p.qkv_bias);
  auto qkv5 = permute(reshape(qkv, {s, m2, 3, heads, dh}), {2, 0, 3, 1, 4});
  auto q = reshape(slice(qkv5, 0, 0, 1), {s, heads, m2, dh});
  auto kk = reshape(slice(qkv5, 0, 1, 1), {s, heads, m2, dh});
  auto v = reshape(slice(qkv5, 0, 2, 1), {s, heads, m2, dh});

  auto scores = scale(matmul(q, permute(kk, {0, 1, 3, 2})),
                      1.0 / std::sqrt(static_cast<double>(dh)));

  auto bias = take_rows(p.bias_table, relative_index_table(m));     // [M^4, heads]
  bias = permute(reshape(bias, {m2, m2, heads}), {2, 0, 1});        // [heads, M^2, M^2]
  scores = add(scores, tile_leading(bias, s));

  if (mask.has_value()) {
    const Tensor<T>& mk = *mask;
    if (mk.ndim() != 3 || mk.dim(1) != m2 || mk.dim(2) != m2 || mk.dim(0) == 0 ||
        s % mk.dim(0) != 0) {
      throw ShapeError("window_attention: mask " + shape_str(mk.shape()) +
                       " incompatible with windows " + shape_str(windows.shape()));
    }
    const std::size_t s0 = mk.dim(0);
    Tensor<T> expanded = Tensor<T>::zeros({s, heads, m2, m2});
    auto ev = expanded.mutable_data();
    auto mv = mk.data();
    for (std::size_t si = 0; si < s; ++si) {
      const T* slab = mv.data() + (si % s0) * m2 * m2;
      for (std::size_t hh = 0; hh < heads; ++hh) {
        std::memcpy(ev.data() + (si * heads + hh) * m2 * m2, slab, m2 * m2 * sizeof(T));
      }
    }
    scores = add(scores, expanded);
  }

  auto probs = softmax_last_dim(scores);
  auto ctx = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {s * m2, d});
  auto out = add_bias(matmul(ctx, p.proj_weight), p.proj_bias);
  return reshape(out, {s, m2, d});
}

// F = conv2(relu(conv1(grid))) scaled by the influence weight when present.
// grid [h, w, d] or [batch, h, w, d].
template <typename T>
Tensor<T> local_feature_enhance(const Tensor<T>& grid, const EnhancerP<T>& e) {
  auto x = relu(conv2d_3x3(grid, e.conv1_weight, e.conv1_bias));
  if (e.conv2_weight.defined()) x = conv2d_3x3(x, e.conv2_weight, e.conv2_bias);
  if (e.gamma.defined()) x = mul_scalar(x, e.gamma);
  return x;
}

namespace detail {

// Attention branch on [batch, N, d] tokens: plain and shifted variants.
template <typename T>
Tensor<T> msa_branch(const Tensor<T>& tokens, std::size_t h, std::size_t w,
                     const BlockP<T>& block, std::size_t m, std::size_t heads,
                     const Tensor<T>& shift_mask) {
  const std::size_t b = tokens.dim(0), d = tokens.dim(2);
  auto grid = reshape(tokens, {b, h, w, d});
  std::optional<Tensor<T>> conv;
  if (block.enhancer.has_value()) conv = local_feature_enhance(grid, *block.enhancer);

  Tensor<T> attn_grid;
  if (!block.shifted) {
    auto windows = window_partition_batched(grid, m);
    auto attnw = window_attention(windows, block.attn, heads);
    attn_grid = window_merge_batched(attnw, h, w, b);
  } else {
    const auto s = static_cast<std::int64_t>(m / 2);
    auto shifted = cyclic_shift(grid, -s, -s);
    auto windows = window_partition_batched(shifted, m);
    auto attnw = window_attention(windows, block.attn, heads,
                                  std::optional<Tensor<T>>(shift_mask));
    auto merged = window_merge_batched(attnw, h, w, b);
    // Conv sees the un-shifted grid; undo the shift so positions align.
    attn_grid = cyclic_shift(merged, s, s);
  }
  auto fused = conv.has_value() ? add(attn_grid, *conv) : attn_grid;
  return reshape(fused, {b, h * w, d});
}

// Inverted-scale stochastic depth: kept branches divide by 1-p so eval
// needs no rescaling. One draw per image, image-major.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double rate, RunMode mode, Rng* rng) {
  if (mode != RunMode::kTrain || rate <= 0.0) return branch;
  if (!rng) throw ContractError("drop_path: train mode requires an rng");
  const std::size_t b = branch.dim(0);
  std::vector<double> factors(b);
  for (std::size_t i = 0; i < b; ++i) {
    factors[i] = rng->bernoulli(rate) ? 0.0 : 1.0 / (1.0 - rate);
  }
  return scale_rows0(branch, factors);
}

// One block on [batch, N, d] tokens: pre-LN attention+conv fusion with
// residual, then pre-LN MLP with residual; drop-path gates each branch in
// train mode.
template <typename T>
Tensor<T> block_apply(const Tensor<T>& tokens, const BlockP<T>& blk,
                      const Tensor<T>& shift_mask, std::size_t h, std::size_t w,
                      std::size_t m, std::size_t heads, RunMode mode, Rng* rng) {
  auto branch = detail::msa_branch(layer_norm(tokens, blk.norm1.gain, blk.norm1.bias), h,
                                   w, blk, m, heads, shift_mask);
  auto x = add(tokens, drop_path(branch, blk.drop_path, mode, rng));
  auto y = layer_norm(x, blk.norm2.gain, blk.norm2.bias);
  const std::size_t b = y.dim(0), n = y.dim(1), d = y.dim(2);
  auto hidden = gelu(add_bias(matmul(reshape(y, {b * n, d}), blk.fc1.weight), blk.fc1.bias));
  auto mlp = add_bias(matmul(hidden, blk.fc2.weight), blk.fc2.bias);
  return add(x, drop_path(reshape(mlp, {b, n, d}), blk.drop_path, mode, rng));
}

}  // namespace detail

// Convolution-fused window attention on a token sequence [N, d].
template <typename T>
Tensor<T> coswin_msa(const Tensor<T>& tokens, std::size_t h, std::size_t w,
                     const BlockP<T>& block, std::size_t m, std::size_t heads) {
  if (tokens.ndim() != 2 || tokens.dim(0) != h * w) {
    throw ShapeError("coswin_msa: tokens " + shape_str(tokens.shape()) + " vs grid " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  if (block.shifted) {
    throw ContractError("coswin_msa: block is flagged shifted, use coswin_shifted_msa");
  }
  auto x = reshape(tokens, {std::size_t{1}, h * w, tokens.dim(1)});
  auto y = detail::msa_branch(x, h, w, block, m, heads, Tensor<T>{});
  return reshape(y, {h * w, tokens.dim(1)});
}

template <typename T>
Tensor<T> coswin_shifted_msa(const Tensor<T>& tokens, std::size_t h, std::size_t w,
                             const BlockP<T>& block, std::size_t m, std::size_t heads) {
  if (tokens.ndim() != 2 || tokens.dim(0) != h * w) {
    throw ShapeError("coswin_shifted_msa: tokens " + shape_str(tokens.shape()) +
                     " vs grid " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (!block.shifted) {
    throw ContractError("coswin_shifted_msa: block is not flagged shifted");
  }
  auto x = reshape(tokens, {std::size_t{1}, h * w, tokens.dim(1)});
  auto mask = build_shift_mask<T>(h, w, m);
  auto y = detail::msa_branch(x, h, w, block, m, heads, mask);
  return reshape(y, {h * w, tokens.dim(1)});
}

// Two consecutive attention-MLP sequences: plain-window block, then its
// shifted twin. z is a token sequence [N, d].
template <typename T>
Tensor<T> coswin_block_pair(const Tensor<T>& z, std::size_t h, std::size_t w,
                            const BlockP<T>& block_w, const BlockP<T>& block_sw,
                            std::size_t m, std::size_t heads, RunMode mode,
                            Rng* rng = nullptr) {
  if (block_w.shifted || !block_sw.shifted) {
    throw ContractError("coswin_block_pair: expects (plain, shifted) block flags");
  }
  auto mask = build_shift_mask<T>(h, w, m);
  auto x = reshape(z, {std::size_t{1}, h * w, z.dim(1)});
  x = detail::block_apply(x, block_w, mask, h, w, m, heads, mode, rng);
  x = detail::block_apply(x, block_sw, mask, h, w, m, heads, mode, rng);
  return reshape(x, {h * w, z.dim(1)});
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardTrace {
  Tensor<T> final_norm_out;  // [batch, N_last, d_last]
  std::size_t grid_h = 0, grid_w = 0;
};

template <typename T>
class CoSwinModel {
 public:
  CoSwinModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  // Named views of every learnable tensor, in canonical (checkpoint) order.
  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    visit_params([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  void watch_all(GradTape<T>& tape) {
    visit_params([&](const std::string&, Tensor<T>& t) { tape.watch(t); });
  }

  // images [batch, H, W, C] -> logits [batch, K]. drop_rng is consumed in
  // train mode only (one draw per image per residual branch, image-major).
  Tensor<T> forward(const Tensor<T>& images, RunMode mode, Rng* drop_rng = nullptr,
                    ForwardTrace<T>* trace = nullptr) const {
    if (images.ndim() != 4) {
      throw ShapeError("forward: images must be [batch, H, W, C], got " +
                       shape_str(images.shape()));
    }
    const std::size_t b = images.dim(0);
    if (b == 0) throw ContractError("forward: batch of zero images");
    if (images.dim(1) != cfg_.image_h || images.dim(2) != cfg_.image_w ||
        images.dim(3) != cfg_.in_channels) {
      throw ShapeError("forward: images " + shape_str(images.shape()) +
                       " do not match configured input " + std::to_string(cfg_.image_h) +
                       "x" + std::to_string(cfg_.image_w) + "x" +
                       std::to_string(cfg_.in_channels));
    }
    auto tokens = embed_patches(images);
    std::size_t h = cfg_.stage_h(0), w = cfg_.stage_w(0);
    for (std::size_t si = 0; si < stages_.size(); ++si) {
      const StageP<T>& st = stages_[si];
      if (st.merge.has_value()) {
        tokens = merge_patches(tokens, *st.merge, h, w);
        h /= 2;
        w /= 2;
      }
      for (const BlockP<T>& blk : st.blocks) {
        tokens = detail::block_apply(tokens, blk, st.shift_mask, h, w, cfg_.window_size,
                                     cfg_.num_heads[si], mode, drop_rng);
      }
    }
    auto x = layer_norm(tokens, final_norm_.gain, final_norm_.bias);
    if (trace) {
      trace->final_norm_out = x;
      trace->grid_h = h;
      trace->grid_w = w;
    }
    auto pooled = mean_axis(x, 1);  // [batch, d_last]
    return add_bias(matmul(pooled, head_.weight), head_.bias);
  }

  // [batch, H, W, C] -> [batch, N, d0]: linear projection of each flattened
  // P x P x C patch (row-major patch order) followed by layer norm.
  Tensor<T> embed_patches(const Tensor<T>& images) const {
    const std::size_t b = images.dim(0), p = cfg_.patch_size;
    const std::size_t gh = cfg_.image_h / p, gw = cfg_.image_w / p;
    auto x = reshape(images, {b, gh, p, gw, p, cfg_.in_channels});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    x = reshape(x, {b * gh * gw, p * p * cfg_.in_channels});
    x = add_bias(matmul(x, patch_embed_.weight), patch_embed_.bias);
    x = layer_norm(x, patch_norm_.gain, patch_norm_.bias);
    return reshape(x, {b, gh * gw, cfg_.embed_dim});
  }

  // [batch, N, d] -> [batch, N/4, 2d]; concat order TL, TR, BL, BR.
  static Tensor<T> merge_patches(const Tensor<T>& tokens, const PatchMergeP<T>& mp,
                                 std::size_t h, std::size_t w) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw ShapeError("patch_merge: odd grid " + std::to_string(h) + "x" +
                       std::to_string(w));
    }
    const std::size_t b = tokens.dim(0), d = tokens.dim(2);
    if (tokens.dim(1) != h * w) {
      throw ShapeError("patch_merge: tokens " + shape_str(tokens.shape()) + " vs grid " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    auto x = reshape(tokens, {b, h / 2, 2, w / 2, 2, d});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    x = reshape(x, {b * (h / 2) * (w / 2), 4 * d});
    x = layer_norm(x, mp.norm.gain, mp.norm.bias);
    x = add_bias(matmul(x, mp.reduction.weight), mp.reduction.bias);
    return reshape(x, {b, (h / 2) * (w / 2), 2 * d});
  }

  const std::vector<StageP<T>>& stages() const { return stages_; }
  std::vector<StageP<T>>& stages() { return stages_; }
  const LayerNormP<T>& final_norm() const { return final_norm_; }
  const LinearP<T>& head() const { return head_; }

 private:
  template <typename Fn>
  void visit_params(Fn&& fn) {
    auto ln = [&](const std::string& base, LayerNormP<T>& p) {
      fn(base + ".gain", p.gain);
      fn(base + ".bias", p.bias);
    };
    fn("patch_embed.proj.weight", patch_embed_.weight);
    fn("patch_embed.proj.bias", patch_embed_.bias);
    ln("patch_embed.norm", patch_norm_);
    for (std::size_t si = 0; si < stages_.size(); ++si) {
      const std::string sp = "stages." + std::to_string(si);
      if (stages_[si].merge.has_value()) {
        ln(sp + ".merge.norm", stages_[si].merge->norm);
        fn(sp + ".merge.reduction.weight", stages_[si].merge->reduction.weight);
        fn(sp + ".merge.reduction.bias", stages_[si].merge->reduction.bias);
      }
      for (std::size_t bi = 0; bi < stages_[si].blocks.size(); ++bi) {
        const std::string bp = sp + ".blocks." + std::to_string(bi);
        BlockP<T>& blk = stages_[si].blocks[bi];
        ln(bp + ".norm1", blk.norm1);
        fn(bp + ".attn.qkv.weight", blk.attn.qkv_weight);
        fn(bp + ".attn.qkv.bias", blk.attn.qkv_bias);
        fn(bp + ".attn.proj.weight", blk.attn.proj_weight);
        fn(bp + ".attn.proj.bias", blk.attn.proj_bias);
        fn(bp + ".attn.bias_table", blk.attn.bias_table);
        if (blk.enhancer.has_value()) {
          EnhancerP<T>& e = *blk.enhancer;
          fn(bp + ".enhancer.conv1.weight", e.conv1_weight);
          fn(bp + ".enhancer.conv1.bias", e.conv1_bias);
          if (e.conv2_weight.defined()) {
            fn(bp + ".enhancer.conv2.weight", e.conv2_weight);
            fn(bp + ".enhancer.conv2.bias", e.conv2_bias);
          }
          if (e.gamma.defined()) fn(bp + ".enhancer.gamma", e.gamma);
        }
        ln(bp + ".norm2", blk.norm2);
        fn(bp + ".mlp.fc1.weight", blk.fc1.weight);
        fn(bp + ".mlp.fc1.bias", blk.fc1.bias);
        fn(bp + ".mlp.fc2.weight", blk.fc2.weight);
        fn(bp + ".mlp.fc2.bias", blk.fc2.bias);
      }
    }
    ln("final_norm", final_norm_);
    fn("head.weight", head_.weight);
    fn("head.bias", head_.bias);
  }

  // Every parameter draws from its own (seed, name) stream, so models built
  // from one seed assign bit-identical values to same-named parameters no
  // matter which optional parameters exist around them.
  Tensor<T> make_weight(const std::string& name, Shape shape) {
    Rng rng = Rng::for_stream(seed_, name);
    return Tensor<T>::trunc_normal(rng, std::move(shape), 0.02);
  }

  void build() {
    const std::size_t p = cfg_.patch_size, d0 = cfg_.embed_dim;
    patch_embed_.weight = make_weight("patch_embed.proj.weight",
                                      {p * p * cfg_.in_channels, d0});
    patch_embed_.bias = Tensor<T>::zeros({d0});
    patch_norm_ = {Tensor<T>::full({d0}, T(1)), Tensor<T>::zeros({d0})};

    const std::size_t m = cfg_.window_size;
    const std::size_t table_rows = (2 * m - 1) * (2 * m - 1);
    const std::size_t n_blocks = cfg_.total_blocks();
    std::size_t block_index = 0;
    for (std::size_t si = 0; si < cfg_.num_stages(); ++si) {
      StageP<T> st;
      const std::size_t d = cfg_.stage_dim(si);
      const std::string sp = "stages." + std::to_string(si);
      if (si > 0) {
        const std::size_t dp = cfg_.stage_dim(si - 1);
        PatchMergeP<T> mp;
        mp.norm = {Tensor<T>::full({4 * dp}, T(1)), Tensor<T>::zeros({4 * dp})};
        mp.reduction.weight = make_weight(sp + ".merge.reduction.weight", {4 * dp, 2 * dp});
        mp.reduction.bias = Tensor<T>::zeros({2 * dp});
        st.merge = std::move(mp);
      }
      st.shift_mask = build_shift_mask<T>(cfg_.stage_h(si), cfg_.stage_w(si), m);
      const std::size_t hidden = static_cast<std::size_t>(
          std::llround(cfg_.mlp_ratio * static_cast<double>(d)));
      for (std::size_t bi = 0; bi < cfg_.stage_depths[si]; ++bi) {
        const std::string bp = sp + ".blocks." + std::to_string(bi);
        BlockP<T> blk;
        blk.shifted = bi % 2 == 1;
        blk.drop_path = n_blocks > 1 ? cfg_.drop_path_max * static_cast<double>(block_index) /
                                           static_cast<double>(n_blocks - 1)
                                     : 0.0;
        ++block_index;
        blk.norm1 = {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})};
        blk.attn.qkv_weight = make_weight(bp + ".attn.qkv.weight", {d, 3 * d});
        blk.attn.qkv_bias = Tensor<T>::zeros({3 * d});
        blk.attn.proj_weight = make_weight(bp + ".attn.proj.weight", {d, d});
        blk.attn.proj_bias = Tensor<T>::zeros({d});
        blk.attn.bias_table =
            make_weight(bp + ".attn.bias_table", {table_rows, cfg_.num_heads[si]});
        if (cfg_.conv1_enabled) {
          EnhancerP<T> e;
          const std::size_t dh = cfg_.conv_hidden(d);
          e.conv1_weight = make_weight(bp + ".enhancer.conv1.weight", {3, 3, d, dh});
          e.conv1_bias = Tensor<T>::zeros({dh});
          if (cfg_.conv2_enabled) {
            e.conv2_weight = make_weight(bp + ".enhancer.conv2.weight", {3, 3, dh, d});
            e.conv2_bias = Tensor<T>::zeros({d});
          }
          if (cfg_.gamma_enabled) {
            e.gamma = Tensor<T>::scalar(static_cast<T>(cfg_.gamma_init));
          }
          blk.enhancer = std::move(e);
        }
        blk.norm2 = {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})};
        blk.fc1.weight = make_weight(bp + ".mlp.fc1.weight", {d, hidden});
        blk.fc1.bias = Tensor<T>::zeros({hidden});
        blk.fc2.weight = make_weight(bp + ".mlp.fc2.weight", {hidden, d});
        blk.fc2.bias = Tensor<T>::zeros({d});
        st.blocks.push_back(std::move(blk));
      }
      stages_.push_back(std::move(st));
    }
    const std::size_t dl = cfg_.stage_dim(cfg_.num_stages() - 1);
    final_norm_ = {Tensor<T>::full({dl}, T(1)), Tensor<T>::zeros({dl})};
    head_.weight = make_weight("head.weight", {dl, cfg_.num_classes});
    head_.bias = Tensor<T>::zeros({cfg_.num_classes});
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  LinearP<T> patch_embed_;
  LayerNormP<T> patch_norm_;
  std::vector<StageP<T>> stages_;
  LayerNormP<T> final_norm_;
  LinearP<T> head_;
};

// Hand-computed closed-form parameter count for a config; tests hold the
// model to this number exactly.
inline std::size_t expected_param_count(const ModelConfig& cfg) {
  const std::size_t p = cfg.patch_size, m = cfg.window_size;
  std::size_t total = 0;
  total += p * p * cfg.in_channels * cfg.embed_dim + cfg.embed_dim;  // patch proj
  total += 2 * cfg.embed_dim;                                        // patch norm
  for (std::size_t si = 0; si < cfg.num_stages(); ++si) {
    const std::size_t d = cfg.stage_dim(si);
    if (si > 0) {
      const std::size_t dp = cfg.stage_dim(si - 1);
      total += 2 * (4 * dp);                  // merge norm
      total += 4 * dp * 2 * dp + 2 * dp;      // merge reduction
    }
    const std::size_t hidden = static_cast<std::size_t>(
        std::llround(cfg.mlp_ratio * static_cast<double>(d)));
    std::size_t per_block = 0;
    per_block += 2 * d;                        // norm1
    per_block += d * 3 * d + 3 * d;            // qkv
    per_block += d * d + d;                    // proj
    per_block += (2 * m - 1) * (2 * m - 1) * cfg.num_heads[si];
    if (cfg.conv1_enabled) {
      const std::size_t dh = cfg.conv_hidden(d);
      per_block += 9 * d * dh + dh;
      if (cfg.conv2_enabled) per_block += 9 * dh * d + d;
      if (cfg.gamma_enabled) per_block += 1;
    }
    per_block += 2 * d;                        // norm2
    per_block += d * hidden + hidden + hidden * d + d;
    total += per_block * cfg.stage_depths[si];
  }
  const std::size_t dl = cfg.stage_dim(cfg.num_stages() - 1);
  total += 2 * dl;                             // final norm
  total += dl * cfg.num_classes + cfg.num_classes;
  return total;
}

}  // namespace coswin
