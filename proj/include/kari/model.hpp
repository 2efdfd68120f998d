#pragma once

// The knowledge-augmented relation network: label embedding and a semantic
// transformer biased by the C-C map, a visual encoder over person features,
// and a visual-semantic inference transformer whose cross-attention is
// biased by the C-P lookup. Five classification heads feed the loss and the
// fused group prediction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kari/error.hpp"
#include "kari/knowledge.hpp"
#include "kari/numcore.hpp"
#include "kari/rng.hpp"

namespace kari {

struct ModelConfig {
  std::size_t num_actions = 6;     // K
  std::size_t num_groups = 4;      // G
  std::size_t num_persons = 8;     // N
  std::size_t num_parts = 1;       // P
  std::size_t feature_dim = 16;    // raw per-part feature width
  std::size_t scene_channels = 16; // channels of the global scene map
  std::size_t embed_dim = 64;      // D
  std::size_t head_dim = 32;       // d
  std::size_t heads_enc = 2;
  std::size_t heads_dec = 1;
  std::size_t ffn_dim = 128;
  double lambda = 1.0;
  double cc_gain = 1.0;
  double cp_gain = 1.0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ValidationError(std::string("model.") + name + " must be positive");
    };
    positive(num_actions, "K");
    positive(num_groups, "G");
    positive(num_persons, "N");
    positive(num_parts, "P");
    positive(feature_dim, "feature_dim");
    positive(scene_channels, "scene_channels");
    positive(embed_dim, "D");
    positive(head_dim, "d");
    positive(heads_enc, "heads_enc");
    positive(heads_dec, "heads_dec");
    positive(ffn_dim, "ffn_dim");
    if (head_dim > embed_dim) throw ValidationError("model.d must not exceed model.D");
    if (embed_dim % 4 != 0) throw ValidationError("model.D must be divisible by 4 for the 2-D positional encoding");
    if (num_actions < 2 || num_groups < 2) throw ValidationError("model.K and model.G must be at least 2");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("model.lambda must be finite and >= 0");
    if (!std::isfinite(cc_gain) || !std::isfinite(cp_gain)) throw ValidationError("bias gains must be finite");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// All learnable parameters. Copies are deep: each copy owns its storage.
struct ModelState {
  ModelConfig config;
  nc::ParamSet params;

  ModelState() = default;
  ModelState(ModelConfig c, nc::ParamSet p) : config(c), params(std::move(p)) {}
  ModelState(const ModelState& other) : config(other.config) { copy_params(other); }
  ModelState& operator=(const ModelState& other) {
    if (this != &other) {
      config = other.config;
      params.clear();
      copy_params(other);
    }
    return *this;
  }
  ModelState(ModelState&&) noexcept = default;
  ModelState& operator=(ModelState&&) noexcept = default;

  const nc::Tensor& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw Error("model has no parameter '" + name + "'");
    return it->second;
  }

private:
  void copy_params(const ModelState& other) {
    for (const auto& [name, t] : other.params) params.emplace(name, t.clone(true));
  }
};

/// One scene as the network sees it.
struct SceneSample {
  nc::Tensor scene_feature;    // Hf x Wf x C
  nc::Tensor person_features;  // N x P x feature_dim
  std::vector<BBox> bboxes;    // N pixel boxes
  FrameSize frame;
  std::vector<std::size_t> action_targets;  // N
  std::size_t group_target = 0;
};

struct Predictions {
  nc::Tensor ya_x;                 // N x K, from the visual representation
  nc::Tensor yg_x;                 // G
  std::optional<nc::Tensor> ya_o;  // N x K, from the knowledge-augmented features
  std::optional<nc::Tensor> yg_o;  // G
  nc::Tensor yg_s;                 // G, from the global scene map
};

struct LossBreakdown {
  double l_x = 0, l_o = 0, l_s = 0, total = 0;
};

/// Loss terms kept as graph nodes so the total can be back-propagated.
struct LossTerms {
  nc::Tensor l_x, l_o, l_s, total;
  LossBreakdown values() const { return {l_x.item(), l_o.item(), l_s.item(), total.item()}; }
};

/// Captured attention matrices, for inspecting row sums.
struct AttentionRecord {
  std::string block;
  std::size_t head = 0;
  std::size_t rows = 0, cols = 0;
  std::vector<double> weights;  // softmax output
  std::vector<double> biased;   // weights + gain * bias (equals weights when unbiased)
  std::vector<double> bias;     // gain * bias actually added (zeros when unbiased)
};

struct AttentionProbe {
  std::vector<AttentionRecord> records;
};

/// Which branches and knowledge biases a forward pass uses.
struct ForwardOptions {
  bool semantic_branch = true;
  bool use_cc = true;
  bool use_cp = true;
  AttentionProbe* probe = nullptr;
};

// ---------------------------------------------------------------------------
// Parameter layout and initialization
// ---------------------------------------------------------------------------

namespace detail {

struct ParamSpec {
  nc::Shape shape;
  enum class Kind { Weight, Bias, Gain } kind;
};

inline void add_attention_specs(std::map<std::string, ParamSpec>& specs, const std::string& prefix, std::size_t heads,
                                const ModelConfig& c) {
  using K = ParamSpec::Kind;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    specs[hp + ".query"] = {{c.embed_dim, c.head_dim}, K::Weight};
    specs[hp + ".key"] = {{c.embed_dim, c.head_dim}, K::Weight};
    specs[hp + ".value"] = {{c.embed_dim, c.head_dim}, K::Weight};
  }
  specs[prefix + ".out.weight"] = {{heads * c.head_dim, c.embed_dim}, K::Weight};
  specs[prefix + ".out.bias"] = {{c.embed_dim}, K::Bias};
}

inline void add_norm_specs(std::map<std::string, ParamSpec>& specs, const std::string& prefix, const ModelConfig& c) {
  specs[prefix + ".gain"] = {{c.embed_dim}, ParamSpec::Kind::Gain};
  specs[prefix + ".bias"] = {{c.embed_dim}, ParamSpec::Kind::Bias};
}

inline void add_mlp_specs(std::map<std::string, ParamSpec>& specs, const std::string& prefix, std::size_t in,
                          std::size_t hidden, std::size_t out) {
  using K = ParamSpec::Kind;
  specs[prefix + ".w1"] = {{in, hidden}, K::Weight};
  specs[prefix + ".b1"] = {{hidden}, K::Bias};
  specs[prefix + ".w2"] = {{hidden, out}, K::Weight};
  specs[prefix + ".b2"] = {{out}, K::Bias};
}

inline void add_linear_specs(std::map<std::string, ParamSpec>& specs, const std::string& prefix, std::size_t in,
                             std::size_t out) {
  specs[prefix + ".weight"] = {{in, out}, ParamSpec::Kind::Weight};
  specs[prefix + ".bias"] = {{out}, ParamSpec::Kind::Bias};
}

inline void add_encoder_layer_specs(std::map<std::string, ParamSpec>& specs, const std::string& prefix,
                                    std::size_t heads, const ModelConfig& c) {
  add_attention_specs(specs, prefix + ".attn", heads, c);
  add_norm_specs(specs, prefix + ".norm1", c);
  add_mlp_specs(specs, prefix + ".ffn", c.embed_dim, c.ffn_dim, c.embed_dim);
  add_norm_specs(specs, prefix + ".norm2", c);
}

inline std::map<std::string, ParamSpec> param_specs(const ModelConfig& c) {
  std::map<std::string, ParamSpec> specs;
  specs["label_embedding"] = {{c.num_actions, c.embed_dim}, ParamSpec::Kind::Weight};
  add_linear_specs(specs, "person_embed", c.feature_dim, c.embed_dim);
  add_encoder_layer_specs(specs, "semantic", c.heads_enc, c);
  add_encoder_layer_specs(specs, "visual_encoder", c.heads_enc, c);
  add_mlp_specs(specs, "part_mlp", c.num_parts * c.embed_dim, c.ffn_dim, c.embed_dim);
  add_attention_specs(specs, "inference_encoder.attn", c.heads_enc, c);
  add_norm_specs(specs, "inference_encoder.norm", c);
  add_attention_specs(specs, "inference_decoder.attn", c.heads_dec, c);
  add_norm_specs(specs, "inference_decoder.norm1", c);
  add_mlp_specs(specs, "inference_decoder.ffn", c.embed_dim, c.ffn_dim, c.embed_dim);
  add_norm_specs(specs, "inference_decoder.norm2", c);
  add_linear_specs(specs, "head.action_x", c.embed_dim, c.num_actions);
  add_linear_specs(specs, "head.group_x", c.embed_dim, c.num_groups);
  add_linear_specs(specs, "head.action_o", c.embed_dim, c.num_actions);
  add_linear_specs(specs, "head.group_o", c.embed_dim, c.num_groups);
  add_linear_specs(specs, "head.scene", c.scene_channels, c.num_groups);
  return specs;
}

}  // namespace detail

/// Glorot-uniform weights, zero biases, unit layer-norm gains. Parameters are
/// drawn in sorted name order from a single seeded stream.
inline ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = substream(seed, "model.init");
  nc::ParamSet params;
  for (const auto& [name, spec] : detail::param_specs(config)) {
    std::vector<double> values(nc::shape_numel(spec.shape), 0.0);
    switch (spec.kind) {
      case detail::ParamSpec::Kind::Weight: {
        const double bound =
            std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : values) v = dist(rng);
        break;
      }
      case detail::ParamSpec::Kind::Gain:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case detail::ParamSpec::Kind::Bias:
        break;
    }
    params.emplace(name, nc::Tensor::parameter(spec.shape, std::move(values)));
  }
  return ModelState(config, std::move(params));
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

namespace detail {

/// Multi-head attention of `queries` over `keys_values`, with an optional
/// constant bias added to every head's softmax weights before they multiply
/// the values. Head outputs are concatenated and projected back to D.
inline nc::Tensor multi_head_attention(const nc::Tensor& queries, const nc::Tensor& keys_values,
                                       const ModelState& state, const std::string& prefix, std::size_t heads,
                                       const nc::Tensor* bias, AttentionProbe* probe) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(state.config.head_dim));
  std::vector<nc::Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    auto q = nc::matmul(queries, state.param(hp + ".query"));
    auto k = nc::matmul(keys_values, state.param(hp + ".key"));
    auto v = nc::matmul(keys_values, state.param(hp + ".value"));
    auto weights = nc::softmax_rows(nc::scale(nc::matmul(q, nc::transpose(k)), inv_sqrt_d));
    nc::Tensor mixed = bias ? nc::add(weights, *bias) : weights;
    if (probe) {
      AttentionRecord rec{prefix, h, weights.dim(0), weights.dim(1), weights.values(), mixed.values(),
                          bias ? bias->values() : std::vector<double>(weights.numel(), 0.0)};
      probe->records.push_back(std::move(rec));
    }
    outs.push_back(nc::matmul(mixed, v));
  }
  return nc::linear(nc::concat_last(outs), state.param(prefix + ".out.weight"), state.param(prefix + ".out.bias"));
}

inline nc::Tensor feed_forward(const nc::Tensor& x, const ModelState& state, const std::string& prefix) {
  auto hidden = nc::relu(nc::linear(x, state.param(prefix + ".w1"), state.param(prefix + ".b1")));
  return nc::linear(hidden, state.param(prefix + ".w2"), state.param(prefix + ".b2"));
}

inline nc::Tensor norm(const nc::Tensor& x, const ModelState& state, const std::string& prefix) {
  return nc::layer_norm(x, state.param(prefix + ".gain"), state.param(prefix + ".bias"));
}

/// Post-norm encoder layer: LN(x + MHA(x)), then LN(z + FFN(z)).
inline nc::Tensor encoder_layer(const nc::Tensor& x, const ModelState& state, const std::string& prefix,
                                std::size_t heads, const nc::Tensor* bias, AttentionProbe* probe) {
  auto z = norm(nc::add(x, multi_head_attention(x, x, state, prefix + ".attn", heads, bias, probe)), state,
                prefix + ".norm1");
  return norm(nc::add(z, feed_forward(z, state, prefix + ".ffn")), state, prefix + ".norm2");
}

inline nc::Tensor scaled_constant(const nc::Tensor& bias, double gain) {
  std::vector<double> v(bias.values());
  for (auto& x : v) x *= gain;
  return nc::Tensor(bias.shape(), std::move(v));
}

}  // namespace detail

/// Label features Y: one-hot(K) times the embedding table, i.e. the table.
inline nc::Tensor embed_labels(const ModelState& state) {
  const auto& table = state.param("label_embedding");
  const std::size_t k = table.dim(0);
  std::vector<double> eye(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
  return nc::matmul(nc::Tensor(nc::Shape{k, k}, std::move(eye)), table);
}

inline constexpr double kPositionTemperature = 10000.0;

/// Fixed 2-D sinusoidal encoding of each bbox center normalized to the
/// frame. The first D/2 channels encode x and the last D/2 encode y, each as
/// interleaved (sin, cos) pairs over geometric frequencies.
inline nc::Tensor positional_encode(const std::vector<BBox>& bboxes, const FrameSize& frame, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) throw ValidationError("positional encoding width must be divisible by 4");
  if (frame.width < 1 || frame.height < 1) throw ValidationError("positional encoding needs a valid frame size");
  const std::size_t half = dim / 2;
  std::vector<double> out(bboxes.size() * dim);
  for (std::size_t n = 0; n < bboxes.size(); ++n) {
    const double coords[2] = {bboxes[n].center_x() / frame.width, bboxes[n].center_y() / frame.height};
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const double pos = 2.0 * std::numbers::pi * coords[axis];
      for (std::size_t j = 0; j < half / 2; ++j) {
        const double freq = std::pow(kPositionTemperature, -static_cast<double>(2 * j) / static_cast<double>(half));
        out[n * dim + axis * half + 2 * j] = std::sin(pos * freq);
        out[n * dim + axis * half + 2 * j + 1] = std::cos(pos * freq);
      }
    }
  }
  return nc::Tensor(nc::Shape{bboxes.size(), dim}, std::move(out));
}

namespace detail {

inline void check_sample(const SceneSample& s, const ModelConfig& c) {
  const auto& pf = s.person_features.shape();
  if (pf.size() != 3 || pf[1] != c.num_parts || pf[2] != c.feature_dim)
    throw ShapeError("person features " + nc::shape_str(pf) + " do not match (N, " + std::to_string(c.num_parts) +
                     ", " + std::to_string(c.feature_dim) + ")");
  if (pf[0] != c.num_persons)
    throw ShapeError("scene has " + std::to_string(pf[0]) + " persons, model expects " + std::to_string(c.num_persons));
  if (s.bboxes.size() != pf[0]) throw ShapeError("bbox count does not match the number of persons");
  const auto& sf = s.scene_feature.shape();
  if (sf.size() != 3 || sf[2] != c.scene_channels)
    throw ShapeError("scene feature " + nc::shape_str(sf) + " does not have " + std::to_string(c.scene_channels) +
                     " channels");
}

}  // namespace detail

/// Person features to D: relu(linear(features)) plus the positional encoding,
/// shared by every part of a person. Returns N x P x D.
inline nc::Tensor embed_persons(const SceneSample& sample, const ModelState& state) {
  const auto& c = state.config;
  const auto& pf = sample.person_features.shape();
  if (pf.size() != 3 || pf[2] != c.feature_dim || pf[1] != c.num_parts || sample.bboxes.size() != pf[0])
    throw ShapeError("person features " + nc::shape_str(pf) + " inconsistent with the model configuration");
  const std::size_t n = pf[0], parts = pf[1];
  auto act = nc::relu(nc::linear(sample.person_features, state.param("person_embed.weight"),
                                 state.param("person_embed.bias")));
  const auto pe = positional_encode(sample.bboxes, sample.frame, c.embed_dim);
  std::vector<double> tiled(n * parts * c.embed_dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < parts; ++p)
      std::copy(pe.data().begin() + static_cast<std::ptrdiff_t>(i * c.embed_dim),
                pe.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * c.embed_dim),
                tiled.begin() + static_cast<std::ptrdiff_t>((i * parts + p) * c.embed_dim));
  return nc::add(act, nc::Tensor(nc::Shape{n, parts, c.embed_dim}, std::move(tiled)));
}

/// Self-attention over label features with the C-C map added to each head's
/// attention weights (scaled by cc_gain); pass nullptr for the unbiased block.
inline nc::Tensor semantic_transformer(const nc::Tensor& labels, const CCMap* cc, const ModelState& state,
                                       AttentionProbe* probe = nullptr) {
  const auto& c = state.config;
  if (labels.shape() != nc::Shape{c.num_actions, c.embed_dim})
    throw ShapeError("label features " + nc::shape_str(labels.shape()) + " are not K x D");
  std::optional<nc::Tensor> bias;
  if (cc) {
    if (cc->num_actions != c.num_actions || cc->values.size() != c.num_actions * c.num_actions)
      throw ShapeError("C-C map is " + std::to_string(cc->num_actions) + "x" + std::to_string(cc->num_actions) +
                       ", model has K=" + std::to_string(c.num_actions));
    bias = detail::scaled_constant(cc->as_tensor(), c.cc_gain);
  }
  return detail::encoder_layer(labels, state, "semantic", c.heads_enc, bias ? &*bias : nullptr, probe);
}

/// Unbiased encoder over the N*P part tokens, then a two-layer MLP that
/// folds each person's P part vectors into one D vector. Returns N x D.
inline nc::Tensor visual_encoder(const nc::Tensor& persons, const ModelState& state, AttentionProbe* probe = nullptr) {
  const auto& c = state.config;
  const auto& s = persons.shape();
  if (s.size() != 3 || s[1] != c.num_parts || s[2] != c.embed_dim)
    throw ShapeError("visual encoder input " + nc::shape_str(s) + " is not N x P x D");
  const std::size_t n = s[0];
  auto tokens = nc::reshape(persons, nc::Shape{n * c.num_parts, c.embed_dim});
  auto encoded = detail::encoder_layer(tokens, state, "visual_encoder", c.heads_enc, nullptr, probe);
  auto flat = nc::reshape(encoded, nc::Shape{n, c.num_parts * c.embed_dim});
  return detail::feed_forward(flat, state, "part_mlp");
}

/// Encoder (unbiased self-attention, residual, norm) followed by the decoder
/// whose cross-attention from persons to label features carries the N x K
/// C-P bias (scaled by cp_gain). Pass nullptr for unbiased cross-attention.
inline nc::Tensor inference_transformer(const nc::Tensor& persons, const nc::Tensor& labels, const nc::Tensor* cp_bias,
                                        const ModelState& state, AttentionProbe* probe = nullptr) {
  const auto& c = state.config;
  if (persons.rank() != 2 || persons.dim(1) != c.embed_dim)
    throw ShapeError("inference transformer persons " + nc::shape_str(persons.shape()) + " are not N x D");
  if (labels.shape() != nc::Shape{c.num_actions, c.embed_dim})
    throw ShapeError("inference transformer labels " + nc::shape_str(labels.shape()) + " are not K x D");
  std::optional<nc::Tensor> bias;
  if (cp_bias) {
    if (cp_bias->shape() != nc::Shape{persons.dim(0), c.num_actions})
      throw ShapeError("C-P bias " + nc::shape_str(cp_bias->shape()) + " is not N x K");
    bias = detail::scaled_constant(*cp_bias, c.cp_gain);
  }
  auto encoded = detail::norm(
      nc::add(persons, detail::multi_head_attention(persons, persons, state, "inference_encoder.attn", c.heads_enc,
                                                    nullptr, probe)),
      state, "inference_encoder.norm");
  auto attended = detail::multi_head_attention(encoded, labels, state, "inference_decoder.attn", c.heads_dec,
                                               bias ? &*bias : nullptr, probe);
  auto z = detail::norm(nc::add(encoded, attended), state, "inference_decoder.norm1");
  return detail::norm(nc::add(z, detail::feed_forward(z, state, "inference_decoder.ffn")), state,
                      "inference_decoder.norm2");
}

/// Full pipeline. With `semantic_branch` off the model reduces to the
/// visual representation alone: person features averaged over parts and the
/// scene map feed their heads directly.
inline Predictions forward(const SceneSample& sample, const CCMap& cc, const CPMap& cp, const ModelState& state,
                           const ForwardOptions& options = {}) {
  const auto& c = state.config;
  detail::check_sample(sample, c);
  auto head = [&](const nc::Tensor& x, const std::string& name) {
    return nc::linear(x, state.param("head." + name + ".weight"), state.param("head." + name + ".bias"));
  };

  Predictions pred;
  auto persons = embed_persons(sample, state);
  pred.yg_s = head(nc::mean_pool_2d(sample.scene_feature), "scene");

  if (!options.semantic_branch) {
    auto visual = nc::mean_over_axis(persons, 1);
    pred.ya_x = head(visual, "action_x");
    pred.yg_x = head(nc::mean_over_axis(visual, 0), "group_x");
    return pred;
  }

  if (cc.num_actions != c.num_actions) throw ShapeError("C-C map label count does not match model K");
  if (cp.num_actions != c.num_actions) throw ShapeError("C-P map label count does not match model K");
  if (options.use_cp && !(cp.frame == sample.frame))
    throw ValidationError("C-P map frame differs from the scene frame");

  auto refined = visual_encoder(persons, state, options.probe);
  pred.ya_x = head(refined, "action_x");
  pred.yg_x = head(nc::mean_over_axis(refined, 0), "group_x");

  auto semantic = semantic_transformer(embed_labels(state), options.use_cc ? &cc : nullptr, state, options.probe);
  std::optional<nc::Tensor> cp_bias;
  if (options.use_cp) cp_bias = cp_lookup(cp, sample.bboxes);
  auto augmented = inference_transformer(refined, semantic, cp_bias ? &*cp_bias : nullptr, state, options.probe);
  pred.ya_o = head(augmented, "action_o");
  pred.yg_o = head(nc::mean_over_axis(augmented, 0), "group_o");
  return pred;
}

/// L = L_x + L_o + L_s, each group term a cross-entropy and each action term
/// a per-person mean cross-entropy weighted by lambda. L_o is zero when the
/// predictions carry no knowledge-augmented heads.
inline LossTerms compute_loss_terms(const Predictions& pred, const std::vector<std::size_t>& action_targets,
                                    std::size_t group_target, double lambda) {
  auto group_ce = [&](const nc::Tensor& logits) { return nc::cross_entropy(logits, {group_target}); };
  LossTerms terms;
  terms.l_x = nc::add(group_ce(pred.yg_x), nc::scale(nc::cross_entropy(pred.ya_x, action_targets), lambda));
  if (pred.ya_o && pred.yg_o) {
    terms.l_o = nc::add(group_ce(*pred.yg_o), nc::scale(nc::cross_entropy(*pred.ya_o, action_targets), lambda));
  } else {
    terms.l_o = nc::Tensor::scalar(0.0);
  }
  terms.l_s = group_ce(pred.yg_s);
  terms.total = nc::add(nc::add(terms.l_x, terms.l_o), terms.l_s);
  return terms;
}

inline LossBreakdown compute_loss(const Predictions& pred, const std::vector<std::size_t>& action_targets,
                                  std::size_t group_target, double lambda) {
  return compute_loss_terms(pred, action_targets, group_target, lambda).values();
}

namespace detail {
inline std::vector<double> softmax_values(const nc::Tensor& logits) {
  std::vector<double> p(logits.values());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& v : p) z += (v = std::exp(v - mx));
  for (auto& v : p) v /= z;
  return p;
}
}  // namespace detail

/// Sum of the group heads' softmax probabilities.
inline std::vector<double> fuse_scores(const Predictions& pred) {
  auto fused = detail::softmax_values(pred.yg_x);
  auto add_in = [&](const nc::Tensor& logits) {
    auto p = detail::softmax_values(logits);
    if (p.size() != fused.size()) throw ShapeError("group heads disagree on the number of classes");
    for (std::size_t i = 0; i < p.size(); ++i) fused[i] += p[i];
  };
  if (pred.yg_o) add_in(*pred.yg_o);
  add_in(pred.yg_s);
  return fused;
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace kari
