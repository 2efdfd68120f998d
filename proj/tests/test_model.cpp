#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "kari/model.hpp"
#include "support.hpp"

using namespace kari;
using kari::testing::random_values;
using kari::testing::uniform_index;
using kari::testing::uniform_real;

namespace {

void set_param(ModelState& s, const std::string& name, std::vector<double> values) {
  auto shape = s.param(name).shape();
  s.params.at(name) = nc::Tensor::parameter(shape, std::move(values));
}

ModelConfig small_config(std::size_t parts = 1) {
  ModelConfig c;
  c.num_actions = 4;
  c.num_groups = 3;
  c.num_persons = 5;
  c.num_parts = parts;
  c.feature_dim = 6;
  c.scene_channels = 6;
  c.embed_dim = 8;
  c.head_dim = 4;
  c.heads_enc = 2;
  c.heads_dec = 1;
  c.ffn_dim = 12;
  return c;
}

const FrameSize kFrame{640, 480};

SceneSample random_sample(const ModelConfig& c, Rng& rng) {
  SceneSample s;
  s.frame = kFrame;
  s.scene_feature = nc::Tensor(nc::Shape{2, 3, c.scene_channels}, random_values(rng, 6 * c.scene_channels));
  s.person_features = nc::Tensor(nc::Shape{c.num_persons, c.num_parts, c.feature_dim},
                                 random_values(rng, c.num_persons * c.num_parts * c.feature_dim));
  for (std::size_t n = 0; n < c.num_persons; ++n) {
    const double x = uniform_real(rng, 0, 600), y = uniform_real(rng, 0, 380);
    s.bboxes.push_back(BBox{x, y, x + 40, y + 100});
    s.action_targets.push_back(uniform_index(rng, 0, c.num_actions - 1));
  }
  s.group_target = uniform_index(rng, 0, c.num_groups - 1);
  return s;
}

CCMap random_cc(std::size_t k, Rng& rng) {
  CCMap m = CCMap::zeros(k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) m.values[i * k + j] = m.values[j * k + i] = uniform_real(rng, 0, 1);
  const double total = std::accumulate(m.values.begin(), m.values.end(), 0.0);
  for (auto& v : m.values) v /= total;
  m.degenerate = false;
  return m;
}

CPMap random_cp(std::size_t k, Rng& rng) {
  CPMap m = CPMap::zeros(4, 4, k, kFrame);
  for (std::size_t label = 0; label < k; ++label) {
    double total = 0.0;
    for (std::size_t cell = 0; cell < 16; ++cell) total += (m.values[cell * k + label] = uniform_real(rng, 0, 1));
    for (std::size_t cell = 0; cell < 16; ++cell) m.values[cell * k + label] /= total;
  }
  m.degenerate = false;
  return m;
}

void expect_same(const nc::Tensor& a, const nc::Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  EXPECT_EQ(a.values(), b.values());
}

void expect_same(const Predictions& a, const Predictions& b) {
  expect_same(a.ya_x, b.ya_x);
  expect_same(a.yg_x, b.yg_x);
  expect_same(a.yg_s, b.yg_s);
  ASSERT_EQ(a.ya_o.has_value(), b.ya_o.has_value());
  if (a.ya_o) {
    expect_same(*a.ya_o, *b.ya_o);
    expect_same(*a.yg_o, *b.yg_o);
  }
}

const AttentionRecord& find_record(const AttentionProbe& p, const std::string& block, std::size_t head = 0) {
  for (const auto& r : p.records)
    if (r.block == block && r.head == head) return r;
  throw std::runtime_error("no attention record for " + block);
}

// Checks gradients of `loss` w.r.t. the parameters whose names start with
// one of `prefixes`; other parameters are held fixed.
nc::GradCheckResult check_block(const ModelState& state, const std::vector<std::string>& prefixes,
                                const std::function<nc::Tensor(const ModelState&)>& loss) {
  nc::ParamSet subset;
  for (const auto& [name, t] : state.params)
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) subset.emplace(name, t);
  auto f = [&](const nc::ParamSet& ps) {
    ModelState view(state.config, state.params);
    for (const auto& [name, t] : ps) view.params.at(name) = t;
    return loss(view);
  };
  return nc::grad_check_smooth(f, subset);
}

nc::Tensor probe_sum(const nc::Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  return nc::sum(nc::mul(x, nc::Tensor(x.shape(), random_values(rng, x.numel()))));
}

}  // namespace

TEST(Init, DeterministicBoundedAndSeedDependent) {
  const auto c = small_config();
  const auto a = init_model(c, 5), b = init_model(c, 5), other = init_model(c, 6);
  bool differs = false;
  for (const auto& [name, t] : a.params) {
    EXPECT_EQ(t.values(), b.param(name).values()) << name;
    differs = differs || t.values() != other.param(name).values();
    for (double v : t.values()) EXPECT_TRUE(std::isfinite(v));
    if (t.rank() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
      for (double v : t.values()) EXPECT_LE(std::abs(v), bound) << name;
    }
  }
  EXPECT_TRUE(differs);
  for (double v : a.param("semantic.norm1.gain").values()) EXPECT_EQ(v, 1.0);
  for (double v : a.param("head.scene.bias").values()) EXPECT_EQ(v, 0.0);
}

TEST(Init, CopiesAreDeep) {
  auto a = init_model(small_config(), 1);
  ModelState b = a;
  b.params.at("label_embedding").leaf_data()[0] += 1.0;
  EXPECT_NE(a.param("label_embedding")[0], b.param("label_embedding")[0]);
}

TEST(LabelEmbedding, SelectsTableRows) {
  auto c = small_config();
  c.embed_dim = 4;
  c.head_dim = 4;
  auto s = init_model(c, 2);
  const auto y = embed_labels(s);
  EXPECT_EQ(y.values(), s.param("label_embedding").values());
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  set_param(s, "label_embedding", eye);
  EXPECT_EQ(embed_labels(s).values(), eye);
  EXPECT_EQ(embed_labels(s).values(), embed_labels(s).values());
}

TEST(PositionalEncoding, OriginAndTranslation) {
  const auto pe = positional_encode({BBox{-1, -1, 1, 1}}, kFrame, 8);
  for (std::size_t j = 0; j < 8; j += 2) {
    EXPECT_EQ(pe[j], 0.0);
    EXPECT_EQ(pe[j + 1], 1.0);
  }
  const auto same = positional_encode({BBox{10, 20, 50, 120}, BBox{10, 20, 50, 120}}, kFrame, 16);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(same[j], same[16 + j]);
  const auto moved = positional_encode({BBox{10, 20, 50, 120}, BBox{110, 20, 150, 120}}, kFrame, 16);
  double diff = 0.0;
  for (std::size_t j = 0; j < 16; ++j) diff += std::abs(moved[j] - moved[16 + j]);
  EXPECT_GT(diff, 1e-3);
  // y only moves the second half of the channels.
  const auto vert = positional_encode({BBox{10, 20, 50, 120}, BBox{10, 220, 50, 320}}, kFrame, 16);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(vert[j], vert[16 + j]);
  EXPECT_THROW(positional_encode({BBox{0, 0, 1, 1}}, kFrame, 6), ValidationError);
}

TEST(PersonEmbedding, ZeroWeightsGivePositionsOnly) {
  const auto c = small_config(2);
  auto s = init_model(c, 3);
  Rng rng(3);
  const auto sample = random_sample(c, rng);
  const auto x = embed_persons(sample, s);
  ASSERT_EQ(x.shape(), (nc::Shape{c.num_persons, 2, c.embed_dim}));
  const auto pe = positional_encode(sample.bboxes, sample.frame, c.embed_dim);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t n = i / (2 * c.embed_dim), ch = i % c.embed_dim;
    EXPECT_GE(x[i] - pe[n * c.embed_dim + ch], -1e-15);  // relu part is nonnegative
  }
  set_param(s, "person_embed.weight", std::vector<double>(c.feature_dim * c.embed_dim, 0.0));
  const auto only_pe = embed_persons(sample, s);
  for (std::size_t i = 0; i < only_pe.numel(); ++i) {
    const std::size_t n = i / (2 * c.embed_dim), ch = i % c.embed_dim;
    EXPECT_EQ(only_pe[i], pe[n * c.embed_dim + ch]);
  }
}

// K=2, d=1, equal attention logits: A = 0.5 everywhere, and with the C-C map
// [[0.1, 0.4], [0.4, 0.1]] the mixing matrix is [[0.6, 0.9], [0.9, 0.6]].
TEST(SemanticTransformer, HandComputedBiasedHead) {
  ModelConfig c = small_config();
  c.num_actions = 2;
  c.embed_dim = 4;
  c.head_dim = 1;
  c.heads_enc = 1;
  auto s = init_model(c, 4);
  set_param(s, "semantic.attn.head0.query", {0, 0, 0, 0});
  set_param(s, "semantic.attn.out.weight", {1, 0, 0, 0});
  const CCMap cc{2, {0.1, 0.4, 0.4, 0.1}, false};

  AttentionProbe probe;
  const auto y = embed_labels(s);
  const auto bias = cc.as_tensor();
  const auto h = detail::multi_head_attention(y, y, s, "semantic.attn", 1, &bias, &probe);
  const auto& rec = find_record(probe, "semantic.attn");
  const double expect_mix[4] = {0.6, 0.9, 0.9, 0.6};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(rec.weights[i], 0.5);
    EXPECT_NEAR(rec.biased[i], expect_mix[i], 1e-15);
  }
  // Scalar oracle: v_k = Y[k] . W^V, h_n = sum_k mix[n][k] v_k.
  const auto& table = s.param("label_embedding").values();
  const auto& wv = s.param("semantic.attn.head0.value").values();
  double v[2] = {0, 0};
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 4; ++j) v[k] += table[k * 4 + j] * wv[j];
  EXPECT_NEAR(h[0], 0.6 * v[0] + 0.9 * v[1], 1e-14);
  EXPECT_NEAR(h[4], 0.9 * v[0] + 0.6 * v[1], 1e-14);
  for (int col = 1; col < 4; ++col) EXPECT_EQ(h[col], 0.0);

  // The full block runs the same biased head.
  AttentionProbe block_probe;
  semantic_transformer(y, &cc, s, &block_probe);
  EXPECT_EQ(find_record(block_probe, "semantic.attn").biased, rec.biased);
}

// N=1, K=2, d=1, equal logits: A^o = [0.5, 0.5]; bias row [0.2, 0.1] gives
// mixing weights [0.7, 0.6].
TEST(InferenceTransformer, HandComputedBiasedDecoder) {
  ModelConfig c = small_config();
  c.num_actions = 2;
  c.num_persons = 1;
  c.embed_dim = 4;
  c.head_dim = 1;
  c.heads_enc = 1;
  c.heads_dec = 1;
  auto s = init_model(c, 5);
  set_param(s, "inference_decoder.attn.head0.query", {0, 0, 0, 0});
  set_param(s, "inference_decoder.attn.out.weight", {1, 0, 0, 0});
  Rng rng(5);
  const auto persons = nc::Tensor(nc::Shape{1, 4}, random_values(rng, 4));
  const auto labels = nc::Tensor(nc::Shape{2, 4}, random_values(rng, 8));
  const auto bias = nc::Tensor(nc::Shape{1, 2}, {0.2, 0.1});

  AttentionProbe probe;
  const auto h = detail::multi_head_attention(persons, labels, s, "inference_decoder.attn", 1, &bias, &probe);
  const auto& rec = find_record(probe, "inference_decoder.attn");
  EXPECT_EQ(rec.weights, (std::vector<double>{0.5, 0.5}));
  EXPECT_NEAR(rec.biased[0], 0.7, 1e-15);
  EXPECT_NEAR(rec.biased[1], 0.6, 1e-15);
  const auto& wv = s.param("inference_decoder.attn.head0.value").values();
  double v[2] = {0, 0};
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 4; ++j) v[k] += labels[k * 4 + j] * wv[j];
  EXPECT_NEAR(h[0], 0.7 * v[0] + 0.6 * v[1], 1e-14);

  AttentionProbe block_probe;
  const auto out = inference_transformer(persons, labels, &bias, s, &block_probe);
  EXPECT_EQ(out.shape(), (nc::Shape{1, 4}));
  EXPECT_EQ(find_record(block_probe, "inference_decoder.attn").biased, rec.biased);
}

TEST(Attention, RowSumsBeforeAndAfterBias) {
  const auto c = small_config();
  const auto s = init_model(c, 6);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto sample = random_sample(c, rng);
    AttentionProbe probe;
    ForwardOptions opt;
    opt.probe = &probe;
    forward(sample, random_cc(c.num_actions, rng), random_cp(c.num_actions, rng), s, opt);
    ASSERT_EQ(probe.records.size(), 2 * c.heads_enc + c.heads_enc + c.heads_dec);
    for (const auto& r : probe.records) {
      for (std::size_t i = 0; i < r.rows; ++i) {
        double w = 0, b = 0, mixed = 0;
        for (std::size_t j = 0; j < r.cols; ++j) {
          w += r.weights[i * r.cols + j];
          b += r.bias[i * r.cols + j];
          mixed += r.biased[i * r.cols + j];
        }
        EXPECT_NEAR(w, 1.0, 1e-12) << r.block;
        EXPECT_NEAR(mixed, w + b, 4 * std::numeric_limits<double>::epsilon() * (1.0 + b)) << r.block;
      }
    }
  }
}

TEST(Attention, ZeroMapsMatchUnbiasedBlocks) {
  const auto c = small_config();
  const auto s = init_model(c, 7);
  Rng rng(7);
  const auto y = embed_labels(s);
  const auto zero_cc = CCMap::zeros(4);
  expect_same(semantic_transformer(y, nullptr, s), semantic_transformer(y, &zero_cc, s));
  const auto persons = nc::Tensor(nc::Shape{5, 8}, random_values(rng, 40));
  const auto zero = nc::Tensor::zeros({5, 4});
  expect_same(inference_transformer(persons, y, nullptr, s), inference_transformer(persons, y, &zero, s));

  // A gain of zero switches a real map off.
  auto off = s;
  off.config.cc_gain = 0.0;
  off.config.cp_gain = 0.0;
  const auto cc = random_cc(4, rng);
  const auto cp_rows = nc::Tensor(nc::Shape{5, 4}, random_values(rng, 20));
  expect_same(semantic_transformer(y, &cc, off), semantic_transformer(y, nullptr, off));
  expect_same(inference_transformer(persons, y, &cp_rows, off), inference_transformer(persons, y, nullptr, off));
}

TEST(Forward, ZeroMapsEqualSemanticOnlyVariant) {
  const auto c = small_config();
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = init_model(c, 100 + trial);
    const auto sample = random_sample(c, rng);
    const auto cc = CCMap::zeros(c.num_actions);
    const auto cp = CPMap::zeros(4, 4, c.num_actions, kFrame);
    const auto full = forward(sample, cc, cp, s, ForwardOptions{true, true, true, nullptr});
    const auto plain = forward(sample, cc, cp, s, ForwardOptions{true, false, false, nullptr});
    expect_same(full, plain);
  }
}

TEST(Forward, ShapesAndDeterminism) {
  for (std::size_t parts : {1u, 2u}) {
    const auto c = small_config(parts);
    const auto s = init_model(c, 9);
    Rng rng(9);
    const auto sample = random_sample(c, rng);
    const auto cc = random_cc(c.num_actions, rng);
    const auto cp = random_cp(c.num_actions, rng);
    const auto p = forward(sample, cc, cp, s);
    EXPECT_EQ(p.ya_x.shape(), (nc::Shape{c.num_persons, c.num_actions}));
    EXPECT_EQ(p.ya_o->shape(), (nc::Shape{c.num_persons, c.num_actions}));
    EXPECT_EQ(p.yg_x.shape(), (nc::Shape{c.num_groups}));
    EXPECT_EQ(p.yg_o->shape(), (nc::Shape{c.num_groups}));
    EXPECT_EQ(p.yg_s.shape(), (nc::Shape{c.num_groups}));
    expect_same(p, forward(sample, cc, cp, s));
    EXPECT_EQ(visual_encoder(embed_persons(sample, s), s).shape(), (nc::Shape{c.num_persons, c.embed_dim}));

    const auto base = forward(sample, cc, cp, s, ForwardOptions{false, false, false, nullptr});
    EXPECT_FALSE(base.ya_o.has_value());
    EXPECT_FALSE(base.yg_o.has_value());
  }
}

TEST(Forward, RejectsMismatchedInputs) {
  const auto c = small_config();
  const auto s = init_model(c, 10);
  Rng rng(10);
  auto sample = random_sample(c, rng);
  EXPECT_THROW(forward(sample, CCMap::zeros(3), random_cp(4, rng), s), ShapeError);
  EXPECT_THROW(forward(sample, random_cc(4, rng), CPMap::zeros(4, 4, 5, kFrame), s), ShapeError);
  auto wrong = sample;
  wrong.person_features = nc::Tensor::zeros({4, 1, 6});
  EXPECT_THROW(forward(wrong, random_cc(4, rng), random_cp(4, rng), s), ShapeError);
  EXPECT_THROW(semantic_transformer(nc::Tensor::zeros({3, 8}), nullptr, s), ShapeError);
}

TEST(Forward, PersonPermutationEquivariance) {
  const auto c = small_config();
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = init_model(c, 200 + trial);
    const auto sample = random_sample(c, rng);
    const auto cc = random_cc(c.num_actions, rng);
    const auto cp = random_cp(c.num_actions, rng);
    std::vector<std::size_t> perm(c.num_persons);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto a = forward(sample, cc, cp, s);
    const auto b = forward(kari::testing::permute_persons(sample, perm), cc, cp, s);
    for (std::size_t i = 0; i < c.num_persons; ++i)
      for (std::size_t k = 0; k < c.num_actions; ++k) {
        EXPECT_NEAR(b.ya_x[i * c.num_actions + k], a.ya_x[perm[i] * c.num_actions + k], 1e-10);
        EXPECT_NEAR((*b.ya_o)[i * c.num_actions + k], (*a.ya_o)[perm[i] * c.num_actions + k], 1e-10);
      }
    const auto fa = fuse_scores(a), fb = fuse_scores(b);
    for (std::size_t g = 0; g < c.num_groups; ++g) {
      EXPECT_NEAR(fa[g], fb[g], 1e-10);
      EXPECT_NEAR(a.yg_x[g], b.yg_x[g], 1e-10);
      EXPECT_NEAR((*a.yg_o)[g], (*b.yg_o)[g], 1e-10);
      EXPECT_EQ(a.yg_s[g], b.yg_s[g]);
    }
  }
}

TEST(Loss, UniformHeads) {
  Predictions p;
  p.ya_x = nc::Tensor::zeros({4, 9});
  p.ya_o = nc::Tensor::zeros({4, 9});
  p.yg_x = nc::Tensor::zeros({8});
  p.yg_o = nc::Tensor::zeros({8});
  p.yg_s = nc::Tensor::zeros({8});
  const auto l = compute_loss(p, {0, 3, 8, 1}, 5, 1.0);
  EXPECT_NEAR(l.total, 3 * std::log(8.0) + 2 * std::log(9.0), 1e-12);
  EXPECT_NEAR(l.total, 10.632, 1e-3);
  EXPECT_EQ(l.total, l.l_x + l.l_o + l.l_s);
  EXPECT_NEAR(l.l_s, std::log(8.0), 1e-15);
  EXPECT_NEAR(compute_loss(p, {0, 3, 8, 1}, 5, 2.5).total, 3 * std::log(8.0) + 5 * std::log(9.0), 1e-12);
}

TEST(Loss, LambdaZeroAndSaturation) {
  Rng rng(12);
  Predictions p;
  p.ya_x = nc::Tensor(nc::Shape{3, 4}, random_values(rng, 12));
  p.ya_o = nc::Tensor(nc::Shape{3, 4}, random_values(rng, 12));
  p.yg_x = nc::Tensor(nc::Shape{3}, random_values(rng, 3));
  p.yg_o = nc::Tensor(nc::Shape{3}, random_values(rng, 3));
  p.yg_s = nc::Tensor(nc::Shape{3}, random_values(rng, 3));
  EXPECT_EQ(compute_loss(p, {0, 1, 2}, 1, 0.0).total, compute_loss(p, {3, 3, 0}, 1, 0.0).total);

  auto peaked = [](std::size_t rows, std::size_t cols, const std::vector<std::size_t>& hot) {
    std::vector<double> v(rows * cols, -25.0);
    for (std::size_t r = 0; r < rows; ++r) v[r * cols + hot[r]] = 25.0;
    return nc::Tensor(rows == 1 ? nc::Shape{cols} : nc::Shape{rows, cols}, v);
  };
  Predictions q;
  q.ya_x = peaked(3, 4, {1, 2, 3});
  q.ya_o = peaked(3, 4, {1, 2, 3});
  q.yg_x = peaked(1, 3, {2});
  q.yg_o = peaked(1, 3, {2});
  q.yg_s = peaked(1, 3, {2});
  EXPECT_LT(compute_loss(q, {1, 2, 3}, 2, 1.0).total, 1e-8);

  Predictions base = q;
  base.ya_o.reset();
  base.yg_o.reset();
  EXPECT_EQ(compute_loss(base, {1, 2, 3}, 2, 1.0).l_o, 0.0);
}

TEST(Fusion, SumsHeadProbabilities) {
  Predictions p;
  p.yg_x = nc::Tensor(nc::Shape{4}, {0.1, 2.0, -1.0, 0.5});
  p.yg_o = p.yg_x;
  p.yg_s = p.yg_x;
  const auto fused = fuse_scores(p);
  EXPECT_EQ(argmax(fused), 1u);
  EXPECT_NEAR(std::accumulate(fused.begin(), fused.end(), 0.0), 3.0, 1e-12);

  Predictions q;
  q.yg_x = nc::Tensor::zeros({5});
  q.yg_o = nc::Tensor::zeros({5});
  q.yg_s = nc::Tensor(nc::Shape{5}, {0, 0, 0, 4, 0});
  EXPECT_EQ(argmax(fuse_scores(q)), 3u);

  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Predictions r;
    r.yg_x = nc::Tensor(nc::Shape{6}, random_values(rng, 6, 3.0));
    r.yg_o = nc::Tensor(nc::Shape{6}, random_values(rng, 6, 3.0));
    r.yg_s = nc::Tensor(nc::Shape{6}, random_values(rng, 6, 3.0));
    auto f = fuse_scores(r);
    EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 3.0, 1e-12);
    auto scaled = f;
    for (auto& v : scaled) v *= 7.5;
    EXPECT_EQ(argmax(scaled), argmax(f));
  }
}

TEST(GradientBlocks, SemanticBlockTiny) {
  ModelConfig c = small_config();
  c.num_actions = 3;
  c.embed_dim = 4;
  c.head_dim = 4;
  Rng rng(14);
  const auto s = init_model(c, 14);
  const auto cc = random_cc(3, rng);
  const auto r = check_block(s, {"semantic.", "label_embedding"}, [&](const ModelState& m) {
    return probe_sum(semantic_transformer(embed_labels(m), &cc, m), 1);
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
  EXPECT_GT(r.checked, 100u);
}

TEST(GradientBlocks, CrossAttentionFfnAndHeads) {
  const auto c = small_config();
  Rng rng(15);
  const auto s = init_model(c, 15);
  const auto persons = nc::Tensor(nc::Shape{5, 8}, random_values(rng, 40));
  const auto labels = nc::Tensor(nc::Shape{4, 8}, random_values(rng, 32));
  const auto cp_rows = nc::Tensor(nc::Shape{5, 4}, random_values(rng, 20, 0.2));
  auto r = check_block(s, {"inference_encoder.", "inference_decoder."}, [&](const ModelState& m) {
    return probe_sum(inference_transformer(persons, labels, &cp_rows, m), 2);
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;

  r = check_block(s, {"visual_encoder.", "part_mlp."}, [&](const ModelState& m) {
    return probe_sum(visual_encoder(nc::reshape(persons, nc::Shape{5, 1, 8}), m), 3);
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;

  const auto sample = random_sample(c, rng);
  const auto cc = random_cc(4, rng);
  const auto cp = random_cp(4, rng);
  r = check_block(s, {"head.", "person_embed."}, [&](const ModelState& m) {
    auto p = forward(sample, cc, cp, m);
    return compute_loss_terms(p, sample.action_targets, sample.group_target, 1.0).total;
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;
}

TEST(GradientBlocks, PartMlpAtTwoParts) {
  const auto c = small_config(2);
  Rng rng(16);
  const auto s = init_model(c, 16);
  const auto sample = random_sample(c, rng);
  const auto cc = random_cc(4, rng);
  const auto cp = random_cp(4, rng);
  const auto r = check_block(s, {"part_mlp.", "visual_encoder.", "person_embed."}, [&](const ModelState& m) {
    auto p = forward(sample, cc, cp, m);
    return compute_loss_terms(p, sample.action_targets, sample.group_target, 1.0).total;
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;
}
