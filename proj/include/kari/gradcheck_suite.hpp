#pragma once

// Finite-difference check of the full model at toy scale, shared by the
// `gradcheck` subcommand and the test suite.

#include <cstdint>
#include <string>

#include "kari/knowledge.hpp"
#include "kari/model.hpp"
#include "kari/numcore/grad_check.hpp"
#include "kari/rng.hpp"
#include "kari/synthgym.hpp"
#include "kari/traineval.hpp"

namespace kari {

/// K=4, G=3, N=4, P=1, D=8, d=4, two encoder heads and one decoder head.
inline GenConfig toy_gen_config(std::uint64_t seed) {
  GenConfig g;
  g.num_groups = 3;
  g.num_actions = 4;
  g.num_persons = 4;
  g.num_parts = 1;
  g.feature_dim = 6;
  g.scene_grid = 2;
  g.scenes_train = 12;
  g.scenes_test = 4;
  g.seed = seed;
  return g;
}

inline ModelConfig toy_model_config() {
  ModelConfig m;
  m.embed_dim = 8;
  m.head_dim = 4;
  m.heads_enc = 2;
  m.heads_dec = 1;
  m.ffn_dim = 16;
  return toy_gen_config(0).model_shape(m);
}

struct ToyProblem {
  SyntheticData data;
  KnowledgeMaps maps;
  ModelState state;
};

inline ToyProblem make_toy_problem(std::uint64_t seed) {
  auto data = gen_dataset(toy_gen_config(seed));
  auto maps = build_maps(data.train.annotations(), 4, 4);
  auto state = init_model(toy_model_config(), seed);
  return {std::move(data), std::move(maps), std::move(state)};
}

/// Gradient check of the Full variant's total loss on the first `scenes`
/// training scenes, over every parameter, skipping stencils that straddle a
/// relu kink. Returns the worst scene's result.
inline nc::GradCheckResult check_full_model_gradients(std::uint64_t seed, std::size_t scenes = 1,
                                                      double step = 1e-4) {
  auto toy = make_toy_problem(seed);
  const auto options = AblationVariant::from_name("Full").options();
  nc::GradCheckResult worst;
  for (std::size_t s = 0; s < scenes && s < toy.data.train.examples.size(); ++s) {
    const auto& sample = toy.data.train.examples[s].sample;
    auto loss = [&](const nc::ParamSet& params) {
      ModelState view(toy.state.config, params);
      auto pred = forward(sample, toy.maps.cc, toy.maps.cp, view, options);
      return compute_loss_terms(pred, sample.action_targets, sample.group_target, view.config.lambda).total;
    };
    nc::ParamSet params = toy.state.params;
    auto r = nc::grad_check_smooth(loss, params, step);
    if (s == 0 || r.max_rel_error > worst.max_rel_error) worst = r;
  }
  return worst;
}

}  // namespace kari
