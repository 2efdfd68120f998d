#pragma once

// Adam training loop, group-activity metrics, and the ablation harness that
// sweeps knowledge variants, seeds, and train-data ratios.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kari/error.hpp"
#include "kari/knowledge.hpp"
#include "kari/model.hpp"
#include "kari/rng.hpp"
#include "kari/synthgym.hpp"

namespace kari {

struct OptimConfig {
  double lr_init = 1e-4;
  double lr_final = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_init > 0.0) || !(lr_final > 0.0)) throw ValidationError("optim learning rates must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ValidationError("optim betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ValidationError("optim.epsilon must be > 0");
    if (batch_size != 1) throw ValidationError("optim.batch_size must be 1 (no gradient accumulation)");
  }

  /// Linear interpolation from lr_init at the first epoch to lr_final at the last.
  double lr_at(std::size_t epoch) const {
    if (epochs <= 1) return lr_init;
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return lr_init + (lr_final - lr_init) * t;
  }
};

struct AdamMoments {
  std::map<std::string, std::vector<double>> first;
  std::map<std::string, std::vector<double>> second;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
inline void adam_step(nc::ParamSet& params, const nc::Gradients& grads, AdamMoments& moments, double lr,
                      const OptimConfig& cfg) {
  ++moments.step;
  const double t = static_cast<double>(moments.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, tensor] : params) {
    auto g_it = grads.find(name);
    if (g_it == grads.end()) continue;
    const auto& g = g_it->second;
    auto& data = tensor.leaf_data();
    if (g.size() != data.size()) throw ShapeError("gradient for '" + name + "' does not match the parameter shape");
    auto m_it = moments.first.find(name);
    if (m_it == moments.first.end()) {
      // Fresh moments with a zero gradient leave the parameter unchanged.
      if (std::all_of(g.begin(), g.end(), [](double x) { return x == 0.0; })) continue;
      m_it = moments.first.emplace(name, std::vector<double>{}).first;
    }
    auto& m = m_it->second;
    auto& v = moments.second[name];
    if (m.empty()) {
      m.assign(data.size(), 0.0);
      v.assign(data.size(), 0.0);
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

struct AblationVariant {
  std::string name;
  bool use_semantic_branch = true;
  bool use_cc = true;
  bool use_cp = true;

  ForwardOptions options(AttentionProbe* probe = nullptr) const {
    return ForwardOptions{use_semantic_branch, use_semantic_branch && use_cc, use_semantic_branch && use_cp, probe};
  }

  static std::vector<AblationVariant> all() {
    return {{"Base", false, false, false},
            {"Base+Semantic", true, false, false},
            {"Base+Semantic+C-P", true, false, true},
            {"Base+Semantic+C-C", true, true, false},
            {"Full", true, true, true}};
  }

  static AblationVariant from_name(const std::string& name) {
    for (auto& v : all())
      if (v.name == name) return v;
    throw ValidationError("unknown variant '" + name +
                          "' (expected Base, Base+Semantic, Base+Semantic+C-P, Base+Semantic+C-C or Full)");
  }
};

struct KnowledgeMaps {
  CCMap cc;
  CPMap cp;
};

inline constexpr std::size_t kDefaultGrid = 16;

/// Maps from a training split. Callers hand in the train annotations only.
inline KnowledgeMaps build_maps(const AnnotationSet& train, std::size_t grid_h = kDefaultGrid,
                                std::size_t grid_w = kDefaultGrid) {
  return {build_cc_map(train), build_cp_map(train, grid_h, grid_w)};
}

struct TrainResult {
  ModelState state;
  std::vector<LossBreakdown> history;  // per-epoch means
};

namespace detail {

inline std::string first_nonfinite_term(const LossBreakdown& b) {
  if (!std::isfinite(b.l_x)) return "L_x (visual heads)";
  if (!std::isfinite(b.l_o)) return "L_o (knowledge-augmented heads)";
  if (!std::isfinite(b.l_s)) return "L_s (scene head)";
  return "total";
}

}  // namespace detail

/// Epoch loop with batch size 1 over a seeded shuffle of the training scenes.
/// `initial` overrides the seeded initialization when given.
inline TrainResult train(const AblationVariant& variant, const Dataset& data, const KnowledgeMaps& maps,
                         const ModelConfig& model_cfg, const OptimConfig& optim_cfg,
                         std::optional<ModelState> initial = std::nullopt) {
  optim_cfg.validate();
  model_cfg.validate();
  TrainResult result{initial ? std::move(*initial) : init_model(model_cfg, optim_cfg.seed), {}};
  if (optim_cfg.epochs == 0) return result;
  if (data.examples.empty()) throw ValidationError("training data is empty");

  Rng shuffle_rng = substream(optim_cfg.seed, "train.shuffle");
  AdamMoments moments;
  std::vector<std::size_t> order(data.examples.size());
  const auto options = variant.options();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < optim_cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = optim_cfg.lr_at(epoch);
    LossBreakdown mean{};
    for (auto idx : order) {
      const auto& sample = data.examples[idx].sample;
      auto pred = forward(sample, maps.cc, maps.cp, result.state, options);
      auto terms = compute_loss_terms(pred, sample.action_targets, sample.group_target, result.state.config.lambda);
      const auto values = terms.values();
      if (!std::isfinite(values.total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           ", scene '" + data.examples[idx].annotation.scene_id +
                           "'): offending term " + detail::first_nonfinite_term(values));
      }
      adam_step(result.state.params, nc::backward(terms.total, result.state.params), moments, lr, optim_cfg);
      mean.l_x += values.l_x;
      mean.l_o += values.l_o;
      mean.l_s += values.l_s;
      mean.total += values.total;
      ++step;
    }
    const double inv = 1.0 / static_cast<double>(order.size());
    result.history.push_back({mean.l_x * inv, mean.l_o * inv, mean.l_s * inv, mean.total * inv});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double mca = 0.0;   // percent
  double mpca = 0.0;  // percent, after the optional class merge
  std::vector<double> per_class_accuracy;           // percent per (merged) class; 0 for absent classes
  std::vector<std::vector<std::size_t>> confusion;  // [target][predicted], unmerged
  std::size_t count = 0;
};

/// MCA over raw labels; MPCA as the mean accuracy over classes present in
/// the targets, after mapping both targets and predictions through `merge`.
inline Metrics compute_metrics(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& targets,
                               std::size_t num_classes,
                               const std::optional<std::vector<std::size_t>>& merge = std::nullopt) {
  if (targets.empty()) throw ValidationError("cannot compute metrics on empty data");
  if (predicted.size() != targets.size()) throw ValidationError("prediction and target counts differ");
  if (merge && merge->size() != num_classes) throw ValidationError("merge table must have one entry per class");
  std::size_t merged_classes = num_classes;
  if (merge) {
    merged_classes = 0;
    for (auto m : *merge) merged_classes = std::max(merged_classes, m + 1);
  }
  Metrics out;
  out.count = targets.size();
  out.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::vector<std::size_t> hits(merged_classes, 0), totals(merged_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto t = targets[i], p = predicted[i];
    if (t >= num_classes || p >= num_classes) throw ValidationError("class index out of range in metrics");
    ++out.confusion[t][p];
    if (t == p) ++correct;
    const auto mt = merge ? (*merge)[t] : t;
    const auto mp = merge ? (*merge)[p] : p;
    ++totals[mt];
    if (mt == mp) ++hits[mt];
  }
  out.mca = 100.0 * static_cast<double>(correct) / static_cast<double>(targets.size());
  out.per_class_accuracy.assign(merged_classes, 0.0);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < merged_classes; ++c) {
    if (totals[c] == 0) continue;
    out.per_class_accuracy[c] = 100.0 * static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
    sum += out.per_class_accuracy[c];
    ++present;
  }
  out.mpca = sum / static_cast<double>(present);
  return out;
}

/// Group prediction per scene: argmax of the fused group scores.
inline std::vector<std::size_t> predict_groups(const ModelState& state, const AblationVariant& variant,
                                               const Dataset& data, const KnowledgeMaps& maps) {
  std::vector<std::size_t> out;
  out.reserve(data.examples.size());
  const auto options = variant.options();
  for (const auto& e : data.examples) out.push_back(argmax(fuse_scores(forward(e.sample, maps.cc, maps.cp, state, options))));
  return out;
}

inline Metrics evaluate(const ModelState& state, const AblationVariant& variant, const Dataset& data,
                        const KnowledgeMaps& maps, const std::optional<std::vector<std::size_t>>& merge = std::nullopt) {
  if (data.examples.empty()) throw ValidationError("evaluation data is empty");
  std::vector<std::size_t> targets;
  for (const auto& e : data.examples) targets.push_back(e.sample.group_target);
  return compute_metrics(predict_groups(state, variant, data, maps), targets, state.config.num_groups, merge);
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Stratified subsample: per group class, round(ratio * count) scenes (at
/// least one when the class is present), original order preserved.
inline Dataset stratified_subsample(const Dataset& data, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("data ratio must lie in (0, 1]");
  if (ratio == 1.0) return data;
  std::map<std::size_t, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < data.examples.size(); ++i) by_group[data.examples[i].sample.group_target].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [group, idx] : by_group) {
    const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size()))));
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(take, idx.size())));
  }
  std::sort(keep.begin(), keep.end());
  Dataset out{data.vocabulary, data.frame, {}};
  out.examples.reserve(keep.size());
  for (auto i : keep) out.examples.push_back(data.examples[i]);
  return out;
}

struct AblationCell {
  std::uint64_t seed = 0;
  std::string variant;
  double ratio = 1.0;
  std::size_t train_scenes = 0;
  Metrics metrics;
  std::vector<LossBreakdown> history;
};

struct VariantSummary {
  std::string variant;
  double ratio = 1.0;
  std::size_t runs = 0;
  double mca_mean = 0, mca_std = 0, mpca_mean = 0, mpca_std = 0;
};

struct VariantDelta {
  double ratio = 1.0;
  std::string from, to;
  double mca_delta = 0;  // mean MCA(to) - mean MCA(from)
};

struct AblationReport {
  std::vector<AblationCell> cells;  // sorted by ratio, seed, then variant order
  std::vector<VariantSummary> summaries;
  std::vector<VariantDelta> deltas;

  const VariantSummary& summary(const std::string& variant, double ratio = 1.0) const {
    for (const auto& s : summaries)
      if (s.variant == variant && s.ratio == ratio) return s;
    throw Error("no summary for variant '" + variant + "' at ratio " + std::to_string(ratio));
  }
  /// MCA of one cell.
  double mca(std::uint64_t seed, const std::string& variant, double ratio = 1.0) const {
    for (const auto& c : cells)
      if (c.seed == seed && c.variant == variant && c.ratio == ratio) return c.metrics.mca;
    throw Error("no cell for seed " + std::to_string(seed) + ", variant '" + variant + "'");
  }
};

struct AblationPlan {
  std::vector<AblationVariant> variants = AblationVariant::all();
  std::vector<double> ratios{1.0};
  std::size_t grid_h = kDefaultGrid, grid_w = kDefaultGrid;
  std::size_t jobs = 1;
};

namespace detail {

inline void summarize(AblationReport& report, const AblationPlan& plan) {
  for (double ratio : plan.ratios) {
    for (const auto& v : plan.variants) {
      std::vector<const Metrics*> ms;
      for (const auto& c : report.cells)
        if (c.variant == v.name && c.ratio == ratio) ms.push_back(&c.metrics);
      VariantSummary s{v.name, ratio, ms.size()};
      auto stats = [&](auto field, double& mean, double& sd) {
        mean = 0.0;
        for (auto* m : ms) mean += field(*m);
        mean /= static_cast<double>(ms.size());
        sd = 0.0;
        for (auto* m : ms) sd += (field(*m) - mean) * (field(*m) - mean);
        sd = ms.size() > 1 ? std::sqrt(sd / static_cast<double>(ms.size() - 1)) : 0.0;
      };
      stats([](const Metrics& m) { return m.mca; }, s.mca_mean, s.mca_std);
      stats([](const Metrics& m) { return m.mpca; }, s.mpca_mean, s.mpca_std);
      report.summaries.push_back(s);
    }
    for (std::size_t i = 0; i < plan.variants.size(); ++i)
      for (std::size_t j = i + 1; j < plan.variants.size(); ++j)
        report.deltas.push_back({ratio, plan.variants[i].name, plan.variants[j].name,
                                 report.summary(plan.variants[j].name, ratio).mca_mean -
                                     report.summary(plan.variants[i].name, ratio).mca_mean});
  }
}

}  // namespace detail

/// For every seed: generate data, then per ratio subsample the train split,
/// build maps from that subsample, and train/evaluate every variant on the
/// full test split. Cells may run on `plan.jobs` threads; results are
/// assembled in a fixed order.
inline AblationReport run_ablation(const ModelConfig& model_cfg, const GenConfig& gen_cfg, const OptimConfig& optim_cfg,
                                   const std::vector<std::uint64_t>& seeds, const AblationPlan& plan = {}) {
  if (seeds.empty()) throw ValidationError("ablation needs at least one seed");
  if (plan.variants.empty() || plan.ratios.empty()) throw ValidationError("ablation needs variants and ratios");
  struct Split {
    std::uint64_t seed;
    double ratio;
    Dataset train;
    const Dataset* test;
    KnowledgeMaps maps;
  };
  std::vector<SyntheticData> worlds;
  worlds.reserve(seeds.size());
  std::vector<Split> splits;
  for (auto seed : seeds) {
    GenConfig g = gen_cfg;
    g.seed = seed;
    worlds.push_back(gen_dataset(g));
  }
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    for (double ratio : plan.ratios) {
      Rng rng = substream(seeds[s], "ablation.ratio." + std::to_string(ratio));
      Dataset train = stratified_subsample(worlds[s].train, ratio, rng);
      auto maps = build_maps(train.annotations(), plan.grid_h, plan.grid_w);
      splits.push_back({seeds[s], ratio, std::move(train), &worlds[s].test, std::move(maps)});
    }
  }

  const ModelConfig mcfg = gen_cfg.model_shape(model_cfg);
  std::vector<std::pair<const Split*, const AblationVariant*>> work;
  // Order: ratio, seed, variant.
  for (double ratio : plan.ratios)
    for (auto seed : seeds)
      for (const auto& split : splits)
        if (split.seed == seed && split.ratio == ratio)
          for (const auto& v : plan.variants) work.emplace_back(&split, &v);

  std::vector<AblationCell> cells(work.size());
  auto run_cell = [&](std::size_t i) {
    const auto& [split, variant] = work[i];
    OptimConfig o = optim_cfg;
    o.seed = split->seed;
    auto trained = train(*variant, split->train, split->maps, mcfg, o);
    cells[i] = AblationCell{split->seed, variant->name, split->ratio, split->train.examples.size(),
                            evaluate(trained.state, *variant, *split->test, split->maps), std::move(trained.history)};
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(plan.jobs, work.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < work.size(); ++i) run_cell(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t j = 0; j < jobs; ++j) {
      pool.emplace_back([&, j] {
        try {
          for (std::size_t i = j; i < work.size(); i += jobs) run_cell(i);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  AblationReport report;
  report.cells = std::move(cells);
  detail::summarize(report, plan);
  return report;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline nlohmann::json metrics_to_json(const Metrics& m) {
  return {{"mca", m.mca},
          {"mpca", m.mpca},
          {"count", m.count},
          {"per_class_accuracy", m.per_class_accuracy},
          {"confusion", m.confusion}};
}

inline nlohmann::json report_to_json(const AblationReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json j = metrics_to_json(c.metrics);
    j["seed"] = c.seed;
    j["variant"] = c.variant;
    j["ratio"] = c.ratio;
    j["train_scenes"] = c.train_scenes;
    if (!c.history.empty()) j["final_loss"] = c.history.back().total;
    cells.push_back(std::move(j));
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : r.summaries)
    summary.push_back({{"variant", s.variant},
                       {"ratio", s.ratio},
                       {"runs", s.runs},
                       {"mca_mean", s.mca_mean},
                       {"mca_std", s.mca_std},
                       {"mpca_mean", s.mpca_mean},
                       {"mpca_std", s.mpca_std}});
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : r.deltas)
    deltas.push_back({{"ratio", d.ratio}, {"from", d.from}, {"to", d.to}, {"mca_delta", d.mca_delta}});
  return {{"cells", cells}, {"summary", summary}, {"deltas", deltas}};
}

/// Per-variant table: variant, ratio, MCA mean and std, runs.
inline std::string report_to_csv(const AblationReport& r) {
  std::ostringstream os;
  os << "variant,ratio,mca_mean,mca_std,mpca_mean,mpca_std,runs\n";
  for (const auto& s : r.summaries)
    os << s.variant << ',' << s.ratio << ',' << s.mca_mean << ',' << s.mca_std << ',' << s.mpca_mean << ','
       << s.mpca_std << ',' << s.runs << '\n';
  return os.str();
}

inline std::string history_to_csv(const std::vector<LossBreakdown>& history) {
  std::ostringstream os;
  os << "epoch,l_x,l_o,l_s,total\n";
  for (std::size_t e = 0; e < history.size(); ++e)
    os << e << ',' << detail::fmt17(history[e].l_x) << ',' << detail::fmt17(history[e].l_o) << ','
       << detail::fmt17(history[e].l_s) << ',' << detail::fmt17(history[e].total) << '\n';
  return os.str();
}

}  // namespace kari
