#pragma once

// Tactic-driven synthetic group-activity scenes. Each group activity is a
// tactic: a fixed multiset of action roles, each placed around a zone of
// the frame. Person features are noisy action prototypes, and a fraction
// rho of persons show the prototype of a wrong action while keeping their
// true label, so priors over label co-occurrence and position carry
// information the visual evidence lacks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kari/detail/format.hpp"
#include "kari/error.hpp"
#include "kari/knowledge.hpp"
#include "kari/model.hpp"
#include "kari/rng.hpp"

namespace kari {

struct Role {
  std::size_t action_index = 0;
  std::size_t count = 0;
  double zone_x = 0.5, zone_y = 0.5;  // normalized zone center
  double zone_sigma = 0.1;            // normalized spread
  bool operator==(const Role&) const = default;
};

struct Tactic {
  std::size_t group_index = 0;
  std::vector<Role> roles;

  std::size_t person_count() const {
    std::size_t n = 0;
    for (const auto& r : roles) n += r.count;
    return n;
  }
  bool uses_action(std::size_t a) const {
    return std::any_of(roles.begin(), roles.end(), [a](const Role& r) { return r.action_index == a && r.count > 0; });
  }
  bool operator==(const Tactic&) const = default;
};

struct GenConfig {
  std::size_t num_groups = 4;   // G
  std::size_t num_actions = 6;  // K
  std::size_t num_persons = 8;  // N
  std::size_t num_parts = 1;
  FrameSize frame{640, 480};
  std::size_t feature_dim = 16;
  double noise_rho = 0.3;
  double feature_sigma = 0.3;
  double zone_sigma = 0.1;
  std::size_t scene_grid = 4;  // global scene map is scene_grid x scene_grid x feature_dim
  double bbox_width = 40.0;     // pixels
  double bbox_height = 96.0;
  std::size_t scenes_train = 400;
  std::size_t scenes_test = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_groups < 2) throw ValidationError("gen.G must be at least 2");
    if (num_actions < 2) throw ValidationError("gen.K must be at least 2");
    if (num_actions < num_groups) throw ValidationError("gen.K must be >= gen.G");
    if (num_persons < num_groups) throw ValidationError("gen.N must be >= gen.G");
    if (num_parts < 1 || feature_dim < 1 || scene_grid < 1) throw ValidationError("gen sizes must be positive");
    if (scenes_train < 1 || scenes_test < 1) throw ValidationError("gen scene counts must be >= 1");
    if (!(noise_rho >= 0.0 && noise_rho <= 1.0)) throw ValidationError("gen.noise_rho must lie in [0, 1]");
    if (!(feature_sigma >= 0.0) || !std::isfinite(feature_sigma)) throw ValidationError("gen.feature_sigma must be >= 0");
    if (!(zone_sigma >= 0.0) || !std::isfinite(zone_sigma)) throw ValidationError("gen.zone_sigma must be >= 0");
    if (frame.width < 1 || frame.height < 1) throw ValidationError("gen frame must be at least 1x1");
    if (!(bbox_width > 0 && bbox_width <= frame.width && bbox_height > 0 && bbox_height <= frame.height))
      throw ValidationError("gen bbox size must fit inside the frame");
  }

  /// Model dimensions implied by the generated data.
  ModelConfig model_shape(ModelConfig base = {}) const {
    base.num_actions = num_actions;
    base.num_groups = num_groups;
    base.num_persons = num_persons;
    base.num_parts = num_parts;
    base.feature_dim = feature_dim;
    base.scene_channels = feature_dim;
    return base;
  }
};

struct Example {
  SceneSample sample;
  SceneAnnotation annotation;
};

struct Dataset {
  Vocabulary vocabulary;
  FrameSize frame;
  std::vector<Example> examples;

  AnnotationSet annotations() const {
    AnnotationSet set{vocabulary, frame, {}};
    set.scenes.reserve(examples.size());
    for (const auto& e : examples) set.scenes.push_back(e.annotation);
    return set;
  }
};

/// Per-action prototype directions, one row per action, unit norm.
using Prototypes = std::vector<std::vector<double>>;

inline Vocabulary synthetic_vocabulary(std::size_t actions, std::size_t groups) {
  Vocabulary v;
  for (std::size_t i = 0; i < actions; ++i) v.action_labels.push_back("action" + std::to_string(i));
  for (std::size_t i = 0; i < groups; ++i) v.group_labels.push_back("group" + std::to_string(i));
  return v;
}

inline Prototypes make_prototypes(const GenConfig& config, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Prototypes protos(config.num_actions, std::vector<double>(config.feature_dim));
  for (auto& p : protos) {
    double norm = 0.0;
    for (auto& v : p) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : p) v /= norm;
  }
  return protos;
}

namespace detail {

/// Jittered lattice of well separated normalized zone centers, shuffled.
inline std::vector<std::pair<double, double>> zone_candidates(std::size_t count, Rng& rng) {
  std::size_t cols = 1;
  while (cols * cols < count) ++cols;
  const std::size_t rows = (count + cols - 1) / cols;
  std::uniform_real_distribution<double> jitter(-0.25, 0.25);
  std::vector<std::pair<double, double>> out;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double cx = (static_cast<double>(c) + 0.5 + jitter(rng)) / static_cast<double>(cols);
      const double cy = (static_cast<double>(r) + 0.5 + jitter(rng)) / static_cast<double>(rows);
      out.emplace_back(0.1 + 0.8 * cx, 0.1 + 0.8 * cy);
    }
  std::shuffle(out.begin(), out.end(), rng);
  out.resize(count);
  return out;
}

}  // namespace detail

/// One tactic per group activity. Group g owns a signature action (index g)
/// performed by N/4 persons (at least one) in a home zone no other role
/// uses. The remaining persons fill up to three support roles drawn from the
/// shared actions (indices >= G), each placed at that action's home zone
/// shifted by a tactic-specific offset. When there are no shared actions the
/// signature action fills the tactic.
inline std::vector<Tactic> make_tactic_library(const GenConfig& config, Rng& rng) {
  config.validate();
  const std::size_t g_count = config.num_groups, k = config.num_actions, n = config.num_persons;
  const auto homes = detail::zone_candidates(k, rng);
  const std::size_t sig_count = std::max<std::size_t>(1, n / 4);
  std::uniform_real_distribution<double> offset(-0.12, 0.12);

  std::vector<std::size_t> shared;
  for (std::size_t a = g_count; a < k; ++a) shared.push_back(a);

  std::vector<Tactic> library;
  for (std::size_t g = 0; g < g_count; ++g) {
    Tactic t{g, {}};
    t.roles.push_back(Role{g, sig_count, homes[g].first, homes[g].second, config.zone_sigma});
    std::size_t remaining = n - sig_count;
    if (remaining > 0 && shared.empty()) {
      t.roles.front().count += remaining;
      remaining = 0;
    }
    const std::size_t support_roles = std::min<std::size_t>(remaining, 3);
    if (support_roles > 0) {
      // Random split of `remaining` into `support_roles` positive counts.
      std::vector<std::size_t> counts(support_roles, 1);
      std::uniform_int_distribution<std::size_t> pick(0, support_roles - 1);
      for (std::size_t extra = remaining - support_roles; extra > 0; --extra) ++counts[pick(rng)];
      std::vector<std::size_t> pool = shared;
      std::shuffle(pool.begin(), pool.end(), rng);
      for (std::size_t r = 0; r < support_roles; ++r) {
        const std::size_t action = pool[r % pool.size()];
        const double zx = std::clamp(homes[action].first + offset(rng), 0.05, 0.95);
        const double zy = std::clamp(homes[action].second + offset(rng), 0.05, 0.95);
        t.roles.push_back(Role{action, counts[r], zx, zy, config.zone_sigma});
      }
    }
    library.push_back(std::move(t));
  }
  return library;
}

/// Draws one scene from a tactic. Annotations carry the true labels; the
/// visual features may be generated from a corrupted action.
inline Example sample_scene(const Tactic& tactic, const Prototypes& prototypes, const GenConfig& config, Rng& rng,
                            const std::string& scene_id) {
  const std::size_t n = tactic.person_count();
  const std::size_t c = config.feature_dim, parts = config.num_parts, grid = config.scene_grid;
  const double w = config.frame.width, h = config.frame.height;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Feature noise draws happen regardless of sigma so that the random stream
  // consumption does not depend on the noise settings.
  SceneAnnotation ann{scene_id, config.frame, {}, tactic.group_index};
  std::vector<double> features;
  features.reserve(n * parts * c);
  std::vector<BBox> boxes;
  std::vector<std::size_t> targets;
  for (const auto& role : tactic.roles) {
    for (std::size_t i = 0; i < role.count; ++i) {
      const double px = std::clamp(role.zone_x + role.zone_sigma * normal(rng), 0.0, 1.0);
      const double py = std::clamp(role.zone_y + role.zone_sigma * normal(rng), 0.0, 1.0);
      const double x_min = std::clamp(px * w - 0.5 * config.bbox_width, 0.0, w - config.bbox_width);
      const double y_min = std::clamp(py * h - 0.5 * config.bbox_height, 0.0, h - config.bbox_height);
      BBox box{x_min, y_min, x_min + config.bbox_width, y_min + config.bbox_height};

      std::size_t shown = role.action_index;
      const double flip = unit(rng);
      std::uniform_int_distribution<std::size_t> other(0, config.num_actions - 2);
      const std::size_t alt = other(rng);
      if (flip < config.noise_rho) shown = alt >= role.action_index ? alt + 1 : alt;
      for (std::size_t p = 0; p < parts; ++p)
        for (std::size_t j = 0; j < c; ++j) features.push_back(prototypes[shown][j] + config.feature_sigma * normal(rng));

      boxes.push_back(box);
      targets.push_back(role.action_index);
      ann.persons.push_back(PersonRecord{box, role.action_index});
    }
  }

  // Global scene map: mean person feature (over parts) per coarse cell.
  std::vector<double> scene(grid * grid * c, 0.0);
  std::vector<double> occupancy(grid * grid, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = std::min<std::size_t>(static_cast<std::size_t>(boxes[i].center_x() / w * grid), grid - 1);
    const auto row = std::min<std::size_t>(static_cast<std::size_t>(boxes[i].center_y() / h * grid), grid - 1);
    const std::size_t cell = row * grid + col;
    occupancy[cell] += 1.0;
    for (std::size_t p = 0; p < parts; ++p)
      for (std::size_t j = 0; j < c; ++j)
        scene[cell * c + j] += features[(i * parts + p) * c + j] / static_cast<double>(parts);
  }
  for (std::size_t cell = 0; cell < grid * grid; ++cell)
    if (occupancy[cell] > 0)
      for (std::size_t j = 0; j < c; ++j) scene[cell * c + j] /= occupancy[cell];

  Example ex;
  ex.sample.person_features = nc::Tensor(nc::Shape{n, parts, c}, std::move(features));
  ex.sample.scene_feature = nc::Tensor(nc::Shape{grid, grid, c}, std::move(scene));
  ex.sample.bboxes = std::move(boxes);
  ex.sample.frame = config.frame;
  ex.sample.action_targets = std::move(targets);
  ex.sample.group_target = tactic.group_index;
  ex.annotation = std::move(ann);
  return ex;
}

struct SyntheticData {
  std::vector<Tactic> tactics;
  Prototypes prototypes;
  Dataset train;
  Dataset test;
};

namespace detail {

inline Dataset generate_split(const GenConfig& config, const std::vector<Tactic>& tactics,
                              const Prototypes& prototypes, std::size_t count, const std::string& split) {
  Rng rng = substream(config.seed, "gen." + split);
  std::vector<std::size_t> groups(count);
  for (std::size_t i = 0; i < count; ++i) groups[i] = i % tactics.size();
  std::shuffle(groups.begin(), groups.end(), rng);
  Dataset ds{synthetic_vocabulary(config.num_actions, config.num_groups), config.frame, {}};
  ds.examples.reserve(count);
  char id[32];
  for (std::size_t i = 0; i < count; ++i) {
    std::snprintf(id, sizeof id, "%s-%06zu", split.c_str(), i);
    ds.examples.push_back(sample_scene(tactics[groups[i]], prototypes, config, rng, id));
  }
  return ds;
}

}  // namespace detail

/// Train and test splits from disjoint substreams of the same seed. Group
/// activities are assigned in balanced proportion and shuffled.
inline SyntheticData gen_dataset(const GenConfig& config) {
  config.validate();
  SyntheticData out;
  Rng tactic_rng = substream(config.seed, "gen.tactics");
  out.tactics = make_tactic_library(config, tactic_rng);
  Rng proto_rng = substream(config.seed, "gen.prototypes");
  out.prototypes = make_prototypes(config, proto_rng);
  out.train = detail::generate_split(config, out.tactics, out.prototypes, config.scenes_train, "train");
  out.test = detail::generate_split(config, out.tactics, out.prototypes, config.scenes_test, "test");
  return out;
}

// ---------------------------------------------------------------------------
// Feature file
// ---------------------------------------------------------------------------

inline constexpr int kFeatureFileVersion = 1;

/// JSON document: per scene id, the N person rows (P * C values each) and the
/// flattened scene grid.
inline std::string format_features(const Dataset& ds) {
  std::ostringstream os;
  std::size_t parts = 0, c = 0, gh = 0, gw = 0, gc = 0;
  if (!ds.examples.empty()) {
    const auto& s = ds.examples.front().sample;
    parts = s.person_features.dim(1);
    c = s.person_features.dim(2);
    gh = s.scene_feature.dim(0);
    gw = s.scene_feature.dim(1);
    gc = s.scene_feature.dim(2);
  }
  os << "{\n  \"version\": " << kFeatureFileVersion << ",\n  \"parts\": " << parts << ",\n  \"feature_dim\": " << c
     << ",\n  \"scene_shape\": [" << gh << ", " << gw << ", " << gc << "],\n  \"scenes\": {";
  bool first = true;
  for (const auto& e : ds.examples) {
    const auto& s = e.sample;
    if (s.person_features.dim(1) != parts || s.person_features.dim(2) != c ||
        s.scene_feature.shape() != nc::Shape{gh, gw, gc})
      throw ShapeError("scene '" + e.annotation.scene_id + "' features differ in shape from the first scene");
    os << (first ? "\n" : ",\n") << "    " << detail::json_quote(e.annotation.scene_id) << ": {\"persons\": [";
    const std::size_t row = parts * c;
    const auto& v = s.person_features.values();
    for (std::size_t i = 0; i < s.person_features.dim(0); ++i) {
      os << (i ? ", " : "");
      detail::write_number_array(os, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(i * row),
                                                         v.begin() + static_cast<std::ptrdiff_t>((i + 1) * row)));
    }
    os << "], \"scene\": ";
    detail::write_number_array(os, s.scene_feature.values());
    os << '}';
    first = false;
  }
  os << "\n  }\n}\n";
  return os.str();
}

/// Joins an annotation set with its feature document into network inputs.
inline Dataset join_features(const AnnotationSet& annotations, const std::string& feature_text,
                             const std::string& source = "<features>") {
  annotations.validate();
  Dataset ds{annotations.vocabulary, annotations.frame, {}};
  try {
    const auto doc = nlohmann::json::parse(feature_text);
    if (doc.at("version").get<int>() != kFeatureFileVersion)
      throw ParseError(source + ": unsupported feature file version");
    const auto parts = doc.at("parts").get<std::size_t>();
    const auto c = doc.at("feature_dim").get<std::size_t>();
    const auto shape = doc.at("scene_shape").get<nc::Shape>();
    if (shape.size() != 3) throw ParseError(source + ": scene_shape must have 3 entries");
    const auto& scenes = doc.at("scenes");
    for (const auto& ann : annotations.scenes) {
      if (!scenes.contains(ann.scene_id)) throw ParseError(source + ": no features for scene '" + ann.scene_id + "'");
      const auto& entry = scenes.at(ann.scene_id);
      const auto rows = entry.at("persons").get<std::vector<std::vector<double>>>();
      if (rows.size() != ann.persons.size())
        throw ParseError(source + ": scene '" + ann.scene_id + "' has " + std::to_string(rows.size()) +
                         " feature rows for " + std::to_string(ann.persons.size()) + " persons");
      std::vector<double> flat;
      for (const auto& r : rows) {
        if (r.size() != parts * c)
          throw ParseError(source + ": scene '" + ann.scene_id + "' feature row length mismatch");
        flat.insert(flat.end(), r.begin(), r.end());
      }
      auto grid = entry.at("scene").get<std::vector<double>>();
      if (grid.size() != nc::shape_numel(shape))
        throw ParseError(source + ": scene '" + ann.scene_id + "' scene grid length mismatch");
      Example ex;
      ex.sample.person_features = nc::Tensor(nc::Shape{rows.size(), parts, c}, std::move(flat));
      ex.sample.scene_feature = nc::Tensor(shape, std::move(grid));
      ex.sample.frame = ann.frame;
      for (const auto& p : ann.persons) {
        ex.sample.bboxes.push_back(p.bbox);
        ex.sample.action_targets.push_back(p.action_index);
      }
      ex.sample.group_target = ann.group_index;
      ex.annotation = ann;
      ds.examples.push_back(std::move(ex));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": " + e.what());
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& annotation_path, const std::string& feature_path) {
  save_annotations(ds.annotations(), annotation_path);
  detail::write_file(feature_path, format_features(ds));
}

inline Dataset load_dataset(const std::string& annotation_path, const std::string& feature_path) {
  return join_features(load_annotations(annotation_path), detail::read_file(feature_path), feature_path);
}

}  // namespace kari
