#pragma once

// Random instance generators and brute-force reference implementations used
// by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "kari/knowledge.hpp"
#include "kari/model.hpp"
#include "kari/rng.hpp"

namespace kari::testing {

inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

/// Random valid AnnotationSet: up to `max_scenes` scenes of 1..max_persons
/// persons, 1..max_k action labels, boxes anywhere inside one shared frame.
inline AnnotationSet random_annotations(Rng& rng, std::size_t max_scenes = 10, std::size_t max_persons = 8,
                                        std::size_t max_k = 6) {
  AnnotationSet set;
  const std::size_t k = uniform_index(rng, 1, max_k);
  const std::size_t g = uniform_index(rng, 1, 3);
  for (std::size_t i = 0; i < k; ++i) set.vocabulary.action_labels.push_back("a" + std::to_string(i));
  for (std::size_t i = 0; i < g; ++i) set.vocabulary.group_labels.push_back("g" + std::to_string(i));
  set.frame = FrameSize{static_cast<int>(uniform_index(rng, 64, 1280)), static_cast<int>(uniform_index(rng, 48, 720))};
  const std::size_t scenes = uniform_index(rng, 0, max_scenes);
  for (std::size_t s = 0; s < scenes; ++s) {
    SceneAnnotation scene;
    scene.scene_id = "s" + std::to_string(s);
    scene.frame = set.frame;
    scene.group_index = uniform_index(rng, 0, g - 1);
    const std::size_t n = uniform_index(rng, 1, max_persons);
    for (std::size_t p = 0; p < n; ++p) {
      const double x0 = uniform_real(rng, 0.0, set.frame.width - 2.0);
      const double y0 = uniform_real(rng, 0.0, set.frame.height - 2.0);
      const double x1 = uniform_real(rng, x0 + 1.0, set.frame.width);
      const double y1 = uniform_real(rng, y0 + 1.0, set.frame.height);
      scene.persons.push_back({BBox{x0, y0, x1, y1}, uniform_index(rng, 0, k - 1)});
    }
    set.scenes.push_back(std::move(scene));
  }
  return set;
}

/// Enumerates every unordered pair of distinct persons in each scene.
inline std::vector<double> brute_force_cc(const AnnotationSet& set) {
  const std::size_t k = set.vocabulary.num_actions();
  std::vector<double> m(k * k, 0.0);
  for (const auto& scene : set.scenes) {
    for (std::size_t a = 0; a < scene.persons.size(); ++a) {
      for (std::size_t b = a + 1; b < scene.persons.size(); ++b) {
        const auto i = scene.persons[a].action_index, j = scene.persons[b].action_index;
        if (i == j) {
          m[i * k + i] += 1.0;
        } else {
          m[i * k + j] += 1.0;
          m[j * k + i] += 1.0;
        }
      }
    }
  }
  const double total = std::accumulate(m.begin(), m.end(), 0.0);
  if (total > 0.0)
    for (auto& v : m) v /= total;
  return m;
}

/// Histogram of bbox centers per label, cells clamped to the grid, each
/// observed label's slice divided by its occurrence count.
inline std::vector<double> brute_force_cp(const AnnotationSet& set, std::size_t h, std::size_t w) {
  const std::size_t k = set.vocabulary.num_actions();
  std::vector<double> out(h * w * k, 0.0);
  for (std::size_t label = 0; label < k; ++label) {
    std::vector<std::pair<double, double>> centers;
    for (const auto& scene : set.scenes)
      for (const auto& p : scene.persons)
        if (p.action_index == label)
          centers.emplace_back((p.bbox.x_min + p.bbox.x_max) / 2.0, (p.bbox.y_min + p.bbox.y_max) / 2.0);
    for (const auto& [cx, cy] : centers) {
      long col = static_cast<long>(std::floor(cx * static_cast<double>(w) / set.frame.width));
      long row = static_cast<long>(std::floor(cy * static_cast<double>(h) / set.frame.height));
      col = std::clamp<long>(col, 0, static_cast<long>(w) - 1);
      row = std::clamp<long>(row, 0, static_cast<long>(h) - 1);
      out[(static_cast<std::size_t>(row) * w + static_cast<std::size_t>(col)) * k + label] +=
          1.0 / static_cast<double>(centers.size());
    }
  }
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Triple-loop matrix product of row-major m x k and k x n.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
      c[i * n + j] = s;
    }
  return c;
}

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

/// Reorders persons of a sample: output person i is input person perm[i].
inline SceneSample permute_persons(const SceneSample& s, const std::vector<std::size_t>& perm) {
  SceneSample out = s;
  const std::size_t row = s.person_features.numel() / s.person_features.dim(0);
  std::vector<double> feats(s.person_features.numel());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(s.person_features.values().begin() + static_cast<std::ptrdiff_t>(perm[i] * row), row,
                feats.begin() + static_cast<std::ptrdiff_t>(i * row));
    out.bboxes[i] = s.bboxes[perm[i]];
    out.action_targets[i] = s.action_targets[perm[i]];
  }
  out.person_features = nc::Tensor(s.person_features.shape(), std::move(feats));
  return out;
}

/// The five-person scene used throughout: two "blocking", three "standing".
inline const char* kBlockStandFixture =
    "actions: blocking,standing\n"
    "groups: rally\n"
    "frame: 640x480\n"
    "scene1 rally 10 10 50 110 blocking\n"
    "scene1 rally 60 10 100 110 blocking\n"
    "scene1 rally 300 200 340 300 standing\n"
    "scene1 rally 350 200 390 300 standing\n"
    "scene1 rally 400 200 440 300 standing\n";

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("kari_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kari::testing
