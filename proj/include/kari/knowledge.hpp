#pragma once

// Annotation ingestion and the two frozen knowledge maps built from it:
// label co-occurrence (class-class) and per-label spatial occupancy
// (class-position).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kari/detail/format.hpp"
#include "kari/error.hpp"
#include "kari/numcore/tensor.hpp"

namespace kari {

struct Vocabulary {
  std::vector<std::string> action_labels;
  std::vector<std::string> group_labels;

  std::size_t num_actions() const { return action_labels.size(); }
  std::size_t num_groups() const { return group_labels.size(); }

  std::optional<std::size_t> action_index(std::string_view label) const { return find(action_labels, label); }
  std::optional<std::size_t> group_index(std::string_view label) const { return find(group_labels, label); }

  void validate() const {
    if (action_labels.empty()) throw ValidationError("vocabulary has no action labels");
    if (group_labels.empty()) throw ValidationError("vocabulary has no group labels");
    check_unique(action_labels, "action");
    check_unique(group_labels, "group");
  }

  bool operator==(const Vocabulary&) const = default;

private:
  static std::optional<std::size_t> find(const std::vector<std::string>& v, std::string_view label) {
    auto it = std::find(v.begin(), v.end(), label);
    if (it == v.end()) return std::nullopt;
    return static_cast<std::size_t>(it - v.begin());
  }
  static void check_unique(const std::vector<std::string>& v, const char* kind) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].empty()) throw ValidationError(std::string("empty ") + kind + " label");
      for (std::size_t j = i + 1; j < v.size(); ++j)
        if (v[i] == v[j]) throw ValidationError(std::string("duplicate ") + kind + " label '" + v[i] + "'");
    }
  }
};

struct FrameSize {
  int width = 0;
  int height = 0;
  bool operator==(const FrameSize&) const = default;
};

/// Pixel box, (x_min, y_min) top-left.
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool well_formed() const { return x_min < x_max && y_min < y_max; }
  bool inside(const FrameSize& f) const { return x_min >= 0 && y_min >= 0 && x_max <= f.width && y_max <= f.height; }
  bool operator==(const BBox&) const = default;
};

struct PersonRecord {
  BBox bbox;
  std::size_t action_index = 0;
  bool operator==(const PersonRecord&) const = default;
};

struct SceneAnnotation {
  std::string scene_id;
  FrameSize frame;
  std::vector<PersonRecord> persons;
  std::size_t group_index = 0;
  bool operator==(const SceneAnnotation&) const = default;
};

struct AnnotationSet {
  Vocabulary vocabulary;
  FrameSize frame;  // reference frame from the file header
  std::vector<SceneAnnotation> scenes;

  void validate() const {
    vocabulary.validate();
    for (const auto& s : scenes) {
      if (s.persons.empty()) throw ValidationError("scene '" + s.scene_id + "' has no persons");
      if (s.group_index >= vocabulary.num_groups())
        throw ValidationError("scene '" + s.scene_id + "' has invalid group index");
      for (const auto& p : s.persons) {
        if (p.action_index >= vocabulary.num_actions())
          throw ValidationError("scene '" + s.scene_id + "' has invalid action index");
        if (!p.bbox.well_formed()) throw ValidationError("scene '" + s.scene_id + "' has a degenerate bbox");
        if (!p.bbox.inside(s.frame)) throw ValidationError("scene '" + s.scene_id + "' has a bbox outside the frame");
      }
    }
  }
};

/// Normalized K x K co-occurrence statistics, row-major.
struct CCMap {
  std::size_t num_actions = 0;
  std::vector<double> values;
  bool degenerate = true;  // no person pairs were observed; all entries zero

  double at(std::size_t i, std::size_t j) const { return values[i * num_actions + j]; }

  static CCMap zeros(std::size_t k) { return CCMap{k, std::vector<double>(k * k, 0.0), true}; }

  nc::Tensor as_tensor() const { return nc::Tensor(nc::Shape{num_actions, num_actions}, values); }
  bool operator==(const CCMap&) const = default;
};

/// Normalized H x W x K spatial occupancy per action label.
struct CPMap {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t num_actions = 0;
  FrameSize frame;
  std::vector<double> values;  // index (row * grid_w + col) * K + label
  bool degenerate = true;      // no person observed at all

  double at(std::size_t row, std::size_t col, std::size_t label) const {
    return values[(row * grid_w + col) * num_actions + label];
  }

  /// Grid cell holding a pixel point; points outside the frame clamp to the
  /// nearest border cell.
  std::pair<std::size_t, std::size_t> cell_of(double x, double y) const {
    auto bin = [](double v, double extent, std::size_t cells) {
      const double f = std::floor(v / extent * static_cast<double>(cells));
      if (!(f > 0.0)) return std::size_t{0};  // also catches NaN
      return std::min(static_cast<std::size_t>(f), cells - 1);
    };
    return {bin(y, frame.height, grid_h), bin(x, frame.width, grid_w)};
  }

  static CPMap zeros(std::size_t h, std::size_t w, std::size_t k, FrameSize frame) {
    return CPMap{h, w, k, frame, std::vector<double>(h * w * k, 0.0), true};
  }
  bool operator==(const CPMap&) const = default;
};

// ---------------------------------------------------------------------------
// Annotation text format
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_labels(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    if (comma == std::string_view::npos) comma = s.size();
    out.push_back(trim(s.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

inline AnnotationSet parse_annotations(std::string_view text, const std::string& source = "<annotations>") {
  AnnotationSet set;
  bool have_actions = false, have_groups = false, have_frame = false;
  std::map<std::string, std::size_t> scene_pos;
  auto fail = [&](std::size_t line_no, const std::string& msg) -> ParseError {
    return ParseError(source + ":" + std::to_string(line_no) + ": " + msg);
  };

  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    const std::string trimmed = detail::trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;

    auto header_value = [&](std::string_view key) -> std::optional<std::string> {
      if (trimmed.rfind(key, 0) == 0 && trimmed.size() > key.size() && trimmed[key.size()] == ':')
        return detail::trim(std::string_view(trimmed).substr(key.size() + 1));
      return std::nullopt;
    };

    if (auto v = header_value("actions")) {
      set.vocabulary.action_labels = detail::split_labels(*v);
      have_actions = true;
      continue;
    }
    if (auto v = header_value("groups")) {
      set.vocabulary.group_labels = detail::split_labels(*v);
      have_groups = true;
      continue;
    }
    if (auto v = header_value("frame")) {
      auto x = v->find('x');
      auto w = x == std::string::npos ? std::nullopt : detail::parse_double(v->substr(0, x));
      auto h = x == std::string::npos ? std::nullopt : detail::parse_double(v->substr(x + 1));
      if (!w || !h || *w < 1 || *h < 1 || *w != std::floor(*w) || *h != std::floor(*h))
        throw fail(line_no, "malformed frame header '" + *v + "', expected WxH");
      set.frame = FrameSize{static_cast<int>(*w), static_cast<int>(*h)};
      have_frame = true;
      continue;
    }

    if (!have_actions || !have_groups || !have_frame)
      throw fail(line_no, "person line before the actions/groups/frame headers");
    try {
      set.vocabulary.validate();
    } catch (const ValidationError& e) {
      throw fail(line_no, e.what());
    }

    const auto fields = detail::split_ws(trimmed);
    if (fields.size() != 7) throw fail(line_no, "expected 7 fields, got " + std::to_string(fields.size()));
    const std::string& scene_id = fields[0];
    auto group = set.vocabulary.group_index(fields[1]);
    if (!group) throw fail(line_no, "scene '" + scene_id + "': unknown group label '" + fields[1] + "'");
    double coords[4];
    for (int c = 0; c < 4; ++c) {
      auto v = detail::parse_double(fields[2 + c]);
      if (!v) throw fail(line_no, "scene '" + scene_id + "': malformed coordinate '" + fields[2 + c] + "'");
      coords[c] = *v;
    }
    auto action = set.vocabulary.action_index(fields[6]);
    if (!action) throw fail(line_no, "scene '" + scene_id + "': unknown action label '" + fields[6] + "'");

    PersonRecord person{BBox{coords[0], coords[1], coords[2], coords[3]}, *action};
    if (!person.bbox.well_formed())
      throw fail(line_no, "scene '" + scene_id + "': bbox requires x_min < x_max and y_min < y_max");
    if (!person.bbox.inside(set.frame)) throw fail(line_no, "scene '" + scene_id + "': bbox outside the frame");

    auto [it, inserted] = scene_pos.try_emplace(scene_id, set.scenes.size());
    if (inserted) set.scenes.push_back(SceneAnnotation{scene_id, set.frame, {}, *group});
    auto& scene = set.scenes[it->second];
    if (scene.group_index != *group)
      throw fail(line_no, "scene '" + scene_id + "': conflicting group labels within one scene");
    scene.persons.push_back(person);
  }
  if (!have_actions || !have_groups || !have_frame)
    throw ParseError(source + ": missing actions/groups/frame header");
  try {
    set.vocabulary.validate();
  } catch (const ValidationError& e) {
    throw ParseError(source + ": " + e.what());
  }
  return set;
}

inline AnnotationSet load_annotations(const std::string& path) {
  return parse_annotations(detail::read_file(path), path);
}

/// Text form accepted by parse_annotations; coordinates keep 17 significant
/// digits so a round trip is exact.
inline std::string format_annotations(const AnnotationSet& set) {
  std::ostringstream os;
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
  };
  os << "actions: " << join(set.vocabulary.action_labels) << '\n';
  os << "groups: " << join(set.vocabulary.group_labels) << '\n';
  os << "frame: " << set.frame.width << 'x' << set.frame.height << '\n';
  for (const auto& s : set.scenes) {
    for (const auto& p : s.persons) {
      os << s.scene_id << ' ' << set.vocabulary.group_labels.at(s.group_index) << ' ' << detail::fmt17(p.bbox.x_min)
         << ' ' << detail::fmt17(p.bbox.y_min) << ' ' << detail::fmt17(p.bbox.x_max) << ' '
         << detail::fmt17(p.bbox.y_max) << ' ' << set.vocabulary.action_labels.at(p.action_index) << '\n';
    }
  }
  return os.str();
}

inline void save_annotations(const AnnotationSet& set, const std::string& path) {
  detail::write_file(path, format_annotations(set));
}

// ---------------------------------------------------------------------------
// Map construction
// ---------------------------------------------------------------------------

/// Co-occurrence counts per scene: n_i * n_j for distinct labels, and the
/// number of unordered same-label pairs n_i (n_i - 1) / 2 on the diagonal.
/// The matrix is normalized by its total.
inline CCMap build_cc_map(const AnnotationSet& set) {
  const std::size_t k = set.vocabulary.num_actions();
  CCMap map = CCMap::zeros(k);
  std::vector<double> counts(k);
  for (const auto& scene : set.scenes) {
    std::fill(counts.begin(), counts.end(), 0.0);
    for (const auto& p : scene.persons) counts.at(p.action_index) += 1.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (counts[i] == 0.0) continue;
      map.values[i * k + i] += counts[i] * (counts[i] - 1.0) / 2.0;
      for (std::size_t j = 0; j < k; ++j)
        if (j != i) map.values[i * k + j] += counts[i] * counts[j];
    }
  }
  double total = 0.0;
  for (double v : map.values) total += v;
  if (total > 0.0) {
    for (auto& v : map.values) v /= total;
    map.degenerate = false;
  }
  return map;
}

/// Per-label histogram of bbox centers over an H x W grid; each label's slice
/// with at least one occurrence sums to one.
inline CPMap build_cp_map(const AnnotationSet& set, std::size_t grid_h, std::size_t grid_w) {
  if (grid_h < 1 || grid_w < 1) throw ValidationError("C-P grid must be at least 1x1");
  for (const auto& s : set.scenes)
    if (!(s.frame == set.frame))
      throw ValidationError("scene '" + s.scene_id + "' frame size differs from the annotation set's frame");
  if (set.frame.width < 1 || set.frame.height < 1) throw ValidationError("annotation set has no valid frame size");

  const std::size_t k = set.vocabulary.num_actions();
  CPMap map = CPMap::zeros(grid_h, grid_w, k, set.frame);
  std::vector<double> occurrences(k, 0.0);
  for (const auto& scene : set.scenes) {
    for (const auto& p : scene.persons) {
      auto [row, col] = map.cell_of(p.bbox.center_x(), p.bbox.center_y());
      map.values[(row * grid_w + col) * k + p.action_index] += 1.0;
      occurrences.at(p.action_index) += 1.0;
    }
  }
  for (std::size_t label = 0; label < k; ++label) {
    if (occurrences[label] == 0.0) continue;
    map.degenerate = false;
    for (std::size_t cell = 0; cell < grid_h * grid_w; ++cell) map.values[cell * k + label] /= occurrences[label];
  }
  return map;
}

/// N x K bias: row n is the map's label distribution at the cell holding
/// bbox n's center.
inline nc::Tensor cp_lookup(const CPMap& map, const std::vector<BBox>& bboxes) {
  const std::size_t k = map.num_actions;
  std::vector<double> rows(bboxes.size() * k);
  for (std::size_t n = 0; n < bboxes.size(); ++n) {
    auto [row, col] = map.cell_of(bboxes[n].center_x(), bboxes[n].center_y());
    const double* src = map.values.data() + (row * map.grid_w + col) * k;
    std::copy(src, src + k, rows.begin() + static_cast<std::ptrdiff_t>(n * k));
  }
  return nc::Tensor(nc::Shape{bboxes.size(), k}, std::move(rows));
}

// ---------------------------------------------------------------------------
// Map file
// ---------------------------------------------------------------------------

inline constexpr int kMapFileVersion = 1;

inline std::string format_maps(const CCMap& cc, const CPMap& cp) {
  if (cc.num_actions != cp.num_actions) throw ValidationError("C-C and C-P maps disagree on the number of labels");
  std::ostringstream os;
  os << "{\n  \"version\": " << kMapFileVersion << ",\n  \"K\": " << cc.num_actions << ",\n  \"H\": " << cp.grid_h
     << ",\n  \"W\": " << cp.grid_w << ",\n  \"frame\": [" << cp.frame.width << ", " << cp.frame.height
     << "],\n  \"cc\": ";
  detail::write_number_array(os, cc.values);
  os << ",\n  \"cp\": ";
  detail::write_number_array(os, cp.values);
  os << "\n}\n";
  return os.str();
}

inline std::pair<CCMap, CPMap> parse_maps(const std::string& text, const std::string& source = "<maps>") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": " + e.what());
  }
  try {
    const int version = doc.at("version").get<int>();
    if (version != kMapFileVersion)
      throw ParseError(source + ": unsupported map file version " + std::to_string(version));
    const auto k = doc.at("K").get<std::size_t>();
    const auto h = doc.at("H").get<std::size_t>();
    const auto w = doc.at("W").get<std::size_t>();
    const auto frame = doc.at("frame").get<std::vector<int>>();
    if (k < 1 || h < 1 || w < 1 || frame.size() != 2 || frame[0] < 1 || frame[1] < 1)
      throw ParseError(source + ": invalid dimension header");
    CCMap cc{k, doc.at("cc").get<std::vector<double>>(), true};
    CPMap cp{h, w, k, FrameSize{frame[0], frame[1]}, doc.at("cp").get<std::vector<double>>(), true};
    if (cc.values.size() != k * k)
      throw ParseError(source + ": cc payload has " + std::to_string(cc.values.size()) + " values, header implies " +
                       std::to_string(k * k));
    if (cp.values.size() != h * w * k)
      throw ParseError(source + ": cp payload has " + std::to_string(cp.values.size()) + " values, header implies " +
                       std::to_string(h * w * k));
    cc.degenerate = std::all_of(cc.values.begin(), cc.values.end(), [](double v) { return v == 0.0; });
    cp.degenerate = std::all_of(cp.values.begin(), cp.values.end(), [](double v) { return v == 0.0; });
    return {std::move(cc), std::move(cp)};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": " + e.what());
  }
}

inline void save_maps(const CCMap& cc, const CPMap& cp, const std::string& path) {
  detail::write_file(path, format_maps(cc, cp));
}

inline std::pair<CCMap, CPMap> load_maps(const std::string& path) { return parse_maps(detail::read_file(path), path); }

}  // namespace kari
