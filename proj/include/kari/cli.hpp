#pragma once

// Command-line front end: gen-data, build-maps, train, eval, ablate and
// gradcheck. Settings come from built-in defaults, then an optional flat
// `key = value` config file, then command-line flags.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kari/checkpoint.hpp"
#include "kari/detail/format.hpp"
#include "kari/error.hpp"
#include "kari/gradcheck_suite.hpp"
#include "kari/knowledge.hpp"
#include "kari/model.hpp"
#include "kari/synthgym.hpp"
#include "kari/traineval.hpp"

namespace kari::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitInvalidConfig = 3,
  kExitMissingFile = 4,
};

/// Raised for malformed or out-of-range settings, from a file or a flag.
struct ConfigError : Error {
  using Error::Error;
};

struct CliConfig {
  GenConfig gen;
  ModelConfig model;
  OptimConfig optim;
  std::size_t grid_h = kDefaultGrid;
  std::size_t grid_w = kDefaultGrid;
  std::uint64_t seed = 1;
  std::string variant = "Full";
  double ratio = 1.0;
  std::size_t jobs = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> ratios{1.0};
  std::vector<std::string> variants{"Base", "Base+Semantic", "Base+Semantic+C-P", "Base+Semantic+C-C", "Full"};

  /// Checks every owning type's invariants.
  void validate() const {
    gen.validate();
    gen.model_shape(model).validate();
    optim.validate();
    if (grid_h < 1 || grid_w < 1) throw ValidationError("maps grid must be at least 1x1");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("run.ratio must lie in (0, 1]");
    if (jobs < 1) throw ValidationError("run.jobs must be >= 1");
    if (seeds.empty()) throw ValidationError("ablate.seeds must not be empty");
    if (ratios.empty()) throw ValidationError("ablate.ratios must not be empty");
    for (double r : ratios)
      if (!(r > 0.0 && r <= 1.0)) throw ValidationError("ablate.ratios entries must lie in (0, 1]");
    if (variants.empty()) throw ValidationError("ablate.variants must not be empty");
    AblationVariant::from_name(variant);
    for (const auto& v : variants) AblationVariant::from_name(v);
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || text.empty())
    throw ConfigError("'" + key + "': cannot parse '" + text + "' as a number");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError("'" + key + "': value must be finite");
  }
  return value;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

template <class T>
std::vector<T> parse_number_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<T>(key, item));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct KeySpec {
  std::function<void(CliConfig&, const std::string&)> set;
  std::function<std::string(const CliConfig&)> get;
};

template <class T, class Access>
KeySpec number_key(const std::string& key, Access access) {
  return {[key, access](CliConfig& c, const std::string& v) { access(c) = parse_number<T>(key, v); },
          [access](const CliConfig& c) {
            std::ostringstream os;
            os << access(const_cast<CliConfig&>(c));
            return os.str();
          }};
}

inline const std::map<std::string, KeySpec>& key_table() {
  using S = std::size_t;
  static const std::map<std::string, KeySpec> table = [] {
    std::map<std::string, KeySpec> t;
    t["gen.G"] = number_key<S>("gen.G", [](CliConfig& c) -> S& { return c.gen.num_groups; });
    t["gen.K"] = number_key<S>("gen.K", [](CliConfig& c) -> S& { return c.gen.num_actions; });
    t["gen.N"] = number_key<S>("gen.N", [](CliConfig& c) -> S& { return c.gen.num_persons; });
    t["gen.P"] = number_key<S>("gen.P", [](CliConfig& c) -> S& { return c.gen.num_parts; });
    t["gen.frame_width"] = number_key<int>("gen.frame_width", [](CliConfig& c) -> int& { return c.gen.frame.width; });
    t["gen.frame_height"] =
        number_key<int>("gen.frame_height", [](CliConfig& c) -> int& { return c.gen.frame.height; });
    t["gen.feature_dim"] = number_key<S>("gen.feature_dim", [](CliConfig& c) -> S& { return c.gen.feature_dim; });
    t["gen.noise_rho"] = number_key<double>("gen.noise_rho", [](CliConfig& c) -> double& { return c.gen.noise_rho; });
    t["gen.feature_sigma"] =
        number_key<double>("gen.feature_sigma", [](CliConfig& c) -> double& { return c.gen.feature_sigma; });
    t["gen.zone_sigma"] =
        number_key<double>("gen.zone_sigma", [](CliConfig& c) -> double& { return c.gen.zone_sigma; });
    t["gen.scene_grid"] = number_key<S>("gen.scene_grid", [](CliConfig& c) -> S& { return c.gen.scene_grid; });
    t["gen.bbox_width"] =
        number_key<double>("gen.bbox_width", [](CliConfig& c) -> double& { return c.gen.bbox_width; });
    t["gen.bbox_height"] =
        number_key<double>("gen.bbox_height", [](CliConfig& c) -> double& { return c.gen.bbox_height; });
    t["gen.scenes_train"] = number_key<S>("gen.scenes_train", [](CliConfig& c) -> S& { return c.gen.scenes_train; });
    t["gen.scenes_test"] = number_key<S>("gen.scenes_test", [](CliConfig& c) -> S& { return c.gen.scenes_test; });
    t["model.D"] = number_key<S>("model.D", [](CliConfig& c) -> S& { return c.model.embed_dim; });
    t["model.d"] = number_key<S>("model.d", [](CliConfig& c) -> S& { return c.model.head_dim; });
    t["model.heads_enc"] = number_key<S>("model.heads_enc", [](CliConfig& c) -> S& { return c.model.heads_enc; });
    t["model.heads_dec"] = number_key<S>("model.heads_dec", [](CliConfig& c) -> S& { return c.model.heads_dec; });
    t["model.ffn_dim"] = number_key<S>("model.ffn_dim", [](CliConfig& c) -> S& { return c.model.ffn_dim; });
    t["model.lambda"] = number_key<double>("model.lambda", [](CliConfig& c) -> double& { return c.model.lambda; });
    t["model.cc_gain"] = number_key<double>("model.cc_gain", [](CliConfig& c) -> double& { return c.model.cc_gain; });
    t["model.cp_gain"] = number_key<double>("model.cp_gain", [](CliConfig& c) -> double& { return c.model.cp_gain; });
    t["optim.lr_init"] = number_key<double>("optim.lr_init", [](CliConfig& c) -> double& { return c.optim.lr_init; });
    t["optim.lr_final"] =
        number_key<double>("optim.lr_final", [](CliConfig& c) -> double& { return c.optim.lr_final; });
    t["optim.beta1"] = number_key<double>("optim.beta1", [](CliConfig& c) -> double& { return c.optim.beta1; });
    t["optim.beta2"] = number_key<double>("optim.beta2", [](CliConfig& c) -> double& { return c.optim.beta2; });
    t["optim.epsilon"] = number_key<double>("optim.epsilon", [](CliConfig& c) -> double& { return c.optim.epsilon; });
    t["optim.epochs"] = number_key<S>("optim.epochs", [](CliConfig& c) -> S& { return c.optim.epochs; });
    t["optim.batch_size"] = number_key<S>("optim.batch_size", [](CliConfig& c) -> S& { return c.optim.batch_size; });
    t["maps.grid_h"] = number_key<S>("maps.grid_h", [](CliConfig& c) -> S& { return c.grid_h; });
    t["maps.grid_w"] = number_key<S>("maps.grid_w", [](CliConfig& c) -> S& { return c.grid_w; });
    t["run.seed"] = number_key<std::uint64_t>("run.seed", [](CliConfig& c) -> std::uint64_t& { return c.seed; });
    t["run.ratio"] = number_key<double>("run.ratio", [](CliConfig& c) -> double& { return c.ratio; });
    t["run.jobs"] = number_key<S>("run.jobs", [](CliConfig& c) -> S& { return c.jobs; });
    t["run.variant"] = {[](CliConfig& c, const std::string& v) { c.variant = v; },
                        [](const CliConfig& c) { return c.variant; }};
    t["ablate.seeds"] = {[](CliConfig& c, const std::string& v) {
                           c.seeds = parse_number_list<std::uint64_t>("ablate.seeds", v);
                         },
                         [](const CliConfig& c) { return join(c.seeds); }};
    t["ablate.ratios"] = {[](CliConfig& c, const std::string& v) {
                            c.ratios = parse_number_list<double>("ablate.ratios", v);
                          },
                          [](const CliConfig& c) { return join(c.ratios); }};
    t["ablate.variants"] = {[](CliConfig& c, const std::string& v) { c.variants = split_list(v); },
                            [](const CliConfig& c) { return join(c.variants); }};
    return t;
  }();
  return table;
}

}  // namespace detail

/// Every recognised config key.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::key_table()) out.push_back(k);
  return out;
}

inline void set_config_value(CliConfig& config, const std::string& key, const std::string& value) {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, value);
}

inline std::string get_config_value(const CliConfig& config, const std::string& key) {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(config);
}

/// Applies `key = value` lines. Blank lines and lines starting with '#' are
/// ignored; a repeated key keeps its last value.
inline void apply_config_text(CliConfig& config, const std::string& text, const std::string& source = "<config>") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const auto key = detail::trim(std::string_view(t).substr(0, eq));
    const auto value = detail::trim(std::string_view(t).substr(eq + 1));
    try {
      set_config_value(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline void apply_config_file(CliConfig& config, const std::string& path) {
  apply_config_text(config, kari::detail::read_file(path), path);
}

/// File layout written by gen-data and read by train and eval.
struct DataPaths {
  std::string annotations, features;
};

inline DataPaths data_paths(const std::string& dir, const std::string& split) {
  const auto base = std::filesystem::path(dir);
  return {(base / (split + ".ann")).string(), (base / (split + ".features.json")).string()};
}

namespace detail {

/// Model dimensions implied by a loaded dataset, on top of the configured widths.
inline ModelConfig model_for(const Dataset& data, ModelConfig m) {
  if (data.examples.empty()) throw ValidationError("dataset has no scenes");
  const auto& s = data.examples.front().sample;
  m.num_actions = data.vocabulary.num_actions();
  m.num_groups = data.vocabulary.num_groups();
  m.num_persons = s.person_features.dim(0);
  m.num_parts = s.person_features.dim(1);
  m.feature_dim = s.person_features.dim(2);
  m.scene_channels = s.scene_feature.dim(2);
  m.validate();
  return m;
}

inline KnowledgeMaps maps_or_build(const std::string& maps_path, const Dataset& train, const CliConfig& c) {
  if (!maps_path.empty()) {
    auto [cc, cp] = load_maps(maps_path);
    return {std::move(cc), std::move(cp)};
  }
  return build_maps(train.annotations(), c.grid_h, c.grid_w);
}

inline std::string metrics_line(const Metrics& m) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "mca " << m.mca << " mpca " << m.mpca << " scenes " << m.count;
  return os.str();
}

inline std::vector<std::size_t> parse_merge(const std::string& text, std::size_t groups) {
  auto table = parse_number_list<std::size_t>("--merge", text);
  if (table.size() != groups)
    throw ConfigError("--merge needs " + std::to_string(groups) + " entries, got " + std::to_string(table.size()));
  return table;
}

}  // namespace detail

/// Runs one subcommand. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CliConfig defaults;
  CLI::App app{"Knowledge-augmented group activity recognition on synthetic scenes", "kari"};
  app.require_subcommand(1);
  app.fallthrough(false);

  struct Flags {
    std::string config, out, in, data, maps, model, history, csv, split = "test", merge, seeds, ratios, variants;
    std::uint64_t seed = 1;
    std::string variant = "Full";
    double ratio = 1.0, step = 1e-4, tol = 1e-4;
    std::size_t jobs = 1, grid_h = kDefaultGrid, grid_w = kDefaultGrid, scenes = 1;
  } f;
  f.seeds = detail::join(defaults.seeds);
  f.ratios = detail::join(defaults.ratios);
  f.variants = detail::join(defaults.variants);

  std::map<std::string, CLI::Option*> opts;
  auto common = [&](CLI::App* sub) {
    opts[sub->get_name() + "config"] =
        sub->add_option("--config", f.config, "flat key = value config file (flags override it)");
    opts[sub->get_name() + "seed"] =
        sub->add_option("--seed", f.seed, "seed for every random stream")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-data", "generate train and test scenes with annotations and features");
  common(gen);
  gen->add_option("--out", f.out, "output directory")->required();

  auto* bm = app.add_subcommand("build-maps", "build the C-C and C-P maps from an annotation file");
  common(bm);
  bm->add_option("--in", f.in, "annotation file")->required();
  bm->add_option("--out", f.out, "map file to write")->required();
  opts["build-mapsgrid_h"] = bm->add_option("--grid-h", f.grid_h, "C-P grid rows")->capture_default_str();
  opts["build-mapsgrid_w"] = bm->add_option("--grid-w", f.grid_w, "C-P grid columns")->capture_default_str();

  auto* tr = app.add_subcommand("train", "train one variant on the train split and write a checkpoint");
  common(tr);
  tr->add_option("--data", f.data, "directory written by gen-data")->required();
  tr->add_option("--maps", f.maps, "map file (default: built from the training scenes used)");
  opts["trainvariant"] = tr->add_option("--variant", f.variant, "ablation variant")->capture_default_str();
  opts["trainratio"] =
      tr->add_option("--ratio", f.ratio, "stratified fraction of the train split to use")->capture_default_str();
  tr->add_option("--out", f.out, "checkpoint file to write")->required();
  tr->add_option("--history", f.history, "loss history CSV (default: <out>.history.csv)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  common(ev);
  ev->add_option("--model", f.model, "checkpoint file")->required();
  ev->add_option("--data", f.data, "directory written by gen-data")->required();
  ev->add_option("--split", f.split, "split to evaluate (train or test)")->capture_default_str();
  ev->add_option("--maps", f.maps, "map file (default: built from the train split)");
  opts["evalvariant"] = ev->add_option("--variant", f.variant, "variant (default: the checkpoint's)");
  ev->add_option("--merge", f.merge, "comma list mapping each group class to a merged class for MPCA");
  ev->add_option("--out", f.out, "metrics JSON file to write");

  auto* ab = app.add_subcommand("ablate", "train and evaluate every (seed, variant, ratio) cell");
  common(ab);
  opts["ablateseeds"] = ab->add_option("--seeds", f.seeds, "comma list of seeds")->capture_default_str();
  opts["ablateratios"] = ab->add_option("--ratio", f.ratios, "comma list of train ratios")->capture_default_str();
  opts["ablatevariants"] = ab->add_option("--variant", f.variants, "comma list of variants")->capture_default_str();
  opts["ablatejobs"] = ab->add_option("--jobs", f.jobs, "worker threads")->capture_default_str();
  ab->add_option("--out", f.out, "report JSON file to write")->required();
  ab->add_option("--csv", f.csv, "per-variant CSV table to write");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full toy model");
  common(gc);
  gc->add_option("--scenes", f.scenes, "training scenes to check")->capture_default_str();
  gc->add_option("--step", f.step, "finite-difference step")->capture_default_str();
  gc->add_option("--tol", f.tol, "pass threshold on the max relative error")->capture_default_str();

  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == args[0];
    if (!known) {
      err << "kari: unknown subcommand '" << args[0] << "'\n" << app.help();
      return kExitUsage;
    }
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "kari: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  auto given = [&](const std::string& key) {
    auto it = opts.find(name + key);
    return it != opts.end() && it->second->count() > 0;
  };

  try {
    CliConfig c;
    if (!f.config.empty()) apply_config_file(c, f.config);
    if (given("seed")) c.seed = f.seed;
    if (given("grid_h")) c.grid_h = f.grid_h;
    if (given("grid_w")) c.grid_w = f.grid_w;
    if (given("variant") && name == "train") c.variant = f.variant;
    if (given("variant") && name == "eval") c.variant = f.variant;
    if (given("ratio")) c.ratio = f.ratio;
    if (given("seeds")) set_config_value(c, "ablate.seeds", f.seeds);
    if (given("ratios")) set_config_value(c, "ablate.ratios", f.ratios);
    if (given("variants")) set_config_value(c, "ablate.variants", f.variants);
    if (given("jobs")) c.jobs = f.jobs;
    try {
      c.validate();
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }

    if (name == "gen-data") {
      GenConfig g = c.gen;
      g.seed = c.seed;
      const auto world = gen_dataset(g);
      std::filesystem::create_directories(f.out);
      const auto tp = data_paths(f.out, "train"), sp = data_paths(f.out, "test");
      save_dataset(world.train, tp.annotations, tp.features);
      save_dataset(world.test, sp.annotations, sp.features);
      out << "wrote " << world.train.examples.size() << " train and " << world.test.examples.size()
          << " test scenes to " << f.out << "\n";
    } else if (name == "build-maps") {
      const auto set = load_annotations(f.in);
      const auto cc = build_cc_map(set);
      const auto cp = build_cp_map(set, c.grid_h, c.grid_w);
      save_maps(cc, cp, f.out);
      out << "wrote maps (K=" << cc.num_actions << ", grid " << cp.grid_h << "x" << cp.grid_w << ") to " << f.out
          << "\n";
    } else if (name == "train") {
      const auto tp = data_paths(f.data, "train");
      Dataset train = load_dataset(tp.annotations, tp.features);
      if (c.ratio < 1.0) {
        Rng rng = substream(c.seed, "cli.train.ratio");
        train = stratified_subsample(train, c.ratio, rng);
      }
      const auto maps = detail::maps_or_build(f.maps, train, c);
      OptimConfig o = c.optim;
      o.seed = c.seed;
      const auto variant = AblationVariant::from_name(c.variant);
      auto result = kari::train(variant, train, maps, detail::model_for(train, c.model), o);
      save_checkpoint(result.state, f.out, variant.name);
      kari::detail::write_file(f.history.empty() ? f.out + ".history.csv" : f.history,
                               history_to_csv(result.history));
      out << "trained " << variant.name << " on " << train.examples.size() << " scenes for " << o.epochs
          << " epochs";
      if (!result.history.empty()) out << ", final loss " << kari::detail::fmt17(result.history.back().total);
      out << "\n";
    } else if (name == "eval") {
      const auto ckpt = load_checkpoint(f.model);
      if (f.split != "train" && f.split != "test") throw ConfigError("--split must be train or test");
      const auto tp = data_paths(f.data, "train"), sp = data_paths(f.data, f.split);
      const Dataset data = load_dataset(sp.annotations, sp.features);
      const auto maps = f.maps.empty() ? build_maps(load_annotations(tp.annotations), c.grid_h, c.grid_w)
                                       : detail::maps_or_build(f.maps, data, c);
      const std::string vname = given("variant") || ckpt.variant.empty() ? c.variant : ckpt.variant;
      const auto variant = AblationVariant::from_name(vname);
      std::optional<std::vector<std::size_t>> merge;
      if (!f.merge.empty()) merge = detail::parse_merge(f.merge, ckpt.state.config.num_groups);
      const auto m = evaluate(ckpt.state, variant, data, maps, merge);
      auto doc = metrics_to_json(m);
      doc["variant"] = variant.name;
      doc["split"] = f.split;
      if (!f.out.empty()) kari::detail::write_file(f.out, doc.dump(2) + "\n");
      out << variant.name << " " << detail::metrics_line(m) << "\n";
    } else if (name == "ablate") {
      AblationPlan plan;
      plan.variants.clear();
      for (const auto& v : c.variants) plan.variants.push_back(AblationVariant::from_name(v));
      plan.ratios = c.ratios;
      plan.grid_h = c.grid_h;
      plan.grid_w = c.grid_w;
      plan.jobs = c.jobs;
      const auto report = run_ablation(c.model, c.gen, c.optim, c.seeds, plan);
      kari::detail::write_file(f.out, report_to_json(report).dump(2) + "\n");
      if (!f.csv.empty()) kari::detail::write_file(f.csv, report_to_csv(report));
      std::ostringstream table;
      table.setf(std::ios::fixed);
      table.precision(2);
      for (const auto& s : report.summaries)
        table << s.variant << " ratio " << s.ratio << " mca " << s.mca_mean << " +- " << s.mca_std << "\n";
      out << table.str();
    } else if (name == "gradcheck") {
      const auto r = check_full_model_gradients(c.seed, f.scenes, f.step);
      out << "max relative error " << r.max_rel_error << " (checked " << r.checked << ", skipped at relu kinks "
          << r.skipped << ", worst " << r.worst_param << "[" << r.worst_index << "])\n";
      if (!(r.max_rel_error < f.tol)) {
        err << "kari: gradient check failed: " << r.max_rel_error << " >= " << f.tol << "\n";
        return kExitFailure;
      }
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "kari: invalid config: " << e.what() << "\n";
    return kExitInvalidConfig;
  } catch (const IoError& e) {
    err << "kari: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const std::exception& e) {
    err << "kari: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace kari::cli
