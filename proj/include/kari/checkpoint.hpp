#pragma once

#include <sstream>
#include <string>

#include <json.hpp>

#include "kari/detail/format.hpp"
#include "kari/model.hpp"

namespace kari {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"K", c.num_actions},     {"G", c.num_groups},          {"N", c.num_persons},
          {"P", c.num_parts},       {"feature_dim", c.feature_dim}, {"scene_channels", c.scene_channels},
          {"D", c.embed_dim},       {"d", c.head_dim},            {"heads_enc", c.heads_enc},
          {"heads_dec", c.heads_dec}, {"ffn_dim", c.ffn_dim}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_actions = j.at("K").get<std::size_t>();
  c.num_groups = j.at("G").get<std::size_t>();
  c.num_persons = j.at("N").get<std::size_t>();
  c.num_parts = j.at("P").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.scene_channels = j.at("scene_channels").get<std::size_t>();
  c.embed_dim = j.at("D").get<std::size_t>();
  c.head_dim = j.at("d").get<std::size_t>();
  c.heads_enc = j.at("heads_enc").get<std::size_t>();
  c.heads_dec = j.at("heads_dec").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.lambda = j.at("lambda").get<double>();
  c.cc_gain = j.at("cc_gain").get<double>();
  c.cp_gain = j.at("cp_gain").get<double>();
  return c;
}

}  // namespace detail

/// JSON document: version, config, optional variant name, and every
/// parameter as {shape, values} with 17 significant digits.
inline std::string format_checkpoint(const ModelState& state, const std::string& variant = "") {
  std::ostringstream os;
  os << "{\n  \"version\": " << kCheckpointVersion << ",\n  \"variant\": " << detail::json_quote(variant)
     << ",\n  \"config\": {";
  const auto cfg = detail::config_to_json(state.config);
  bool first = true;
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    os << (first ? "" : ", ") << detail::json_quote(it.key()) << ": " << it.value().dump();
    first = false;
  }
  os << ", \"lambda\": " << detail::fmt17(state.config.lambda) << ", \"cc_gain\": " << detail::fmt17(state.config.cc_gain)
     << ", \"cp_gain\": " << detail::fmt17(state.config.cp_gain) << "},\n  \"params\": {";
  first = true;
  for (const auto& [name, t] : state.params) {
    os << (first ? "\n" : ",\n") << "    " << detail::json_quote(name) << ": {\"shape\": [";
    for (std::size_t i = 0; i < t.rank(); ++i) os << (i ? ", " : "") << t.dim(i);
    os << "], \"values\": ";
    detail::write_number_array(os, t.values());
    os << '}';
    first = false;
  }
  os << "\n  }\n}\n";
  return os.str();
}

struct Checkpoint {
  ModelState state;
  std::string variant;
};

/// Parses and validates a checkpoint against the parameter layout its
/// config implies.
inline Checkpoint parse_checkpoint(const std::string& text, const std::string& source = "<checkpoint>") {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.at("version").get<int>() != kCheckpointVersion)
      throw ParseError(source + ": unsupported checkpoint version");
    const ModelConfig config = detail::config_from_json(doc.at("config"));
    config.validate();
    const auto specs = detail::param_specs(config);
    const auto& params = doc.at("params");
    if (params.size() != specs.size())
      throw ParseError(source + ": checkpoint has " + std::to_string(params.size()) + " parameters, config implies " +
                       std::to_string(specs.size()));
    nc::ParamSet set;
    for (const auto& [name, spec] : specs) {
      if (!params.contains(name)) throw ParseError(source + ": missing parameter '" + name + "'");
      const auto& entry = params.at(name);
      auto shape = entry.at("shape").get<nc::Shape>();
      auto values = entry.at("values").get<std::vector<double>>();
      if (shape != spec.shape)
        throw ParseError(source + ": parameter '" + name + "' has shape " + nc::shape_str(shape) + ", expected " +
                         nc::shape_str(spec.shape));
      if (values.size() != nc::shape_numel(shape))
        throw ParseError(source + ": parameter '" + name + "' payload length does not match its shape");
      set.emplace(name, nc::Tensor::parameter(std::move(shape), std::move(values)));
    }
    return Checkpoint{ModelState(config, std::move(set)), doc.value("variant", std::string{})};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ParseError(source + ": " + e.what());
  }
}

inline void save_checkpoint(const ModelState& state, const std::string& path, const std::string& variant = "") {
  detail::write_file(path, format_checkpoint(state, variant));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(detail::read_file(path), path);
}

}  // namespace kari
