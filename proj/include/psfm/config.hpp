#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "psfm/dataset.hpp"
#include "psfm/error.hpp"
#include "psfm/evalkit.hpp"
#include "psfm/pipeline.hpp"

namespace psfm {

using ConfigMap = std::map<std::string, std::string>;

// Flat "key = value" text; '#' starts a comment.
inline ConfigMap ParseConfigText(std::string_view text, const std::string& name = "config") {
  ConfigMap out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  const auto trim = [](std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  };
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      Throw(ErrorCode::kParseError, name + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) Throw(ErrorCode::kParseError, name + ":" + std::to_string(line_no) + ": empty key");
    out[key] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

inline ConfigMap ReadConfigFile(const std::filesystem::path& path) {
  const std::vector<char> data = detail::ReadAll(path);
  return ParseConfigText(std::string_view(data.data(), data.size()), path.string());
}

struct RunConfig {
  PipelineConfig pipeline;
  IngestConfig ingest;
  EvalConfig eval;
};

namespace detail {

inline bool ParseBool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  Throw(ErrorCode::kInvalidArgument, "config key '" + key + "' expects a boolean, got '" + v + "'");
}

template <typename T>
T ParseConfigNumber(const std::string& v, const std::string& key) {
  return ParseNumber<T>(v, "config key '" + key + "'");
}

struct ConfigField {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define PSFM_NUM_FIELD(key, member, type)                                                          \
  {                                                                                                \
    key, ConfigField {                                                                             \
      [](RunConfig& c, const std::string& v) { c.member = ParseConfigNumber<type>(v, key); },      \
          [](const RunConfig& c) { return FormatValue(c.member); }                                 \
    }                                                                                              \
  }
#define PSFM_BOOL_FIELD(key, member)                                                               \
  {                                                                                                \
    key, ConfigField {                                                                             \
      [](RunConfig& c, const std::string& v) { c.member = ParseBool(v, key); },                    \
          [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }              \
    }                                                                                              \
  }

inline std::string FormatValue(double v) { return FormatDouble(v); }
inline std::string FormatValue(int v) { return std::to_string(v); }
inline std::string FormatValue(std::uint64_t v) { return std::to_string(v); }

inline const std::map<std::string, ConfigField>& ConfigFields() {
  static const std::map<std::string, ConfigField> fields = {
      PSFM_NUM_FIELD("lambda", pipeline.solver.lambda, double),
      PSFM_NUM_FIELD("seed", pipeline.ransac.rng_seed, std::uint64_t),
      PSFM_BOOL_FIELD("depth_init", pipeline.depth_init),
      PSFM_BOOL_FIELD("depth_regularization", pipeline.depth_regularization),
      PSFM_BOOL_FIELD("depth_lift_fallback", pipeline.depth_lift_fallback),
      PSFM_NUM_FIELD("min_init_matches", pipeline.min_init_matches, int),
      PSFM_NUM_FIELD("ransac.max_iterations", pipeline.ransac.max_iterations, int),
      PSFM_NUM_FIELD("ransac.inlier_threshold_px", pipeline.ransac.inlier_threshold_px, double),
      PSFM_NUM_FIELD("ransac.confidence", pipeline.ransac.confidence, double),
      PSFM_NUM_FIELD("ransac.min_inliers", pipeline.ransac.min_inliers, int),
      PSFM_NUM_FIELD("solver.max_iterations", pipeline.solver.max_iterations, int),
      PSFM_NUM_FIELD("solver.function_tolerance", pipeline.solver.function_tolerance, double),
      PSFM_NUM_FIELD("solver.parameter_tolerance", pipeline.solver.parameter_tolerance, double),
      PSFM_NUM_FIELD("solver.robust_loss_scale_px", pipeline.solver.robust_loss_scale_px, double),
      PSFM_BOOL_FIELD("solver.robust_reprojection", pipeline.solver.robust_reprojection),
      PSFM_NUM_FIELD("bundle.max_iterations", pipeline.bundle.max_iterations, int),
      PSFM_NUM_FIELD("bundle.function_tolerance", pipeline.bundle.function_tolerance, double),
      PSFM_NUM_FIELD("bundle.parameter_tolerance", pipeline.bundle.parameter_tolerance, double),
      PSFM_NUM_FIELD("bundle.robust_loss_scale_px", pipeline.bundle.robust_loss_scale_px, double),
      PSFM_BOOL_FIELD("bundle.robust", pipeline.bundle.robust),
      PSFM_NUM_FIELD("bundle.local_window", pipeline.bundle.local_window, int),
      PSFM_NUM_FIELD("bundle.global_every", pipeline.bundle.global_every, int),
      PSFM_NUM_FIELD("filter.filter_px", pipeline.filter.filter_px, double),
      PSFM_NUM_FIELD("filter.depth_gate", pipeline.filter.depth_gate, double),
      PSFM_NUM_FIELD("filter.min_tri_angle_deg", pipeline.filter.min_tri_angle_deg, double),
      PSFM_BOOL_FIELD("ingest.resize_to_intrinsics", ingest.resize_to_intrinsics),
      PSFM_NUM_FIELD("ingest.max_aspect_mismatch", ingest.max_aspect_mismatch, double),
      PSFM_NUM_FIELD("eval.units_to_cm", eval.units_to_cm, double),
      PSFM_NUM_FIELD("eval.grid_points", eval.grid_points, int),
  };
  return fields;
}

#undef PSFM_NUM_FIELD
#undef PSFM_BOOL_FIELD

}  // namespace detail

// Applies every key; unknown keys are rejected so typos do not pass silently.
inline void ApplyConfig(const ConfigMap& values, RunConfig& cfg) {
  const auto& fields = detail::ConfigFields();
  for (const auto& [key, value] : values) {
    const auto it = fields.find(key);
    if (it == fields.end()) Throw(ErrorCode::kInvalidArgument, "unknown config key '" + key + "'");
    it->second.set(cfg, value);
  }
}

// Complete snapshot; feeding it back through ApplyConfig reproduces `cfg`.
inline ConfigMap SnapshotConfig(const RunConfig& cfg) {
  ConfigMap out;
  for (const auto& [key, field] : detail::ConfigFields()) out[key] = field.get(cfg);
  return out;
}

inline std::string FormatConfigText(const ConfigMap& values) {
  std::string out;
  for (const auto& [k, v] : values) out += k + " = " + v + "\n";
  return out;
}

}  // namespace psfm
