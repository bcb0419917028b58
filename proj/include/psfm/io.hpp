#pragma once

#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "psfm/dataset.hpp"
#include "psfm/depth_map.hpp"
#include "psfm/error.hpp"
#include "psfm/evalkit.hpp"
#include "psfm/geom.hpp"
#include "psfm/reconstruction.hpp"
#include "psfm/synthgen.hpp"

namespace psfm {

// ---------------------------------------------------------------------------
// TUM trajectories: "timestamp tx ty tz qx qy qz qw", camera-to-world.
// The timestamp carries the image id.
// ---------------------------------------------------------------------------

struct StampedPose {
  double timestamp = 0.0;
  Pose pose;  // world-to-camera
};

inline std::string FormatTum(const std::vector<StampedPose>& traj) {
  std::string out;
  for (const StampedPose& s : traj) {
    const Pose c2w = Inverse(s.pose);
    const Eigen::Quaterniond& q = c2w.quaternion();
    const Eigen::Vector3d& t = c2w.translation();
    out += FormatDouble(s.timestamp) + " " + FormatDouble(t.x()) + " " + FormatDouble(t.y()) + " " +
           FormatDouble(t.z()) + " " + FormatDouble(q.x()) + " " + FormatDouble(q.y()) + " " +
           FormatDouble(q.z()) + " " + FormatDouble(q.w()) + "\n";
  }
  return out;
}

inline std::vector<StampedPose> ParseTum(std::string_view text, const std::string& name = "trajectory") {
  std::vector<StampedPose> traj;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = detail::SplitWs(line);
    if (tok.empty()) continue;
    const std::string where = name + ":" + std::to_string(line_no);
    if (tok.size() != 8) Throw(ErrorCode::kParseError, where + ": expected 8 columns");
    double v[8];
    for (int k = 0; k < 8; ++k) v[k] = detail::ParseNumber<double>(tok[static_cast<std::size_t>(k)], where);
    const Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (!(std::abs(q.norm() - 1.0) < 1e-6)) Throw(ErrorCode::kParseError, where + ": quaternion is not unit length");
    traj.push_back({v[0], Inverse(Pose(q, Eigen::Vector3d(v[1], v[2], v[3])))});
  }
  return traj;
}

inline void WriteTum(const std::filesystem::path& path, const std::vector<StampedPose>& traj) {
  detail::WriteAll(path, FormatTum(traj));
}

inline std::vector<StampedPose> ReadTum(const std::filesystem::path& path) {
  const std::vector<char> data = detail::ReadAll(path);
  return ParseTum(std::string_view(data.data(), data.size()), path.string());
}

inline std::vector<StampedPose> ToStamped(const Reconstruction& recon) {
  std::vector<StampedPose> out;
  for (const auto& [id, img] : recon.images) out.push_back({static_cast<double>(id), img.pose});
  return out;
}

// Pairs estimated and reference poses with equal timestamps, in estimate order.
inline std::pair<std::vector<Pose>, std::vector<Pose>> Associate(const std::vector<StampedPose>& est,
                                                                 const std::vector<StampedPose>& gt) {
  std::map<double, Pose> ref;
  for (const StampedPose& s : gt) ref.emplace(s.timestamp, s.pose);
  std::pair<std::vector<Pose>, std::vector<Pose>> out;
  for (const StampedPose& s : est) {
    const auto it = ref.find(s.timestamp);
    if (it == ref.end()) continue;
    out.first.push_back(s.pose);
    out.second.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PLY point clouds: binary little-endian, double x y z, uint track_id.
// ---------------------------------------------------------------------------

struct CloudPoint {
  Point3 position;
  std::uint32_t track_id = 0;
};

inline std::string EncodePly(const std::vector<CloudPoint>& cloud) {
  std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\nproperty uint track_id\nend_header\n";
  for (const CloudPoint& p : cloud) {
    for (int k = 0; k < 3; ++k) {
      const double v = p.position(k);
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
    detail::AppendU32Le(out, p.track_id);
  }
  return out;
}

inline std::vector<CloudPoint> ParsePly(const std::vector<char>& data, const std::string& name = "ply") {
  const std::string_view text(data.data(), data.size());
  const std::size_t end = text.find("end_header\n");
  if (text.substr(0, 4) != "ply\n" || end == std::string_view::npos) {
    Throw(ErrorCode::kParseError, name + ": byte 0: not a PLY file");
  }
  const std::string_view header = text.substr(0, end);
  const std::size_t body = end + std::strlen("end_header\n");
  if (header.find("format binary_little_endian 1.0") == std::string_view::npos) {
    Throw(ErrorCode::kParseError, name + ": only binary little-endian PLY is supported");
  }
  const std::string key = "element vertex ";
  const std::size_t at = header.find(key);
  if (at == std::string_view::npos) Throw(ErrorCode::kParseError, name + ": missing vertex element");
  const std::size_t eol = header.find('\n', at);
  const auto count = detail::ParseNumber<std::size_t>(header.substr(at + key.size(), eol - at - key.size()), name);
  // Property layout: doubles or floats for x y z, optional uint track_id.
  std::vector<std::pair<std::string, std::string>> props;
  std::size_t p = header.find("property", at);
  while (p != std::string_view::npos) {
    const std::size_t e = header.find('\n', p);
    const auto tok = detail::SplitWs(header.substr(p, e - p));
    if (tok.size() != 3) Throw(ErrorCode::kParseError, name + ": unsupported property line");
    props.emplace_back(std::string(tok[1]), std::string(tok[2]));
    p = header.find("property", e);
  }
  std::size_t stride = 0;
  for (const auto& [type, pname] : props) {
    if (type == "double") stride += 8;
    else if (type == "float" || type == "uint" || type == "uint32" || type == "int") stride += 4;
    else Throw(ErrorCode::kParseError, name + ": unsupported property type " + type);
  }
  if (data.size() - body != count * stride) {
    Throw(ErrorCode::kParseError, name + ": byte " + std::to_string(body) + ": vertex data size mismatch");
  }
  std::vector<CloudPoint> cloud(count);
  for (std::size_t i = 0; i < count; ++i) {
    const char* rec = data.data() + body + i * stride;
    std::size_t off = 0;
    for (const auto& [type, pname] : props) {
      double value = 0.0;
      std::uint32_t u = 0;
      if (type == "double") {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(rec[off + b])) << (8 * b);
        std::memcpy(&value, &bits, 8);
        off += 8;
      } else if (type == "float") {
        value = detail::LoadF32(rec + off, true);
        off += 4;
      } else {
        u = detail::LoadU32Le(rec + off);
        value = u;
        off += 4;
      }
      if (pname == "x") cloud[i].position.x() = value;
      else if (pname == "y") cloud[i].position.y() = value;
      else if (pname == "z") cloud[i].position.z() = value;
      else if (pname == "track_id") cloud[i].track_id = u;
    }
  }
  return cloud;
}

inline void WritePly(const std::filesystem::path& path, const std::vector<CloudPoint>& cloud) {
  detail::WriteAll(path, EncodePly(cloud));
}

inline std::vector<CloudPoint> ReadPly(const std::filesystem::path& path) {
  return ParsePly(detail::ReadAll(path), path.string());
}

inline std::vector<CloudPoint> ToCloud(const Reconstruction& recon) {
  std::vector<CloudPoint> out;
  for (const auto& [tid, p] : recon.points) out.push_back({p.position, tid});
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic fixtures
// ---------------------------------------------------------------------------

inline std::string DepthFileName(ImageId id) { return "depth_" + std::to_string(id) + ".pfm"; }
inline std::string GtDepthFileName(ImageId id) { return "gt_depth_" + std::to_string(id) + ".pfm"; }

inline nlohmann::json SpecJson(const SceneSpec& s) {
  return {{"num_frames", s.num_frames},
          {"num_points", s.num_points},
          {"parallax_ratio", s.parallax_ratio},
          {"trajectory", TrajectoryName(s.trajectory)},
          {"pixel_noise_std", s.pixel_noise_std},
          {"depth_noise_alpha", s.depth_noise_alpha},
          {"outlier_fraction", s.outlier_fraction},
          {"prior", PriorName(s.prior)},
          {"gamma_star", s.gamma_star},
          {"beta_star", s.beta_star},
          {"rng_seed", s.rng_seed}};
}

// Writes tracks.txt, depth_<id>.pfm, gt_traj.txt, gt_points.ply,
// gt_align.json, gt_depth_<id>.pfm and spec.json into `dir`.
inline void WriteFixture(const SyntheticScene& scene, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) Throw(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
  TracksFile file = scene.file;
  std::map<ImageId, const ImageRecord*> records;
  for (const ImageRecord& rec : scene.dataset.images()) records[rec.id] = &rec;
  for (TracksFileImage& img : file.images) {
    const auto it = records.find(img.id);
    if (it == records.end() || !it->second->depth) continue;
    img.depth_path = DepthFileName(img.id);
    WritePfm(dir / img.depth_path, *it->second->depth);
  }
  detail::WriteAll(dir / "tracks.txt", FormatTracksText(file));

  std::vector<StampedPose> traj;
  for (std::size_t i = 0; i < scene.gt.poses.size(); ++i) traj.push_back({static_cast<double>(i), scene.gt.poses[i]});
  WriteTum(dir / "gt_traj.txt", traj);
  std::vector<CloudPoint> cloud;
  for (std::size_t j = 0; j < scene.gt.points.size(); ++j) cloud.push_back({scene.gt.points[j], static_cast<std::uint32_t>(j)});
  WritePly(dir / "gt_points.ply", cloud);
  const nlohmann::json align = {{"gamma", scene.gt.gamma}, {"beta", scene.gt.beta}};
  detail::WriteAll(dir / "gt_align.json", align.dump(2) + "\n");
  for (const auto& [id, map] : scene.gt.depth) WritePfm(dir / GtDepthFileName(id), map);
  detail::WriteAll(dir / "spec.json", SpecJson(scene.spec).dump(2) + "\n");
}

// Ground-truth depth maps of a fixture directory, keyed by image id.
inline std::map<ImageId, DepthMap> ReadGtDepth(const std::filesystem::path& dir) {
  std::map<ImageId, DepthMap> out;
  if (!std::filesystem::is_directory(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    const std::string name = path.filename().string();
    if (name.rfind("gt_depth_", 0) != 0 || path.extension() != ".pfm") continue;
    const std::string stem = path.stem().string().substr(std::strlen("gt_depth_"));
    out.emplace(detail::ParseNumber<ImageId>(stem, name), ReadDepthMap(path));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

inline nlohmann::json ThresholdMap(const std::map<double, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [t, v] : m) j[FormatDouble(t)] = v;
  return j;
}

inline nlohmann::json CurveJson(const RecallCurve& c, const std::string& unit) {
  nlohmann::json j;
  j["unit"] = unit;
  j["auc"] = ThresholdMap(c.auc_at);
  j["samples"] = c.errors.size();
  j["median"] = c.errors.empty() ? 0.0 : Median(c.errors);
  double sq = 0.0;
  for (double e : c.errors) sq += e * e;
  j["rmse"] = c.errors.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(c.errors.size()));
  return j;
}

inline std::string CurvesCsv(const std::map<std::string, const RecallCurve*>& curves) {
  std::string out = "metric,threshold,recall\n";
  for (const auto& [name, c] : curves) {
    for (std::size_t k = 0; k < c->thresholds.size(); ++k) {
      out += name + "," + FormatDouble(c->thresholds[k]) + "," + FormatDouble(c->recall[k]) + "\n";
    }
  }
  return out;
}

}  // namespace psfm
