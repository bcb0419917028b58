#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "psfm/dataset.hpp"
#include "psfm/geom.hpp"
#include "psfm/regopt.hpp"

namespace psfm {

struct RegisteredImage {
  ImageId id = 0;
  Pose pose;
  AlignmentParams alignment;
  CameraIntrinsics intrinsics;
};

struct ScenePoint {
  TrackId track_id = 0;
  Point3 position = Point3::Zero();
  // Registered images whose observation of the track supports this point.
  std::vector<ImageId> views;

  bool HasView(ImageId id) const {
    for (ImageId v : views)
      if (v == id) return true;
    return false;
  }
};

struct ViewResidual {
  ImageId image_id = 0;
  double reprojection_px = 0.0;
  bool cheirality_ok = true;
  std::optional<double> depth_residual;  // signed, scene units
};

// Registered images, their points and the event log of one incremental run.
class Reconstruction {
 public:
  std::map<ImageId, RegisteredImage> images;
  std::map<TrackId, ScenePoint> points;
  std::vector<ImageId> registration_order;
  ImageId seed_image = 0;
  std::optional<TrackId> scale_anchor;
  std::vector<nlohmann::json> events;

  bool IsRegistered(ImageId id) const { return images.count(id) != 0; }

  void Log(const std::string& kind, nlohmann::json data = nlohmann::json::object()) {
    data["event"] = kind;
    data["seq"] = events.size();
    events.push_back(std::move(data));
  }

  std::size_t NumObservations() const {
    std::size_t n = 0;
    for (const auto& [id, p] : points) n += p.views.size();
    return n;
  }

  // Per-view reprojection and depth-consistency residuals of one point.
  std::vector<ViewResidual> Residuals(const ScenePoint& point, const Dataset& dataset) const {
    std::vector<ViewResidual> out;
    const Track& track = dataset.track(point.track_id);
    for (ImageId view : point.views) {
      const RegisteredImage& img = images.at(view);
      const Observation* obs = track.Find(view);
      ViewResidual r;
      r.image_id = view;
      const Eigen::Vector3d X = img.pose.Transform(point.position);
      if (!(X.z() > kDefaultCheiralityEps)) {
        r.cheirality_ok = false;
        r.reprojection_px = std::numeric_limits<double>::infinity();
      } else {
        const Point2 proj(img.intrinsics.fx * X.x() / X.z() + img.intrinsics.cx,
                          img.intrinsics.fy * X.y() / X.z() + img.intrinsics.cy);
        r.reprojection_px = (proj - obs->pixel).norm();
      }
      if (obs->prior_depth) r.depth_residual = DepthConsistencyResidual(img.pose, point.position, *obs->prior_depth, img.alignment);
      out.push_back(r);
    }
    return out;
  }

  // Poses in image-id order.
  std::vector<std::pair<ImageId, Pose>> Trajectory() const {
    std::vector<std::pair<ImageId, Pose>> out;
    for (const auto& [id, img] : images) out.emplace_back(id, img.pose);
    return out;
  }
};

// Largest angle, in radians, between any two viewing rays of the point.
inline double TriangulationAngle(const Reconstruction& recon, const ScenePoint& point) {
  double best = 0.0;
  std::vector<Eigen::Vector3d> rays;
  for (ImageId v : point.views) {
    const Eigen::Vector3d d = point.position - recon.images.at(v).pose.Center();
    const double n = d.norm();
    if (n > 0.0) rays.push_back(d / n);
  }
  for (std::size_t i = 0; i < rays.size(); ++i)
    for (std::size_t j = i + 1; j < rays.size(); ++j)
      best = std::max(best, std::atan2(rays[i].cross(rays[j]).norm(), rays[i].dot(rays[j])));
  return best;
}

}  // namespace psfm
