#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "psfm/depth_map.hpp"
#include "psfm/error.hpp"
#include "psfm/geom.hpp"

namespace psfm {

using ImageId = std::uint32_t;
using TrackId = std::uint32_t;

struct Observation {
  ImageId image_id = 0;
  Point2 pixel = Point2::Zero();
  // Absent when the keypoint lies on invalid depth support or under the mask.
  std::optional<double> prior_depth;
  bool masked = false;

  bool operator==(const Observation& o) const {
    return image_id == o.image_id && pixel == o.pixel && prior_depth == o.prior_depth &&
           masked == o.masked;
  }
};

struct Track {
  TrackId id = 0;
  std::vector<Observation> observations;

  const Observation* Find(ImageId image) const {
    for (const Observation& obs : observations) {
      if (obs.image_id == image) return &obs;
    }
    return nullptr;
  }

  bool operator==(const Track&) const = default;
};

struct ImageRecord {
  ImageId id = 0;
  CameraIntrinsics intrinsics;
  std::optional<DepthMap> depth;
  std::optional<Mask> mask;

  bool operator==(const ImageRecord&) const = default;
};

struct IngestConfig {
  // Depth maps and masks at a working resolution are resampled to the
  // intrinsics resolution by nearest neighbour.
  bool resize_to_intrinsics = true;
  double max_aspect_mismatch = 0.01;
};

struct IngestStats {
  int dropped_tracks = 0;
  int dropped_images = 0;
  int masked_observations = 0;
  int observations_without_prior = 0;
};

// Immutable, validated reconstruction input.
class Dataset {
 public:
  Dataset() = default;

  // Attaches keypoint priors, enforces track invariants and drops tracks
  // with fewer than two observations and images no track references.
  static Dataset Build(std::vector<ImageRecord> images, std::vector<Track> tracks,
                       const IngestConfig& cfg = {}) {
    Dataset ds;
    std::sort(images.begin(), images.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::sort(tracks.begin(), tracks.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::map<ImageId, std::size_t> image_index;
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!image_index.emplace(images[i].id, i).second) {
        Throw(ErrorCode::kParseError, "duplicate image id " + std::to_string(images[i].id));
      }
      PrepareImage(images[i], cfg);
    }

    std::vector<bool> referenced(images.size(), false);
    for (std::size_t t = 0; t < tracks.size(); ++t) {
      Track& track = tracks[t];
      if (t > 0 && tracks[t - 1].id == track.id) {
        Throw(ErrorCode::kParseError, "duplicate track id " + std::to_string(track.id));
      }
      std::sort(track.observations.begin(), track.observations.end(),
                [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
      for (std::size_t k = 0; k < track.observations.size(); ++k) {
        Observation& obs = track.observations[k];
        if (k > 0 && track.observations[k - 1].image_id == obs.image_id) {
          Throw(ErrorCode::kParseError, "track " + std::to_string(track.id) +
                                            " observes image " + std::to_string(obs.image_id) + " twice");
        }
        const auto it = image_index.find(obs.image_id);
        if (it == image_index.end()) {
          Throw(ErrorCode::kDanglingReference, "track " + std::to_string(track.id) +
                                                   " references unknown image " +
                                                   std::to_string(obs.image_id));
        }
        const ImageRecord& img = images[it->second];
        const CameraIntrinsics& K = img.intrinsics;
        if (!std::isfinite(obs.pixel.x()) || !std::isfinite(obs.pixel.y()) || obs.pixel.x() < 0.0 ||
            obs.pixel.y() < 0.0 || obs.pixel.x() > K.width - 1 || obs.pixel.y() > K.height - 1) {
          Throw(ErrorCode::kOutOfBounds, "track " + std::to_string(track.id) +
                                             " has a keypoint outside image " +
                                             std::to_string(obs.image_id));
        }
        obs.prior_depth.reset();
        obs.masked = img.mask && img.mask->IsMasked(obs.pixel);
        if (obs.masked) {
          ++ds.stats_.masked_observations;
        } else if (img.depth) {
          obs.prior_depth = DepthLookup(*img.depth, obs.pixel);
        }
        if (!obs.prior_depth) ++ds.stats_.observations_without_prior;
      }
    }

    for (Track& track : tracks) {
      if (track.observations.size() < 2) {
        ++ds.stats_.dropped_tracks;
        continue;
      }
      for (const Observation& obs : track.observations) referenced[image_index[obs.image_id]] = true;
      ds.tracks_.push_back(std::move(track));
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!referenced[i]) {
        ++ds.stats_.dropped_images;
        continue;
      }
      ds.images_.push_back(std::move(images[i]));
    }
    for (std::size_t i = 0; i < ds.images_.size(); ++i) ds.image_index_[ds.images_[i].id] = i;
    for (std::size_t i = 0; i < ds.tracks_.size(); ++i) ds.track_index_[ds.tracks_[i].id] = i;
    return ds;
  }

  const std::vector<ImageRecord>& images() const { return images_; }
  const std::vector<Track>& tracks() const { return tracks_; }
  const IngestStats& stats() const { return stats_; }

  bool HasImage(ImageId id) const { return image_index_.count(id) != 0; }
  bool HasTrack(TrackId id) const { return track_index_.count(id) != 0; }
  const ImageRecord& image(ImageId id) const {
    const auto it = image_index_.find(id);
    if (it == image_index_.end()) Throw(ErrorCode::kDanglingReference, "no image " + std::to_string(id));
    return images_[it->second];
  }
  const Track& track(TrackId id) const {
    const auto it = track_index_.find(id);
    if (it == track_index_.end()) Throw(ErrorCode::kDanglingReference, "no track " + std::to_string(id));
    return tracks_[it->second];
  }

  // Field-by-field equality of images and tracks (ingest statistics excluded).
  bool operator==(const Dataset& o) const { return images_ == o.images_ && tracks_ == o.tracks_; }

 private:
  static bool AspectCompatible(int w, int h, const CameraIntrinsics& K, double tol) {
    const double a = static_cast<double>(w) / h;
    const double b = static_cast<double>(K.width) / K.height;
    return std::abs(a - b) <= tol * b;
  }

  static void PrepareImage(ImageRecord& img, const IngestConfig& cfg) {
    img.intrinsics.Validate();
    const CameraIntrinsics& K = img.intrinsics;
    const std::string who = "image " + std::to_string(img.id);
    if (img.depth && (img.depth->width() != K.width || img.depth->height() != K.height)) {
      if (!cfg.resize_to_intrinsics ||
          !AspectCompatible(img.depth->width(), img.depth->height(), K, cfg.max_aspect_mismatch)) {
        Throw(ErrorCode::kInconsistentDims, who + ": depth map is " + std::to_string(img.depth->width()) +
                                                "x" + std::to_string(img.depth->height()) +
                                                ", intrinsics are " + std::to_string(K.width) + "x" +
                                                std::to_string(K.height));
      }
      img.depth = ResizeDepth(*img.depth, K.width, K.height);
    }
    if (img.mask && (img.mask->width() != K.width || img.mask->height() != K.height)) {
      if (!cfg.resize_to_intrinsics ||
          !AspectCompatible(img.mask->width(), img.mask->height(), K, cfg.max_aspect_mismatch)) {
        Throw(ErrorCode::kInconsistentDims, who + ": mask dimensions disagree with intrinsics");
      }
      img.mask = ResizeNearest(*img.mask, K.width, K.height);
    }
  }

  std::vector<ImageRecord> images_;
  std::vector<Track> tracks_;
  std::map<ImageId, std::size_t> image_index_;
  std::map<TrackId, std::size_t> track_index_;
  IngestStats stats_;
};

// Shortest text form that parses back to the identical double.
inline std::string FormatDouble(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Tracks file
//
//   TRACKS v1
//   IMG <id> <fx> <fy> <cx> <cy> <width> <height> [depth_path|-] [mask_path|-]
//   DIST <id> <k1> <k2> <p1> <p2>        (optional; must be all zero)
//   TRK <track_id> (<image_id> <x> <y>)+
// ---------------------------------------------------------------------------

struct TracksFileImage {
  ImageId id = 0;
  CameraIntrinsics intrinsics;
  std::string depth_path;
  std::string mask_path;
};

struct TracksFile {
  std::vector<TracksFileImage> images;
  std::vector<Track> tracks;
};

namespace detail {

inline std::vector<std::string_view> SplitWs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename T>
T ParseNumber(std::string_view tok, const std::string& where) {
  T v{};
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    Throw(ErrorCode::kParseError, where + ": bad number '" + std::string(tok) + "'");
  }
  return v;
}

}  // namespace detail

inline TracksFile ParseTracksText(std::string_view text, const std::string& name = "tracks") {
  TracksFile file;
  bool header_seen = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = detail::SplitWs(line);
    if (tok.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const std::string where = name + ":" + std::to_string(line_no);
    if (!header_seen) {
      if (tok.size() != 2 || tok[0] != "TRACKS" || tok[1] != "v1") {
        Throw(ErrorCode::kParseError, where + ": expected header 'TRACKS v1'");
      }
      header_seen = true;
      continue;
    }
    if (tok[0] == "IMG") {
      if (tok.size() < 8 || tok.size() > 10) {
        Throw(ErrorCode::kParseError, where + ": IMG expects 7 to 9 fields");
      }
      TracksFileImage img;
      img.id = detail::ParseNumber<ImageId>(tok[1], where);
      img.intrinsics.fx = detail::ParseNumber<double>(tok[2], where);
      img.intrinsics.fy = detail::ParseNumber<double>(tok[3], where);
      img.intrinsics.cx = detail::ParseNumber<double>(tok[4], where);
      img.intrinsics.cy = detail::ParseNumber<double>(tok[5], where);
      img.intrinsics.width = detail::ParseNumber<int>(tok[6], where);
      img.intrinsics.height = detail::ParseNumber<int>(tok[7], where);
      if (!img.intrinsics.IsValid()) Throw(ErrorCode::kParseError, where + ": invalid intrinsics");
      if (tok.size() > 8 && tok[8] != "-") img.depth_path = std::string(tok[8]);
      if (tok.size() > 9 && tok[9] != "-") img.mask_path = std::string(tok[9]);
      file.images.push_back(std::move(img));
    } else if (tok[0] == "DIST") {
      if (tok.size() != 6) Throw(ErrorCode::kParseError, where + ": DIST expects 5 fields");
      for (std::size_t k = 2; k < 6; ++k) {
        if (detail::ParseNumber<double>(tok[k], where) != 0.0) {
          Throw(ErrorCode::kNotSupported, where + ": lens distortion is not supported");
        }
      }
    } else if (tok[0] == "TRK") {
      if (tok.size() < 2 || (tok.size() - 2) % 3 != 0) {
        Throw(ErrorCode::kParseError, where + ": TRK expects an id followed by (image x y) triples");
      }
      Track track;
      track.id = detail::ParseNumber<TrackId>(tok[1], where);
      for (std::size_t k = 2; k < tok.size(); k += 3) {
        Observation obs;
        obs.image_id = detail::ParseNumber<ImageId>(tok[k], where);
        obs.pixel = {detail::ParseNumber<double>(tok[k + 1], where),
                     detail::ParseNumber<double>(tok[k + 2], where)};
        track.observations.push_back(obs);
      }
      file.tracks.push_back(std::move(track));
    } else {
      Throw(ErrorCode::kParseError, where + ": unknown record '" + std::string(tok[0]) + "'");
    }
    if (end == text.size()) break;
  }
  if (!header_seen) Throw(ErrorCode::kParseError, name + ":1: missing 'TRACKS v1' header");
  return file;
}

inline std::string FormatTracksText(const TracksFile& file) {
  std::string out = "TRACKS v1\n";
  for (const TracksFileImage& img : file.images) {
    const CameraIntrinsics& K = img.intrinsics;
    out += "IMG " + std::to_string(img.id) + " " + FormatDouble(K.fx) + " " + FormatDouble(K.fy) + " " +
           FormatDouble(K.cx) + " " + FormatDouble(K.cy) + " " + std::to_string(K.width) + " " +
           std::to_string(K.height);
    if (!img.depth_path.empty() || !img.mask_path.empty()) {
      out += " " + (img.depth_path.empty() ? std::string("-") : img.depth_path);
    }
    if (!img.mask_path.empty()) out += " " + img.mask_path;
    out += "\n";
  }
  for (const Track& track : file.tracks) {
    out += "TRK " + std::to_string(track.id);
    for (const Observation& obs : track.observations) {
      out += " " + std::to_string(obs.image_id) + " " + FormatDouble(obs.pixel.x()) + " " +
             FormatDouble(obs.pixel.y());
    }
    out += "\n";
  }
  return out;
}

inline TracksFile ReadTracksFile(const std::filesystem::path& path) {
  const std::vector<char> data = detail::ReadAll(path);
  return ParseTracksText(std::string_view(data.data(), data.size()), path.string());
}

// Reads a tracks file plus the depth maps and masks it references
// (paths resolved relative to the tracks file).
inline Dataset LoadDataset(const std::filesystem::path& tracks_path, const IngestConfig& cfg = {}) {
  const TracksFile file = ReadTracksFile(tracks_path);
  const std::filesystem::path base = tracks_path.parent_path();
  std::vector<ImageRecord> images;
  images.reserve(file.images.size());
  for (const TracksFileImage& fi : file.images) {
    ImageRecord rec;
    rec.id = fi.id;
    rec.intrinsics = fi.intrinsics;
    if (!fi.depth_path.empty()) rec.depth = ReadDepthMap(base / fi.depth_path);
    if (!fi.mask_path.empty()) rec.mask = ReadMask(base / fi.mask_path);
    images.push_back(std::move(rec));
  }
  return Dataset::Build(std::move(images), file.tracks, cfg);
}

}  // namespace psfm
