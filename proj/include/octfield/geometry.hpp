#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace octfield {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

  // Componentwise product (color modulation and the like).
  Vec3 cwise(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double squared_norm() const { return dot(*this); }
  double norm() const { return std::sqrt(squared_norm()); }
  Vec3 normalized() const { return *this / norm(); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline Vec3 cwise_min(const Vec3& a, const Vec3& b) {
  return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline Vec3 cwise_max(const Vec3& a, const Vec3& b) {
  return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length for camera rays
};

// Axis-aligned box. Octree code treats boxes as half-open [min, max) so that
// every point belongs to exactly one cell of a partition.
struct Aabb {
  Vec3 min;
  Vec3 max;

  Vec3 center() const { return (min + max) * 0.5; }
  Vec3 extent() const { return max - min; }

  bool contains_half_open(const Vec3& p) const {
    return p.x >= min.x && p.x < max.x && p.y >= min.y && p.y < max.y &&
           p.z >= min.z && p.z < max.z;
  }

  bool contains_closed(const Vec3& p, double eps = 0.0) const {
    return p.x >= min.x - eps && p.x <= max.x + eps && p.y >= min.y - eps &&
           p.y <= max.y + eps && p.z >= min.z - eps && p.z <= max.z + eps;
  }

  // Child octant j: bit 0 selects the upper half in x, bit 1 in y, bit 2 in z.
  Aabb octant(int j) const {
    Vec3 c = center();
    Aabb r;
    r.min.x = (j & 1) ? c.x : min.x;
    r.max.x = (j & 1) ? max.x : c.x;
    r.min.y = (j & 2) ? c.y : min.y;
    r.max.y = (j & 2) ? max.y : c.y;
    r.min.z = (j & 4) ? c.z : min.z;
    r.max.z = (j & 4) ? max.z : c.z;
    return r;
  }

  // Farthest corner distance from a point; upper bound for any depth inside.
  double max_corner_distance(const Vec3& p) const {
    double best = 0.0;
    for (int j = 0; j < 8; ++j) {
      Vec3 corner{(j & 1) ? max.x : min.x, (j & 2) ? max.y : min.y,
                  (j & 4) ? max.z : min.z};
      best = std::max(best, (corner - p).norm());
    }
    return best;
  }
};

// Maps a world point into a box's local frame [-1,1]^3 (the input domain of
// the per-leaf networks). min maps to -1 and max to +1 along each axis.
inline Vec3 node_local(const Aabb& box, const Vec3& p) {
  Vec3 c = box.center(), e = box.extent();
  return Vec3{(p.x - c.x) * 2.0 / e.x, (p.y - c.y) * 2.0 / e.y, (p.z - c.z) * 2.0 / e.z};
}

struct RaySpan {
  double t_enter = 0.0;
  double t_exit = 0.0;
};

// Tolerance for rays running parallel to (or grazing) a slab face.
inline constexpr double kSlabEps = 1e-9;

// Slab test, clipped to t >= 0. Returns the parametric interval or nothing.
inline std::optional<RaySpan> ray_aabb_intersect(const Ray& ray, const Aabb& box) {
  double t_enter = 0.0;
  double t_exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    double o = ray.origin[a], d = ray.dir[a];
    if (std::abs(d) < 1e-300) {
      if (o < box.min[a] - kSlabEps || o > box.max[a] + kSlabEps) return std::nullopt;
      continue;
    }
    double inv = 1.0 / d;
    double t0 = (box.min[a] - o) * inv;
    double t1 = (box.max[a] - o) * inv;
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (t_exit < t_enter - kSlabEps) return std::nullopt;
  t_exit = std::max(t_exit, t_enter);
  return RaySpan{t_enter, t_exit};
}

// Pinhole camera. `pose` is the camera-to-world transform, 16 values row-major
// ([R t; 0 0 0 1]). Camera space is right-handed and looks down -z with +x
// right and +y up; pixel (0,0) is the top-left corner, rays pass through pixel
// centers, and ray_id = row * width + col.
struct Camera {
  std::array<double, 16> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  double focal = 1.0;
  int width = 0;
  int height = 0;
  double z_near = 1e-3;
  double z_far = 1e3;

  Vec3 origin() const { return {pose[3], pose[7], pose[11]}; }

  Vec3 cam_to_world_dir(const Vec3& v) const {
    return {pose[0] * v.x + pose[1] * v.y + pose[2] * v.z,
            pose[4] * v.x + pose[5] * v.y + pose[6] * v.z,
            pose[8] * v.x + pose[9] * v.y + pose[10] * v.z};
  }

  // R is orthonormal, so the inverse rotation is the transpose.
  Vec3 world_to_cam(const Vec3& p) const {
    Vec3 d = p - origin();
    return {pose[0] * d.x + pose[4] * d.y + pose[8] * d.z,
            pose[1] * d.x + pose[5] * d.y + pose[9] * d.z,
            pose[2] * d.x + pose[6] * d.y + pose[10] * d.z};
  }

  void validate(const std::string& context = "camera") const {
    if (width <= 0 || height <= 0)
      throw std::runtime_error(context + ": non-positive image dimensions");
    if (!(focal > 0.0))
      throw std::runtime_error(context + ": focal length must be positive");
    if (!(z_near > 0.0) || !(z_far > z_near))
      throw std::runtime_error(context + ": need 0 < z_near < z_far");
    // Orthonormality: R^T R = I and det(R) = +1 within 1e-6.
    double dot[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        dot[i][j] = 0.0;
        for (int k = 0; k < 3; ++k) dot[i][j] += pose[k * 4 + i] * pose[k * 4 + j];
      }
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (std::abs(dot[i][j] - (i == j ? 1.0 : 0.0)) > 1e-6)
          throw std::runtime_error(context + ": pose rotation not orthonormal");
    double det =
        pose[0] * (pose[5] * pose[10] - pose[6] * pose[9]) -
        pose[1] * (pose[4] * pose[10] - pose[6] * pose[8]) +
        pose[2] * (pose[4] * pose[9] - pose[5] * pose[8]);
    if (std::abs(det - 1.0) > 1e-6)
      throw std::runtime_error(context + ": pose rotation determinant is not +1");
    if (pose[12] != 0.0 || pose[13] != 0.0 || pose[14] != 0.0 || pose[15] != 1.0)
      throw std::runtime_error(context + ": last pose row must be 0 0 0 1");
  }
};

// Unit-length ray through one pixel center. Bit-identical to the matching
// entry of generate_rays, so callers sampling individual pixels see exactly
// the rays a full-frame render would trace.
inline Ray pixel_ray(const Camera& cam, int row, int col) {
  double cx = cam.width * 0.5, cy = cam.height * 0.5;
  Vec3 d_cam{(col + 0.5 - cx) / cam.focal, -(row + 0.5 - cy) / cam.focal, -1.0};
  return Ray{cam.origin(), cam.cam_to_world_dir(d_cam).normalized()};
}

// One unit-length ray per pixel center, ordered by ray_id = row * width + col.
inline std::vector<Ray> generate_rays(const Camera& cam) {
  cam.validate();
  std::vector<Ray> rays;
  rays.reserve(static_cast<size_t>(cam.width) * cam.height);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) rays.push_back(pixel_ray(cam, r, c));
  return rays;
}

struct PixelHit {
  int row = 0;
  int col = 0;
  double depth = 0.0;  // camera-space z, positive in front of the camera
};

// Nearest-neighbor projection of a world point into the image. Ties at .5
// round toward the larger index. Points behind the camera or landing outside
// the image are absent.
inline std::optional<PixelHit> project(const Camera& cam, const Vec3& p) {
  Vec3 pc = cam.world_to_cam(p);
  double depth = -pc.z;
  if (depth <= 0.0) return std::nullopt;
  double col_f = cam.focal * pc.x / depth + cam.width * 0.5 - 0.5;
  double row_f = -cam.focal * pc.y / depth + cam.height * 0.5 - 0.5;
  int col = static_cast<int>(std::floor(col_f + 0.5));
  int row = static_cast<int>(std::floor(row_f + 0.5));
  if (col < 0 || col >= cam.width || row < 0 || row >= cam.height) return std::nullopt;
  return PixelHit{row, col, depth};
}

inline nlohmann::json camera_to_json(const Camera& cam) {
  return nlohmann::json{{"pose", cam.pose},   {"focal", cam.focal},
                        {"width", cam.width}, {"height", cam.height},
                        {"z_near", cam.z_near}, {"z_far", cam.z_far}};
}

inline Camera camera_from_json(const nlohmann::json& j, const std::string& context) {
  Camera cam;
  try {
    auto pose = j.at("pose");
    if (!pose.is_array() || pose.size() != 16)
      throw std::runtime_error("pose must be an array of 16 numbers (row-major)");
    for (int i = 0; i < 16; ++i) cam.pose[i] = pose[i].get<double>();
    cam.focal = j.at("focal").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.z_near = j.at("z_near").get<double>();
    cam.z_far = j.at("z_far").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(context + ": " + e.what());
  }
  cam.validate(context);
  return cam;
}

inline void save_cameras(const std::string& path, const std::vector<Camera>& cams) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : cams) j.push_back(camera_to_json(c));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline std::vector<Camera> load_cameras(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
  if (!j.is_array()) throw std::runtime_error(path + ": expected a JSON array of cameras");
  std::vector<Camera> cams;
  for (size_t i = 0; i < j.size(); ++i)
    cams.push_back(camera_from_json(j[i], path + ": camera " + std::to_string(i)));
  return cams;
}

}  // namespace octfield
