#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "octfield/geometry.hpp"
#include "octfield/image.hpp"
#include "octfield/parallel.hpp"
#include "octfield/rng.hpp"

namespace octfield {

// ---------------------------------------------------------------------------
// Analytic scenes: a handful of primitives with known densities, used both to
// generate datasets and as the independent ground truth every end-to-end
// check renders against. This file deliberately depends on geometry/image
// only, so agreement with the adaptive pipeline is evidence rather than
// circular reasoning.

enum class PrimitiveShape { Sphere, Box, GaussianBlob };

inline const char* primitive_shape_name(PrimitiveShape s) {
  switch (s) {
    case PrimitiveShape::Sphere: return "sphere";
    case PrimitiveShape::Box: return "box";
    case PrimitiveShape::GaussianBlob: return "gaussian-blob";
  }
  return "?";
}

inline PrimitiveShape primitive_shape_from_name(const std::string& s) {
  if (s == "sphere") return PrimitiveShape::Sphere;
  if (s == "box") return PrimitiveShape::Box;
  if (s == "gaussian-blob") return PrimitiveShape::GaussianBlob;
  throw std::runtime_error("scene: unknown primitive shape '" + s + "'");
}

struct ScenePrimitive {
  PrimitiveShape shape = PrimitiveShape::Sphere;
  Vec3 center{0, 0, 0};
  double radius = 0.5;          // sphere radius, or blob standard deviation
  Vec3 half_extent{0.5, 0.5, 0.5};  // box only
  double sigma = 30.0;          // density (peak density for blobs)
  Vec3 color{1, 1, 1};
  // Optional view response: color scales by (1 + m * dot(dir, axis)) / (1 + m),
  // a smooth factor in [(1-m)/(1+m), 1] that keeps channels in range.
  double view_modulation = 0.0;
  Vec3 mod_axis{0, 0, 1};

  double density_at(const Vec3& x) const {
    switch (shape) {
      case PrimitiveShape::Sphere: {
        Vec3 d = x - center;
        return d.dot(d) <= radius * radius ? sigma : 0.0;
      }
      case PrimitiveShape::Box: {
        Vec3 d = x - center;
        return std::abs(d.x) <= half_extent.x && std::abs(d.y) <= half_extent.y &&
                       std::abs(d.z) <= half_extent.z
                   ? sigma
                   : 0.0;
      }
      case PrimitiveShape::GaussianBlob: {
        Vec3 d = x - center;
        return sigma * std::exp(-0.5 * d.dot(d) / (radius * radius));
      }
    }
    return 0.0;
  }
};

struct AnalyticScene {
  Aabb bounds{{-1, -1, -1}, {1, 1, 1}};
  Vec3 background{0, 0, 0};
  std::vector<ScenePrimitive> primitives;
};

struct FieldValue {
  double sigma = 0.0;
  Vec3 color{0, 0, 0};
  int primitive = -1;  // index of the dominating primitive, -1 in empty space
};

// Max-blend of primitive densities; the color belongs to whichever primitive
// dominates at x.
inline FieldValue eval_field(const AnalyticScene& scene, const Vec3& x) {
  FieldValue out;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    double s = scene.primitives[i].density_at(x);
    if (s > out.sigma) {
      out.sigma = s;
      out.primitive = int(i);
    }
  }
  if (out.primitive >= 0) out.color = scene.primitives[out.primitive].color;
  return out;
}

// View-modulated color of a field sample for a ray travelling along `dir`.
inline Vec3 eval_color(const AnalyticScene& scene, const FieldValue& fv, const Vec3& dir) {
  if (fv.primitive < 0) return fv.color;
  const ScenePrimitive& p = scene.primitives[fv.primitive];
  if (p.view_modulation == 0.0) return fv.color;
  double f = (1.0 + p.view_modulation * dir.dot(p.mod_axis)) / (1.0 + p.view_modulation);
  return fv.color * f;
}

// ---------------------------------------------------------------------------
// Brute-force reference renderer: dense uniform marching with front-to-back
// blending, written directly against the analytic field.

inline Image oracle_render(const AnalyticScene& scene, const Camera& cam, int steps,
                           int threads = 1) {
  if (steps < 1) throw std::invalid_argument("oracle render: steps must be >= 1");
  Image img(cam.width, cam.height, scene.background);
  std::vector<Ray> rays = generate_rays(cam);
  parallel_for(rays.size(), threads, [&](size_t lo, size_t hi) {
    for (size_t k = lo; k < hi; ++k) {
      const Ray& ray = rays[k];
      auto span = ray_aabb_intersect(ray, scene.bounds);
      if (!span || span->t_exit <= span->t_enter) continue;
      double h = (span->t_exit - span->t_enter) / steps;
      double tau = 0.0;
      Vec3 acc{0, 0, 0};
      for (int i = 0; i < steps; ++i) {
        double t = span->t_enter + (i + 0.5) * h;
        FieldValue fv = eval_field(scene, ray.origin + ray.dir * t);
        if (fv.sigma <= 0.0) continue;
        double own = fv.sigma * h;
        double transmit = std::exp(-tau);
        if (transmit < 1e-9) break;
        double w = transmit * (1.0 - std::exp(-own));
        acc = acc + eval_color(scene, fv, ray.dir) * w;
        tau += own;
      }
      img.px[k] = acc + scene.background * std::exp(-tau);
    }
  });
  return img;
}

// ---------------------------------------------------------------------------
// Scene serialization

inline nlohmann::json scene_to_json(const AnalyticScene& scene) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : scene.primitives) {
    nlohmann::json j{{"shape", primitive_shape_name(p.shape)},
                     {"center", {p.center.x, p.center.y, p.center.z}},
                     {"sigma", p.sigma},
                     {"color", {p.color.x, p.color.y, p.color.z}}};
    if (p.shape == PrimitiveShape::Box)
      j["half_extent"] = {p.half_extent.x, p.half_extent.y, p.half_extent.z};
    else
      j["radius"] = p.radius;
    if (p.view_modulation != 0.0) {
      j["view_modulation"] = p.view_modulation;
      j["mod_axis"] = {p.mod_axis.x, p.mod_axis.y, p.mod_axis.z};
    }
    prims.push_back(j);
  }
  return nlohmann::json{
      {"bounds",
       {scene.bounds.min.x, scene.bounds.min.y, scene.bounds.min.z, scene.bounds.max.x,
        scene.bounds.max.y, scene.bounds.max.z}},
      {"background", {scene.background.x, scene.background.y, scene.background.z}},
      {"primitives", prims}};
}

inline AnalyticScene scene_from_json(const nlohmann::json& j) {
  AnalyticScene scene;
  auto b = j.at("bounds");
  if (!b.is_array() || b.size() != 6)
    throw std::runtime_error("scene: bounds must be [minx,miny,minz,maxx,maxy,maxz]");
  scene.bounds = Aabb{{b[0].get<double>(), b[1].get<double>(), b[2].get<double>()},
                      {b[3].get<double>(), b[4].get<double>(), b[5].get<double>()}};
  auto bg = j.at("background");
  scene.background = {bg[0].get<double>(), bg[1].get<double>(), bg[2].get<double>()};
  for (const auto& pj : j.at("primitives")) {
    ScenePrimitive p;
    p.shape = primitive_shape_from_name(pj.at("shape").get<std::string>());
    auto c = pj.at("center");
    p.center = {c[0].get<double>(), c[1].get<double>(), c[2].get<double>()};
    p.sigma = pj.at("sigma").get<double>();
    auto col = pj.at("color");
    p.color = {col[0].get<double>(), col[1].get<double>(), col[2].get<double>()};
    if (p.shape == PrimitiveShape::Box) {
      auto he = pj.at("half_extent");
      p.half_extent = {he[0].get<double>(), he[1].get<double>(), he[2].get<double>()};
    } else {
      p.radius = pj.at("radius").get<double>();
    }
    if (pj.contains("view_modulation")) {
      p.view_modulation = pj.at("view_modulation").get<double>();
      auto ax = pj.at("mod_axis");
      p.mod_axis = {ax[0].get<double>(), ax[1].get<double>(), ax[2].get<double>()};
    }
    scene.primitives.push_back(p);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Scene presets

// One solid sphere in mostly empty space: the easiest reconstruction target.
inline AnalyticScene make_sphere_scene() {
  AnalyticScene scene;
  scene.bounds = Aabb{{-1, -1, -1}, {1, 1, 1}};
  ScenePrimitive s;
  s.shape = PrimitiveShape::Sphere;
  s.center = {0, 0, 0};
  s.radius = 0.45;
  s.sigma = 35.0;
  s.color = {0.85, 0.3, 0.2};
  scene.primitives.push_back(s);
  return scene;
}

// Five overlapping soft blobs with distinct colors; two of them shift color
// with the view direction to exercise the directional branch.
inline AnalyticScene make_fruitbowl_scene() {
  AnalyticScene scene;
  scene.bounds = Aabb{{-1, -1, -1}, {1, 1, 1}};
  struct Spec {
    Vec3 c;
    double r, sigma;
    Vec3 color;
    double mod;
    Vec3 axis;
  };
  const Spec specs[5] = {
      {{-0.35, -0.25, -0.3}, 0.28, 40.0, {0.9, 0.15, 0.1}, 0.0, {0, 0, 1}},
      {{0.4, -0.3, -0.25}, 0.24, 35.0, {0.95, 0.65, 0.1}, 0.4, {1, 0, 0}},
      {{0.05, 0.35, -0.2}, 0.3, 30.0, {0.2, 0.75, 0.15}, 0.0, {0, 0, 1}},
      {{-0.3, 0.2, 0.35}, 0.2, 45.0, {0.55, 0.1, 0.8}, 0.35, {0, 1, 0}},
      {{0.35, 0.25, 0.3}, 0.22, 38.0, {0.1, 0.45, 0.9}, 0.0, {0, 0, 1}},
  };
  for (const auto& sp : specs) {
    ScenePrimitive p;
    p.shape = PrimitiveShape::GaussianBlob;
    p.center = sp.c;
    p.radius = sp.r;
    p.sigma = sp.sigma;
    p.color = sp.color;
    p.view_modulation = sp.mod;
    p.mod_axis = sp.axis;
    scene.primitives.push_back(p);
  }
  return scene;
}

// A thin ground slab with a few raised blocks, all inside the bottom quarter
// of the volume: three quarters of the space is provably empty, the analogue
// of a high-altitude capture of flat terrain.
inline AnalyticScene make_terrain_scene() {
  AnalyticScene scene;
  scene.bounds = Aabb{{-1, -1, -1}, {1, 1, 1}};
  ScenePrimitive slab;
  slab.shape = PrimitiveShape::Box;
  slab.center = {0, 0, -0.8};
  slab.half_extent = {0.92, 0.92, 0.12};
  slab.sigma = 40.0;
  slab.color = {0.45, 0.33, 0.2};
  scene.primitives.push_back(slab);

  struct Block {
    Vec3 c;
    Vec3 he;
    Vec3 color;
  };
  const Block blocks[3] = {
      {{-0.45, -0.35, -0.62}, {0.16, 0.2, 0.09}, {0.25, 0.55, 0.2}},
      {{0.4, 0.1, -0.6}, {0.2, 0.14, 0.08}, {0.5, 0.5, 0.45}},
      {{0.0, 0.55, -0.63}, {0.14, 0.12, 0.1}, {0.3, 0.45, 0.25}},
  };
  for (const auto& b : blocks) {
    ScenePrimitive p;
    p.shape = PrimitiveShape::Box;
    p.center = b.c;
    p.half_extent = b.he;
    p.sigma = 40.0;
    p.color = b.color;
    scene.primitives.push_back(p);
  }
  return scene;
}

inline AnalyticScene make_scene(const std::string& name) {
  if (name == "sphere") return make_sphere_scene();
  if (name == "fruitbowl") return make_fruitbowl_scene();
  if (name == "terrain") return make_terrain_scene();
  throw std::runtime_error("scene: unknown preset '" + name +
                           "' (expected sphere, fruitbowl, or terrain)");
}

// ---------------------------------------------------------------------------
// Camera layouts and dataset emission

// Camera-to-world pose looking from `origin` toward `target`, world +z as the
// up hint (+y when the view is near-vertical).
inline Camera look_at_camera(const Vec3& origin, const Vec3& target, double focal,
                             int width, int height, double z_near, double z_far) {
  Vec3 f = (target - origin).normalized();
  Vec3 up{0, 0, 1};
  if (std::abs(f.dot(up)) > 0.99) up = Vec3{0, 1, 0};
  Vec3 xc = f.cross(up).normalized();
  Vec3 zc = f * -1.0;
  Vec3 yc = zc.cross(xc);
  Camera cam;
  cam.pose = {xc.x, yc.x, zc.x, origin.x,
              xc.y, yc.y, zc.y, origin.y,
              xc.z, yc.z, zc.z, origin.z,
              0,    0,    0,    1};
  cam.focal = focal;
  cam.width = width;
  cam.height = height;
  cam.z_near = z_near;
  cam.z_far = z_far;
  cam.validate();
  return cam;
}

// Deterministic viewpoint layouts around a scene. `seed` only perturbs the
// sparse-uav lateral offsets; orbit and grid are fully determined.
inline std::vector<Camera> layout_cameras(const std::string& layout, const Aabb& bounds,
                                          int n_views, int width, int height,
                                          uint64_t seed) {
  if (n_views < 1) throw std::invalid_argument("layout: n_views must be >= 1");
  Vec3 center = bounds.center();
  Vec3 ext = bounds.extent();
  double radius = 0.5 * ext.norm();  // bounding-sphere radius
  const double pi = 3.14159265358979323846;

  std::vector<Camera> cams;
  auto push = [&](const Vec3& origin) {
    double dist = (origin - center).norm();
    double focal = 0.5 * std::min(width, height) * dist / (1.25 * radius);
    double z_near = std::max(0.05 * radius, dist - 1.5 * radius);
    double z_far = dist + 1.5 * radius;
    cams.push_back(look_at_camera(origin, center, focal, width, height, z_near, z_far));
  };

  if (layout == "orbit") {
    double dist = 2.6 * radius;
    for (int k = 0; k < n_views; ++k) {
      double azim = 2.0 * pi * k / n_views;
      double elev = (k % 2 == 0 ? 18.0 : 38.0) * pi / 180.0;
      Vec3 o = center + Vec3{dist * std::cos(elev) * std::cos(azim),
                             dist * std::cos(elev) * std::sin(azim),
                             dist * std::sin(elev)};
      push(o);
    }
  } else if (layout == "grid") {
    // A latitude/longitude grid over the upper viewing hemisphere.
    int rows = std::max(1, int(std::floor(std::sqrt(double(n_views)))));
    int cols = (n_views + rows - 1) / rows;
    double dist = 2.6 * radius;
    int made = 0;
    for (int r = 0; r < rows && made < n_views; ++r) {
      double elev = (10.0 + 55.0 * (rows == 1 ? 0.5 : double(r) / (rows - 1))) * pi / 180.0;
      for (int c = 0; c < cols && made < n_views; ++c, ++made) {
        double azim = 2.0 * pi * c / cols + 0.5 * pi * r / std::max(1, rows);
        Vec3 o = center + Vec3{dist * std::cos(elev) * std::cos(azim),
                               dist * std::cos(elev) * std::sin(azim),
                               dist * std::sin(elev)};
        push(o);
      }
    }
  } else if (layout == "sparse-uav") {
    // Few views, high standoff, looking steeply down: lateral positions on a
    // loose ring with a deterministic per-seed jitter.
    double altitude = 4.0 * radius;
    double ring = 0.9 * radius;
    for (int k = 0; k < n_views; ++k) {
      double azim = 2.0 * pi * k / n_views;
      double jx = (hash_u01(mix_seed(seed, 2 * k)) - 0.5) * 0.3 * radius;
      double jy = (hash_u01(mix_seed(seed, 2 * k + 1)) - 0.5) * 0.3 * radius;
      Vec3 o = center + Vec3{ring * std::cos(azim) + jx, ring * std::sin(azim) + jy,
                             altitude};
      push(o);
    }
  } else {
    throw std::runtime_error("layout: unknown layout '" + layout +
                             "' (expected orbit, grid, or sparse-uav)");
  }
  return cams;
}

// Renders and writes a full dataset: cameras.json, scene.json, and one PPM
// per view. Byte-deterministic for a given (scene, layout, seed, steps).
inline void make_dataset(const AnalyticScene& scene, const std::string& layout,
                         int n_views, int width, int height, uint64_t seed,
                         const std::string& out_dir, int oracle_steps = 512,
                         int threads = 1) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto cams = layout_cameras(layout, scene.bounds, n_views, width, height, seed);
  save_cameras(out_dir + "/cameras.json", cams);
  {
    std::ofstream f(out_dir + "/scene.json");
    if (!f) throw std::runtime_error("dataset: cannot write " + out_dir + "/scene.json");
    f << scene_to_json(scene).dump(2) << "\n";
  }
  for (size_t k = 0; k < cams.size(); ++k) {
    Image img = oracle_render(scene, cams[k], oracle_steps, threads);
    write_ppm(out_dir + "/" + view_image_name(int(k)), img);
  }
}

}  // namespace octfield
