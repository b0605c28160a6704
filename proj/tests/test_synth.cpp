#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "octfield/synth.hpp"

using namespace octfield;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int count_empty_level2_cells(const AnalyticScene& scene) {
  // 4x4x4 cells over the bounds, probed with a 6^3 lattice each.
  int empty = 0;
  Vec3 ext = scene.bounds.extent();
  for (int cz = 0; cz < 4; ++cz)
    for (int cy = 0; cy < 4; ++cy)
      for (int cx = 0; cx < 4; ++cx) {
        bool any = false;
        for (int iz = 0; iz < 6 && !any; ++iz)
          for (int iy = 0; iy < 6 && !any; ++iy)
            for (int ix = 0; ix < 6 && !any; ++ix) {
              Vec3 p{scene.bounds.min.x + (cx + (ix + 0.5) / 6.0) * 0.25 * ext.x,
                     scene.bounds.min.y + (cy + (iy + 0.5) / 6.0) * 0.25 * ext.y,
                     scene.bounds.min.z + (cz + (iz + 0.5) / 6.0) * 0.25 * ext.z};
              if (eval_field(scene, p).sigma > 0.0) any = true;
            }
        if (!any) ++empty;
      }
  return empty;
}

}  // namespace

TEST_CASE("analytic fields blend by maximum density", "[synth]") {
  AnalyticScene scene;
  ScenePrimitive a;
  a.shape = PrimitiveShape::Sphere;
  a.center = {0, 0, 0};
  a.radius = 0.5;
  a.sigma = 10.0;
  a.color = {1, 0, 0};
  ScenePrimitive b;
  b.shape = PrimitiveShape::Box;
  b.center = {0.4, 0, 0};
  b.half_extent = {0.3, 0.3, 0.3};
  b.sigma = 25.0;
  b.color = {0, 1, 0};
  scene.primitives = {a, b};

  SECTION("empty space has zero density") {
    auto fv = eval_field(scene, {0.95, 0.95, 0.95});
    CHECK(fv.sigma == 0.0);
    CHECK(fv.primitive == -1);
  }

  SECTION("primitive interiors return their density and color") {
    auto fv = eval_field(scene, {-0.2, 0, 0});  // sphere only
    CHECK(fv.sigma == 10.0);
    CHECK(fv.color.x == 1.0);
    fv = eval_field(scene, {0.45, 0, 0});  // overlap: box dominates
    CHECK(fv.sigma == 25.0);
    CHECK(fv.color.y == 1.0);
  }

  SECTION("view modulation scales color smoothly and stays in range") {
    ScenePrimitive m = a;
    m.view_modulation = 0.4;
    m.mod_axis = {1, 0, 0};
    AnalyticScene ms;
    ms.primitives = {m};
    auto fv = eval_field(ms, {0, 0, 0});
    Vec3 along = eval_color(ms, fv, {1, 0, 0});
    Vec3 against = eval_color(ms, fv, {-1, 0, 0});
    CHECK(along.x == Catch::Approx(1.0));
    CHECK(against.x == Catch::Approx((1.0 - 0.4) / (1.0 + 0.4)));
    CHECK(against.x > 0.0);
    Vec3 side = eval_color(ms, fv, {0, 1, 0});
    CHECK(side.x == Catch::Approx(1.0 / 1.4));
  }
}

TEST_CASE("a blob integrates to its closed-form line integral", "[synth]") {
  AnalyticScene scene;
  ScenePrimitive blob;
  blob.shape = PrimitiveShape::GaussianBlob;
  blob.center = {0, 0, 0};
  blob.radius = 0.2;  // standard deviation
  blob.sigma = 30.0;
  scene.primitives = {blob};

  // March along the x diameter of the bounds with 10^4 midpoint steps.
  const int n = 10000;
  const double t0 = -1.0, t1 = 1.0, h = (t1 - t0) / n;
  double integral = 0.0;
  for (int i = 0; i < n; ++i) {
    double t = t0 + (i + 0.5) * h;
    integral += eval_field(scene, {t, 0, 0}).sigma * h;
  }
  const double pi = 3.14159265358979323846;
  double closed = blob.sigma * blob.radius * std::sqrt(2.0 * pi) *
                  std::erf(1.0 / (blob.radius * std::sqrt(2.0)));
  CHECK(integral == Catch::Approx(closed).epsilon(1e-3));
}

TEST_CASE("the reference renderer matches closed forms and converges", "[synth]") {
  SECTION("an empty scene renders the background") {
    AnalyticScene scene;
    scene.background = {0.1, 0.2, 0.3};
    Camera cam = look_at_camera({0, 0, 3}, {0, 0, 0}, 20.0, 9, 7, 0.5, 6.0);
    Image img = oracle_render(scene, cam, 16);
    for (const auto& p : img.px) {
      CHECK(p.x == Catch::Approx(0.1));
      CHECK(p.y == Catch::Approx(0.2));
      CHECK(p.z == Catch::Approx(0.3));
    }
  }

  SECTION("a constant slab reproduces 1 - exp(-sigma L)") {
    AnalyticScene scene;
    ScenePrimitive slab;
    slab.shape = PrimitiveShape::Box;
    slab.center = {0, 0, 0};
    slab.half_extent = {0.8, 0.8, 0.25};
    slab.sigma = 3.0;
    slab.color = {0.2, 0.9, 0.4};
    scene.primitives = {slab};

    Camera cam = look_at_camera({0, 0, 3}, {0, 0, 0}, 40.0, 33, 33, 1.0, 5.0);
    Image img = oracle_render(scene, cam, 4096);
    double expect = 1.0 - std::exp(-3.0 * 0.5);  // L = 0.5 straight through
    const Vec3& center_px = img.at(16, 16);
    CHECK(center_px.x == Catch::Approx(0.2 * expect).epsilon(1e-3));
    CHECK(center_px.y == Catch::Approx(0.9 * expect).epsilon(1e-3));
    CHECK(center_px.z == Catch::Approx(0.4 * expect).epsilon(1e-3));
  }

  SECTION("doubling the step count barely moves the image") {
    AnalyticScene scene = make_fruitbowl_scene();
    Camera cam = look_at_camera({2.2, 1.3, 1.1}, {0, 0, 0}, 24.0, 17, 17, 0.5, 6.0);
    Image a = oracle_render(scene, cam, 2048);
    Image b = oracle_render(scene, cam, 4096);
    double worst = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) {
      worst = std::max(worst, std::abs(a.px[i].x - b.px[i].x));
      worst = std::max(worst, std::abs(a.px[i].y - b.px[i].y));
      worst = std::max(worst, std::abs(a.px[i].z - b.px[i].z));
    }
    CHECK(worst < 0.002);
  }

  SECTION("thread count does not change a render") {
    AnalyticScene scene = make_sphere_scene();
    Camera cam = look_at_camera({2.0, 1.0, 0.8}, {0, 0, 0}, 16.0, 13, 11, 0.5, 6.0);
    Image a = oracle_render(scene, cam, 128, 1);
    Image b = oracle_render(scene, cam, 128, 5);
    for (size_t i = 0; i < a.px.size(); ++i) {
      CHECK(a.px[i].x == b.px[i].x);
      CHECK(a.px[i].y == b.px[i].y);
      CHECK(a.px[i].z == b.px[i].z);
    }
  }
}

TEST_CASE("scene presets have the advertised occupancy", "[synth]") {
  SECTION("sphere: only the 8 central cells touch density") {
    CHECK(count_empty_level2_cells(make_sphere_scene()) == 56);
  }
  SECTION("terrain: everything lives in the bottom quarter") {
    CHECK(count_empty_level2_cells(make_terrain_scene()) == 48);
  }
  SECTION("fruitbowl: five blobs, two view-dependent") {
    AnalyticScene s = make_fruitbowl_scene();
    REQUIRE(s.primitives.size() == 5);
    int modulated = 0;
    for (const auto& p : s.primitives)
      if (p.view_modulation > 0.0) ++modulated;
    CHECK(modulated == 2);
  }
  CHECK_THROWS_WITH(make_scene("donut"), Catch::Matchers::ContainsSubstring("donut"));
}

TEST_CASE("scenes round-trip through json", "[synth]") {
  for (const char* name : {"sphere", "fruitbowl", "terrain"}) {
    AnalyticScene scene = make_scene(name);
    auto j = scene_to_json(scene);
    AnalyticScene back = scene_from_json(j);
    CHECK(scene_to_json(back) == j);
  }
}

TEST_CASE("camera layouts aim at the scene from valid poses", "[synth]") {
  Aabb bounds{{-1, -1, -1}, {1, 1, 1}};
  for (const char* layout : {"orbit", "grid", "sparse-uav"}) {
    auto cams = layout_cameras(layout, bounds, 12, 32, 24, 7);
    REQUIRE(cams.size() == 12);
    for (const auto& cam : cams) {
      CHECK_NOTHROW(cam.validate());
      // The optical axis (-z column of the pose) points at the center.
      Vec3 zc{cam.pose[2], cam.pose[6], cam.pose[10]};
      Vec3 to_center = (bounds.center() - cam.origin()).normalized();
      CHECK(zc.dot(to_center) == Catch::Approx(-1.0).margin(1e-9));
    }
  }

  SECTION("orbit keeps a constant standoff") {
    auto cams = layout_cameras("orbit", bounds, 9, 16, 16, 0);
    double d0 = (cams[0].origin() - bounds.center()).norm();
    for (const auto& cam : cams)
      CHECK((cam.origin() - bounds.center()).norm() == Catch::Approx(d0).margin(1e-9));
  }

  SECTION("sparse-uav flies high above the volume") {
    auto cams = layout_cameras("sparse-uav", bounds, 5, 16, 16, 3);
    for (const auto& cam : cams) CHECK(cam.origin().z > bounds.max.z + 1.0);
  }

  CHECK_THROWS_WITH(layout_cameras("spiral", bounds, 3, 16, 16, 0),
                    Catch::Matchers::ContainsSubstring("spiral"));
}

TEST_CASE("datasets regenerate byte-identically", "[synth]") {
  namespace fs = std::filesystem;
  fs::path base = fs::temp_directory_path() / "octfield_synth_test";
  fs::remove_all(base);
  AnalyticScene scene = make_sphere_scene();

  make_dataset(scene, "orbit", 2, 24, 18, 11, (base / "a").string(), 64);
  make_dataset(scene, "orbit", 2, 24, 18, 11, (base / "b").string(), 64);

  for (const char* f : {"cameras.json", "scene.json", "view_000.ppm", "view_001.ppm"}) {
    INFO(f);
    CHECK(slurp((base / "a" / f).string()) == slurp((base / "b" / f).string()));
  }

  SECTION("the emitted files load back consistently") {
    auto cams = load_cameras((base / "a" / "cameras.json").string());
    REQUIRE(cams.size() == 2);
    CHECK(cams[0].width == 24);
    CHECK(cams[0].height == 18);
    Image img = read_ppm((base / "a" / "view_000.ppm").string());
    CHECK(img.width == 24);
    CHECK(img.height == 18);
    std::ifstream sf((base / "a" / "scene.json").string());
    nlohmann::json sj;
    sf >> sj;
    AnalyticScene back = scene_from_json(sj);
    CHECK(back.primitives.size() == scene.primitives.size());
  }
  fs::remove_all(base);
}
