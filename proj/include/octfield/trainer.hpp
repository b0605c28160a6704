#pragma once

// Training orchestration: the epoch/step loop over posed views, periodic
// octree structure optimization with knowledge transfer into the edited
// leaves, per-epoch metrics, and bit-exact checkpointing.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "octfield/distill.hpp"
#include "octfield/render.hpp"

namespace octfield {

// ---------------------------------------------------------------------------
// dataset

struct SceneView {
  Camera camera;
  Image image;
};

// Posed images plus the world-space box the model should reconstruct.
struct SceneDataset {
  Aabb bounds;
  std::vector<SceneView> views;

  int64_t total_pixels() const {
    int64_t n = 0;
    for (const SceneView& v : views) n += int64_t(v.image.width) * v.image.height;
    return n;
  }
};

// Reads a dataset directory: cameras.json, scene.json (for the "bounds"
// entry), and one view_NNN.ppm image per camera.
inline SceneDataset load_dataset(const std::string& dir) {
  SceneDataset ds;
  std::vector<Camera> cams = load_cameras(dir + "/cameras.json");
  if (cams.empty()) throw std::runtime_error("dataset: " + dir + " lists no cameras");

  std::ifstream in(dir + "/scene.json");
  if (!in) throw std::runtime_error("dataset: cannot open " + dir + "/scene.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error("dataset: " + dir + "/scene.json is not valid JSON (" +
                             e.what() + ")");
  }
  if (!j.contains("bounds") || !j["bounds"].is_array() || j["bounds"].size() != 6)
    throw std::runtime_error("dataset: " + dir +
                             "/scene.json lacks a 6-number \"bounds\" array");
  const auto& b = j["bounds"];
  ds.bounds = Aabb{Vec3{b[0].get<double>(), b[1].get<double>(), b[2].get<double>()},
                   Vec3{b[3].get<double>(), b[4].get<double>(), b[5].get<double>()}};

  for (size_t i = 0; i < cams.size(); ++i) {
    SceneView v;
    v.camera = cams[i];
    v.image = read_ppm(dir + "/" + view_image_name(int(i)));
    if (v.image.width != v.camera.width || v.image.height != v.camera.height)
      throw std::runtime_error(
          "dataset: " + view_image_name(int(i)) + " is " + std::to_string(v.image.width) +
          "x" + std::to_string(v.image.height) + " but its camera expects " +
          std::to_string(v.camera.width) + "x" + std::to_string(v.camera.height));
    ds.views.push_back(std::move(v));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// configuration

inline std::string weight_model_name(WeightModel m) {
  return m == WeightModel::Surface ? "surface" : "tomography";
}

inline WeightModel weight_model_from_name(const std::string& s) {
  if (s == "surface") return WeightModel::Surface;
  if (s == "tomography") return WeightModel::Tomography;
  throw std::runtime_error("weight model '" + s + "' unknown (surface|tomography)");
}

struct TrainConfig {
  int epochs = 30;
  int tree_update_period = 5;   // run structure optimization every this many epochs
  int rays_per_batch = 1024;
  int importance_per_node = 8;  // stage-2 depths drawn per crossed leaf
  int stage1_n_per_axis = 16;   // stage-1 stratified grid resolution per leaf
  long leaf_budget = 512;       // leaf-equivalents available to the structure solver
  double lambda = 1.0;          // error weight in the structure objective
  uint64_t seed = 1;
  WeightModel weight_model = WeightModel::Surface;
  int init_level = 2;                    // fully subdivided starting structure
  int max_level = 8;
  int warmup_epochs = 3;                 // density cull fires after this epoch; 0 = off
  double deactivation_threshold = 0.01;  // mean-opacity cutoff for culling
  Vec3 background{0.0, 0.0, 0.0};
  double cull_transmittance = 1e-4;
  int grad_chunk = 1024;  // samples per backward chunk inside one node
  int threads = 1;
  NetworkArch arch;
  DistillConfig distill;    // schedule for knowledge transfer after tree edits
  double base_lr = 5e-4;    // training optimizer schedule (per-leaf Adam)
  double lr_decay = 0.1;
  int lr_decay_epochs = 10;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
    if (tree_update_period < 1)
      throw std::invalid_argument("train config: tree_update_period must be >= 1");
    if (rays_per_batch < 1)
      throw std::invalid_argument("train config: rays_per_batch must be >= 1");
    if (importance_per_node < 1)
      throw std::invalid_argument("train config: importance_per_node must be >= 1");
    if (stage1_n_per_axis < 2)
      throw std::invalid_argument("train config: stage1_n_per_axis must be >= 2");
    if (leaf_budget < 1) throw std::invalid_argument("train config: leaf_budget must be >= 1");
    if (lambda < 0.0) throw std::invalid_argument("train config: lambda must be >= 0");
    if (init_level < 0 || init_level > max_level)
      throw std::invalid_argument("train config: init_level must be in [0, max_level]");
    if (max_level > 20) throw std::invalid_argument("train config: max_level must be <= 20");
    if (warmup_epochs < 0)
      throw std::invalid_argument("train config: warmup_epochs must be >= 0");
    if (deactivation_threshold < 0.0)
      throw std::invalid_argument("train config: deactivation_threshold must be >= 0");
    if (cull_transmittance < 0.0)
      throw std::invalid_argument("train config: cull_transmittance must be >= 0");
    if (grad_chunk < 1) throw std::invalid_argument("train config: grad_chunk must be >= 1");
    if (threads < 1) throw std::invalid_argument("train config: threads must be >= 1");
    if (!(base_lr > 0.0)) throw std::invalid_argument("train config: base_lr must be > 0");
    if (!(lr_decay > 0.0)) throw std::invalid_argument("train config: lr_decay must be > 0");
    if (lr_decay_epochs < 1)
      throw std::invalid_argument("train config: lr_decay_epochs must be >= 1");
    arch.validate();
  }

  RenderConfig render_config() const {
    RenderConfig rc;
    rc.stage1_n_per_axis = stage1_n_per_axis;
    rc.importance_per_node = importance_per_node;
    rc.weight_model = weight_model;
    rc.background = background;
    rc.cull_transmittance = cull_transmittance;
    rc.threads = threads;
    return rc;
  }
};

inline nlohmann::json arch_to_json(const NetworkArch& a) {
  return {{"width", a.width},
          {"depth", a.depth},
          {"view_width", a.view_width},
          {"freq_position", a.enc.freq_position},
          {"freq_direction", a.enc.freq_direction},
          {"act_lower", a.act.lower},
          {"act_upper", a.act.upper},
          {"act_randomized", a.act.train_mode_randomized}};
}

inline NetworkArch arch_from_json(const nlohmann::json& j) {
  NetworkArch a;
  a.width = j.at("width").get<int>();
  a.depth = j.at("depth").get<int>();
  a.view_width = j.at("view_width").get<int>();
  a.enc.freq_position = j.at("freq_position").get<int>();
  a.enc.freq_direction = j.at("freq_direction").get<int>();
  a.act.lower = j.at("act_lower").get<double>();
  a.act.upper = j.at("act_upper").get<double>();
  a.act.train_mode_randomized = j.at("act_randomized").get<bool>();
  a.validate();
  return a;
}

inline nlohmann::json distill_config_to_json(const DistillConfig& d) {
  return {{"steps", d.steps},
          {"batch", d.batch},
          {"lr", d.lr},
          {"divergence_factor", d.divergence_factor}};
}

inline DistillConfig distill_config_from_json(const nlohmann::json& j) {
  DistillConfig d;
  d.steps = j.at("steps").get<int>();
  d.batch = j.at("batch").get<int>();
  d.lr = j.at("lr").get<double>();
  d.divergence_factor = j.at("divergence_factor").get<double>();
  return d;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"tree_update_period", c.tree_update_period},
          {"rays_per_batch", c.rays_per_batch},
          {"importance_per_node", c.importance_per_node},
          {"stage1_n_per_axis", c.stage1_n_per_axis},
          {"leaf_budget", c.leaf_budget},
          {"lambda", c.lambda},
          {"seed", c.seed},
          {"weight_model", weight_model_name(c.weight_model)},
          {"init_level", c.init_level},
          {"max_level", c.max_level},
          {"warmup_epochs", c.warmup_epochs},
          {"deactivation_threshold", c.deactivation_threshold},
          {"background", {c.background[0], c.background[1], c.background[2]}},
          {"cull_transmittance", c.cull_transmittance},
          {"grad_chunk", c.grad_chunk},
          {"threads", c.threads},
          {"arch", arch_to_json(c.arch)},
          {"distill", distill_config_to_json(c.distill)},
          {"base_lr", c.base_lr},
          {"lr_decay", c.lr_decay},
          {"lr_decay_epochs", c.lr_decay_epochs}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.tree_update_period = j.at("tree_update_period").get<int>();
  c.rays_per_batch = j.at("rays_per_batch").get<int>();
  c.importance_per_node = j.at("importance_per_node").get<int>();
  c.stage1_n_per_axis = j.at("stage1_n_per_axis").get<int>();
  c.leaf_budget = j.at("leaf_budget").get<long>();
  c.lambda = j.at("lambda").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.weight_model = weight_model_from_name(j.at("weight_model").get<std::string>());
  c.init_level = j.at("init_level").get<int>();
  c.max_level = j.at("max_level").get<int>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.deactivation_threshold = j.at("deactivation_threshold").get<double>();
  const auto& bg = j.at("background");
  if (!bg.is_array() || bg.size() != 3)
    throw std::runtime_error("train config: background must be a 3-number array");
  c.background = Vec3{bg[0].get<double>(), bg[1].get<double>(), bg[2].get<double>()};
  c.cull_transmittance = j.at("cull_transmittance").get<double>();
  c.grad_chunk = j.at("grad_chunk").get<int>();
  c.threads = j.at("threads").get<int>();
  c.arch = arch_from_json(j.at("arch"));
  c.distill = distill_config_from_json(j.at("distill"));
  c.base_lr = j.at("base_lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.lr_decay_epochs = j.at("lr_decay_epochs").get<int>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// metrics

inline double mse_to_psnr_db(double mse) {
  if (!(mse > 0.0)) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

struct MetricsRow {
  int epoch = 0;            // 1-based epoch the row summarizes
  int64_t step = 0;         // cumulative optimizer steps after this epoch
  double loss = 0.0;        // mean per-step MSE across the epoch
  double psnr_db = 0.0;     // -10*log10(loss), capped at 99
  int64_t active_leaves = 0;  // after any structural phase of this epoch
  int64_t wall_ms = 0;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "epoch,step,loss,psnr_db,active_leaves,wall_ms\n";
  char buf[192];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.17g,%.17g,%lld,%lld\n", r.epoch,
                  static_cast<long long>(r.step), r.loss, r.psnr_db,
                  static_cast<long long>(r.active_leaves),
                  static_cast<long long>(r.wall_ms));
    out += buf;
  }
  return out;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("metrics: cannot write " + path);
  out << metrics_csv(rows);
  out.flush();
  if (!out) throw std::runtime_error("metrics: write failed for " + path);
}

// One entry per structural phase that ran: "density_cull" after the warmup
// epoch, "tree_update" on every tree_update_period-th epoch.
struct StructureEvent {
  int epoch = 0;
  std::string kind;
  int deactivated = 0;
  int merged = 0;
  int split = 0;
};

// ---------------------------------------------------------------------------
// checkpoint

inline constexpr int kCheckpointVersion = 1;

// Complete training state: reloading one and continuing reproduces the run
// that would have happened without the round trip, bit for bit.
struct Checkpoint {
  TrainConfig config;
  int epoch = 0;                         // completed epochs
  OctreeModel model;                     // structure + per-leaf networks
  std::map<NodeId, OptimizerState> opt;  // one state per trainable leaf
  std::string rng_state;                 // pixel-draw generator
};

// Structure-preserving copy whose networks are independent objects.
inline OctreeModel clone_model(const OctreeModel& m) {
  OctreeModel out = m;
  for (const NodeId& id : out.active_leaves()) {
    const auto& net = out.status(id).network;
    if (net) out.set_network(id, std::make_shared<LeafNetwork>(*net));
  }
  return out;
}

namespace detail {

// Hex-float literals round-trip every finite float exactly through strtod.
inline std::string float_hex(float v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", static_cast<double>(v));
  return buf;
}

inline float float_from_hex(const std::string& s) {
  if (s.empty()) throw std::runtime_error("checkpoint: empty parameter literal");
  const char* c = s.c_str();
  char* end = nullptr;
  double d = std::strtod(c, &end);
  if (end != c + s.size())
    throw std::runtime_error("checkpoint: malformed parameter literal '" + s + "'");
  return static_cast<float>(d);
}

inline nlohmann::json vecf_to_json(const Eigen::VectorXf& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(float_hex(v[i]));
  return a;
}

inline Eigen::VectorXf vecf_from_json(const nlohmann::json& a, const char* what) {
  if (!a.is_array())
    throw std::runtime_error(std::string("checkpoint: ") + what + " must be an array");
  Eigen::VectorXf v(static_cast<Eigen::Index>(a.size()));
  for (size_t i = 0; i < a.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = float_from_hex(a[i].get<std::string>());
  return v;
}

inline nlohmann::json node_ref_to_json(const NodeId& id) {
  return {{"level", id.level}, {"index", id.index}};
}

inline NodeId node_ref_from_json(const nlohmann::json& j) {
  return NodeId{j.at("level").get<int>(), j.at("index").get<uint64_t>()};
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["config"] = config_to_json(ck.config);
  j["epoch"] = ck.epoch;
  j["tree"] = ck.model.to_json();
  nlohmann::json nets = nlohmann::json::array();
  for (const NodeId& id : ck.model.active_leaves()) {
    const auto& net = ck.model.status(id).network;
    if (!net) continue;
    nets.push_back({{"node", detail::node_ref_to_json(id)},
                    {"arch", arch_to_json(net->arch)},
                    {"params", detail::vecf_to_json(net->params)}});
  }
  j["networks"] = std::move(nets);
  nlohmann::json opts = nlohmann::json::array();
  for (const auto& [id, st] : ck.opt) {
    opts.push_back({{"node", detail::node_ref_to_json(id)},
                    {"step_count", st.step_count},
                    {"base_lr", st.base_lr},
                    {"decay_factor", st.decay_factor},
                    {"decay_every_epochs", st.decay_every_epochs},
                    {"beta1", st.beta1},
                    {"beta2", st.beta2},
                    {"eps", st.eps},
                    {"m", detail::vecf_to_json(st.m)},
                    {"v", detail::vecf_to_json(st.v)}});
  }
  j["optimizer"] = std::move(opts);
  j["rng"] = ck.rng_state;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("version") || !j["version"].is_number_integer())
    throw std::runtime_error("checkpoint: missing version field");
  const int ver = j["version"].get<int>();
  if (ver != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ver) +
                             " (expected " + std::to_string(kCheckpointVersion) + ")");
  TrainConfig cfg = config_from_json(j.at("config"));
  OctreeModel model = OctreeModel::from_json(j.at("tree"));
  for (const auto& e : j.at("networks")) {
    const NodeId id = detail::node_ref_from_json(e.at("node"));
    auto net = std::make_shared<LeafNetwork>(arch_from_json(e.at("arch")));
    net->params = detail::vecf_from_json(e.at("params"), "network params");
    if (net->params.size() != net->param_count())
      throw std::runtime_error("checkpoint: node " + id.str() + " carries " +
                               std::to_string(net->params.size()) +
                               " parameters, its architecture expects " +
                               std::to_string(net->param_count()));
    model.set_network(id, std::move(net));
  }
  model.validate(/*require_networks=*/true);

  std::map<NodeId, OptimizerState> opt;
  for (const auto& e : j.at("optimizer")) {
    const NodeId id = detail::node_ref_from_json(e.at("node"));
    if (!model.contains(id))
      throw std::runtime_error("checkpoint: optimizer state for unknown node " + id.str());
    const auto& st = model.status(id);
    if (st.kind != NodeKind::ActiveLeaf || !st.network)
      throw std::runtime_error("checkpoint: optimizer state for non-trainable node " +
                               id.str());
    OptimizerState o;
    o.m = detail::vecf_from_json(e.at("m"), "optimizer m");
    o.v = detail::vecf_from_json(e.at("v"), "optimizer v");
    o.step_count = e.at("step_count").get<int64_t>();
    o.base_lr = e.at("base_lr").get<double>();
    o.decay_factor = e.at("decay_factor").get<double>();
    o.decay_every_epochs = e.at("decay_every_epochs").get<int>();
    o.beta1 = e.at("beta1").get<double>();
    o.beta2 = e.at("beta2").get<double>();
    o.eps = e.at("eps").get<double>();
    if (o.m.size() != st.network->params.size() || o.v.size() != st.network->params.size())
      throw std::runtime_error("checkpoint: optimizer state size mismatch at node " +
                               id.str());
    opt.emplace(id, std::move(o));
  }
  for (const NodeId& id : model.active_leaves())
    if (opt.find(id) == opt.end())
      throw std::runtime_error("checkpoint: node " + id.str() + " has no optimizer state");

  const int epoch = j.at("epoch").get<int>();
  std::string rng = j.at("rng").get<std::string>();
  {
    Rng probe(0);
    probe.deserialize(rng);  // reject malformed generator state up front
  }
  return Checkpoint{std::move(cfg), epoch, std::move(model), std::move(opt), std::move(rng)};
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << checkpoint_to_json(ck).dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint: " + path + " is not valid JSON (" + e.what() +
                             ")");
  }
  try {
    return checkpoint_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: " + path + " has a malformed envelope (" +
                             e.what() + ")");
  }
}

// ---------------------------------------------------------------------------
// trainer

class Trainer {
 public:
  // Fresh run: fully subdivided structure at cfg.init_level, one seeded
  // network and zeroed optimizer state per leaf.
  Trainer(SceneDataset dataset, TrainConfig cfg)
      : cfg_(std::move(cfg)),
        data_(std::move(dataset)),
        model_(data_.bounds, cfg_.max_level),
        rng_(cfg_.seed) {
    cfg_.validate();
    init_geometry_tables();
    init_structure();
  }

  // Resume: continues exactly where the checkpointed run left off.
  Trainer(SceneDataset dataset, const Checkpoint& ck)
      : cfg_(ck.config),
        data_(std::move(dataset)),
        model_(clone_model(ck.model)),
        opt_(ck.opt),
        epoch_(ck.epoch),
        rng_(0) {
    cfg_.validate();
    init_geometry_tables();
    rng_.deserialize(ck.rng_state);
    if (!same_box(model_.root_bounds(), data_.bounds))
      throw std::runtime_error(
          "train: checkpoint bounds do not match the dataset's scene bounds");
    total_steps_ = int64_t(epoch_) * steps_per_epoch();
  }

  const TrainConfig& config() const { return cfg_; }
  const SceneDataset& dataset() const { return data_; }
  const OctreeModel& model() const { return model_; }
  int epoch() const { return epoch_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  const std::vector<StructureEvent>& events() const { return events_; }

  int64_t steps_per_epoch() const {
    return std::max<int64_t>(1, px_offset_.back() / cfg_.rays_per_batch);
  }

  Checkpoint checkpoint() const {
    return Checkpoint{cfg_, epoch_, clone_model(model_), opt_, rng_.serialize()};
  }

  // Deterministic full-frame rendering of the current model.
  RenderedView render(const Camera& cam, uint64_t seed = 0) const {
    return render_view(model_, cam, cfg_.render_config(), seed);
  }

  void run() {
    while (epoch_ < cfg_.epochs) run_epoch();
  }

  // Runs one epoch: a stage-1 density snapshot, (#pixels / batch) optimizer
  // steps, then the structural phase (warmup density cull and/or the periodic
  // tree update). A non-finite step loss rolls the trainer back to the state
  // at the start of the epoch and raises.
  void run_epoch() {
    const int e = epoch_ + 1;
    const auto t0 = std::chrono::steady_clock::now();
    Checkpoint good = checkpoint();

    cache_ = build_density_cache(model_, cfg_.stage1_n_per_axis, /*jitter=*/true,
                                 mix_seed(cfg_.seed, 0xB1u, uint64_t(e)));
    const bool tree_epoch = e % cfg_.tree_update_period == 0;
    RenderErrorBatch err;
    const int64_t steps = steps_per_epoch();
    double loss_sum = 0.0;
    for (int64_t s = 0; s < steps; ++s) {
      const double loss = run_step(e, s, tree_epoch ? &err : nullptr);
      if (!std::isfinite(loss)) {
        restore(good);
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(e) +
                                 " step " + std::to_string(s + 1) +
                                 "; rolled back to the last completed epoch");
      }
      loss_sum += loss;
    }

    if (e == cfg_.warmup_epochs)
      events_.push_back(StructureEvent{e, "density_cull", warmup_cull(), 0, 0});
    if (tree_epoch) events_.push_back(structure_update(err, e));

    epoch_ = e;
    total_steps_ += steps;
    const double mean_loss = loss_sum / double(steps);
    const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - t0);
    metrics_.push_back(MetricsRow{e, total_steps_, mean_loss, mse_to_psnr_db(mean_loss),
                                  int64_t(model_.active_leaves().size()),
                                  int64_t(wall.count())});
  }

 private:
  static bool same_box(const Aabb& a, const Aabb& b) {
    for (int i = 0; i < 3; ++i)
      if (a.min[i] != b.min[i] || a.max[i] != b.max[i]) return false;
    return true;
  }

  void init_geometry_tables() {
    if (data_.views.empty())
      throw std::runtime_error("train: dataset must contain at least one view");
    px_offset_.assign(data_.views.size() + 1, 0);
    double z_far = 0.0;
    for (size_t v = 0; v < data_.views.size(); ++v) {
      const SceneView& sv = data_.views[v];
      sv.camera.validate();
      if (sv.image.width != sv.camera.width || sv.image.height != sv.camera.height)
        throw std::runtime_error("train: view " + std::to_string(v) +
                                 " image size does not match its camera");
      px_offset_[v + 1] = px_offset_[v] + int64_t(sv.camera.width) * sv.camera.height;
      z_far = std::max(z_far, sv.camera.z_far);
    }
    z_max_ = z_far + 1.0;  // strict upper bound on any sample depth
  }

  void init_structure() {
    std::vector<NodeId> frontier{NodeId{0, 0}};
    const std::array<std::shared_ptr<LeafNetwork>, 8> none{};
    for (int l = 0; l < cfg_.init_level; ++l) {
      std::vector<NodeId> next;
      for (const NodeId& id : frontier) {
        model_.split(id, none);
        for (const NodeId& c : model_.child_ids(id)) next.push_back(c);
      }
      frontier = std::move(next);
    }
    for (const NodeId& id : model_.active_leaves()) {
      auto net = std::make_shared<LeafNetwork>(cfg_.arch);
      net->init(node_network_seed(cfg_.seed, id));
      model_.set_network(id, std::move(net));
    }
    sync_optimizers();
  }

  OptimizerState make_optimizer_state(int64_t n) const {
    OptimizerState st(n);
    st.base_lr = cfg_.base_lr;
    st.decay_factor = cfg_.lr_decay;
    st.decay_every_epochs = cfg_.lr_decay_epochs;
    return st;
  }

  // Keeps exactly one optimizer state per trainable leaf: states of removed
  // leaves are dropped, freshly created leaves start from zeroed moments.
  void sync_optimizers() {
    std::map<NodeId, OptimizerState> next;
    for (const NodeId& id : model_.active_leaves()) {
      const auto& st = model_.status(id);
      if (!st.network) continue;
      auto it = opt_.find(id);
      if (it != opt_.end() && it->second.m.size() == st.network->params.size())
        next.insert(opt_.extract(it));
      else
        next.emplace(id, make_optimizer_state(st.network->param_count()));
    }
    opt_.swap(next);
  }

  void restore(const Checkpoint& ck) {
    model_ = clone_model(ck.model);
    opt_ = ck.opt;
    rng_.deserialize(ck.rng_state);
    epoch_ = ck.epoch;
    total_steps_ = int64_t(epoch_) * steps_per_epoch();
  }

  // One optimizer step over a fresh batch of rays drawn uniformly from all
  // dataset pixels. Returns the batch MSE; when `err` is given, also records
  // the per-ray errors and compositing weights for the structure statistics.
  double run_step(int e, int64_t s, RenderErrorBatch* err) {
    const int64_t batch = cfg_.rays_per_batch;
    struct Draw {
      uint32_t view;
      uint32_t pixel;
    };
    // Single-threaded draw from the run generator keeps batches identical for
    // any thread count.
    std::vector<Draw> draws;
    draws.reserve(size_t(batch));
    for (int64_t k = 0; k < batch; ++k) {
      const uint64_t g = rng_.below(uint64_t(px_offset_.back()));
      const size_t v = size_t(std::upper_bound(px_offset_.begin(), px_offset_.end(),
                                               int64_t(g)) -
                              px_offset_.begin()) -
                       1;
      draws.push_back(Draw{uint32_t(v), uint32_t(g - uint64_t(px_offset_[v]))});
    }

    const RenderConfig rcfg = cfg_.render_config();
    std::vector<Vec3> dirs(size_t(batch), Vec3{0, 0, 0});
    std::vector<Vec3> target(size_t(batch), Vec3{0, 0, 0});
    std::vector<SampleRecord> records;
    for (size_t v = 0; v < data_.views.size(); ++v) {
      const SceneView& sv = data_.views[v];
      std::vector<RaySpec> specs;
      for (int64_t k = 0; k < batch; ++k) {
        if (draws[size_t(k)].view != v) continue;
        const uint32_t px = draws[size_t(k)].pixel;
        const int row = int(px) / sv.camera.width;
        const int col = int(px) % sv.camera.width;
        const Ray ray = pixel_ray(sv.camera, row, col);
        specs.push_back(RaySpec{uint32_t(k), px, ray});
        dirs[size_t(k)] = ray.dir;
        target[size_t(k)] = sv.image.px[px];
      }
      if (specs.empty()) continue;
      std::vector<SampleRecord> recs = stage2_records_for_view(
          model_, cache_, sv.camera, specs, rcfg, /*jitter=*/true,
          mix_seed(cfg_.seed, 0xA1u, uint64_t(e), uint64_t(s), uint64_t(v)),
          mix_seed(cfg_.seed, 0xA2u, uint64_t(e), uint64_t(s), uint64_t(v)));
      records.insert(records.end(), recs.begin(), recs.end());
    }

    eval_stage2_records(model_, records, dirs, /*train_noise=*/true, cfg_.threads);
    std::vector<RayGroup> groups =
        finalize_groups(std::move(records), z_max_, cfg_.cull_transmittance, cfg_.threads);

    const size_t n_groups = groups.size();
    std::vector<CompositeResult> comps(n_groups);
    std::vector<Vec3> pred(size_t(batch), cfg_.background);
    parallel_for(int64_t(n_groups), cfg_.threads, [&](int64_t lo, int64_t hi) {
      for (int64_t g = lo; g < hi; ++g)
        comps[size_t(g)] =
            composite(groups[size_t(g)], cfg_.weight_model, &cfg_.background);
    });
    for (size_t g = 0; g < n_groups; ++g) pred[groups[g].ray_id] = comps[g].pixel;

    const LossResult loss = mse_loss(pred, target);

    SampleGrads grads;
    grads.dsigma.resize(n_groups);
    grads.dcolor.resize(n_groups);
    parallel_for(int64_t(n_groups), cfg_.threads, [&](int64_t lo, int64_t hi) {
      for (int64_t g = lo; g < hi; ++g) {
        CompositeGrad cg =
            composite_backward(groups[size_t(g)], cfg_.weight_model, comps[size_t(g)],
                               loss.dpixels[groups[size_t(g)].ray_id], &cfg_.background);
        grads.dsigma[size_t(g)] = std::move(cg.dsigma);
        grads.dcolor[size_t(g)] = std::move(cg.dcolor);
      }
    });

    std::map<NodeId, Eigen::VectorXf> node_grads;
    accumulate_network_grads(model_, groups, grads, dirs, /*train_noise=*/true,
                             cfg_.grad_chunk, node_grads, cfg_.threads);
    // Map order fixes the update sequence independently of thread count.
    for (auto& [id, grad] : node_grads) {
      auto it = opt_.find(id);
      if (it == opt_.end())
        throw std::logic_error("train: no optimizer state for node " + id.str());
      it->second.step(model_.status(id).network->params, grad, e);
    }

    if (err) {
      const int offset = int(s * batch);
      err->ray_error.resize(size_t(offset) + size_t(batch), 0.0);
      for (int64_t k = 0; k < batch; ++k) {
        const Vec3 d = pred[size_t(k)] - target[size_t(k)];
        err->ray_error[size_t(offset) + size_t(k)] = d.dot(d) / 3.0;
      }
      append_render_samples(groups, comps, offset, *err);
    }
    return loss.loss;
  }

  // Switches off every leaf whose stage-1 mean opacity sits below the
  // threshold; used once, after the warmup epoch, to clear empty space.
  int warmup_cull() {
    int n = 0;
    for (const NodeId& id : model_.active_leaves()) {
      if (detail::cache_mean_opacity(model_, cache_.at(id)) >= cfg_.deactivation_threshold)
        continue;
      model_.deactivate(id);
      ++n;
    }
    if (n > 0) sync_optimizers();
    return n;
  }

  // Periodic structure optimization: apportion the epoch's rendering error,
  // assemble and solve the budgeted decision problem, apply the edits, and
  // transfer knowledge from the replaced networks into the new ones.
  StructureEvent structure_update(const RenderErrorBatch& err, int e) {
    ErrorApportionment errors(model_, err);
    std::map<NodeId, NodeStats> stats;
    for (const NodeId& id : model_.active_leaves())
      stats.emplace(id, compute_node_stats(model_, cache_, errors, id));
    const TreeDecisionProblem problem =
        assemble(model_, stats, cfg_.leaf_budget, cfg_.lambda, cfg_.deactivation_threshold);
    const TreeDecision decision = solve(problem);
    const EditLog log = apply_decisions(model_, decision, cfg_.seed);
    distill_edits(model_, log, cfg_.distill, mix_seed(cfg_.seed, 0xC1u, uint64_t(e)));
    sync_optimizers();
    return StructureEvent{e, "tree_update", int(log.deactivated.size()),
                          int(log.merges.size()), int(log.splits.size())};
  }

  TrainConfig cfg_;
  SceneDataset data_;
  OctreeModel model_;
  std::map<NodeId, OptimizerState> opt_;
  int epoch_ = 0;           // completed epochs
  int64_t total_steps_ = 0;
  Rng rng_;                 // pixel-batch draws only
  DensityCache cache_;      // stage-1 snapshot of the current epoch
  std::vector<int64_t> px_offset_;  // per-view pixel prefix sums
  double z_max_ = 0.0;
  std::vector<MetricsRow> metrics_;
  std::vector<StructureEvent> events_;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
  std::vector<StructureEvent> events;
};

// Convenience wrapper: fresh trainer, full run, final state.
inline TrainResult train(SceneDataset dataset, const TrainConfig& cfg) {
  Trainer t(std::move(dataset), cfg);
  t.run();
  return TrainResult{t.checkpoint(), t.metrics(), t.events()};
}

}  // namespace octfield
