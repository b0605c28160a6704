// Command-line front end for the octree-of-neural-fields pipeline:
//   synth      render an analytic scene into a posed image dataset
//   train      fit the model to a dataset, writing checkpoint + metrics
//   render     draw one view (color, optional 16-bit depth) from a checkpoint
//   eval       score a checkpoint against a dataset's reference images
//   tree-dump  export the octree structure of a checkpoint as JSON
//
// Every command is deterministic for a given --seed, results are independent
// of --threads, and failures exit nonzero with a single `error: ...` line.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "octfield/metrics.hpp"
#include "octfield/synth.hpp"
#include "octfield/trainer.hpp"

namespace {

using namespace octfield;

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

void parse_resolution(const std::string& res, int& w, int& h) {
  int used = 0;
  if (std::sscanf(res.c_str(), "%dx%d%n", &w, &h, &used) != 2 ||
      used != static_cast<int>(res.size()) || w < 1 || h < 1)
    throw std::runtime_error("synth: --res expects WxH (e.g. 64x64), got '" + res + "'");
}

nlohmann::json load_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(what + ": cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(what + ": " + path + " is not valid JSON (" +
                             one_line(e.what()) + ")");
  }
  return j;
}

// Accepts a partial config file: user keys are laid over the built-in
// defaults, and anything that is not a real config key is an error rather
// than a silent no-op.
void check_known_keys(const nlohmann::json& user, const nlohmann::json& schema,
                      const std::string& prefix) {
  for (const auto& [key, value] : user.items()) {
    auto it = schema.find(key);
    if (it == schema.end())
      throw std::runtime_error("train config: unknown key '" + prefix + key + "'");
    if (it->is_object()) {
      if (!value.is_object())
        throw std::runtime_error("train config: '" + prefix + key + "' must be an object");
      check_known_keys(value, *it, prefix + key + ".");
    }
  }
}

TrainConfig config_from_file(const std::string& path) {
  nlohmann::json user = load_json_file(path, "train config");
  if (!user.is_object()) throw std::runtime_error("train config: " + path + " must be a JSON object");
  nlohmann::json full = config_to_json(TrainConfig{});
  check_known_keys(user, full, "");
  full.merge_patch(user);
  return config_from_json(full);
}

void write_text_file(const std::string& path, const std::string& body,
                     const std::string& what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(what + ": cannot write " + path);
  out << body;
  out.flush();
  if (!out) throw std::runtime_error(what + ": short write to " + path);
}

// ---------------------------------------------------------------------------
// synth

void add_synth(CLI::App& app) {
  struct SA {
    std::string scene = "sphere", layout = "orbit", res = "64x64", out;
    int views = 8, oracle_steps = 512, threads = 1;
    uint64_t seed = 1;
  };
  auto args = std::make_shared<SA>();
  CLI::App* c = app.add_subcommand("synth",
                                   "Render an analytic scene into a posed image dataset");
  c->add_option("--scene", args->scene, "Scene preset: sphere, fruitbowl, terrain")
      ->capture_default_str();
  c->add_option("--views", args->views, "Number of cameras")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  c->add_option("--layout", args->layout, "Camera layout: orbit, grid, sparse-uav")
      ->capture_default_str();
  c->add_option("--res", args->res, "Image resolution WxH")->capture_default_str();
  c->add_option("--seed", args->seed, "Layout/jitter seed")->capture_default_str();
  c->add_option("--oracle-steps", args->oracle_steps,
                "Ray-march steps for the reference renderer")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  c->add_option("--threads", args->threads, "Worker thread cap")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  c->add_option("--out", args->out, "Output dataset directory")->required();
  c->callback([args] {
    int w = 0, h = 0;
    parse_resolution(args->res, w, h);
    make_dataset(make_scene(args->scene), args->layout, args->views, w, h, args->seed,
                 args->out, args->oracle_steps, args->threads);
    std::cout << "synth: wrote " << args->views << " views (" << w << "x" << h
              << ", scene " << args->scene << ", layout " << args->layout << ", seed "
              << args->seed << ") to " << args->out << "\n";
  });
}

// ---------------------------------------------------------------------------
// train

void add_train(CLI::App& app) {
  struct TA {
    std::string data, out, config;
    TrainConfig cfg;  // flag targets; only flags the user passed are applied
    std::string weight_model;
    std::vector<double> background;
    int width = 0, depth = 0, view_width = 0, freq_position = 0, freq_direction = 0;
    int distill_steps = 0, distill_batch = 0;
    double distill_lr = 0.0;
  };
  auto args = std::make_shared<TA>();
  CLI::App* c = app.add_subcommand("train", "Fit the model to a dataset");
  c->add_option("--data", args->data, "Dataset directory (from synth)")->required();
  c->add_option("--out", args->out,
                "Run directory for checkpoint.json, metrics.csv, events.json")
      ->required();
  c->add_option("--config", args->config,
                "JSON config; omitted keys keep their defaults");

  // Every config field is also a flag; flags win over the config file.
  TrainConfig d;  // for default strings in --help
  auto opt = [&](const char* name, auto& field, const char* help) {
    return c->add_option(name, field, help)->capture_default_str();
  };
  CLI::Option* o_epochs = opt("--epochs", args->cfg.epochs, "Training epochs");
  CLI::Option* o_period = opt("--tree-update-period", args->cfg.tree_update_period,
                              "Epochs between structure optimizations");
  CLI::Option* o_batch = opt("--rays-per-batch", args->cfg.rays_per_batch, "Rays per step");
  CLI::Option* o_imp = opt("--importance-per-node", args->cfg.importance_per_node,
                           "Stage-2 samples per crossed leaf");
  CLI::Option* o_n1 = opt("--stage1-n", args->cfg.stage1_n_per_axis,
                          "Stage-1 density grid resolution per leaf");
  CLI::Option* o_budget = opt("--budget", args->cfg.leaf_budget,
                              "Leaf-equivalent budget for the structure solver");
  CLI::Option* o_lambda = opt("--lambda", args->cfg.lambda,
                              "Rendering-error weight in the structure objective");
  CLI::Option* o_seed = opt("--seed", args->cfg.seed, "Master seed for every stochastic draw");
  CLI::Option* o_wm =
      c->add_option("--weight-model", args->weight_model, "surface or tomography")
          ->default_str(weight_model_name(d.weight_model));
  CLI::Option* o_init = opt("--init-level", args->cfg.init_level, "Initial subdivision level");
  CLI::Option* o_maxl = opt("--max-level", args->cfg.max_level, "Deepest allowed leaf level");
  CLI::Option* o_warm = opt("--warmup-epochs", args->cfg.warmup_epochs,
                            "Epoch of the one-shot empty-node cull (0 = off)");
  CLI::Option* o_thresh = opt("--deactivation-threshold", args->cfg.deactivation_threshold,
                              "Mean-opacity cutoff for culling");
  CLI::Option* o_bg = c->add_option("--background", args->background,
                                    "Background color R G B")
                          ->expected(3);
  CLI::Option* o_cull = opt("--cull-transmittance", args->cfg.cull_transmittance,
                            "Drop samples once this little light remains");
  CLI::Option* o_chunk = opt("--grad-chunk", args->cfg.grad_chunk,
                             "Samples per backward chunk");
  CLI::Option* o_threads = opt("--threads", args->cfg.threads, "Worker thread cap");
  CLI::Option* o_lr = opt("--base-lr", args->cfg.base_lr, "Optimizer base learning rate");
  CLI::Option* o_decay = opt("--lr-decay", args->cfg.lr_decay,
                             "Learning-rate decay factor");
  CLI::Option* o_decayep = opt("--lr-decay-epochs", args->cfg.lr_decay_epochs,
                               "Epochs between learning-rate decays");
  CLI::Option* o_width =
      c->add_option("--width", args->width, "Hidden width of each leaf network")
          ->default_str(std::to_string(d.arch.width));
  CLI::Option* o_depth =
      c->add_option("--depth", args->depth, "Hidden layers in each leaf network")
          ->default_str(std::to_string(d.arch.depth));
  CLI::Option* o_vwidth =
      c->add_option("--view-width", args->view_width, "Width of the view-dependent head")
          ->default_str(std::to_string(d.arch.view_width));
  CLI::Option* o_freqp = c->add_option("--freq-position", args->freq_position,
                                       "Positional encoding frequencies")
                             ->default_str(std::to_string(d.arch.enc.freq_position));
  CLI::Option* o_freqd = c->add_option("--freq-direction", args->freq_direction,
                                       "Direction encoding frequencies")
                             ->default_str(std::to_string(d.arch.enc.freq_direction));
  CLI::Option* o_dsteps = c->add_option("--distill-steps", args->distill_steps,
                                        "Knowledge-transfer steps after tree edits")
                              ->default_str(std::to_string(d.distill.steps));
  CLI::Option* o_dbatch = c->add_option("--distill-batch", args->distill_batch,
                                        "Knowledge-transfer batch size")
                              ->default_str(std::to_string(d.distill.batch));
  CLI::Option* o_dlr = c->add_option("--distill-lr", args->distill_lr,
                                     "Knowledge-transfer learning rate")
                           ->default_str(std::to_string(d.distill.lr));

  c->callback([=] {
    TrainConfig cfg;
    if (!args->config.empty()) cfg = config_from_file(args->config);
    if (o_epochs->count()) cfg.epochs = args->cfg.epochs;
    if (o_period->count()) cfg.tree_update_period = args->cfg.tree_update_period;
    if (o_batch->count()) cfg.rays_per_batch = args->cfg.rays_per_batch;
    if (o_imp->count()) cfg.importance_per_node = args->cfg.importance_per_node;
    if (o_n1->count()) cfg.stage1_n_per_axis = args->cfg.stage1_n_per_axis;
    if (o_budget->count()) cfg.leaf_budget = args->cfg.leaf_budget;
    if (o_lambda->count()) cfg.lambda = args->cfg.lambda;
    if (o_seed->count()) cfg.seed = args->cfg.seed;
    if (o_wm->count()) cfg.weight_model = weight_model_from_name(args->weight_model);
    if (o_init->count()) cfg.init_level = args->cfg.init_level;
    if (o_maxl->count()) cfg.max_level = args->cfg.max_level;
    if (o_warm->count()) cfg.warmup_epochs = args->cfg.warmup_epochs;
    if (o_thresh->count()) cfg.deactivation_threshold = args->cfg.deactivation_threshold;
    if (o_bg->count())
      cfg.background = Vec3{args->background[0], args->background[1], args->background[2]};
    if (o_cull->count()) cfg.cull_transmittance = args->cfg.cull_transmittance;
    if (o_chunk->count()) cfg.grad_chunk = args->cfg.grad_chunk;
    if (o_threads->count()) cfg.threads = args->cfg.threads;
    if (o_lr->count()) cfg.base_lr = args->cfg.base_lr;
    if (o_decay->count()) cfg.lr_decay = args->cfg.lr_decay;
    if (o_decayep->count()) cfg.lr_decay_epochs = args->cfg.lr_decay_epochs;
    if (o_width->count()) cfg.arch.width = args->width;
    if (o_depth->count()) cfg.arch.depth = args->depth;
    if (o_vwidth->count()) cfg.arch.view_width = args->view_width;
    if (o_freqp->count()) cfg.arch.enc.freq_position = args->freq_position;
    if (o_freqd->count()) cfg.arch.enc.freq_direction = args->freq_direction;
    if (o_dsteps->count()) cfg.distill.steps = args->distill_steps;
    if (o_dbatch->count()) cfg.distill.batch = args->distill_batch;
    if (o_dlr->count()) cfg.distill.lr = args->distill_lr;
    cfg.validate();

    Trainer trainer(load_dataset(args->data), cfg);
    trainer.run();

    std::filesystem::create_directories(args->out);
    save_checkpoint(trainer.checkpoint(), args->out + "/checkpoint.json");
    write_metrics_csv(args->out + "/metrics.csv", trainer.metrics());
    nlohmann::json events = nlohmann::json::array();
    for (const StructureEvent& e : trainer.events())
      events.push_back({{"epoch", e.epoch},
                        {"kind", e.kind},
                        {"deactivated", e.deactivated},
                        {"merged", e.merged},
                        {"split", e.split}});
    write_text_file(args->out + "/events.json", events.dump(2) + "\n", "train");

    std::cout << "train: " << trainer.epoch() << " epochs, "
              << trainer.model().active_leaves().size() << " active leaves, seed "
              << cfg.seed;
    if (!trainer.metrics().empty()) {
      const MetricsRow& last = trainer.metrics().back();
      std::printf(", final loss %.6g (%.2f dB)", last.loss, last.psnr_db);
    }
    std::cout << " -> " << args->out << "\n";
  });
}

// ---------------------------------------------------------------------------
// render

void add_render(CLI::App& app) {
  struct RA {
    std::string ckpt, data, pose, out, depth;
    int camera_index = 0, threads = 0, stage1_n = 0, importance = 0;
    uint64_t seed = 0;
  };
  auto args = std::make_shared<RA>();
  CLI::App* c = app.add_subcommand("render", "Draw one view from a checkpoint");
  c->add_option("--ckpt", args->ckpt, "Checkpoint file")->required();
  CLI::Option* o_idx = c->add_option("--camera-index", args->camera_index,
                                     "Camera index into --data's cameras.json");
  CLI::Option* o_pose =
      c->add_option("--pose", args->pose, "JSON camera file (pose/focal/size)");
  o_idx->excludes(o_pose);
  c->add_option("--data", args->data, "Dataset directory providing cameras");
  c->add_option("--out", args->out, "Output image (PPM)")->required();
  c->add_option("--depth", args->depth,
                "Also write expected depth (16-bit PGM, scaled by z_far)");
  c->add_option("--seed", args->seed, "Reserved; rendering is deterministic")
      ->capture_default_str();
  CLI::Option* o_threads =
      c->add_option("--threads", args->threads, "Worker thread cap")->check(CLI::PositiveNumber);
  CLI::Option* o_n1 = c->add_option("--stage1-n", args->stage1_n,
                                    "Override the checkpoint's density grid resolution")
                          ->check(CLI::PositiveNumber);
  CLI::Option* o_imp = c->add_option("--importance-per-node", args->importance,
                                     "Override stage-2 samples per crossed leaf")
                           ->check(CLI::PositiveNumber);
  c->callback([=] {
    if (o_idx->count() == 0 && o_pose->count() == 0)
      throw std::runtime_error("render: need one of --camera-index or --pose");
    Checkpoint ck = load_checkpoint(args->ckpt);
    Camera cam;
    if (o_idx->count()) {
      if (args->data.empty())
        throw std::runtime_error("render: --camera-index requires --data DIR");
      std::vector<Camera> cams = load_cameras(args->data + "/cameras.json");
      if (args->camera_index < 0 ||
          args->camera_index >= static_cast<int>(cams.size()))
        throw std::runtime_error("render: camera index " +
                                 std::to_string(args->camera_index) +
                                 " out of range (dataset has " +
                                 std::to_string(cams.size()) + " cameras)");
      cam = cams[args->camera_index];
    } else {
      cam = camera_from_json(load_json_file(args->pose, "render"), args->pose);
    }
    RenderConfig rc = ck.config.render_config();
    if (o_threads->count()) rc.threads = args->threads;
    if (o_n1->count()) rc.stage1_n_per_axis = args->stage1_n;
    if (o_imp->count()) rc.importance_per_node = args->importance;
    RenderedView view = render_view(ck.model, cam, rc, args->seed);
    write_ppm(args->out, view.image);
    if (!args->depth.empty()) write_pgm16(args->depth, view.depth, cam.z_far);
    std::cout << "render: wrote " << args->out << " (" << cam.width << "x" << cam.height
              << (args->depth.empty() ? "" : ", depth " + args->depth) << ")\n";
  });
}

// ---------------------------------------------------------------------------
// eval

void add_eval(CLI::App& app) {
  struct EA {
    std::string ckpt, data, out;
    int threads = 0;
  };
  auto args = std::make_shared<EA>();
  CLI::App* c =
      app.add_subcommand("eval", "Score a checkpoint against a dataset's reference images");
  c->add_option("--ckpt", args->ckpt, "Checkpoint file")->required();
  c->add_option("--data", args->data, "Dataset directory")->required();
  c->add_option("--out", args->out, "Per-view metrics CSV")->required();
  CLI::Option* o_threads =
      c->add_option("--threads", args->threads, "Worker thread cap")->check(CLI::PositiveNumber);
  c->callback([=] {
    Checkpoint ck = load_checkpoint(args->ckpt);
    SceneDataset ds = load_dataset(args->data);
    RenderConfig rc = ck.config.render_config();
    if (o_threads->count()) rc.threads = args->threads;

    std::string csv = "view,psnr_db,ssim\n";
    double sum_psnr = 0.0, sum_ssim = 0.0;
    char line[128];
    for (size_t i = 0; i < ds.views.size(); ++i) {
      RenderedView view = render_view(ck.model, ds.views[i].camera, rc, 0);
      ImageMetrics m = evaluate_images(view.image, ds.views[i].image);
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", i, m.psnr_db, m.ssim);
      csv += line;
      sum_psnr += m.psnr_db;
      sum_ssim += m.ssim;
    }
    const double n = static_cast<double>(ds.views.size());
    std::snprintf(line, sizeof line, "mean,%.17g,%.17g\n", sum_psnr / n, sum_ssim / n);
    csv += line;
    write_text_file(args->out, csv, "eval");
    std::printf("eval: %zu views, mean %.2f dB PSNR, %.4f SSIM -> %s\n", ds.views.size(),
                sum_psnr / n, sum_ssim / n, args->out.c_str());
  });
}

// ---------------------------------------------------------------------------
// tree-dump

void add_tree_dump(CLI::App& app) {
  struct DA {
    std::string ckpt, out;
  };
  auto args = std::make_shared<DA>();
  CLI::App* c =
      app.add_subcommand("tree-dump", "Export a checkpoint's octree structure as JSON");
  c->add_option("--ckpt", args->ckpt, "Checkpoint file")->required();
  c->add_option("--out", args->out, "Output JSON file")->required();
  c->callback([args] {
    Checkpoint ck = load_checkpoint(args->ckpt);
    std::vector<NodeId> leaves = ck.model.active_leaves();
    std::map<int, int> by_level;
    for (const NodeId& id : leaves) by_level[id.level]++;
    nlohmann::json levels = nlohmann::json::object();
    for (const auto& [lvl, count] : by_level) levels[std::to_string(lvl)] = count;
    nlohmann::json j{{"epoch", ck.epoch},
                     {"active_leaves", leaves.size()},
                     {"active_by_level", levels},
                     {"tree", ck.model.to_json()}};
    write_text_file(args->out, j.dump(2) + "\n", "tree-dump");
    std::cout << "tree-dump: " << leaves.size() << " active leaves (epoch " << ck.epoch
              << ") -> " << args->out << "\n";
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse octree of per-leaf neural fields: dataset synthesis, training, "
               "rendering, and evaluation"};
  app.require_subcommand(1);
  add_synth(app);
  add_train(app);
  add_render(app);
  add_eval(app);
  add_tree_dump(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    int code = e.get_exit_code();
    return code == 0 ? 1 : code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
