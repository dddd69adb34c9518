#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mvsdf/metrics.hpp"
#include "mvsdf/parallel.hpp"
#include "mvsdf/synthgen.hpp"
#include "mvsdf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mvsdf;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

// Every command drops the values it actually ran with into its output
// directory so downstream commands and humans can reconstruct the run.
void echo_config(const fs::path& out_dir, const json& effective) {
  fs::create_directories(out_dir);
  write_json_file((out_dir / "effective_config.json").string(), effective);
}

struct GenArgs {
  std::string scene = "sphere";
  std::string out;
  std::string config;
  ImperfectionConfig imp;
};

int run_gen(const GenArgs& a, const std::vector<std::string>& cli_overrides) {
  ImperfectionConfig imp;
  std::string scene = "sphere";
  if (!a.config.empty()) {
    json j = read_json_file(a.config);
    for (const auto& item : j.items()) {
      const std::string& k = item.key();
      if (k == "scene")
        scene = item.value().get<std::string>();
      else if (k == "views")
        imp.views = item.value().get<int>();
      else if (k == "resolution")
        imp.resolution = item.value().get<int>();
      else if (k == "camera_radius")
        imp.camera_radius = item.value().get<double>();
      else if (k == "elevation_min_deg")
        imp.elevation_min_deg = item.value().get<double>();
      else if (k == "elevation_max_deg")
        imp.elevation_max_deg = item.value().get<double>();
      else if (k == "light_jitter_deg")
        imp.light_jitter_deg = item.value().get<double>();
      else if (k == "pose_jitter_deg")
        imp.pose_jitter_deg = item.value().get<double>();
      else if (k == "warp_amplitude")
        imp.warp_amplitude = item.value().get<double>();
      else if (k == "warp_frequency")
        imp.warp_frequency = item.value().get<double>();
      else if (k == "ambient")
        imp.ambient = item.value().get<double>();
      else if (k == "intensity")
        imp.intensity = item.value().get<double>();
      else if (k == "seed")
        imp.seed = item.value().get<uint64_t>();
      else
        throw std::runtime_error("config: unknown key '" + k + "' in gen-synthetic config");
    }
  }
  auto overridden = [&](const std::string& name) {
    return std::find(cli_overrides.begin(), cli_overrides.end(), name) != cli_overrides.end();
  };
  if (overridden("scene")) scene = a.scene;
  if (overridden("views")) imp.views = a.imp.views;
  if (overridden("resolution")) imp.resolution = a.imp.resolution;
  if (overridden("seed")) imp.seed = a.imp.seed;
  if (overridden("light-jitter")) imp.light_jitter_deg = a.imp.light_jitter_deg;
  if (overridden("pose-jitter")) imp.pose_jitter_deg = a.imp.pose_jitter_deg;
  if (overridden("warp")) imp.warp_amplitude = a.imp.warp_amplitude;

  AnalyticScene sc = AnalyticScene::named(scene);
  SceneManifest manifest = generate_dataset(sc, scene, imp, a.out);
  json echo = {{"command", "gen-synthetic"},
               {"scene", scene},
               {"views", imp.views},
               {"resolution", imp.resolution},
               {"camera_radius", imp.camera_radius},
               {"elevation_min_deg", imp.elevation_min_deg},
               {"elevation_max_deg", imp.elevation_max_deg},
               {"light_jitter_deg", imp.light_jitter_deg},
               {"pose_jitter_deg", imp.pose_jitter_deg},
               {"warp_amplitude", imp.warp_amplitude},
               {"warp_frequency", imp.warp_frequency},
               {"ambient", imp.ambient},
               {"intensity", imp.intensity},
               {"seed", imp.seed}};
  echo_config(a.out, echo);
  std::cout << "wrote " << manifest.views.size() << " views to " << a.out << "\n";
  return 0;
}

struct ReconArgs {
  std::string data;
  std::string out;
  std::string config;
  int stage = 0;         // 0 = keep config value
  long long seed = -1;   // <0 = keep config value
};

int run_reconstruct(const ReconArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig() : train_config_from_json(read_json_file(a.config));
  if (a.stage != 0) cfg.stage = a.stage;
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  fs::path out(a.out);
  fs::create_directories(out);
  if (cfg.checkpoint_out.empty())
    cfg.checkpoint_out = (out / ("stage" + std::to_string(cfg.stage) + ".ckpt")).string();
  if (cfg.log_path.empty())
    cfg.log_path = (out / ("train_stage" + std::to_string(cfg.stage) + ".csv")).string();
  if (cfg.stage == 2 && cfg.checkpoint_in.empty()) {
    std::string s1 = (out / "stage1.ckpt").string();
    if (!fs::exists(s1))
      throw std::runtime_error("stage 2 requires the stage-1 checkpoint at " + s1);
    cfg.checkpoint_in = s1;
  }
  cfg.validate();

  fs::path manifest_path = fs::path(a.data);
  if (fs::is_directory(manifest_path)) manifest_path /= "scene.json";
  SceneManifest manifest = load_manifest(manifest_path.string());

  json echo = {{"command", "reconstruct"},
               {"dataset", a.data},
               {"scene", manifest.scene},
               {"train", train_config_to_json(cfg)}};
  echo_config(out, echo);

  Trainer trainer(cfg, manifest);
  for (const std::string& w : trainer.warnings()) std::cout << "warning: " << w << "\n";
  auto t0 = std::chrono::steady_clock::now();
  TrainResult result = trainer.run();
  double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (result.halted_on_nan) {
    std::cout << "halted at iteration " << result.final_iteration << ": " << result.halt_reason
              << "\nlast good checkpoint: " << result.checkpoint_path << "\n";
    return 1;
  }
  std::printf("stage %d finished at iteration %ld in %.1fs, total loss %.6f\n", cfg.stage,
              result.final_iteration, secs, result.last.total);
  std::cout << "checkpoint: " << result.checkpoint_path << "\n";
  return 0;
}

// Reads a reconstruction directory: the echoed config plus the newest stage
// checkpoint (stage 2 preferred, explicit stage wins).
struct ReconOutput {
  json echo;
  TrainConfig train;
  CheckpointData ck;
  std::string scene;  // may be empty
};

ReconOutput load_recon_dir(const std::string& dir, int stage) {
  fs::path d(dir);
  json echo = read_json_file((d / "effective_config.json").string());
  if (!echo.contains("train"))
    throw std::runtime_error(dir + " is not a reconstruction output directory");
  ReconOutput r;
  r.echo = echo;
  r.train = train_config_from_json(echo.at("train"));
  r.scene = echo.value("scene", std::string());
  std::string path;
  if (stage != 0) {
    path = (d / ("stage" + std::to_string(stage) + ".ckpt")).string();
    if (!fs::exists(path)) throw std::runtime_error("no checkpoint at " + path);
  } else {
    for (int s : {2, 1}) {
      std::string p = (d / ("stage" + std::to_string(s) + ".ckpt")).string();
      if (fs::exists(p)) {
        path = p;
        break;
      }
    }
    if (path.empty()) throw std::runtime_error("no stage checkpoint found in " + dir);
  }
  r.ck = load_checkpoint(path);
  return r;
}

NeuralField<TrainScalar> field_for(const ReconOutput& r) {
  FieldConfig fc = r.train.field;
  fc.num_views = static_cast<int>(r.ck.params.at("embed.normal").rows);
  return NeuralField<TrainScalar>(fc);
}

struct MeshArgs {
  std::string data;
  std::string out;
  int stage = 0;
  int resolution = 128;
};

int run_extract_mesh(const MeshArgs& a) {
  ReconOutput r = load_recon_dir(a.data, a.stage);
  NeuralField<TrainScalar> field = field_for(r);
  bool colors = r.ck.stage == 2;
  TriangleMesh mesh = extract_field_mesh(field, r.ck.params, a.resolution, colors);
  fs::path out(a.out);
  if (out.extension() != ".obj") {
    fs::create_directories(out);
    echo_config(out, json{{"command", "extract-mesh"},
                          {"data", a.data},
                          {"stage", r.ck.stage},
                          {"resolution", a.resolution}});
    out /= "mesh.obj";
  }
  save_obj(out.string(), mesh);
  std::cout << "wrote " << mesh.vertices.size() << " vertices, " << mesh.triangles.size()
            << " triangles to " << out.string() << "\n";
  return 0;
}

Camera orbit_camera(int index, int count, int resolution, double radius, double elevation_deg) {
  double az = 2.0 * M_PI * index / count;
  double el = elevation_deg * M_PI / 180.0;
  Eigen::Vector3d pos(radius * std::sin(az) * std::cos(el), radius * std::sin(el),
                      -radius * std::cos(az) * std::cos(el));
  Camera cam;
  cam.width = resolution;
  cam.height = resolution;
  cam.fx = cam.fy = 1.2 * resolution;
  cam.cx = cam.cy = resolution / 2.0;
  cam.c2w = look_at(pos, Eigen::Vector3d::Zero());
  return cam;
}

ImageBuffer to_image(const std::vector<float>& px, int w, int h, int channels) {
  ImageBuffer img;
  img.width = w;
  img.height = h;
  img.channels = channels;
  img.data = px;
  return img;
}

struct RenderArgs {
  std::string data;
  std::string out;
  int stage = 0;
  int views = 8;
  int resolution = 64;
  long long seed = 0;
};

int run_render(const RenderArgs& a) {
  ReconOutput r = load_recon_dir(a.data, a.stage);
  NeuralField<TrainScalar> field = field_for(r);
  RenderStage stage = r.ck.stage == 2 ? RenderStage::kTexture : RenderStage::kGeometry;
  fs::path out(a.out);
  fs::create_directories(out);
  echo_config(out, json{{"command", "render"},
                        {"data", a.data},
                        {"stage", r.ck.stage},
                        {"views", a.views},
                        {"resolution", a.resolution},
                        {"seed", a.seed}});

  std::vector<RenderedImage> images(a.views);
  parallel_for(a.views, 1, [&](long begin, long end) {
    for (long i = begin; i < end; ++i) {
      Camera cam = orbit_camera(static_cast<int>(i), a.views, a.resolution, 2.5, 20.0);
      images[i] = render_image(r.ck.params, field, cam, FieldInterface<TrainScalar>::kNoView,
                               stage, r.train.sampler,
                               mix_u64(static_cast<uint64_t>(a.seed), static_cast<uint64_t>(i)));
    }
  });
  for (int i = 0; i < a.views; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "view_%02d_color.png", i);
    save_image((out / name).string(),
               to_image(images[i].color, a.resolution, a.resolution, 3));
    std::snprintf(name, sizeof(name), "view_%02d_albedo.png", i);
    save_image((out / name).string(),
               to_image(images[i].albedo, a.resolution, a.resolution, 3));
    std::vector<float> nvis(images[i].normal.size());
    for (std::size_t k = 0; k < nvis.size(); ++k)
      nvis[k] = std::clamp(images[i].normal[k] * 0.5f + 0.5f, 0.0f, 1.0f);
    std::snprintf(name, sizeof(name), "view_%02d_normal.png", i);
    save_image((out / name).string(), to_image(nvis, a.resolution, a.resolution, 3));
  }
  std::cout << "rendered " << a.views << " orbit views to " << out.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string out;
  std::string scene;
  int stage = 0;
  int views = 60;
  int resolution = 64;
  int mesh_resolution = 128;
  long long seed = 123;
};

int run_evaluate(const EvalArgs& a) {
  // Ground truth against itself exercises the metric fixed points.
  if (a.data.empty()) {
    if (a.scene.empty())
      throw std::runtime_error("evaluate needs --data (a reconstruction) or --scene (self-test)");
    AnalyticScene sc = AnalyticScene::named(a.scene);
    SdfFn sdf = [&](const Eigen::Vector3d& p) { return scene_sdf(sc, p); };
    TriangleMesh gt = marching_cubes(sdf, a.mesh_resolution);
    MetricsReport rep;
    rep.cd = chamfer_distance(gt, gt);
    OccupancyFn occ = [&](const Eigen::Vector3d& p) { return scene_sdf(sc, p) < 0; };
    rep.iou = volume_iou(occ, occ, a.mesh_resolution);
    ImperfectionConfig imp;
    imp.views = 2;
    imp.resolution = a.resolution;
    imp.seed = static_cast<uint64_t>(a.seed);
    ViewMaps v = render_view(sc, imp, 0, true);
    rep.psnr_db = psnr(v.image, v.image);
    rep.ssim_score = ssim(v.image, v.image);
    save_metrics_json(a.out, rep);
    std::printf("cd %.6f iou %.4f psnr %.2f ssim %.4f\n", rep.cd, rep.iou, rep.psnr_db,
                rep.ssim_score);
    return 0;
  }

  ReconOutput r = load_recon_dir(a.data, a.stage);
  std::string scene_name = a.scene.empty() ? r.scene : a.scene;
  bool have_gt = false;
  AnalyticScene sc;
  try {
    sc = AnalyticScene::named(scene_name);
    have_gt = true;
  } catch (const std::runtime_error&) {
    have_gt = false;
  }
  if (!have_gt) {
    json rep = {{"cd", nullptr}, {"iou", nullptr}, {"psnr", nullptr}, {"ssim", nullptr},
                {"note", "no analytic ground truth for scene '" + scene_name + "'"}};
    write_json_file(a.out, rep);
    std::cout << "no ground truth for '" << scene_name << "', wrote null metrics to " << a.out
              << "\n";
    return 0;
  }

  NeuralField<TrainScalar> field = field_for(r);
  GridSamples grid = sample_field_grid(field, r.ck.params, a.mesh_resolution);
  TriangleMesh pred = marching_cubes(grid);
  SdfFn gt_sdf = [&](const Eigen::Vector3d& p) { return scene_sdf(sc, p); };
  TriangleMesh gt = marching_cubes(gt_sdf, a.mesh_resolution);

  MetricsReport rep;
  rep.cd = chamfer_distance(pred, gt);
  // volume_iou probes the same cell-center lattice the grid was sampled on.
  const Eigen::Vector3d lo = grid.lo;
  const double hx = grid.step(0), hy = grid.step(1), hz = grid.step(2);
  const int res = grid.res;
  auto cell = [&](double p, double l, double h) {
    return std::clamp(static_cast<int>(std::lround((p - l) / h - 0.5)), 0, res - 1);
  };
  OccupancyFn pred_occ = [&](const Eigen::Vector3d& p) {
    long i = cell(p.x(), lo.x(), hx), j = cell(p.y(), lo.y(), hy), k = cell(p.z(), lo.z(), hz);
    return grid.values[(k * res + j) * res + i] < 0;
  };
  OccupancyFn gt_occ = [&](const Eigen::Vector3d& p) { return scene_sdf(sc, p) < 0; };
  rep.iou = volume_iou(pred_occ, gt_occ, a.mesh_resolution);

  RenderStage stage = r.ck.stage == 2 ? RenderStage::kTexture : RenderStage::kGeometry;
  ImperfectionConfig imp;
  imp.views = a.views;
  imp.resolution = a.resolution;
  imp.seed = static_cast<uint64_t>(a.seed);
  std::vector<double> psnrs(a.views), ssims(a.views);
  parallel_for(a.views, 1, [&](long begin, long end) {
    for (long i = begin; i < end; ++i) {
      ViewMaps gt_view = render_view(sc, imp, static_cast<int>(i), true);
      RenderedImage pred_img = render_image(
          r.ck.params, field, gt_view.manifest_camera, FieldInterface<TrainScalar>::kNoView,
          stage, r.train.sampler, mix_u64(static_cast<uint64_t>(a.seed), 777 + i));
      ImageBuffer pi = to_image(pred_img.color, a.resolution, a.resolution, 3);
      psnrs[i] = psnr(pi, gt_view.image);
      ssims[i] = ssim(pi, gt_view.image);
    }
  });
  for (int i = 0; i < a.views; ++i) {
    rep.psnr_db += psnrs[i] / a.views;
    rep.ssim_score += ssims[i] / a.views;
  }
  save_metrics_json(a.out, rep);
  std::printf("cd %.6f iou %.4f psnr %.2f ssim %.4f (%d held-out views)\n", rep.cd, rep.iou,
              rep.psnr_db, rep.ssim_score, a.views);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-view SDF reconstruction from imperfect images"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenArgs gen;
  CLI::App* cgen = app.add_subcommand("gen-synthetic", "Render a synthetic imperfect dataset");
  cgen->add_option("--scene", gen.scene, "sphere|boxcsg|torus")->group("scene");
  cgen->add_option("--out", gen.out, "output dataset directory")->required();
  cgen->add_option("--config", gen.config, "JSON generator config");
  cgen->add_option("--views", gen.imp.views, "number of views");
  cgen->add_option("--resolution", gen.imp.resolution, "image resolution");
  cgen->add_option("--seed", gen.imp.seed, "generator seed");
  cgen->add_option("--light-jitter", gen.imp.light_jitter_deg, "light jitter half-angle, deg");
  cgen->add_option("--pose-jitter", gen.imp.pose_jitter_deg, "pose jitter half-angle, deg");
  cgen->add_option("--warp", gen.imp.warp_amplitude, "per-view warp amplitude");

  ReconArgs rec;
  CLI::App* crec = app.add_subcommand("reconstruct", "Train the field on a dataset");
  crec->add_option("--data", rec.data, "dataset directory or manifest path")->required();
  crec->add_option("--out", rec.out, "output directory")->required();
  crec->add_option("--config", rec.config, "JSON training config");
  crec->add_option("--stage", rec.stage, "training stage (1 or 2)")
      ->check(CLI::IsMember({1, 2}));
  crec->add_option("--seed", rec.seed, "training seed");

  MeshArgs mesh;
  CLI::App* cmesh = app.add_subcommand("extract-mesh", "Extract the zero level set as OBJ");
  cmesh->add_option("--data", mesh.data, "reconstruction directory")->required();
  cmesh->add_option("--out", mesh.out, "output .obj path or directory")->required();
  cmesh->add_option("--stage", mesh.stage, "checkpoint stage (default: newest)")
      ->check(CLI::IsMember({1, 2}));
  cmesh->add_option("--resolution", mesh.resolution, "marching-cubes grid resolution");

  RenderArgs ren;
  CLI::App* cren = app.add_subcommand("render", "Render orbit views from a checkpoint");
  cren->add_option("--data", ren.data, "reconstruction directory")->required();
  cren->add_option("--out", ren.out, "output directory")->required();
  cren->add_option("--stage", ren.stage, "checkpoint stage (default: newest)")
      ->check(CLI::IsMember({1, 2}));
  cren->add_option("--views", ren.views, "number of orbit views");
  cren->add_option("--resolution", ren.resolution, "render resolution");
  cren->add_option("--seed", ren.seed, "sampling seed");

  EvalArgs ev;
  CLI::App* cev = app.add_subcommand("evaluate", "Geometry and appearance metrics vs ground truth");
  cev->add_option("--data", ev.data, "reconstruction directory");
  cev->add_option("--out", ev.out, "metrics JSON path")->required();
  cev->add_option("--scene", ev.scene, "analytic scene override (sphere|boxcsg|torus)");
  cev->add_option("--stage", ev.stage, "checkpoint stage (default: newest)")
      ->check(CLI::IsMember({1, 2}));
  cev->add_option("--views", ev.views, "held-out view count");
  cev->add_option("--resolution", ev.resolution, "held-out render resolution");
  cev->add_option("--mesh-resolution", ev.mesh_resolution, "metric grid resolution");
  cev->add_option("--seed", ev.seed, "held-out view seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (cgen->parsed()) {
      std::vector<std::string> overrides;
      for (const char* f : {"scene", "views", "resolution", "seed", "light-jitter",
                            "pose-jitter", "warp"})
        if (cgen->count(std::string("--") + f) > 0) overrides.push_back(f);
      return run_gen(gen, overrides);
    }
    if (crec->parsed()) return run_reconstruct(rec);
    if (cmesh->parsed()) return run_extract_mesh(mesh);
    if (cren->parsed()) return run_render(ren);
    if (cev->parsed()) return run_evaluate(ev);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
