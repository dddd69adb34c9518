#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "mvsdf/checkpoint.hpp"
#include "mvsdf/graph.hpp"
#include "mvsdf/synthgen.hpp"
#include "mvsdf/trainer.hpp"

using namespace mvsdf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("mvsdf_trainer_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const SceneManifest& tiny_scene() {
  static SceneManifest manifest = [] {
    ImperfectionConfig cfg;
    cfg.views = 4;
    cfg.resolution = 24;
    cfg.light_jitter_deg = 20.0;
    cfg.warp_amplitude = 0.005;
    cfg.seed = 3;
    fs::path dir = temp_dir("scene");
    return generate_dataset(AnalyticScene::sphere(), "sphere", cfg, dir.string());
  }();
  return manifest;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.iterations = 4;
  c.rays_per_iteration = 48;
  c.learning_rate = 1e-3;
  c.sampler.n_coarse = 12;
  c.sampler.n_fine = 4;
  c.eikonal_points = 12;
  c.semantic_cadence = 3;
  c.semantic_views = 2;
  c.semantic_resolution = 16;
  c.semantic_feature_dim = 16;
  c.seed = 11;
  c.checkpoint_every = 0;
  FieldConfig f;
  f.hash.r_min = 4;
  f.hash.r_max = 16;
  f.hash.levels = 2;
  f.hash.features = 2;
  f.hash.table_size = 1 << 10;
  f.freq_octaves_pos = 2;
  f.freq_octaves_dir = 2;
  f.trunk_hidden = {16};
  f.trunk_skips = {};
  f.feature_dim = 8;
  f.transient_sdf_hidden = {8};
  f.albedo_hidden = {8};
  f.texture_hidden = {8};
  f.transient_tex_hidden = {8};
  f.embed_dim_normal = 4;
  f.embed_dim_color = 4;
  c.field = f;
  return c;
}

bool same_report(const LossReport& a, const LossReport& b) {
  return a.rgb == b.rgb && a.norm == b.norm && a.eik == b.eik && a.sem == b.sem &&
         a.mask == b.mask && a.trans == b.trans && a.total == b.total;
}

bool same_tensor(const Tensor<TrainScalar>& a, const Tensor<TrainScalar>& b) {
  if (a.rows != b.rows || a.cols != b.cols) return false;
  for (long i = 0; i < a.size(); ++i)
    if (a.v[i] != b.v[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("train config json roundtrip and strict keys") {
  TrainConfig c = tiny_config();
  c.checkpoint_out = "out.ckpt";
  c.log_path = "log.csv";
  nlohmann::json j = train_config_to_json(c);
  TrainConfig back = train_config_from_json(j);
  CHECK(train_config_to_json(back) == j);

  TrainConfig partial = train_config_from_json(nlohmann::json{{"stage", 1}, {"seed", 9}});
  CHECK(partial.seed == 9);
  CHECK(partial.rays_per_iteration == 1024);
  CHECK(partial.weights.eikonal == doctest::Approx(0.7));

  CHECK_THROWS_WITH_AS(train_config_from_json(nlohmann::json{{"stagee", 1}}),
                       doctest::Contains("unknown key 'stagee'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      train_config_from_json(nlohmann::json{{"weights", {{"eik", 1.0}}}}),
      doctest::Contains("unknown key 'eik'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      train_config_from_json(nlohmann::json{{"field", {{"hash", {{"rmax", 2}}}}}}),
      doctest::Contains("unknown key 'rmax'"), std::runtime_error);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"stage", 3}}), std::runtime_error);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"rgb_weight_mode", "nope"}}),
                  std::runtime_error);

  TrainConfig bad = tiny_config();
  bad.background_ray_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = tiny_config();
  bad.sampler.n_coarse = 1;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}

TEST_CASE("checkpoint roundtrip keeps params, moments, counters, flags") {
  fs::path dir = temp_dir("ckpt");
  CheckpointData d;
  Prng rng(77);
  Tensor<TrainScalar>& a = d.params.create("net.w0", 2, 3, true);
  for (long i = 0; i < a.size(); ++i) a.v[i] = static_cast<TrainScalar>(rng.normal());
  Tensor<TrainScalar>& b = d.params.create("net.b0", 1, 1, false);
  b.v[0] = 0.25f;
  d.adam.m.emplace("net.w0", Tensor<TrainScalar>::full(2, 3, 0.125f));
  d.adam.v.emplace("net.w0", Tensor<TrainScalar>::full(2, 3, 0.5f));
  d.adam.step = 7;
  d.iteration = 42;
  d.stage = 2;

  std::string path = (dir / "state.ckpt").string();
  save_checkpoint(path, d);
  CheckpointData back = load_checkpoint(path);
  CHECK(back.iteration == 42);
  CHECK(back.stage == 2);
  CHECK(back.adam.step == 7);
  CHECK(same_tensor(back.params.at("net.w0"), d.params.at("net.w0")));
  CHECK(same_tensor(back.params.at("net.b0"), d.params.at("net.b0")));
  CHECK(back.params.entry("net.w0").trainable);
  CHECK_FALSE(back.params.entry("net.b0").trainable);
  CHECK(same_tensor(back.adam.m.at("net.w0"), d.adam.m.at("net.w0")));
  CHECK(same_tensor(back.adam.v.at("net.w0"), d.adam.v.at("net.w0")));
  CHECK(back.adam.m.count("net.b0") == 0);

  CheckpointData reserved;
  reserved.params.create("opt.m.x", 1, 1);
  CHECK_THROWS_WITH_AS(save_checkpoint((dir / "r.ckpt").string(), reserved),
                       doctest::Contains("reserved"), std::runtime_error);

  ParameterStore<TrainScalar> bare;
  bare.create("x", 1, 1);
  save_store((dir / "bare.ckpt").string(), bare);
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bare.ckpt").string()),
                       doctest::Contains("meta"), std::runtime_error);
}

TEST_CASE("fixed seed reproduces the loss trace bitwise") {
  TrainConfig cfg = tiny_config();
  TrainResult a = Trainer(cfg, tiny_scene()).run();
  TrainResult b = Trainer(cfg, tiny_scene()).run();
  REQUIRE(a.trace.size() == 4);
  REQUIRE(b.trace.size() == 4);
  for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(same_report(a.trace[i], b.trace[i]));
  CHECK_FALSE(a.halted_on_nan);
  for (const LossReport& r : a.trace) {
    CHECK(std::isfinite(r.total));
    CHECK(r.rgb > 0);
    CHECK(r.eik >= 0);
    CHECK(r.mask >= 0);
    CHECK(r.trans >= 0);
  }
  // Cadence 3 puts the semantic term on iterations 0 and 3 only.
  CHECK(a.trace[0].sem > 0);
  CHECK(a.trace[1].sem == 0);
  CHECK(a.trace[2].sem == 0);
  CHECK(a.trace[3].sem > 0);

  TrainConfig other = cfg;
  other.seed = 12;
  TrainResult c = Trainer(other, tiny_scene()).run();
  CHECK_FALSE(same_report(a.trace[0], c.trace[0]));
}

TEST_CASE("resume from a checkpoint matches the uninterrupted run") {
  fs::path dir = temp_dir("resume");
  TrainConfig full = tiny_config();
  full.iterations = 8;
  full.checkpoint_out = (dir / "full.ckpt").string();
  TrainResult rf = Trainer(full, tiny_scene()).run();
  REQUIRE(rf.trace.size() == 8);

  TrainConfig head = full;
  head.iterations = 4;
  head.checkpoint_out = (dir / "head.ckpt").string();
  Trainer(head, tiny_scene()).run();

  TrainConfig tail = full;
  tail.iterations = 8;
  tail.checkpoint_in = head.checkpoint_out;
  tail.checkpoint_out = (dir / "tail.ckpt").string();
  TrainResult rt = Trainer(tail, tiny_scene()).run();
  REQUIRE(rt.trace.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same_report(rt.trace[i], rf.trace[4 + i]));

  CheckpointData cf = load_checkpoint(full.checkpoint_out);
  CheckpointData ct = load_checkpoint(tail.checkpoint_out);
  CHECK(cf.iteration == ct.iteration);
  CHECK(cf.adam.step == ct.adam.step);
  for (const auto& [name, e] : cf.params) CHECK(same_tensor(e.value, ct.params.at(name)));
  for (const auto& [name, t] : cf.adam.m) CHECK(same_tensor(t, ct.adam.m.at(name)));
  for (const auto& [name, t] : cf.adam.v) CHECK(same_tensor(t, ct.adam.v.at(name)));
}

TEST_CASE("stage 2 freezes geometry bitwise and trains appearance") {
  fs::path dir = temp_dir("stage2");
  TrainConfig s1 = tiny_config();
  s1.iterations = 3;
  s1.checkpoint_out = (dir / "s1.ckpt").string();
  Trainer(s1, tiny_scene()).run();
  CheckpointData before = load_checkpoint(s1.checkpoint_out);

  TrainConfig s2 = tiny_config();
  s2.stage = 2;
  s2.iterations = 4;
  s2.semantic_cadence = 2;
  s2.checkpoint_in = s1.checkpoint_out;
  s2.checkpoint_out = (dir / "s2.ckpt").string();
  Trainer trainer(s2, tiny_scene());
  TrainResult r = trainer.run();
  REQUIRE(r.trace.size() == 4);
  for (const LossReport& rep : r.trace) {
    CHECK(rep.eik == 0);
    CHECK(rep.norm == 0);
    CHECK(rep.mask == 0);
    CHECK(std::isfinite(rep.total));
  }
  CHECK(r.trace[0].sem > 0);
  CHECK(r.trace[1].sem == 0);

  std::vector<std::string> geo = trainer.field().geometry_param_names(trainer.store());
  for (const std::string& name : geo) {
    CHECK(same_tensor(trainer.store().at(name), before.params.at(name)));
    CHECK_FALSE(trainer.store().entry(name).trainable);
  }
  bool appearance_moved = false;
  for (const auto& [name, e] : trainer.store()) {
    bool is_geo = std::find(geo.begin(), geo.end(), name) != geo.end();
    if (!is_geo && !same_tensor(e.value, before.params.at(name))) appearance_moved = true;
  }
  CHECK(appearance_moved);

  CheckpointData s2ck = load_checkpoint(s2.checkpoint_out);
  CHECK(s2ck.stage == 2);

  TrainConfig no_ckpt = tiny_config();
  no_ckpt.stage = 2;
  CHECK_THROWS_WITH_AS(Trainer(no_ckpt, tiny_scene()),
                       doctest::Contains("stage 2 requires"), std::runtime_error);

  TrainConfig back_to_1 = tiny_config();
  back_to_1.checkpoint_in = s2.checkpoint_out;
  CHECK_THROWS_WITH_AS(Trainer(back_to_1, tiny_scene()),
                       doctest::Contains("stage 1 cannot resume"), std::runtime_error);
}

TEST_CASE("stage 2 resumes its own checkpoints") {
  fs::path dir = temp_dir("stage2resume");
  TrainConfig s1 = tiny_config();
  s1.iterations = 2;
  s1.checkpoint_out = (dir / "s1.ckpt").string();
  Trainer(s1, tiny_scene()).run();

  TrainConfig full = tiny_config();
  full.stage = 2;
  full.iterations = 6;
  full.semantic_cadence = 0;
  full.checkpoint_in = s1.checkpoint_out;
  full.checkpoint_out = (dir / "full.ckpt").string();
  TrainResult rf = Trainer(full, tiny_scene()).run();

  TrainConfig head = full;
  head.iterations = 3;
  head.checkpoint_out = (dir / "head.ckpt").string();
  Trainer(head, tiny_scene()).run();
  TrainConfig tail = full;
  tail.checkpoint_in = head.checkpoint_out;
  tail.checkpoint_out = (dir / "tail.ckpt").string();
  TrainResult rt = Trainer(tail, tiny_scene()).run();
  REQUIRE(rt.trace.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(same_report(rt.trace[i], rf.trace[3 + i]));
  CheckpointData cf = load_checkpoint(full.checkpoint_out);
  CheckpointData ct = load_checkpoint(tail.checkpoint_out);
  for (const auto& [name, e] : cf.params) CHECK(same_tensor(e.value, ct.params.at(name)));
}

TEST_CASE("non-finite state halts with the last good checkpoint") {
  fs::path dir = temp_dir("halt");
  TrainConfig cfg = tiny_config();
  cfg.iterations = 2;
  cfg.semantic_cadence = 0;
  cfg.checkpoint_out = (dir / "halt.ckpt").string();
  Trainer trainer(cfg, tiny_scene());
  trainer.store().at("trunk.b0").v[0] = std::numeric_limits<TrainScalar>::quiet_NaN();
  TrainResult r = trainer.run();
  CHECK(r.halted_on_nan);
  CHECK(r.final_iteration == 0);
  CHECK(r.halt_reason.find("not finite") != std::string::npos);
  CHECK(fs::exists(cfg.checkpoint_out));
  CHECK(r.trace.empty());
}

TEST_CASE("missing albedo maps fall back to raw images with a warning") {
  SceneManifest manifest = tiny_scene();
  for (ViewRecord& v : manifest.views) v.albedo.clear();
  TrainConfig cfg = tiny_config();
  cfg.iterations = 1;
  cfg.semantic_cadence = 0;
  Trainer trainer(cfg, manifest);
  REQUIRE(trainer.warnings().size() == manifest.views.size());
  CHECK(trainer.warnings()[0].find("no albedo map") != std::string::npos);
  TrainResult r = trainer.run();
  CHECK(std::isfinite(r.last.total));
}

TEST_CASE("training logs one csv row per iteration") {
  fs::path dir = temp_dir("log");
  TrainConfig cfg = tiny_config();
  cfg.iterations = 3;
  cfg.semantic_cadence = 0;
  cfg.log_path = (dir / "trace.csv").string();
  Trainer(cfg, tiny_scene()).run();
  std::ifstream in(cfg.log_path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] ==
        "iteration,rgb,normal,eikonal,semantic,mask,transient,total,inv_std,wall_ms");
  CHECK(lines[1].rfind("0,", 0) == 0);
  CHECK(lines[3].rfind("2,", 0) == 0);
}

TEST_CASE("field grid sampling is chunk invariant and matches direct eval") {
  TrainConfig cfg = tiny_config();
  cfg.iterations = 0;
  Trainer trainer(cfg, tiny_scene());
  NeuralField<TrainScalar>& field = trainer.field();
  ParameterStore<TrainScalar>& store = trainer.store();

  GridSamples g1 = sample_field_grid(field, store, 6, Eigen::Vector3d(-1, -1, -1),
                                     Eigen::Vector3d(1, 1, 1), 29);
  GridSamples g2 = sample_field_grid(field, store, 6, Eigen::Vector3d(-1, -1, -1),
                                     Eigen::Vector3d(1, 1, 1), 1000);
  REQUIRE(g1.values.size() == 216);
  // Batch shape selects the matmul kernel, so agreement is to float rounding,
  // not bitwise.
  for (std::size_t i = 0; i < g1.values.size(); ++i)
    CHECK(g1.values[i] == doctest::Approx(g2.values[i]).epsilon(1e-5));

  long idx = (2 * 6 + 3) * 6 + 1;  // (i,j,k) = (1,3,2)
  Eigen::Vector3d p = g1.point(1, 3, 2);
  Tensor<TrainScalar> pt(1, 3);
  for (int c = 0; c < 3; ++c) pt.v[c] = static_cast<TrainScalar>(p[c]);
  Graph<TrainScalar> g(false);
  auto sd = field.sdf(g, store, g.constant(pt), FieldInterface<TrainScalar>::kNoView);
  CHECK(g1.values[idx] == doctest::Approx(static_cast<double>(g.value(sd.sdf).v[0])).epsilon(1e-5));
}

TEST_CASE("mesh extraction reads the sphere-biased initialization") {
  TrainConfig cfg = tiny_config();
  cfg.iterations = 0;
  Trainer trainer(cfg, tiny_scene());
  TriangleMesh mesh = extract_field_mesh(trainer.field(), trainer.store(), 24, true);
  REQUIRE_FALSE(mesh.empty());
  mesh.validate();
  REQUIRE(mesh.colors.size() == mesh.vertices.size());
  double mean_r = 0;
  for (const Eigen::Vector3d& v : mesh.vertices) {
    CHECK(v.cwiseAbs().maxCoeff() < 1.01);
    mean_r += v.norm();
  }
  mean_r /= static_cast<double>(mesh.vertices.size());
  CHECK(mean_r > 0.2);
  CHECK(mean_r < 0.9);
  for (const Eigen::Vector3d& c : mesh.colors) {
    CHECK(c.minCoeff() >= 0.0);
    CHECK(c.maxCoeff() <= 1.0);
  }
}
