#include "mvsdf/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvsdf/checkpoint.hpp"
#include "mvsdf/parallel.hpp"

namespace mvsdf {

namespace {

using T = TrainScalar;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

void expect_keys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                 const char* where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::runtime_error(std::string("config: unknown key '") + item.key() + "' in " +
                               where);
  }
}

std::vector<int> int_list(const nlohmann::json& j, const char* where) {
  if (!j.is_array()) throw std::runtime_error(std::string("config: ") + where + " must be a list");
  std::vector<int> out;
  for (const auto& v : j) out.push_back(v.get<int>());
  return out;
}

FieldConfig field_from_json(const nlohmann::json& j) {
  FieldConfig f;
  expect_keys(j,
              {"hash", "freq_octaves_pos", "freq_octaves_dir", "trunk_hidden", "trunk_skips",
               "feature_dim", "transient_sdf_hidden", "albedo_hidden", "texture_hidden",
               "transient_tex_hidden", "embed_dim_normal", "embed_dim_color", "eps_sdf",
               "eps_color", "softplus_beta", "init_inv_std", "sphere_radius"},
              "field");
  if (j.contains("hash")) {
    const auto& h = j.at("hash");
    expect_keys(h, {"r_min", "r_max", "levels", "features", "table_size"}, "field.hash");
    f.hash.r_min = h.value("r_min", f.hash.r_min);
    f.hash.r_max = h.value("r_max", f.hash.r_max);
    f.hash.levels = h.value("levels", f.hash.levels);
    f.hash.features = h.value("features", f.hash.features);
    f.hash.table_size = h.value("table_size", f.hash.table_size);
  }
  f.freq_octaves_pos = j.value("freq_octaves_pos", f.freq_octaves_pos);
  f.freq_octaves_dir = j.value("freq_octaves_dir", f.freq_octaves_dir);
  if (j.contains("trunk_hidden")) f.trunk_hidden = int_list(j.at("trunk_hidden"), "trunk_hidden");
  if (j.contains("trunk_skips")) f.trunk_skips = int_list(j.at("trunk_skips"), "trunk_skips");
  f.feature_dim = j.value("feature_dim", f.feature_dim);
  if (j.contains("transient_sdf_hidden"))
    f.transient_sdf_hidden = int_list(j.at("transient_sdf_hidden"), "transient_sdf_hidden");
  if (j.contains("albedo_hidden")) f.albedo_hidden = int_list(j.at("albedo_hidden"), "albedo_hidden");
  if (j.contains("texture_hidden"))
    f.texture_hidden = int_list(j.at("texture_hidden"), "texture_hidden");
  if (j.contains("transient_tex_hidden"))
    f.transient_tex_hidden = int_list(j.at("transient_tex_hidden"), "transient_tex_hidden");
  f.embed_dim_normal = j.value("embed_dim_normal", f.embed_dim_normal);
  f.embed_dim_color = j.value("embed_dim_color", f.embed_dim_color);
  f.eps_sdf = j.value("eps_sdf", f.eps_sdf);
  f.eps_color = j.value("eps_color", f.eps_color);
  f.softplus_beta = j.value("softplus_beta", f.softplus_beta);
  f.init_inv_std = j.value("init_inv_std", f.init_inv_std);
  f.sphere_radius = j.value("sphere_radius", f.sphere_radius);
  return f;
}

nlohmann::json field_to_json(const FieldConfig& f) {
  nlohmann::json j;
  j["hash"] = {{"r_min", f.hash.r_min},
               {"r_max", f.hash.r_max},
               {"levels", f.hash.levels},
               {"features", f.hash.features},
               {"table_size", f.hash.table_size}};
  j["freq_octaves_pos"] = f.freq_octaves_pos;
  j["freq_octaves_dir"] = f.freq_octaves_dir;
  j["trunk_hidden"] = f.trunk_hidden;
  j["trunk_skips"] = f.trunk_skips;
  j["feature_dim"] = f.feature_dim;
  j["transient_sdf_hidden"] = f.transient_sdf_hidden;
  j["albedo_hidden"] = f.albedo_hidden;
  j["texture_hidden"] = f.texture_hidden;
  j["transient_tex_hidden"] = f.transient_tex_hidden;
  j["embed_dim_normal"] = f.embed_dim_normal;
  j["embed_dim_color"] = f.embed_dim_color;
  j["eps_sdf"] = f.eps_sdf;
  j["eps_color"] = f.eps_color;
  j["softplus_beta"] = f.softplus_beta;
  j["init_inv_std"] = f.init_inv_std;
  j["sphere_radius"] = f.sphere_radius;
  return j;
}

}  // namespace

void TrainConfig::validate() const {
  require(stage == 1 || stage == 2, "train config: stage must be 1 or 2");
  require(iterations >= 0, "train config: iterations must be non-negative");
  require(rays_per_iteration >= 1, "train config: rays_per_iteration must be positive");
  require(learning_rate > 0, "train config: learning_rate must be positive");
  weights.validate();
  require(sampler.n_coarse >= 2, "train config: n_coarse must be at least 2");
  require(sampler.n_fine >= 0, "train config: n_fine must be non-negative");
  require(eikonal_points >= 1, "train config: eikonal_points must be positive");
  require(semantic_cadence >= 0, "train config: semantic_cadence must be non-negative");
  if (semantic_cadence > 0) {
    require(semantic_views >= 1, "train config: semantic_views must be positive");
    require(semantic_resolution >= 16, "train config: semantic_resolution must be at least 16");
    require(semantic_feature_dim >= 1, "train config: semantic_feature_dim must be positive");
  }
  require(mask_dilation_px >= 0, "train config: mask_dilation_px must be non-negative");
  require(background_ray_fraction >= 0 && background_ray_fraction <= 1,
          "train config: background_ray_fraction must lie in [0,1]");
  require(checkpoint_every >= 0, "train config: checkpoint_every must be non-negative");
  field.validate();
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  expect_keys(j,
              {"stage", "iterations", "rays_per_iteration", "learning_rate", "weights",
               "rgb_weight_mode", "sampler", "eikonal_points", "semantic_cadence",
               "semantic_views", "semantic_resolution", "semantic_feature_seed",
               "semantic_feature_dim", "seed", "mask_dilation_px", "background_ray_fraction",
               "checkpoint_every", "checkpoint_in", "checkpoint_out", "log_path", "field"},
              "train config");
  c.stage = j.value("stage", c.stage);
  c.iterations = j.value("iterations", c.iterations);
  c.rays_per_iteration = j.value("rays_per_iteration", c.rays_per_iteration);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    expect_keys(w, {"eikonal", "normal", "mask", "trans", "semantic"}, "weights");
    c.weights.eikonal = w.value("eikonal", c.weights.eikonal);
    c.weights.normal = w.value("normal", c.weights.normal);
    c.weights.mask = w.value("mask", c.weights.mask);
    c.weights.trans = w.value("trans", c.weights.trans);
    c.weights.semantic = w.value("semantic", c.weights.semantic);
  }
  if (j.contains("rgb_weight_mode"))
    c.rgb_weight_mode = rgb_weight_mode_from_string(j.at("rgb_weight_mode").get<std::string>());
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    expect_keys(s, {"n_coarse", "n_fine"}, "sampler");
    c.sampler.n_coarse = s.value("n_coarse", c.sampler.n_coarse);
    c.sampler.n_fine = s.value("n_fine", c.sampler.n_fine);
  }
  c.eikonal_points = j.value("eikonal_points", c.eikonal_points);
  c.semantic_cadence = j.value("semantic_cadence", c.semantic_cadence);
  c.semantic_views = j.value("semantic_views", c.semantic_views);
  c.semantic_resolution = j.value("semantic_resolution", c.semantic_resolution);
  c.semantic_feature_seed = j.value("semantic_feature_seed", c.semantic_feature_seed);
  c.semantic_feature_dim = j.value("semantic_feature_dim", c.semantic_feature_dim);
  c.seed = j.value("seed", c.seed);
  c.mask_dilation_px = j.value("mask_dilation_px", c.mask_dilation_px);
  c.background_ray_fraction = j.value("background_ray_fraction", c.background_ray_fraction);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_in = j.value("checkpoint_in", c.checkpoint_in);
  c.checkpoint_out = j.value("checkpoint_out", c.checkpoint_out);
  c.log_path = j.value("log_path", c.log_path);
  if (j.contains("field")) c.field = field_from_json(j.at("field"));
  c.validate();
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["stage"] = c.stage;
  j["iterations"] = c.iterations;
  j["rays_per_iteration"] = c.rays_per_iteration;
  j["learning_rate"] = c.learning_rate;
  j["weights"] = {{"eikonal", c.weights.eikonal},
                  {"normal", c.weights.normal},
                  {"mask", c.weights.mask},
                  {"trans", c.weights.trans},
                  {"semantic", c.weights.semantic}};
  j["rgb_weight_mode"] = to_string(c.rgb_weight_mode);
  j["sampler"] = {{"n_coarse", c.sampler.n_coarse}, {"n_fine", c.sampler.n_fine}};
  j["eikonal_points"] = c.eikonal_points;
  j["semantic_cadence"] = c.semantic_cadence;
  j["semantic_views"] = c.semantic_views;
  j["semantic_resolution"] = c.semantic_resolution;
  j["semantic_feature_seed"] = c.semantic_feature_seed;
  j["semantic_feature_dim"] = c.semantic_feature_dim;
  j["seed"] = c.seed;
  j["mask_dilation_px"] = c.mask_dilation_px;
  j["background_ray_fraction"] = c.background_ray_fraction;
  j["checkpoint_every"] = c.checkpoint_every;
  j["checkpoint_in"] = c.checkpoint_in;
  j["checkpoint_out"] = c.checkpoint_out;
  j["log_path"] = c.log_path;
  j["field"] = field_to_json(c.field);
  return j;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  ParameterStore<T> merged;
  for (const auto& [name, e] : data.params) {
    if (name.rfind("opt.", 0) == 0 || name.rfind("meta.", 0) == 0)
      throw std::runtime_error("checkpoint: reserved parameter name '" + name + "'");
    merged.create(name, e.value.rows, e.value.cols, e.trainable) = e.value;
  }
  for (const auto& [name, t] : data.adam.m) merged.create("opt.m." + name, t.rows, t.cols, false) = t;
  for (const auto& [name, t] : data.adam.v) merged.create("opt.v." + name, t.rows, t.cols, false) = t;
  merged.create("meta.iteration", 1, 1, false).v[0] = static_cast<T>(data.iteration);
  merged.create("meta.stage", 1, 1, false).v[0] = static_cast<T>(data.stage);
  merged.create("meta.adam_step", 1, 1, false).v[0] = static_cast<T>(data.adam.step);
  save_store(path, merged);
}

CheckpointData load_checkpoint(const std::string& path) {
  ParameterStore<T> merged = load_store<T>(path);
  CheckpointData d;
  bool saw_iteration = false, saw_stage = false, saw_step = false;
  for (const auto& [name, e] : merged) {
    if (name.rfind("opt.m.", 0) == 0) {
      d.adam.m.emplace(name.substr(6), e.value);
    } else if (name.rfind("opt.v.", 0) == 0) {
      d.adam.v.emplace(name.substr(6), e.value);
    } else if (name == "meta.iteration") {
      d.iteration = std::lround(static_cast<double>(e.value.v[0]));
      saw_iteration = true;
    } else if (name == "meta.stage") {
      d.stage = static_cast<int>(std::lround(static_cast<double>(e.value.v[0])));
      saw_stage = true;
    } else if (name == "meta.adam_step") {
      d.adam.step = std::lround(static_cast<double>(e.value.v[0]));
      saw_step = true;
    } else {
      d.params.create(name, e.value.rows, e.value.cols, e.trainable) = e.value;
    }
  }
  if (!saw_iteration || !saw_stage || !saw_step)
    throw std::runtime_error("checkpoint: missing meta records in " + path);
  return d;
}

// Per-view pixel data, prepared once. `ref` is the stage-appropriate color
// target; sampling pools hold flat pixel indices (y * width + x).
struct Trainer::ViewSlot {
  Camera camera;
  bool is_input = false;
  double rgb_weight = 1.0;
  int width = 0, height = 0;
  std::vector<float> ref;          // 3 per pixel
  std::vector<float> normal;       // 3 per pixel, world space; empty if absent
  std::vector<uint8_t> normal_ok;  // 1 where the normal target is usable
  std::vector<float> mask;         // thresholded 0/1; empty if absent
  std::vector<uint32_t> fg, bg;
  ImageBuffer feature_image;  // feeds the feature extractor

  long pixel_count() const { return static_cast<long>(width) * height; }
};

Trainer::Trainer(TrainConfig cfg, const SceneManifest& manifest) : cfg_(std::move(cfg)) {
  cfg_.validate();
  load_views(manifest);
  cfg_.field.num_views = static_cast<int>(views_.size());
  field_ = std::make_unique<NeuralField<T>>(cfg_.field);
  init_params();
  build_pixel_pools();
  if (cfg_.semantic_cadence > 0) {
    extractor_ = std::make_unique<BuiltinExtractor<T>>(cfg_.semantic_feature_seed,
                                                       cfg_.semantic_feature_dim);
    reference_features_.reserve(views_.size());
    for (const ViewSlot& v : views_)
      reference_features_.push_back(extractor_->extract_image(v.feature_image));
  }
  if (!cfg_.log_path.empty()) {
    bool fresh = !std::filesystem::exists(cfg_.log_path) ||
                 std::filesystem::file_size(cfg_.log_path) == 0;
    log_ = std::make_unique<std::ofstream>(cfg_.log_path, std::ios::app);
    if (!*log_) throw std::runtime_error("trainer: cannot open log file " + cfg_.log_path);
    if (fresh)
      *log_ << "iteration,rgb,normal,eikonal,semantic,mask,transient,total,inv_std,wall_ms\n";
  }
}

Trainer::~Trainer() = default;

void Trainer::load_views(const SceneManifest& manifest) {
  require(manifest.input_index >= 0, "trainer: manifest has no input view");
  input_view_ = manifest.input_index;
  const Eigen::Vector3d input_pos = manifest.views[input_view_].camera.position();

  views_.resize(manifest.views.size());
  for (std::size_t i = 0; i < manifest.views.size(); ++i) {
    const ViewRecord& rec = manifest.views[i];
    ViewData data = load_view_data(manifest, i);
    ViewSlot& slot = views_[i];
    slot.camera = rec.camera;
    slot.is_input = rec.is_input;
    slot.width = rec.camera.width;
    slot.height = rec.camera.height;
    slot.rgb_weight =
        rgb_view_weight(rec.camera.position(), input_pos, rec.is_input, cfg_.rgb_weight_mode);

    const ImageBuffer* target = &data.image;
    if (cfg_.stage == 1) {
      if (data.albedo) {
        target = &*data.albedo;
      } else {
        warnings_.push_back("view " + std::to_string(i) +
                            ": no albedo map, falling back to the raw image");
      }
    }
    const long n = slot.pixel_count();
    slot.ref.resize(n * 3);
    for (long p = 0; p < n; ++p) {
      int x = static_cast<int>(p % slot.width), y = static_cast<int>(p / slot.width);
      for (int c = 0; c < 3; ++c)
        slot.ref[p * 3 + c] = target->at(x, y, target->channels == 3 ? c : 0);
    }
    slot.feature_image = *target;

    if (data.mask) {
      slot.mask.resize(n);
      for (long p = 0; p < n; ++p) {
        int x = static_cast<int>(p % slot.width), y = static_cast<int>(p / slot.width);
        slot.mask[p] = data.mask->at(x, y, 0) > 0.5f ? 1.0f : 0.0f;
      }
    }
    if (data.normal && cfg_.stage == 1) {
      slot.normal.assign(data.normal->n.begin(), data.normal->n.end());
      slot.normal_ok.resize(n, 1);
      if (!slot.mask.empty())
        for (long p = 0; p < n; ++p) slot.normal_ok[p] = slot.mask[p] > 0.5f ? 1 : 0;
    }
  }
}

void Trainer::init_params() {
  auto set_freeze = [&](bool train_geometry) {
    std::vector<std::string> geo = field_->geometry_param_names(store_);
    for (const auto& [name, e] : store_) {
      (void)e;
      bool is_geo = std::find(geo.begin(), geo.end(), name) != geo.end();
      store_.set_trainable(name, is_geo ? train_geometry : !train_geometry);
    }
  };

  if (cfg_.checkpoint_in.empty()) {
    require(cfg_.stage == 1, "trainer: stage 2 requires checkpoint_in from a stage-1 run");
    Prng rng = rng_stream(cfg_.seed, "init", 0);
    field_->create_params(store_, rng);
    set_freeze(true);
    adam_.ensure(store_);
    start_iteration_ = 0;
    return;
  }

  CheckpointData ck = load_checkpoint(cfg_.checkpoint_in);
  {
    ParameterStore<T> fresh;
    Prng rng = rng_stream(cfg_.seed, "init", 0);
    field_->create_params(fresh, rng);
    for (const auto& [name, e] : fresh) {
      if (!ck.params.has(name))
        throw std::runtime_error("checkpoint: parameter '" + name + "' missing from " +
                                 cfg_.checkpoint_in);
      const Tensor<T>& got = ck.params.at(name);
      if (got.rows != e.value.rows || got.cols != e.value.cols)
        throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                                 got.shape_str() + ", expected " + e.value.shape_str());
    }
    for (const auto& [name, e] : ck.params) {
      (void)e;
      if (!fresh.has(name))
        throw std::runtime_error("checkpoint: unexpected parameter '" + name + "' in " +
                                 cfg_.checkpoint_in);
    }
  }
  store_ = std::move(ck.params);

  if (cfg_.stage == 1) {
    require(ck.stage == 1, "trainer: stage 1 cannot resume from a stage-2 checkpoint");
    set_freeze(true);
    adam_ = std::move(ck.adam);
    start_iteration_ = ck.iteration;
  } else if (ck.stage == 2) {
    set_freeze(false);
    adam_ = std::move(ck.adam);
    start_iteration_ = ck.iteration;
  } else {
    // Fresh appearance optimization on top of the finished geometry.
    set_freeze(false);
    adam_ = AdamState<T>();
    start_iteration_ = 0;
  }
  adam_.ensure(store_);
}

void Trainer::build_pixel_pools() {
  for (ViewSlot& slot : views_) {
    const long n = slot.pixel_count();
    if (slot.mask.empty()) {
      slot.fg.resize(n);
      for (long p = 0; p < n; ++p) slot.fg[p] = static_cast<uint32_t>(p);
      continue;
    }
    // Chebyshev dilation via separable max filters.
    const int r = cfg_.mask_dilation_px;
    std::vector<float> rowmax(n), dil(n);
    for (int y = 0; y < slot.height; ++y)
      for (int x = 0; x < slot.width; ++x) {
        float m = 0;
        for (int dx = -r; dx <= r; ++dx) {
          int xx = std::clamp(x + dx, 0, slot.width - 1);
          m = std::max(m, slot.mask[static_cast<long>(y) * slot.width + xx]);
        }
        rowmax[static_cast<long>(y) * slot.width + x] = m;
      }
    for (int y = 0; y < slot.height; ++y)
      for (int x = 0; x < slot.width; ++x) {
        float m = 0;
        for (int dy = -r; dy <= r; ++dy) {
          int yy = std::clamp(y + dy, 0, slot.height - 1);
          m = std::max(m, rowmax[static_cast<long>(yy) * slot.width + x]);
        }
        dil[static_cast<long>(y) * slot.width + x] = m;
      }
    for (long p = 0; p < n; ++p)
      (dil[p] > 0.5f ? slot.fg : slot.bg).push_back(static_cast<uint32_t>(p));
    if (slot.fg.empty()) {
      slot.fg = std::move(slot.bg);
      slot.bg.clear();
      warnings_.push_back("view: empty mask after dilation, sampling everywhere");
    }
  }
}

LossReport Trainer::train_iteration(long iteration) {
  const int vi = static_cast<int>(iteration % static_cast<long>(views_.size()));
  ViewSlot& view = views_[vi];
  const long n = cfg_.rays_per_iteration;

  Prng rng = rng_stream(cfg_.seed, "pixels", static_cast<uint64_t>(iteration));
  long n_bg = view.bg.empty()
                  ? 0
                  : std::lround(static_cast<double>(n) * cfg_.background_ray_fraction);
  std::vector<uint32_t> pix(n);
  for (long k = 0; k < n - n_bg; ++k) pix[k] = view.fg[rng.uniform_int(view.fg.size())];
  for (long k = n - n_bg; k < n; ++k) pix[k] = view.bg[rng.uniform_int(view.bg.size())];

  std::vector<Ray> rays(n);
  std::vector<uint64_t> keys(n);
  for (long k = 0; k < n; ++k) {
    int x = static_cast<int>(pix[k] % view.width), y = static_cast<int>(pix[k] / view.width);
    rays[k] = generate_ray(view.camera, x + 0.5, y + 0.5);
    keys[k] = pix[k];
  }

  const RenderStage stage =
      cfg_.stage == 1 ? RenderStage::kGeometry : RenderStage::kTexture;
  uint64_t sample_seed =
      mix_u64(mix_u64(cfg_.seed, hash_name("sample")), static_cast<uint64_t>(iteration));

  Graph<T> g(true);
  RayBatchRender<T> r =
      render_rays(g, store_, *field_, rays, vi, stage, cfg_.sampler, sample_seed, keys);
  const long H = r.num_hit();

  LossNodes nodes;

  // Color: graph term over hit rays plus the analytic white-background part
  // of the mean for missed rays, whose gradient is exactly zero.
  {
    double miss_sq = 0;
    for (long k = 0; k < n; ++k) {
      if (r.hit[k]) continue;
      for (int c = 0; c < 3; ++c) {
        double d = 1.0 - view.ref[static_cast<long>(pix[k]) * 3 + c];
        miss_sq += d * d;
      }
    }
    const double w = view.rgb_weight;
    if (H > 0) {
      Tensor<T> ref_hit(H, 3);
      for (long h = 0; h < H; ++h) {
        long p = pix[r.hit_rows[h]];
        for (int c = 0; c < 3; ++c) ref_hit.at(h, c) = static_cast<T>(view.ref[p * 3 + c]);
      }
      int hit_mean = rgb_loss_node(g, r.color, ref_hit, w);
      nodes.rgb = g.affine(hit_mean, static_cast<T>(static_cast<double>(H) / n),
                           static_cast<T>(w * miss_sq / n));
    } else {
      nodes.rgb = g.constant(Tensor<T>::full(1, 1, static_cast<T>(w * miss_sq / n)));
    }
  }

  if (cfg_.stage == 1 && !view.normal.empty() && H > 0) {
    Tensor<T> ref(H, 3), ok(H, 1);
    for (long h = 0; h < H; ++h) {
      long p = pix[r.hit_rows[h]];
      for (int c = 0; c < 3; ++c) ref.at(h, c) = static_cast<T>(view.normal[p * 3 + c]);
      ok.v[h] = static_cast<T>(view.normal_ok[p]);
    }
    nodes.norm = normal_loss_node(g, r.normal, ref, ok);
  }

  if (cfg_.stage == 1 && !view.mask.empty()) {
    double miss_bce = 0;
    for (long k = 0; k < n; ++k) {
      if (r.hit[k]) continue;
      double m = view.mask[pix[k]];
      miss_bce -= m * std::log(1e-4) + (1.0 - m) * std::log(1.0 - 1e-4);
    }
    if (H > 0) {
      Tensor<T> mask_hit(H, 1);
      for (long h = 0; h < H; ++h) mask_hit.v[h] = static_cast<T>(view.mask[pix[r.hit_rows[h]]]);
      int hit_mean = mask_loss_node(g, r.opacity, mask_hit);
      nodes.mask = g.affine(hit_mean, static_cast<T>(static_cast<double>(H) / n),
                            static_cast<T>(miss_bce / n));
    } else {
      nodes.mask = g.constant(Tensor<T>::full(1, 1, static_cast<T>(miss_bce / n)));
    }
  }

  if (cfg_.stage == 1) {
    Tensor<T> pts = eikonal_batch<T>(cfg_.eikonal_points, r.surface_points, cfg_.seed,
                                     static_cast<uint64_t>(iteration));
    nodes.eik = eikonal_loss_node(g, store_, *field_, pts);
  }

  nodes.trans = transient_loss_node(g, r.sdf_transient, cfg_.field.eps_sdf, r.color_transient);

  auto [total_node, report] = total_loss(g, nodes, cfg_.weights);
  GradMap<T> grads = g.backward(total_node);

  if (cfg_.semantic_cadence > 0 && iteration % cfg_.semantic_cadence == 0 &&
      cfg_.weights.semantic > 0) {
    report.sem = semantic_step(iteration, grads);
    report.total += cfg_.weights.semantic * report.sem;
    if (!std::isfinite(report.total))
      throw std::runtime_error("loss component total is not finite");
  }

  for (const auto& [name, gt] : grads)
    for (long i = 0; i < gt.size(); ++i)
      if (!std::isfinite(static_cast<double>(gt.v[i])))
        throw std::runtime_error("gradient for '" + name + "' is not finite");

  // Parameters absent from this iteration's graph have an exactly-zero
  // gradient; Adam still decays their moments.
  for (const auto& [name, e] : store_) {
    if (!e.trainable || grads.count(name)) continue;
    grads.emplace(name, Tensor<T>::zeros(e.value.rows, e.value.cols));
  }

  AdamConfig acfg;
  acfg.lr = cfg_.learning_rate;
  adam_step(store_, grads, adam_, acfg);
  return report;
}

double Trainer::semantic_step(long iteration, GradMap<T>& grads) {
  AugmentationSampler sampler;
  sampler.views_per_iteration = cfg_.semantic_views;
  sampler.resolution = cfg_.semantic_resolution;
  double radius = 0;
  for (const ViewSlot& v : views_) {
    radius += v.camera.position().norm();
    sampler.training_positions.push_back(v.camera.position());
  }
  sampler.radius = radius / static_cast<double>(views_.size());
  std::vector<Camera> cams =
      sample_viewpoints(sampler, cfg_.seed, static_cast<uint64_t>(iteration));

  const RenderStage stage =
      cfg_.stage == 1 ? RenderStage::kGeometry : RenderStage::kTexture;
  const long res = cfg_.semantic_resolution;
  const long hw = res * res;
  auto aug_seed = [&](std::size_t j) {
    return mix_u64(mix_u64(mix_u64(cfg_.seed, hash_name("aug_render")),
                           static_cast<uint64_t>(iteration)),
                   static_cast<uint64_t>(j));
  };

  // Renders one augmented view chunk by chunk. Without `dpix` it returns the
  // pixel values; with `dpix` it replays the identical sample streams under
  // gradients and accumulates d(semantic)/d(params) seeded by those rows.
  auto render_aug = [&](std::size_t j, const Tensor<T>* dpix) -> Tensor<T> {
    const Camera& cam = cams[j];
    uint64_t sample_seed = mix_u64(aug_seed(j), hash_name("render"));
    Tensor<T> pixels = dpix ? Tensor<T>() : Tensor<T>::full(hw, 3, T(1));
    const long chunk = 1024;
    for (long start = 0; start < hw; start += chunk) {
      long count = std::min(chunk, hw - start);
      std::vector<Ray> rays(count);
      std::vector<uint64_t> keys(count);
      for (long k = 0; k < count; ++k) {
        long px = (start + k) % res, py = (start + k) / res;
        rays[k] = generate_ray(cam, px + 0.5, py + 0.5);
        keys[k] = static_cast<uint64_t>(start + k);
      }
      Graph<T> g(dpix != nullptr);
      RayBatchRender<T> r = render_rays(g, store_, *field_, rays, FieldInterface<T>::kNoView,
                                        stage, cfg_.sampler, sample_seed, keys);
      int node = stage == RenderStage::kGeometry ? r.albedo : r.color;
      if (!dpix) {
        const Tensor<T>& v = g.value(node);
        for (long h = 0; h < r.num_hit(); ++h) {
          long p = start + r.hit_rows[h];
          for (int c = 0; c < 3; ++c) pixels.at(p, c) = v.at(h, c);
        }
        continue;
      }
      if (r.num_hit() == 0) continue;
      Tensor<T> seed_rows(r.num_hit(), 3);
      for (long h = 0; h < r.num_hit(); ++h) {
        long p = start + r.hit_rows[h];
        for (int c = 0; c < 3; ++c)
          seed_rows.at(h, c) = static_cast<T>(cfg_.weights.semantic *
                                              static_cast<double>(dpix->at(p, c)));
      }
      GradMap<T> part = g.backward_seeded(node, seed_rows);
      for (auto& [name, gt] : part) {
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, std::move(gt));
        } else {
          for (long i = 0; i < gt.size(); ++i) it->second.v[i] += gt.v[i];
        }
      }
    }
    return pixels;
  };

  std::vector<Tensor<T>> aug_pixels(cams.size());
  for (std::size_t j = 0; j < cams.size(); ++j) aug_pixels[j] = render_aug(j, nullptr);

  // The feature graph owns the rendered pixels as named parameters so the
  // backward pass hands back per-pixel gradients to replay through renders.
  ParameterStore<T> pixel_store;
  Graph<T> fg(true);
  std::vector<int> aug_feats;
  std::vector<Eigen::Vector3d> aug_positions;
  for (std::size_t j = 0; j < cams.size(); ++j) {
    std::string name = "aug" + std::to_string(j);
    pixel_store.create(name, hw, 3) = aug_pixels[j];
    aug_feats.push_back(extractor_->extract(fg, fg.param(pixel_store, name), res, res));
    aug_positions.push_back(cams[j].position());
  }
  std::vector<int> key_feats;
  std::vector<Eigen::Vector3d> key_positions;
  int input_feat = -1;
  for (std::size_t v = 0; v < views_.size(); ++v) {
    if (static_cast<int>(v) == input_view_) {
      input_feat = fg.constant(reference_features_[v]);
    } else {
      key_feats.push_back(fg.constant(reference_features_[v]));
      key_positions.push_back(views_[v].camera.position());
    }
  }
  int sem = semantic_term_node(fg, input_feat, key_feats, key_positions, aug_feats,
                               aug_positions);
  double value = static_cast<double>(fg.value(sem).v[0]);
  if (!std::isfinite(value)) throw std::runtime_error("loss component sem is not finite");
  GradMap<T> pixel_grads = fg.backward(sem);

  for (std::size_t j = 0; j < cams.size(); ++j) {
    const Tensor<T>& dpix = pixel_grads.at("aug" + std::to_string(j));
    render_aug(j, &dpix);
  }
  return value;
}

void Trainer::write_checkpoint(long iteration) {
  if (cfg_.checkpoint_out.empty()) return;
  CheckpointData data{store_, adam_, iteration, cfg_.stage};
  save_checkpoint(cfg_.checkpoint_out, data);
}

void Trainer::log_line(long iteration, const LossReport& r, double wall_ms) {
  if (!log_) return;
  std::ostringstream line;
  line.precision(9);
  line << iteration << ',' << r.rgb << ',' << r.norm << ',' << r.eik << ',' << r.sem << ','
       << r.mask << ',' << r.trans << ',' << r.total << ',' << field_->inv_std_value(store_)
       << ',' << wall_ms;
  *log_ << line.str() << '\n';
  log_->flush();
}

TrainResult Trainer::run() {
  TrainResult result;
  result.checkpoint_path = cfg_.checkpoint_out;
  result.final_iteration = start_iteration_;
  for (long i = start_iteration_; i < cfg_.iterations; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    LossReport rep;
    try {
      rep = train_iteration(i);
    } catch (const std::runtime_error& e) {
      if (std::string(e.what()).find("not finite") == std::string::npos) throw;
      // Parameters still hold the last finite state; preserve it.
      result.halted_on_nan = true;
      result.halt_reason = e.what();
      result.final_iteration = i;
      write_checkpoint(i);
      return result;
    }
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    result.trace.push_back(rep);
    result.last = rep;
    result.final_iteration = i + 1;
    recent_.push_back(rep);
    if (recent_.size() > 100) recent_.pop_front();
    log_line(i, rep, ms);
    if (cfg_.checkpoint_every > 0 && (i + 1) % cfg_.checkpoint_every == 0 &&
        i + 1 < cfg_.iterations)
      write_checkpoint(i + 1);
  }
  write_checkpoint(cfg_.iterations);
  return result;
}

GridSamples sample_field_grid(NeuralField<T>& field, ParameterStore<T>& store, int res,
                              const Eigen::Vector3d& lo, const Eigen::Vector3d& hi, long chunk) {
  if (res < 2) throw std::runtime_error("sample_field_grid: res must be at least 2");
  GridSamples out;
  out.res = res;
  out.lo = lo;
  out.hi = hi;
  const long total = static_cast<long>(res) * res * res;
  out.values.resize(total);
  const Eigen::Vector3d h = (hi - lo) / res;
  parallel_for(total, chunk, [&](long begin, long end) {
    long count = end - begin;
    Tensor<T> pts(count, 3);
    for (long t = begin; t < end; ++t) {
      long i = t % res, j = (t / res) % res, k = t / (static_cast<long>(res) * res);
      pts.at(t - begin, 0) = static_cast<T>(lo.x() + (i + 0.5) * h.x());
      pts.at(t - begin, 1) = static_cast<T>(lo.y() + (j + 0.5) * h.y());
      pts.at(t - begin, 2) = static_cast<T>(lo.z() + (k + 0.5) * h.z());
    }
    Graph<T> g(false);
    auto sd = field.sdf(g, store, g.constant(std::move(pts)), FieldInterface<T>::kNoView);
    const Tensor<T>& v = g.value(sd.sdf);
    for (long t = begin; t < end; ++t) out.values[t] = static_cast<double>(v.v[t - begin]);
  });
  return out;
}

TriangleMesh extract_field_mesh(NeuralField<T>& field, ParameterStore<T>& store, int res,
                                bool with_colors) {
  GridSamples grid = sample_field_grid(field, store, res);
  TriangleMesh mesh = marching_cubes(grid);
  if (!with_colors || mesh.vertices.empty()) return mesh;
  mesh.colors.resize(mesh.vertices.size());
  parallel_for(static_cast<long>(mesh.vertices.size()), 4096, [&](long begin, long end) {
    long count = end - begin;
    Tensor<T> pts(count, 3);
    for (long t = begin; t < end; ++t)
      for (int c = 0; c < 3; ++c) pts.at(t - begin, c) = static_cast<T>(mesh.vertices[t][c]);
    Graph<T> g(false);
    int p = g.constant(std::move(pts));
    auto sd = field.sdf(g, store, p, FieldInterface<T>::kNoView);
    int grad = field.sdf_gradient(g, store, p, FieldInterface<T>::kNoView);
    const Tensor<T>& gv = g.value(grad);
    Tensor<T> dirs(count, 3);
    for (long t = 0; t < count; ++t) {
      Eigen::Vector3d n(gv.at(t, 0), gv.at(t, 1), gv.at(t, 2));
      double len = n.norm();
      Eigen::Vector3d d = len > 1e-12 ? Eigen::Vector3d(-n / len) : Eigen::Vector3d(0, 0, -1);
      for (int c = 0; c < 3; ++c) dirs.at(t, c) = static_cast<T>(d[c]);
    }
    auto tex =
        field.texture(g, store, p, g.constant(std::move(dirs)), grad, sd.feature,
                      FieldInterface<T>::kNoView);
    const Tensor<T>& col = g.value(tex.combined);
    for (long t = begin; t < end; ++t)
      for (int c = 0; c < 3; ++c) mesh.colors[t][c] = static_cast<double>(col.at(t - begin, c));
  });
  return mesh;
}

}  // namespace mvsdf
