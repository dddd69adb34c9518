#pragma once

#include <deque>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvsdf/adam.hpp"
#include "mvsdf/fields.hpp"
#include "mvsdf/losses.hpp"
#include "mvsdf/manifest.hpp"
#include "mvsdf/mesh.hpp"
#include "mvsdf/renderer.hpp"
#include "mvsdf/semantic.hpp"

namespace mvsdf {

// Training runs in 32-bit floats; determinism contracts hold per dtype.
using TrainScalar = float;

struct TrainConfig {
  int stage = 1;
  long iterations = 3000;
  long rays_per_iteration = 1024;
  double learning_rate = 1e-4;
  LossWeights weights;
  RgbWeightMode rgb_weight_mode = RgbWeightMode::kInputOverride;
  SamplerConfig sampler;
  long eikonal_points = 256;
  int semantic_cadence = 10;  // iterations between semantic terms; 0 disables
  int semantic_views = 4;
  int semantic_resolution = 64;
  uint64_t semantic_feature_seed = 0;
  long semantic_feature_dim = 128;
  uint64_t seed = 0;
  int mask_dilation_px = 5;
  double background_ray_fraction = 0.1;
  long checkpoint_every = 500;
  std::string checkpoint_in;
  std::string checkpoint_out;
  std::string log_path;
  FieldConfig field;

  void validate() const;
};

// JSON object with keys mirroring the field names above; unknown keys are
// rejected so config typos fail loudly.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);

struct TrainResult {
  long final_iteration = 0;
  LossReport last;
  std::vector<LossReport> trace;  // one entry per executed iteration
  bool halted_on_nan = false;
  std::string halt_reason;
  std::string checkpoint_path;
};

struct CheckpointData {
  ParameterStore<TrainScalar> params;
  AdamState<TrainScalar> adam;
  long iteration = 0;
  int stage = 1;
};

// Single-file checkpoint: parameters keep their own names, Adam moments ride
// along as opt.m.<name> / opt.v.<name>, counters as meta.* scalars.
void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// Two-stage reconstruction driver over one scene manifest.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const SceneManifest& manifest);
  ~Trainer();

  TrainResult run();

  ParameterStore<TrainScalar>& store() { return store_; }
  NeuralField<TrainScalar>& field() { return *field_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::deque<LossReport>& recent_losses() const { return recent_; }

 private:
  struct ViewSlot;

  void load_views(const SceneManifest& manifest);
  void init_params();
  void apply_stage2_freeze();
  void build_pixel_pools();
  LossReport train_iteration(long iteration);
  double semantic_step(long iteration, GradMap<TrainScalar>& grads);
  void write_checkpoint(long iteration);
  void log_line(long iteration, const LossReport& r, double wall_ms);

  TrainConfig cfg_;
  std::unique_ptr<NeuralField<TrainScalar>> field_;
  ParameterStore<TrainScalar> store_;
  AdamState<TrainScalar> adam_;
  std::vector<ViewSlot> views_;
  int input_view_ = 0;
  long start_iteration_ = 0;
  std::vector<std::string> warnings_;
  std::deque<LossReport> recent_;
  std::unique_ptr<BuiltinExtractor<TrainScalar>> extractor_;
  std::vector<Tensor<TrainScalar>> reference_features_;  // per view, stage refs
  std::unique_ptr<std::ofstream> log_;
};

// Batched canonical-field sampling on the marching-cubes lattice; voxel rows
// are distributed over the worker pool.
GridSamples sample_field_grid(NeuralField<TrainScalar>& field, ParameterStore<TrainScalar>& store,
                              int res, const Eigen::Vector3d& lo = Eigen::Vector3d(-1, -1, -1),
                              const Eigen::Vector3d& hi = Eigen::Vector3d(1, 1, 1),
                              long chunk = 32768);

// Zero level set of the canonical SDF; optional per-vertex colors from the
// texture head viewed along the inward surface normal.
TriangleMesh extract_field_mesh(NeuralField<TrainScalar>& field, ParameterStore<TrainScalar>& store,
                                int res, bool with_colors = false);

}  // namespace mvsdf
