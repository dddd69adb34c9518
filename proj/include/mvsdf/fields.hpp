#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvsdf/encodings.hpp"
#include "mvsdf/graph.hpp"
#include "mvsdf/mlp.hpp"
#include "mvsdf/params.hpp"
#include "mvsdf/rng.hpp"

namespace mvsdf {

struct FieldConfig {
  HashGridConfig hash;
  int freq_octaves_pos = 6;
  int freq_octaves_dir = 4;
  std::vector<int> trunk_hidden = {256, 256, 256, 256};
  std::vector<int> trunk_skips = {2};
  int feature_dim = 64;
  std::vector<int> transient_sdf_hidden = {64, 64};
  std::vector<int> albedo_hidden = {128, 128, 128};
  std::vector<int> texture_hidden = {128, 128, 128, 128};
  std::vector<int> transient_tex_hidden = {64, 64};
  int embed_dim_normal = 8;
  int embed_dim_color = 8;
  double eps_sdf = 0.05;
  double eps_color = 0.5;
  double softplus_beta = 100;
  double init_inv_std = 20;
  double sphere_radius = 0.5;
  int num_views = 1;  // rows of the per-view embedding tables

  double fd_step() const { return 1.0 / hash.r_max; }

  void validate() const {
    if (feature_dim <= 0) throw std::runtime_error("field: feature_dim must be positive");
    if (num_views <= 0) throw std::runtime_error("field: num_views must be positive");
    if (eps_sdf <= 0 || eps_color <= 0) throw std::runtime_error("field: eps bounds must be positive");
    if (init_inv_std <= 0) throw std::runtime_error("field: init_inv_std must be positive");
  }
};

// Graph-building view of a scene field. `view` selects the per-view transient
// embeddings; pass kNoView for the canonical (non-transient) field.
template <typename T>
class FieldInterface {
 public:
  static constexpr int kNoView = -1;

  struct SdfOut {
    int sdf = -1;        // [P,1]
    int feature = -1;    // [P,feature_dim]
    int transient = -1;  // [P,1] bounded residual already folded into sdf
  };
  struct TexOut {
    int base = -1;       // [P,3]
    int transient = -1;  // [P,3]
    int combined = -1;   // [P,3] clamped to [0,1]
  };

  virtual ~FieldInterface() = default;
  virtual SdfOut sdf(Graph<T>& g, ParameterStore<T>& store, int points, int view) = 0;
  virtual int sdf_gradient(Graph<T>& g, ParameterStore<T>& store, int points, int view) = 0;
  virtual int albedo(Graph<T>& g, ParameterStore<T>& store, int points, int grad, int feat) = 0;
  virtual TexOut texture(Graph<T>& g, ParameterStore<T>& store, int points, int dirs, int grad,
                         int feat, int view) = 0;
  virtual int inv_std(Graph<T>& g, ParameterStore<T>& store) = 0;
};

namespace detail {

template <typename T>
void check_unit_dirs(const Tensor<T>& d) {
  for (long i = 0; i < d.rows; ++i) {
    double n = std::sqrt(double(d.at(i, 0)) * d.at(i, 0) + double(d.at(i, 1)) * d.at(i, 1) +
                         double(d.at(i, 2)) * d.at(i, 2));
    if (std::abs(n - 1.0) > 1e-3)
      throw std::runtime_error("texture: direction row " + std::to_string(i) +
                               " is not unit length (norm " + std::to_string(n) + ")");
  }
}

}  // namespace detail

// Trainable field: hash+frequency encoded SDF trunk with a bounded transient
// residual branch, view-independent albedo head, and base+transient texture
// heads. Parameter names are stable across runs, which the checkpoint format
// and stage freezing rely on.
template <typename T>
class NeuralField : public FieldInterface<T> {
 public:
  using typename FieldInterface<T>::SdfOut;
  using typename FieldInterface<T>::TexOut;
  using FieldInterface<T>::kNoView;

  explicit NeuralField(FieldConfig cfg) : cfg_(std::move(cfg)), grid_(cfg_.hash) {
    cfg_.validate();
    pos_enc_.octaves = cfg_.freq_octaves_pos;
    pos_enc_.include_identity = true;
    dir_enc_.octaves = cfg_.freq_octaves_dir;
    dir_enc_.include_identity = true;

    const int enc_dim = encoded_dim();
    MlpConfig trunk;
    trunk.input_dim = enc_dim;
    trunk.hidden = cfg_.trunk_hidden;
    trunk.output_dim = 1 + cfg_.feature_dim;
    trunk.act = Activation::kSoftplus;
    trunk.softplus_beta = cfg_.softplus_beta;
    trunk.skips = cfg_.trunk_skips;
    trunk.init = InitScheme::kGeometric;
    trunk.sphere_radius = cfg_.sphere_radius;
    trunk.raw_offset = raw_offset();
    trunk_ = std::make_unique<Mlp<T>>(trunk, "trunk");

    MlpConfig tsdf;
    tsdf.input_dim = enc_dim + cfg_.embed_dim_normal;
    tsdf.hidden = cfg_.transient_sdf_hidden;
    tsdf.output_dim = 1;
    tsdf.act = Activation::kRelu;
    tsdf.init = InitScheme::kHeZeroLast;
    tsdf_ = std::make_unique<Mlp<T>>(tsdf, "tsdf");

    MlpConfig alb;
    alb.input_dim = 3 + 3 + cfg_.feature_dim;
    alb.hidden = cfg_.albedo_hidden;
    alb.output_dim = 3;
    alb.act = Activation::kRelu;
    alb.out_act = OutputActivation::kSigmoid;
    alb.init = InitScheme::kHe;
    albedo_ = std::make_unique<Mlp<T>>(alb, "albedo");

    const int dir_dim = dir_enc_.output_dim(3);
    MlpConfig tex;
    tex.input_dim = 3 + dir_dim + 3 + cfg_.feature_dim;
    tex.hidden = cfg_.texture_hidden;
    tex.output_dim = 3;
    tex.act = Activation::kRelu;
    tex.out_act = OutputActivation::kSigmoid;
    tex.init = InitScheme::kHe;
    tex_ = std::make_unique<Mlp<T>>(tex, "tex");

    MlpConfig ttex;
    ttex.input_dim = tex.input_dim + cfg_.embed_dim_color;
    ttex.hidden = cfg_.transient_tex_hidden;
    ttex.output_dim = 3;
    ttex.act = Activation::kRelu;
    ttex.init = InitScheme::kHeZeroLast;
    ttex_ = std::make_unique<Mlp<T>>(ttex, "ttex");
  }

  const FieldConfig& config() const { return cfg_; }
  HashGridState& grid() { return grid_; }

  void create_params(ParameterStore<T>& store, Prng& rng) {
    create_hash_table<T>(store, "hash.table", cfg_.hash, rng);
    trunk_->create_params(store, rng);
    tsdf_->create_params(store, rng);
    albedo_->create_params(store, rng);
    tex_->create_params(store, rng);
    ttex_->create_params(store, rng);
    create_embedding(store, "embed.normal", cfg_.num_views, cfg_.embed_dim_normal);
    create_embedding(store, "embed.color", cfg_.num_views, cfg_.embed_dim_color);
    store.create("density.log_inv_std", 1, 1).v[0] = static_cast<T>(std::log(cfg_.init_inv_std));
  }

  // hash features ++ frequency features (raw coordinates ride along last in
  // the frequency block, which the geometric trunk init keys on).
  int encode_points(Graph<T>& g, ParameterStore<T>& store, int points) {
    int p = g.clamp(points, T(-1), T(1));
    int h = g.hash_encode(p, g.param(store, "hash.table"), &grid_);
    return g.concat_cols(h, g.freq_encode(p, pos_enc_));
  }

  SdfOut sdf(Graph<T>& g, ParameterStore<T>& store, int points, int view) override {
    int enc = encode_points(g, store, points);
    int out = trunk_->forward(g, store, enc);
    SdfOut r;
    r.sdf = g.slice_cols(out, 0, 1);
    r.feature = g.slice_cols(out, 1, 1 + cfg_.feature_dim);
    if (view != kNoView) {
      r.transient = transient_residual(g, store, enc, points, view);
      r.sdf = g.add(r.sdf, r.transient);
    }
    return r;
  }

  // Full-field value without the feature columns: the finite-difference
  // gradient path only needs the first trunk output column.
  int sdf_value(Graph<T>& g, ParameterStore<T>& store, int points, int view) {
    int enc = encode_points(g, store, points);
    int s = trunk_->forward_sliced(g, store, enc, 0, 1);
    if (view != kNoView) s = g.add(s, transient_residual(g, store, enc, points, view));
    return s;
  }

  // Central differences with step 1/R_max per axis; the six shifted
  // evaluations join the autodiff graph so gradient losses train the field.
  int sdf_gradient(Graph<T>& g, ParameterStore<T>& store, int points, int view) override {
    const Tensor<T>& p = g.value(points);
    const long P = p.rows;
    const T d = static_cast<T>(cfg_.fd_step());
    Tensor<T> shifted(6 * P, 3);
    for (int axis = 0; axis < 3; ++axis) {
      for (int sgn = 0; sgn < 2; ++sgn) {
        long base = (axis * 2 + sgn) * P;
        for (long i = 0; i < P; ++i) {
          shifted.at(base + i, 0) = p.at(i, 0);
          shifted.at(base + i, 1) = p.at(i, 1);
          shifted.at(base + i, 2) = p.at(i, 2);
          shifted.at(base + i, axis) += sgn == 0 ? d : -d;
        }
      }
    }
    int f = sdf_value(g, store, g.constant(std::move(shifted)), view);  // [6P,1]
    int rows = g.reshape(f, 6, P);
    std::vector<int> cols;
    for (int axis = 0; axis < 3; ++axis) {
      int plus = g.gather_row(rows, axis * 2);
      int minus = g.gather_row(rows, axis * 2 + 1);
      int diff = g.affine(g.sub(plus, minus), T(1) / (2 * d), 0);
      cols.push_back(g.reshape(diff, P, 1));
    }
    return g.concat_cols(cols);
  }

  int albedo(Graph<T>& g, ParameterStore<T>& store, int points, int grad, int feat) override {
    int x = g.concat_cols({points, grad, feat});
    return albedo_->forward(g, store, x);
  }

  TexOut texture(Graph<T>& g, ParameterStore<T>& store, int points, int dirs, int grad, int feat,
                 int view) override {
    detail::check_unit_dirs(g.value(dirs));
    int x = g.concat_cols({points, g.freq_encode(dirs, dir_enc_), grad, feat});
    TexOut r;
    r.base = tex_->forward(g, store, x);
    if (view == kNoView) {
      r.transient = g.constant(Tensor<T>::zeros(g.value(points).rows, 3));
      r.combined = r.base;  // sigmoid output already lies inside [0,1]
      return r;
    }
    int emb = g.broadcast_rows(g.gather_row(g.param(store, "embed.color"), view),
                               g.value(points).rows);
    int raw = ttex_->forward(g, store, g.concat_cols(x, emb));
    r.transient = g.affine(g.tanh(raw), static_cast<T>(cfg_.eps_color), 0);
    r.combined = g.clamp(g.add(r.base, r.transient), T(0), T(1));
    return r;
  }

  int inv_std(Graph<T>& g, ParameterStore<T>& store) override {
    return g.exp(g.param(store, "density.log_inv_std"));
  }

  // Inference-time scalar, e.g. for logs.
  double inv_std_value(const ParameterStore<T>& store) const {
    return std::exp(static_cast<double>(store.at("density.log_inv_std").v[0]));
  }

  // Parameters frozen when stage 2 trains appearance only.
  std::vector<std::string> geometry_param_names(const ParameterStore<T>& store) const {
    std::vector<std::string> names;
    for (const auto& [name, entry] : store) {
      (void)entry;
      if (name.rfind("trunk.", 0) == 0 || name.rfind("tsdf.", 0) == 0 ||
          name.rfind("albedo.", 0) == 0 || name == "hash.table" || name == "embed.normal" ||
          name == "density.log_inv_std")
        names.push_back(name);
    }
    return names;
  }

 private:
  FieldConfig cfg_;
  HashGridState grid_;
  FrequencyEncodingConfig pos_enc_;
  FrequencyEncodingConfig dir_enc_;
  std::unique_ptr<Mlp<T>> trunk_;
  std::unique_ptr<Mlp<T>> tsdf_;
  std::unique_ptr<Mlp<T>> albedo_;
  std::unique_ptr<Mlp<T>> tex_;
  std::unique_ptr<Mlp<T>> ttex_;

  int encoded_dim() const {
    FrequencyEncodingConfig pe;
    pe.octaves = cfg_.freq_octaves_pos;
    pe.include_identity = true;
    return cfg_.hash.output_dim() + pe.output_dim(3);
  }

  int raw_offset() const {
    // identity coordinates sit at the tail of the frequency block
    return encoded_dim() - 3;
  }

  int transient_residual(Graph<T>& g, ParameterStore<T>& store, int enc, int points, int view) {
    int emb = g.broadcast_rows(g.gather_row(g.param(store, "embed.normal"), view),
                               g.value(points).rows);
    int raw = tsdf_->forward(g, store, g.concat_cols(enc, emb));
    return g.affine(g.tanh(raw), static_cast<T>(cfg_.eps_sdf), 0);
  }
};

// Closed-form field for oracles and synthetic data: evaluates caller-supplied
// functions at node values and feeds them back in as constants.
template <typename T>
class AnalyticField : public FieldInterface<T> {
 public:
  using typename FieldInterface<T>::SdfOut;
  using typename FieldInterface<T>::TexOut;
  using SdfFn = std::function<double(double, double, double)>;
  using ColorFn = std::function<void(double, double, double, double*)>;  // -> rgb

  AnalyticField(SdfFn sdf, double inv_std = 200)
      : sdf_(std::move(sdf)), inv_std_(inv_std) {}

  void set_albedo(ColorFn fn) { albedo_ = std::move(fn); }
  void set_gradient(ColorFn fn) { grad_ = std::move(fn); }  // exact grad, else central FD
  void set_gradient_step(double h) { grad_step_ = h; }

  SdfOut sdf(Graph<T>& g, ParameterStore<T>&, int points, int) override {
    const Tensor<T>& p = g.value(points);
    Tensor<T> out(p.rows, 1);
    for (long i = 0; i < p.rows; ++i)
      out.v[i] = static_cast<T>(sdf_(p.at(i, 0), p.at(i, 1), p.at(i, 2)));
    SdfOut r;
    r.sdf = g.constant(std::move(out));
    r.feature = g.constant(Tensor<T>::zeros(p.rows, 1));
    return r;
  }

  int sdf_gradient(Graph<T>& g, ParameterStore<T>&, int points, int) override {
    const Tensor<T>& p = g.value(points);
    Tensor<T> out(p.rows, 3);
    const double h = grad_step_;
    for (long i = 0; i < p.rows; ++i) {
      double x = p.at(i, 0), y = p.at(i, 1), z = p.at(i, 2);
      if (grad_) {
        double gv[3];
        grad_(x, y, z, gv);
        for (int c = 0; c < 3; ++c) out.at(i, c) = static_cast<T>(gv[c]);
        continue;
      }
      out.at(i, 0) = static_cast<T>((sdf_(x + h, y, z) - sdf_(x - h, y, z)) / (2 * h));
      out.at(i, 1) = static_cast<T>((sdf_(x, y + h, z) - sdf_(x, y - h, z)) / (2 * h));
      out.at(i, 2) = static_cast<T>((sdf_(x, y, z + h) - sdf_(x, y, z - h)) / (2 * h));
    }
    return g.constant(std::move(out));
  }

  int albedo(Graph<T>& g, ParameterStore<T>&, int points, int, int) override {
    const Tensor<T>& p = g.value(points);
    Tensor<T> out(p.rows, 3);
    for (long i = 0; i < p.rows; ++i) {
      double rgb[3] = {0.7, 0.7, 0.7};
      if (albedo_) albedo_(p.at(i, 0), p.at(i, 1), p.at(i, 2), rgb);
      for (int c = 0; c < 3; ++c) out.at(i, c) = static_cast<T>(rgb[c]);
    }
    return g.constant(std::move(out));
  }

  TexOut texture(Graph<T>& g, ParameterStore<T>& store, int points, int dirs, int grad, int feat,
                 int) override {
    detail::check_unit_dirs(g.value(dirs));
    TexOut r;
    r.base = albedo(g, store, points, grad, feat);
    r.transient = g.constant(Tensor<T>::zeros(g.value(points).rows, 3));
    r.combined = r.base;
    return r;
  }

  int inv_std(Graph<T>& g, ParameterStore<T>&) override {
    return g.constant(Tensor<T>::scalar(static_cast<T>(inv_std_)));
  }

 private:
  SdfFn sdf_;
  ColorFn albedo_;
  ColorFn grad_;
  double inv_std_;
  double grad_step_ = 1e-5;
};

}  // namespace mvsdf
