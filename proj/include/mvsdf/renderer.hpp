#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "mvsdf/camera.hpp"
#include "mvsdf/fields.hpp"
#include "mvsdf/graph.hpp"
#include "mvsdf/rng.hpp"

namespace mvsdf {

// Scalar references for the discretized opacity math; the graph path must
// agree with these exactly (same formula, same clamping).
double alpha_from_sdf(double f0, double f1, double inv_std);
double opaque_density(double f, double df_dt, double inv_std);

// One jittered depth per stratum of [t0, t1].
std::vector<double> stratified_depths(double t0, double t1, int n, Prng& rng);

// Inverse-CDF resampling: interval i inherits the weight of its left sample
// plus a small floor, so all-zero weights degrade to uniform sampling.
std::vector<double> importance_resample(const std::vector<double>& t,
                                        const std::vector<double>& w, int n, Prng& rng);

// Sorted union with strictness enforced by nextafter nudges, so per-ray
// sample counts stay fixed for segment batching.
std::vector<double> merge_strictly_increasing(std::vector<double> a, std::vector<double> b);

struct SamplerConfig {
  int n_coarse = 64;
  int n_fine = 64;
};

enum class RenderStage { kGeometry, kTexture };

// Graph nodes of a batched render. All per-ray nodes are [H,*] over hit rays
// only; hit_rows maps graph rows back to positions in the input ray list.
// Missed rays never touch the field: they are analytically white with O = 0.
template <typename T>
struct RayBatchRender {
  int color = -1;      // [H,3] composited over white
  int color_raw = -1;  // [H,3] before compositing
  int normal = -1;     // [H,3] not re-normalized
  int albedo = -1;     // [H,3] albedo head accumulation, composited
  int opacity = -1;    // [H,1]
  int depth = -1;      // [H,1]
  int weights = -1;          // [H*S,1]
  int trans = -1;            // [H*S,1]
  int sdf = -1;              // [H*S,1]
  int sdf_transient = -1;    // [H*S,1] when the field has a transient branch
  int color_transient = -1;  // [H*S,3] texture stage only
  int points = -1;           // [H*S,3]
  long samples_per_ray = 0;
  std::vector<long> hit_rows;
  std::vector<uint8_t> hit;                          // per input ray
  std::vector<std::array<double, 3>> surface_points;  // argmax-weight point per hit ray
  std::vector<double> surface_depth;                  // its depth

  long num_hit() const { return static_cast<long>(hit_rows.size()); }
};

// alpha_i = max((phi(f_i) - phi(f_{i+1})) / phi(f_i), 0), phi = sigmoid(s x),
// with the segment-final alpha forced to zero by the shift's self-replication.
// Capped just below 1 so float underflow of phi_next keeps alpha in [0,1).
template <typename T>
int alpha_nodes(Graph<T>& g, int sdf, int inv_std, long seg) {
  int phi = g.sigmoid(g.mul(sdf, inv_std));
  int phi_next = g.segment_shift_up(phi, seg);
  return g.clamp(g.div(g.sub(phi, phi_next), phi), T(0), T(1) - T(1e-7));
}

// T_1 = 1, T_{i+1} = T_i (1 - alpha_i), w_i = T_i alpha_i.
template <typename T>
std::pair<int, int> transmittance_weights(Graph<T>& g, int alpha, long seg) {
  int trans = g.segment_cumprod_excl(g.affine(alpha, T(-1), T(1)), seg);
  return {trans, g.mul(alpha, trans)};
}

template <typename T>
RayBatchRender<T> render_rays(Graph<T>& g, ParameterStore<T>& store, FieldInterface<T>& field,
                              const std::vector<Ray>& rays, int view, RenderStage stage,
                              const SamplerConfig& sampler, uint64_t sample_seed,
                              const std::vector<uint64_t>& ray_keys) {
  if (rays.size() != ray_keys.size())
    throw std::runtime_error("render: ray/key count mismatch");
  if (sampler.n_coarse < 2) throw std::runtime_error("render: need at least 2 coarse samples");

  RayBatchRender<T> out;
  out.hit.resize(rays.size(), 0);
  for (size_t i = 0; i < rays.size(); ++i)
    if (rays[i].hits_bounds) {
      out.hit[i] = 1;
      out.hit_rows.push_back(static_cast<long>(i));
    }
  const long H = out.num_hit();
  if (H == 0) return out;

  const long S = sampler.n_coarse + sampler.n_fine;
  out.samples_per_ray = S;

  // Coarse pass: jittered strata, then a gradient-free field probe shapes the
  // fine distribution. Per-ray generators keyed by caller ids keep the result
  // independent of batch composition.
  std::vector<std::vector<double>> depths(H);
  std::vector<double> coarse_flat;
  coarse_flat.reserve(H * sampler.n_coarse);
  for (long h = 0; h < H; ++h) {
    const Ray& r = rays[out.hit_rows[h]];
    Prng rng(mix_u64(sample_seed, ray_keys[out.hit_rows[h]]));
    depths[h] = stratified_depths(r.t_near, r.t_far, sampler.n_coarse, rng);
    coarse_flat.insert(coarse_flat.end(), depths[h].begin(), depths[h].end());
  }
  if (sampler.n_fine > 0) {
    Tensor<T> cpts(H * sampler.n_coarse, 3);
    for (long h = 0; h < H; ++h) {
      const Ray& r = rays[out.hit_rows[h]];
      for (int i = 0; i < sampler.n_coarse; ++i) {
        double t = depths[h][i];
        long row = h * sampler.n_coarse + i;
        for (int c = 0; c < 3; ++c)
          cpts.at(row, c) = static_cast<T>(r.origin[c] + t * r.dir[c]);
      }
    }
    Graph<T> probe(false);
    const Tensor<T>& f =
        probe.value(field.sdf(probe, store, probe.constant(std::move(cpts)), view).sdf);
    const double s = probe.value(field.inv_std(probe, store)).v[0];
    for (long h = 0; h < H; ++h) {
      std::vector<double> w(sampler.n_coarse);
      double trans = 1;
      for (int i = 0; i < sampler.n_coarse; ++i) {
        double a = i + 1 < sampler.n_coarse
                       ? alpha_from_sdf(f.v[h * sampler.n_coarse + i],
                                        f.v[h * sampler.n_coarse + i + 1], s)
                       : 0.0;
        w[i] = trans * a;
        trans *= 1 - a;
      }
      Prng rng(mix_u64(mix_u64(sample_seed, 0x66696e65u), ray_keys[out.hit_rows[h]]));
      std::vector<double> fine = importance_resample(depths[h], w, sampler.n_fine, rng);
      depths[h] = merge_strictly_increasing(std::move(depths[h]), std::move(fine));
    }
  }

  Tensor<T> pts(H * S, 3), dirs(H * S, 3), tvals(H * S, 1);
  for (long h = 0; h < H; ++h) {
    const Ray& r = rays[out.hit_rows[h]];
    for (long i = 0; i < S; ++i) {
      long row = h * S + i;
      double t = depths[h][i];
      tvals.v[row] = static_cast<T>(t);
      for (int c = 0; c < 3; ++c) {
        pts.at(row, c) = static_cast<T>(r.origin[c] + t * r.dir[c]);
        dirs.at(row, c) = static_cast<T>(r.dir[c]);
      }
    }
  }

  int p = g.constant(std::move(pts));
  int tnode = g.constant(std::move(tvals));
  out.points = p;

  auto sdf_out = field.sdf(g, store, p, view);
  out.sdf = sdf_out.sdf;
  out.sdf_transient = sdf_out.transient;
  int grad = field.sdf_gradient(g, store, p, view);
  int inv_std = field.inv_std(g, store);
  int alpha = alpha_nodes(g, sdf_out.sdf, inv_std, S);
  auto [trans, w] = transmittance_weights(g, alpha, S);
  out.trans = trans;
  out.weights = w;

  int albedo_samples = field.albedo(g, store, p, grad, sdf_out.feature);
  int color_samples = albedo_samples;
  if (stage == RenderStage::kTexture) {
    auto tex = field.texture(g, store, p, g.constant(std::move(dirs)), grad, sdf_out.feature, view);
    color_samples = tex.combined;
    out.color_transient = tex.transient;
  }

  out.opacity = g.segment_sum(w, S);
  out.color_raw = g.segment_sum(g.mul(color_samples, w), S);
  int bg = g.affine(out.opacity, T(-1), T(1));  // 1 - O, broadcast over channels
  out.color = g.add(out.color_raw, bg);
  out.albedo = g.add(g.segment_sum(g.mul(albedo_samples, w), S), bg);
  out.normal = g.segment_sum(g.mul(grad, w), S);
  out.depth = g.div(g.segment_sum(g.mul(tnode, w), S), g.clamp(out.opacity, T(1e-6), T(2)));

  // Surface points via argmax weight, read eagerly for the eikonal batch.
  const Tensor<T>& wv = g.value(w);
  out.surface_points.resize(H);
  out.surface_depth.resize(H);
  for (long h = 0; h < H; ++h) {
    long best = 0;
    for (long i = 1; i < S; ++i)
      if (wv.v[h * S + i] > wv.v[h * S + best]) best = i;
    const Ray& r = rays[out.hit_rows[h]];
    double t = depths[h][best];
    out.surface_depth[h] = t;
    for (int c = 0; c < 3; ++c) out.surface_points[h][c] = r.origin[c] + t * r.dir[c];
  }
  return out;
}

struct RenderedImage {
  int width = 0;
  int height = 0;
  std::vector<float> color;    // 3 channels, row-major
  std::vector<float> normal;   // 3 channels
  std::vector<float> albedo;   // 3 channels
  std::vector<float> opacity;  // 1 channel
  std::vector<float> depth;    // 1 channel
};

// Chunked inference render. Per-pixel sample streams are keyed by the pixel
// index, so depths never depend on the chunk layout; values agree across
// chunk sizes to float rounding (batch shape selects the matmul kernel).
template <typename T>
RenderedImage render_image(ParameterStore<T>& store, FieldInterface<T>& field, const Camera& cam,
                           int view, RenderStage stage, const SamplerConfig& sampler,
                           uint64_t seed, long chunk = 2048) {
  RenderedImage img;
  img.width = cam.width;
  img.height = cam.height;
  const long n = static_cast<long>(cam.width) * cam.height;
  img.color.assign(n * 3, 1.0f);  // background
  img.normal.assign(n * 3, 0.0f);
  img.albedo.assign(n * 3, 1.0f);
  img.opacity.assign(n, 0.0f);
  img.depth.assign(n, 0.0f);

  uint64_t sample_seed = mix_u64(seed, hash_name("render"));
  for (long start = 0; start < n; start += chunk) {
    long count = std::min(chunk, n - start);
    std::vector<Ray> rays(count);
    std::vector<uint64_t> keys(count);
    for (long k = 0; k < count; ++k) {
      long px = (start + k) % cam.width, py = (start + k) / cam.width;
      rays[k] = generate_ray(cam, px + 0.5, py + 0.5);
      keys[k] = static_cast<uint64_t>(start + k);
    }
    Graph<T> g(false);
    RayBatchRender<T> r = render_rays(g, store, field, rays, view, stage, sampler, sample_seed, keys);
    for (long h = 0; h < r.num_hit(); ++h) {
      long pix = start + r.hit_rows[h];
      for (int c = 0; c < 3; ++c) {
        img.color[pix * 3 + c] = static_cast<float>(g.value(r.color).at(h, c));
        img.normal[pix * 3 + c] = static_cast<float>(g.value(r.normal).at(h, c));
        img.albedo[pix * 3 + c] = static_cast<float>(g.value(r.albedo).at(h, c));
      }
      img.opacity[pix] = static_cast<float>(g.value(r.opacity).v[h]);
      img.depth[pix] = static_cast<float>(g.value(r.depth).v[h]);
    }
  }
  return img;
}

}  // namespace mvsdf
