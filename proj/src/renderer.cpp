#include "mvsdf/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mvsdf {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double alpha_from_sdf(double f0, double f1, double inv_std) {
  if (inv_std <= 0) throw std::runtime_error("alpha_from_sdf: inv_std must be positive");
  double phi0 = stable_sigmoid(inv_std * f0);
  double phi1 = stable_sigmoid(inv_std * f1);
  // phi1 > 0 makes the ratio < 1 on paper; keep that true when phi1 rounds away
  return std::clamp((phi0 - phi1) / phi0, 0.0, 1.0 - 1e-7);
}

double opaque_density(double f, double df_dt, double inv_std) {
  if (inv_std <= 0) throw std::runtime_error("opaque_density: inv_std must be positive");
  double s = stable_sigmoid(inv_std * f);
  double dphi_dt = inv_std * s * (1 - s) * df_dt;
  return std::max(-dphi_dt / s, 0.0);
}

std::vector<double> stratified_depths(double t0, double t1, int n, Prng& rng) {
  if (n < 1) throw std::runtime_error("stratified_depths: n must be >= 1");
  if (!(t0 < t1)) throw std::runtime_error("stratified_depths: empty interval");
  std::vector<double> t(n);
  double span = (t1 - t0) / n;
  for (int i = 0; i < n; ++i) t[i] = t0 + (i + rng.uniform()) * span;
  return t;
}

std::vector<double> importance_resample(const std::vector<double>& t,
                                        const std::vector<double>& w, int n, Prng& rng) {
  if (t.size() < 2 || t.size() != w.size())
    throw std::runtime_error("importance_resample: need matching depths/weights, >= 2 samples");
  const size_t m = t.size() - 1;  // intervals
  std::vector<double> cdf(m + 1, 0.0);
  for (size_t i = 0; i < m; ++i) cdf[i + 1] = cdf[i] + std::max(w[i], 0.0) + 1e-5;
  const double total = cdf[m];
  std::vector<double> out(n);
  for (int j = 0; j < n; ++j) {
    double u = (j + rng.uniform()) / n * total;
    size_t hi = std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
    size_t i = std::min(std::max<size_t>(hi, 1) - 1, m - 1);
    double frac = (u - cdf[i]) / (cdf[i + 1] - cdf[i]);
    out[j] = t[i] + (t[i + 1] - t[i]) * frac;
  }
  return out;
}

std::vector<double> merge_strictly_increasing(std::vector<double> a, std::vector<double> b) {
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  for (size_t i = 1; i < a.size(); ++i)
    if (a[i] <= a[i - 1]) a[i] = std::nextafter(a[i - 1], std::numeric_limits<double>::max());
  return a;
}

}  // namespace mvsdf
