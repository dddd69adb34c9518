#pragma once

#include <Eigen/Dense>
#include <array>

namespace mvsdf {

// Right-handed, camera looks along +z in camera space, image y axis down.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Eigen::Matrix4d c2w = Eigen::Matrix4d::Identity();

  Eigen::Vector3d position() const { return c2w.block<3, 1>(0, 3); }
  Eigen::Matrix3d rotation() const { return c2w.block<3, 3>(0, 0); }

  void set_c2w_row_major(const std::array<double, 16>& m) {
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) c2w(r, c) = m[r * 4 + c];
  }
  std::array<double, 16> c2w_row_major() const {
    std::array<double, 16> m;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) m[r * 4 + c] = c2w(r, c);
    return m;
  }

  // Throws unless the rotation block is orthonormal and focal lengths positive.
  void validate() const;
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d dir = Eigen::Vector3d::Zero();
  double t_near = 0, t_far = 0;
  bool hits_bounds = false;  // false: misses the unit bounding sphere
};

// pixel coordinates are continuous; callers pass (x + 0.5, y + 0.5) for the
// center of integer pixel (x, y). Near/far come from the unit-sphere bounds.
Ray generate_ray(const Camera& cam, double px, double py);

// c2w for a camera at eye looking at target, image y axis pointing down when
// world_up points up.
Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& world_up = Eigen::Vector3d(0, 1, 0));

// Intersection of o + t d with the sphere of given radius at the origin;
// returns false if the ray misses or the sphere is entirely behind the origin.
bool ray_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double radius,
                double& t0, double& t1);

}  // namespace mvsdf
