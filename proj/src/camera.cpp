#include "mvsdf/camera.hpp"

#include <cmath>
#include <stdexcept>

namespace mvsdf {

void Camera::validate() const {
  if (fx <= 0 || fy <= 0) throw std::runtime_error("camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::runtime_error("camera: bad image size");
  Eigen::Matrix3d r = rotation();
  double err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (err > 1e-4)
    throw std::runtime_error("camera: rotation block not orthonormal (err " +
                             std::to_string(err) + ")");
}

bool ray_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double radius,
                double& t0, double& t1) {
  double b = o.dot(d);
  double c = o.squaredNorm() - radius * radius;
  double disc = b * b - c;
  if (disc <= 0) return false;
  double s = std::sqrt(disc);
  t0 = -b - s;
  t1 = -b + s;
  if (t1 <= 0) return false;
  t0 = std::max(t0, 0.0);
  return true;
}

Ray generate_ray(const Camera& cam, double px, double py) {
  Ray ray;
  Eigen::Vector3d dir_cam((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
  ray.dir = (cam.rotation() * dir_cam).normalized();
  ray.origin = cam.position();
  double t0, t1;
  ray.hits_bounds = ray_sphere(ray.origin, ray.dir, 1.0, t0, t1);
  if (ray.hits_bounds) {
    ray.t_near = t0;
    ray.t_far = t1;
  }
  return ray;
}

Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& world_up) {
  Eigen::Vector3d z = (target - eye).normalized();
  Eigen::Vector3d y = -world_up + z * z.dot(world_up);
  if (y.norm() < 1e-8) {
    // looking straight along world_up: pick any perpendicular down axis
    Eigen::Vector3d alt = std::abs(z.x()) < 0.9 ? Eigen::Vector3d(1, 0, 0)
                                                : Eigen::Vector3d(0, 0, 1);
    y = alt - z * z.dot(alt);
  }
  y.normalize();
  Eigen::Vector3d x = y.cross(z);
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 1>(0, 0) = x;
  m.block<3, 1>(0, 1) = y;
  m.block<3, 1>(0, 2) = z;
  m.block<3, 1>(0, 3) = eye;
  return m;
}

}  // namespace mvsdf
