/*
 * Copyright (c) 2026 The cdformer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdformer/config.hpp"
#include "cdformer/geometry.hpp"

namespace cdformer {

// ---------------------------------------------------------------- synthetic shapes

enum class ShapeFamily { kSphere, kCube, kCylinder, kTorus, kCone, kPlaneCross, kCylinderCone, kRocket };

inline const std::vector<ShapeFamily>& all_families() {
  static const std::vector<ShapeFamily> f{ShapeFamily::kSphere, ShapeFamily::kCube,       ShapeFamily::kCylinder,
                                          ShapeFamily::kTorus,  ShapeFamily::kCone,       ShapeFamily::kPlaneCross,
                                          ShapeFamily::kCylinderCone, ShapeFamily::kRocket};
  return f;
}

inline const char* to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kSphere: return "sphere";
    case ShapeFamily::kCube: return "cube";
    case ShapeFamily::kCylinder: return "cylinder";
    case ShapeFamily::kTorus: return "torus";
    case ShapeFamily::kCone: return "cone";
    case ShapeFamily::kPlaneCross: return "plane-cross";
    case ShapeFamily::kCylinderCone: return "cylinder-cone";
    case ShapeFamily::kRocket: return "rocket";
  }
  return "?";
}

inline ShapeFamily family_from_string(const std::string& s) {
  for (ShapeFamily f : all_families()) {
    if (s == to_string(f)) return f;
  }
  throw ConfigError("unknown shape family '" + s + "'");
}

/// Number of part labels a family carries (composites only).
inline std::size_t family_parts(ShapeFamily f) {
  if (f == ShapeFamily::kCylinderCone) return 2;
  if (f == ShapeFamily::kRocket) return 4;
  return 1;
}

/// Per-point input features: a copy of xyz, or a single constant channel.
enum class FeatureMode { kXyz, kOnes };

inline std::size_t feature_channels(FeatureMode m) { return m == FeatureMode::kXyz ? 3 : 1; }

struct SyntheticSpec {
  std::vector<ShapeFamily> families{ShapeFamily::kSphere};
  std::size_t points = 256;
  double noise = 0.0;
  std::uint64_t seed = 0;
  FeatureMode features = FeatureMode::kXyz;
  bool rotate_z = true;  // random yaw per instance

  void validate() const {
    if (families.empty()) throw ConfigError("synthetic spec: at least one family is required");
    if (points < 8) throw ConfigError("synthetic spec: points per cloud must be >= 8");
    if (!(noise >= 0.0)) throw ConfigError("synthetic spec: noise sigma must be >= 0");
  }
};

/// One generated cloud. `cloud.labels` holds per-point part labels.
struct ShapeSample {
  PointCloud<float> cloud;
  std::int64_t class_label = -1;
  ShapeFamily family = ShapeFamily::kSphere;
};

namespace detail {

using Vec3 = std::array<double, 3>;

class SurfaceSampler {
 public:
  explicit SurfaceSampler(std::mt19937_64& rng) : rng_(rng) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }

  Vec3 sphere(double r = 1.0) {
    Vec3 v{normal(), normal(), normal()};
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    while (n < 1e-12) {
      v = {normal(), normal(), normal()};
      n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    return {r * v[0] / n, r * v[1] / n, r * v[2] / n};
  }

  /// Box surface with half extents e, area-weighted over faces.
  Vec3 box(const Vec3& e) {
    const std::array<double, 3> area{e[1] * e[2], e[0] * e[2], e[0] * e[1]};
    double pick = uniform(0.0, area[0] + area[1] + area[2]);
    std::size_t axis = 0;
    while (axis < 2 && pick > area[axis]) pick -= area[axis++];
    Vec3 p{uniform(-e[0], e[0]), uniform(-e[1], e[1]), uniform(-e[2], e[2])};
    p[axis] = uniform(0.0, 1.0) < 0.5 ? -e[axis] : e[axis];
    return p;
  }

  /// Closed cylinder along z between z0 and z1.
  Vec3 cylinder(double r, double z0, double z1, bool caps = true) {
    const double side = 2.0 * std::numbers::pi * r * (z1 - z0);
    const double cap = caps ? std::numbers::pi * r * r : 0.0;
    const double pick = uniform(0.0, side + 2.0 * cap);
    if (pick < side) {
      const double t = uniform(0.0, 2.0 * std::numbers::pi);
      return {r * std::cos(t), r * std::sin(t), uniform(z0, z1)};
    }
    return disk(r, pick < side + cap ? z0 : z1);
  }

  Vec3 disk(double r, double z) {
    const double rr = r * std::sqrt(uniform(0.0, 1.0));
    const double t = uniform(0.0, 2.0 * std::numbers::pi);
    return {rr * std::cos(t), rr * std::sin(t), z};
  }

  /// Cone with base radius r at z0 and apex at z1, optionally with its base disk.
  Vec3 cone(double r, double z0, double z1, bool base = true) {
    const double h = z1 - z0;
    const double lateral = std::numbers::pi * r * std::sqrt(r * r + h * h);
    const double disk_area = base ? std::numbers::pi * r * r : 0.0;
    if (uniform(0.0, lateral + disk_area) < lateral) {
      const double s = std::sqrt(uniform(0.0, 1.0));  // area grows linearly toward the base
      const double t = uniform(0.0, 2.0 * std::numbers::pi);
      return {s * r * std::cos(t), s * r * std::sin(t), z1 - s * h};
    }
    return disk(r, z0);
  }

  /// Torus around z with major radius R and minor radius r, centered at height z.
  Vec3 torus(double R, double r, double z = 0.0) {
    for (;;) {
      const double u = uniform(0.0, 2.0 * std::numbers::pi);
      const double v = uniform(0.0, 2.0 * std::numbers::pi);
      if (uniform(0.0, R + r) <= R + r * std::cos(v)) {
        const double ring = R + r * std::cos(v);
        return {ring * std::cos(u), ring * std::sin(u), z + r * std::sin(v)};
      }
    }
  }

 private:
  std::mt19937_64& rng_;
};

/// Points of one instance with part labels; shapes are centered at the origin.
inline void sample_family(ShapeFamily f, std::size_t n, std::mt19937_64& rng, std::vector<Vec3>& pts,
                          std::vector<std::int64_t>& parts) {
  SurfaceSampler s(rng);
  pts.resize(n);
  parts.assign(n, 0);
  switch (f) {
    case ShapeFamily::kSphere:
      for (auto& p : pts) p = s.sphere();
      break;
    case ShapeFamily::kCube: {
      const Vec3 e{s.uniform(0.6, 0.8), s.uniform(0.6, 0.8), s.uniform(0.6, 0.8)};
      for (auto& p : pts) p = s.box(e);
      break;
    }
    case ShapeFamily::kCylinder: {
      const double r = s.uniform(0.35, 0.5), h = s.uniform(0.8, 1.0);
      for (auto& p : pts) p = s.cylinder(r, -h, h);
      break;
    }
    case ShapeFamily::kTorus: {
      const double R = s.uniform(0.6, 0.8), r = s.uniform(0.15, 0.3);
      for (auto& p : pts) p = s.torus(R, r);
      break;
    }
    case ShapeFamily::kCone: {
      const double r = s.uniform(0.6, 0.8), h = s.uniform(0.7, 0.9);
      for (auto& p : pts) p = s.cone(r, -h, h);
      break;
    }
    case ShapeFamily::kPlaneCross: {
      const double a = s.uniform(0.7, 1.0), b = s.uniform(0.7, 1.0);
      for (auto& p : pts) {
        if (s.uniform(0.0, 1.0) < 0.5) {
          p = {0.0, s.uniform(-a, a), s.uniform(-b, b)};
        } else {
          p = {s.uniform(-a, a), 0.0, s.uniform(-b, b)};
        }
      }
      break;
    }
    case ShapeFamily::kCylinderCone: {
      // body (part 0) below a pointed cap (part 1)
      const double r = s.uniform(0.35, 0.5), zb = s.uniform(-1.0, -0.8), zm = s.uniform(0.0, 0.3), zt = s.uniform(0.8, 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (i % 2 == 0) {
          pts[i] = s.cylinder(r, zb, zm, false);
        } else {
          pts[i] = s.cone(r, zm, zt, false);
          parts[i] = 1;
        }
      }
      break;
    }
    case ShapeFamily::kRocket: {
      // body 0, nose 1, fins 2, ring 3 in fixed 2:1:1:1 proportions
      const double r = s.uniform(0.2, 0.3), zb = -1.0, zm = s.uniform(0.3, 0.5), zt = s.uniform(0.9, 1.1);
      const double fin = s.uniform(0.3, 0.45), fin_h = s.uniform(0.35, 0.5);
      const double ring_z = s.uniform(-0.2, 0.1), ring_r = s.uniform(0.06, 0.1);
      const std::size_t fins = 3 + static_cast<std::size_t>(s.uniform(0.0, 1.0) < 0.5);
      for (std::size_t i = 0; i < n; ++i) {
        switch (i % 5) {
          case 0:
          case 1:
            pts[i] = s.cylinder(r, zb, zm, false);
            break;
          case 2:
            pts[i] = s.cone(r, zm, zt, false);
            parts[i] = 1;
            break;
          case 3: {
            const double k = std::floor(s.uniform(0.0, static_cast<double>(fins)));
            const double t = 2.0 * std::numbers::pi * k / static_cast<double>(fins);
            const double rad = r + s.uniform(0.0, fin);
            const double z = zb + s.uniform(0.0, fin_h * (1.0 - (rad - r) / (fin + 1e-9) * 0.5));
            pts[i] = {rad * std::cos(t), rad * std::sin(t), z};
            parts[i] = 2;
            break;
          }
          default:
            pts[i] = s.torus(r + ring_r, ring_r, ring_z);
            parts[i] = 3;
        }
      }
      break;
    }
  }
}

}  // namespace detail

/// Deterministic clouds; instance i uses family families[i % F] and class
/// label i % F, so classes are balanced within one instance per class.
inline std::vector<ShapeSample> gen_shapes(const SyntheticSpec& spec, std::size_t count) {
  spec.validate();
  std::vector<ShapeSample> out;
  out.reserve(count);
  const std::size_t C = feature_channels(spec.features);
  std::vector<detail::Vec3> pts;
  std::vector<std::int64_t> parts;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(detail::mix_seed(spec.seed, i));
    ShapeSample s;
    s.class_label = static_cast<std::int64_t>(i % spec.families.size());
    s.family = spec.families[i % spec.families.size()];
    detail::sample_family(s.family, spec.points, rng, pts, parts);
    const double yaw = spec.rotate_z ? std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng) : 0.0;
    const double c = std::cos(yaw), sn = std::sin(yaw);
    std::normal_distribution<double> jitter(0.0, 1.0);
    std::vector<float> xyz(spec.points * 3), feats(spec.points * C);
    for (std::size_t p = 0; p < spec.points; ++p) {
      detail::Vec3 v = pts[p];
      if (spec.rotate_z) v = {c * v[0] - sn * v[1], sn * v[0] + c * v[1], v[2]};
      for (std::size_t d = 0; d < 3; ++d) {
        if (spec.noise > 0.0) v[d] += spec.noise * jitter(rng);
        xyz[p * 3 + d] = static_cast<float>(v[d]);
      }
      if (spec.features == FeatureMode::kXyz) {
        for (std::size_t d = 0; d < 3; ++d) feats[p * 3 + d] = xyz[p * 3 + d];
      } else {
        feats[p] = 1.0f;
      }
    }
    s.cloud.coords = Tensor<float>({spec.points, 3}, std::move(xyz));
    s.cloud.feats = Tensor<float>({spec.points, C}, std::move(feats));
    s.cloud.labels = parts;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- cdpc text files

/// Text cloud format: header `cdpc <N> <C> <has_labels>`, then one line per
/// point `x y z f1 .. fC [label]`.
inline void write_cloud(const PointCloud<float>& cloud, const std::string& path) {
  cloud.validate();
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  const std::size_t n = cloud.size(), C = cloud.channels();
  os << "cdpc " << n << ' ' << C << ' ' << (cloud.has_labels() ? 1 : 0) << '\n';
  os.precision(9);  // float32 round-trips through 9 significant digits
  for (std::size_t i = 0; i < n; ++i) {
    os << cloud.coords[i * 3] << ' ' << cloud.coords[i * 3 + 1] << ' ' << cloud.coords[i * 3 + 2];
    for (std::size_t c = 0; c < C; ++c) os << ' ' << cloud.feats[i * C + c];
    if (cloud.has_labels()) os << ' ' << cloud.labels[i];
    os << '\n';
  }
  if (!os) throw Error("write failed for '" + path + "'");
}

struct ReadOptions {
  bool require_labels = false;
  std::int64_t num_classes = -1;  // validate labels against [0, num_classes) when >= 0
};

inline PointCloud<float> read_cloud(const std::string& path, const ReadOptions& opt = {}) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path + "'");
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line)) throw ParseError(path + ": empty file", line_no);
  std::istringstream head(line);
  std::string magic;
  long long n = -1, C = -1, has_labels = -1;
  if (!(head >> magic >> n >> C >> has_labels) || magic != "cdpc" || C < 0 || (has_labels != 0 && has_labels != 1)) {
    throw ParseError(path + ": expected header 'cdpc <N> <C> <0|1>'", line_no);
  }
  std::string extra;
  if (head >> extra) throw ParseError(path + ": trailing text in header", line_no);
  if (n <= 0) throw ValidationError(path + ": cloud must contain at least one point (N=" + std::to_string(n) + ")");
  if (opt.require_labels && has_labels == 0) throw ParseError(path + ": labels requested but file has no label column", line_no);
  const std::size_t N = static_cast<std::size_t>(n), CC = static_cast<std::size_t>(C);
  std::vector<float> xyz(N * 3), feats(N * CC);
  std::vector<std::int64_t> labels;
  if (has_labels) labels.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    ++line_no;
    if (!std::getline(is, line)) throw ParseError(path + ": expected " + std::to_string(N) + " point lines", line_no);
    std::istringstream row(line);
    for (std::size_t d = 0; d < 3; ++d) {
      if (!(row >> xyz[i * 3 + d])) throw ParseError(path + ": malformed coordinate", line_no);
    }
    for (std::size_t c = 0; c < CC; ++c) {
      if (!(row >> feats[i * CC + c])) throw ParseError(path + ": malformed feature", line_no);
    }
    if (has_labels) {
      long long l = 0;
      if (!(row >> l)) throw ParseError(path + ": missing label", line_no);
      if (l < 0 || (opt.num_classes >= 0 && l >= opt.num_classes)) {
        throw ValidationError(path + ": label " + std::to_string(l) + " out of range (line " + std::to_string(line_no) + ")");
      }
      labels[i] = l;
    }
    if (row >> extra) throw ParseError(path + ": unexpected extra column", line_no);
  }
  PointCloud<float> cloud;
  cloud.coords = Tensor<float>({N, 3}, std::move(xyz));
  cloud.feats = Tensor<float>({N, CC}, std::move(feats));
  cloud.labels = std::move(labels);
  return cloud;
}

// ---------------------------------------------------------------- resampling and augmentation

/// Exactly n points: FPS subset when N >= n, otherwise all points plus
/// (n - N) seeded draws with replacement.
template <Scalar T>
PointCloud<T> resample_to_n(const PointCloud<T>& cloud, std::size_t n, std::uint64_t seed = 0) {
  cloud.validate();
  if (n < 1) throw ContractError("resample_to_n: n must be >= 1");
  const std::size_t N = cloud.size();
  std::vector<std::int64_t> idx;
  if (N >= n) {
    idx = farthest_point_sample(cloud.coords, n);
  } else {
    idx.resize(N);
    for (std::size_t i = 0; i < N; ++i) idx[i] = static_cast<std::int64_t>(i);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(N) - 1);
    while (idx.size() < n) idx.push_back(pick(rng));
  }
  PointCloud<T> out;
  out.coords = select_rows(cloud.coords, idx);
  out.feats = select_rows(cloud.feats, idx);
  if (cloud.has_labels()) {
    for (std::int64_t i : idx) out.labels.push_back(cloud.labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

enum class RotationAxis { kZ, kAny };

struct AugmentConfig {
  double jitter_sigma = 0.0;
  double jitter_clip = 0.0;  // 0 disables clipping
  double scale_lo = 1.0;
  double scale_hi = 1.0;
  RotationAxis rotation_axis = RotationAxis::kZ;
  double rotation_max_angle = 0.0;  // radians; angle ~ U[-max, max]
  double shift_range = 0.0;         // per-axis shift ~ U[-range, range]
  double color_drop_prob = 0.0;
  /// Leading feature channels that mirror xyz; they follow the geometric
  /// transforms and are never dropped.
  std::size_t xyz_feature_channels = 0;

  void validate() const {
    if (!(scale_lo > 0.0) || scale_lo > scale_hi) throw ConfigError("augment: need 0 < scale_lo <= scale_hi");
    if (jitter_sigma < 0.0 || jitter_clip < 0.0 || shift_range < 0.0 || rotation_max_angle < 0.0) {
      throw ConfigError("augment: sigma, clip, shift and angle must be non-negative");
    }
    if (color_drop_prob < 0.0 || color_drop_prob > 1.0) throw ConfigError("augment: color_drop_prob must lie in [0, 1]");
    if (xyz_feature_channels != 0 && xyz_feature_channels != 3) throw ConfigError("augment: xyz_feature_channels must be 0 or 3");
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& a) {
  j = nlohmann::json{{"jitter_sigma", a.jitter_sigma},
                     {"jitter_clip", a.jitter_clip},
                     {"scale_lo", a.scale_lo},
                     {"scale_hi", a.scale_hi},
                     {"rotation_axis", a.rotation_axis == RotationAxis::kZ ? "z" : "any"},
                     {"rotation_max_angle", a.rotation_max_angle},
                     {"shift_range", a.shift_range},
                     {"color_drop_prob", a.color_drop_prob},
                     {"xyz_feature_channels", a.xyz_feature_channels}};
}

inline void merge_augment_config(AugmentConfig& a, const nlohmann::json& j) {
  static const std::set<std::string> known = {"jitter_sigma", "jitter_clip", "scale_lo", "scale_hi", "rotation_axis",
                                              "rotation_max_angle", "shift_range", "color_drop_prob", "xyz_feature_channels"};
  if (!j.is_object()) throw ConfigError("augment config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown augment config key '" + key + "'");
  }
  try {
    if (j.contains("jitter_sigma")) a.jitter_sigma = j.at("jitter_sigma").get<double>();
    if (j.contains("jitter_clip")) a.jitter_clip = j.at("jitter_clip").get<double>();
    if (j.contains("scale_lo")) a.scale_lo = j.at("scale_lo").get<double>();
    if (j.contains("scale_hi")) a.scale_hi = j.at("scale_hi").get<double>();
    if (j.contains("rotation_axis")) {
      const auto s = j.at("rotation_axis").get<std::string>();
      if (s != "z" && s != "any") throw ConfigError("augment: rotation_axis must be 'z' or 'any'");
      a.rotation_axis = s == "z" ? RotationAxis::kZ : RotationAxis::kAny;
    }
    if (j.contains("rotation_max_angle")) a.rotation_max_angle = j.at("rotation_max_angle").get<double>();
    if (j.contains("shift_range")) a.shift_range = j.at("shift_range").get<double>();
    if (j.contains("color_drop_prob")) a.color_drop_prob = j.at("color_drop_prob").get<double>();
    if (j.contains("xyz_feature_channels")) a.xyz_feature_channels = j.at("xyz_feature_channels").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("augment config: ") + e.what());
  }
  a.validate();
}

/// Rodrigues rotation about a unit axis, applied to coords (and mirrored xyz features).
template <Scalar T>
void rotate_cloud(PointCloud<T>& cloud, const std::array<double, 3>& axis, double angle, std::size_t xyz_channels = 0) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  const double R[3][3] = {{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
                          {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
                          {t * x * z - s * y, t * y * z + s * x, t * z * z + c}};
  const std::size_t C = cloud.channels();
  auto apply = [&](T* p) {
    const double v[3] = {p[0], p[1], p[2]};
    for (std::size_t r = 0; r < 3; ++r) p[r] = static_cast<T>(R[r][0] * v[0] + R[r][1] * v[1] + R[r][2] * v[2]);
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    apply(cloud.coords.ptr() + i * 3);
    if (xyz_channels == 3) apply(cloud.feats.ptr() + i * C);
  }
}

/// rotate -> scale -> shift -> jitter (clipped) -> color drop. Labels and N
/// are untouched. Disabled stages draw no random numbers.
template <Scalar T>
PointCloud<T> augment(const PointCloud<T>& cloud, const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  PointCloud<T> out;
  out.coords = cloud.coords.detach();
  out.feats = cloud.feats.detach();
  out.labels = cloud.labels;
  const std::size_t n = out.size(), C = out.channels(), X = std::min(cfg.xyz_feature_channels, C);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (cfg.rotation_max_angle > 0.0) {
    std::array<double, 3> axis{0.0, 0.0, 1.0};
    if (cfg.rotation_axis == RotationAxis::kAny) {
      std::normal_distribution<double> g(0.0, 1.0);
      double norm = 0.0;
      while (norm < 1e-9) {
        axis = {g(rng), g(rng), g(rng)};
        norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
      }
      for (auto& a : axis) a /= norm;
    }
    const double angle = cfg.rotation_max_angle * (2.0 * unit(rng) - 1.0);
    rotate_cloud(out, axis, angle, X);
  }
  auto each_xyz = [&](auto&& fn) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < 3; ++d) {
        T& p = out.coords.ptr()[i * 3 + d];
        p = fn(p, d);
        if (X == 3) out.feats.ptr()[i * C + d] = p;
      }
    }
  };
  if (cfg.scale_lo != 1.0 || cfg.scale_hi != 1.0) {
    const double s = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : cfg.scale_lo + (cfg.scale_hi - cfg.scale_lo) * unit(rng);
    each_xyz([s](T p, std::size_t) { return static_cast<T>(p * s); });
  }
  if (cfg.shift_range > 0.0) {
    std::array<double, 3> shift{};
    for (auto& v : shift) v = cfg.shift_range * (2.0 * unit(rng) - 1.0);
    each_xyz([&shift](T p, std::size_t d) { return static_cast<T>(p + shift[d]); });
  }
  if (cfg.jitter_sigma > 0.0) {
    std::normal_distribution<double> g(0.0, cfg.jitter_sigma);
    each_xyz([&](T p, std::size_t) {
      double j = g(rng);
      if (cfg.jitter_clip > 0.0) j = std::clamp(j, -cfg.jitter_clip, cfg.jitter_clip);
      return static_cast<T>(p + j);
    });
  }
  if (cfg.color_drop_prob > 0.0 && C > X && unit(rng) < cfg.color_drop_prob) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = X; c < C; ++c) out.feats.ptr()[i * C + c] = T(0);
    }
  }
  return out;
}

// ---------------------------------------------------------------- datasets

/// One dataset item. `label` is the class id for classification and -1 for
/// segmentation, where per-point labels live in the cloud.
struct Sample {
  PointCloud<float> cloud;
  std::int64_t label = -1;
  std::string file;
};

struct Dataset {
  Task task = Task::kClassification;
  std::size_t num_classes = 0;
  std::size_t in_channels = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

struct GenDataOptions {
  Task task = Task::kClassification;
  std::size_t classes = 8;
  std::size_t per_class = 32;
  std::size_t val_per_class = 0;
  std::size_t points = 256;
  double noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 1) throw ConfigError("gen-data: --classes must be >= 1");
    if (per_class < 1) throw ConfigError("gen-data: --per-class must be >= 1");
    if (points < 8) throw ConfigError("gen-data: --points must be >= 8");
    if (!(noise >= 0.0)) throw ConfigError("gen-data: --noise must be >= 0");
    if (task == Task::kClassification && classes > all_families().size()) {
      throw ConfigError("gen-data: at most " + std::to_string(all_families().size()) + " shape classes are available");
    }
    if (task == Task::kSegmentation && classes != 2 && classes != 4) {
      throw ConfigError("gen-data: part segmentation supports 2 (cylinder-cone) or 4 (rocket) part classes");
    }
  }
};

/// Builds train/val splits in memory. Classification draws one family per
/// class; segmentation uses a composite with part labels. Both carry xyz
/// features. Validation uses an independent seed stream.
inline Dataset make_synthetic_dataset(const GenDataOptions& o) {
  o.validate();
  Dataset ds;
  ds.task = o.task;
  ds.num_classes = o.classes;
  SyntheticSpec spec;
  spec.points = o.points;
  spec.noise = o.noise;
  if (o.task == Task::kClassification) {
    spec.families.assign(all_families().begin(), all_families().begin() + static_cast<std::ptrdiff_t>(o.classes));
    spec.features = FeatureMode::kXyz;
    for (ShapeFamily f : spec.families) ds.class_names.emplace_back(to_string(f));
  } else {
    spec.families = {o.classes == 2 ? ShapeFamily::kCylinderCone : ShapeFamily::kRocket};
    spec.features = FeatureMode::kXyz;
    if (o.classes == 2) {
      ds.class_names = {"body", "cap"};
    } else {
      ds.class_names = {"body", "nose", "fin", "ring"};
    }
  }
  ds.in_channels = feature_channels(spec.features);
  const std::size_t per_split_classes = o.task == Task::kClassification ? o.classes : 1;
  auto build = [&](std::uint64_t seed, std::size_t per_class, std::vector<Sample>& dst, const char* split) {
    spec.seed = seed;
    const std::size_t count = per_class * (o.task == Task::kClassification ? per_split_classes : o.classes);
    std::size_t i = 0;
    for (auto& s : gen_shapes(spec, count)) {
      Sample item;
      item.cloud = std::move(s.cloud);
      if (o.task == Task::kClassification) {
        item.label = s.class_label;
        item.cloud.labels.clear();
      }
      char name[32];
      std::snprintf(name, sizeof name, "%s/%05zu.cdpc", split, i++);
      item.file = name;
      dst.push_back(std::move(item));
    }
  };
  build(o.seed, o.per_class, ds.train, "train");
  if (o.val_per_class > 0) build(detail::mix_seed(o.seed, 0xC0FFEE), o.val_per_class, ds.val, "val");
  return ds;
}

/// Writes `train/`, `val/` and `manifest.json`. A non-empty target requires
/// `force`, which clears it first.
inline void write_dataset(const Dataset& ds, const std::string& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ContractError("output directory '" + dir + "' is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(fs::path(dir) / "train");
  fs::create_directories(fs::path(dir) / "val");
  nlohmann::json manifest{{"format", "cdpc"},
                          {"task", to_string(ds.task)},
                          {"num_classes", ds.num_classes},
                          {"in_channels", ds.in_channels},
                          {"class_names", ds.class_names},
                          {"train", nlohmann::json::array()},
                          {"val", nlohmann::json::array()}};
  auto emit = [&](const std::vector<Sample>& items, const char* key) {
    for (const auto& s : items) {
      write_cloud(s.cloud, (fs::path(dir) / s.file).string());
      nlohmann::json e{{"file", s.file}};
      if (ds.task == Task::kClassification) e["label"] = s.label;
      manifest[key].push_back(e);
    }
  };
  emit(ds.train, "train");
  emit(ds.val, "val");
  std::ofstream os(fs::path(dir) / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw Error("failed to write manifest in '" + dir + "'");
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw ConfigError("dataset '" + dir + "' has no manifest.json");
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(mpath.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.task = task_from_string(m.at("task").get<std::string>());
    ds.num_classes = m.at("num_classes").get<std::size_t>();
    ds.in_channels = m.at("in_channels").get<std::size_t>();
    ds.class_names = m.value("class_names", std::vector<std::string>{});
    ReadOptions ro;
    ro.num_classes = static_cast<std::int64_t>(ds.num_classes);
    ro.require_labels = ds.task == Task::kSegmentation;
    for (const char* key : {"train", "val"}) {
      auto& dst = std::string(key) == "train" ? ds.train : ds.val;
      for (const auto& e : m.value(key, nlohmann::json::array())) {
        Sample s;
        s.file = e.at("file").get<std::string>();
        s.cloud = read_cloud((fs::path(dir) / s.file).string(), ro);
        if (ds.task == Task::kClassification) {
          s.label = e.at("label").get<std::int64_t>();
          if (s.label < 0 || s.label >= static_cast<std::int64_t>(ds.num_classes)) {
            throw ValidationError(s.file + ": class label " + std::to_string(s.label) + " out of range");
          }
        }
        if (s.cloud.channels() != ds.in_channels) {
          throw ValidationError(s.file + ": expected " + std::to_string(ds.in_channels) + " feature channels");
        }
        dst.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(mpath.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace cdformer
