#include "aios/body_model.hpp"

#include "aios/binary_io.hpp"
#include "aios/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace aios::body {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr char kModelMagic[] = "AIOSBM01";

Mat3 skew(const Vec3& v) {
  Mat3 k;
  k << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return k;
}

}  // namespace

// ------------------------------------------------------------- tables

KeypointRange keypoint_range(Part part) {
  switch (part) {
    case Part::kBody:
      return {0, kNumBodyKeypoints};
    case Part::kLHand:
      return {kNumBodyKeypoints, kNumHandKeypoints};
    case Part::kRHand:
      return {kNumBodyKeypoints + kNumHandKeypoints, kNumHandKeypoints};
    case Part::kFace:
      return {kNumBodyKeypoints + 2 * kNumHandKeypoints, kNumFaceKeypoints};
  }
  return {0, 0};
}

const std::array<int, kNumBodyKeypoints>& body_keypoint_joints() {
  static const std::array<int, kNumBodyKeypoints> joints = {0, 1, 2, 4, 5, 7, 8, 10, 11, 12, 15, 16, 17, 18, 19, 20, 21};
  return joints;
}

const std::array<int, kNumHandKeypoints>& hand_keypoint_joints(bool left) {
  static const std::array<int, kNumHandKeypoints> l = {24, 27, 30, 33, 36};
  static const std::array<int, kNumHandKeypoints> r = {39, 42, 45, 48, 51};
  return left ? l : r;
}

const std::array<int, kNumJoints>& joint_mirror() {
  static const std::array<int, kNumJoints> m = [] {
    std::array<int, kNumJoints> a{};
    for (int j = 0; j < kNumJoints; ++j) a[j] = j;
    const int pairs[][2] = {{1, 2}, {4, 5}, {7, 8}, {10, 11}, {13, 14}, {16, 17}, {18, 19}, {20, 21}};
    for (const auto& p : pairs) {
      a[p[0]] = p[1];
      a[p[1]] = p[0];
    }
    for (int i = 0; i < kNumHandJoints; ++i) {
      a[kLHandStart + i] = kRHandStart + i;
      a[kRHandStart + i] = kLHandStart + i;
    }
    return a;
  }();
  return m;
}

const std::array<int, kNumKeypoints>& keypoint_mirror() {
  static const std::array<int, kNumKeypoints> m = [] {
    std::array<int, kNumKeypoints> a{};
    for (int k = 0; k < kNumKeypoints; ++k) a[k] = k;
    const int pairs[][2] = {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {11, 12}, {13, 14}, {15, 16}, {27, 28}, {30, 31}};
    for (const auto& p : pairs) {
      a[p[0]] = p[1];
      a[p[1]] = p[0];
    }
    for (int i = 0; i < kNumHandKeypoints; ++i) {
      a[17 + i] = 22 + i;
      a[22 + i] = 17 + i;
    }
    return a;
  }();
  return m;
}

const std::array<int, kNumJoints>& default_parents() {
  static const std::array<int, kNumJoints> p = [] {
    std::array<int, kNumJoints> a{};
    const int body[kNumBodyJoints] = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
    for (int j = 0; j < kNumBodyJoints; ++j) a[j] = body[j];
    for (int side = 0; side < 2; ++side) {
      const int start = side == 0 ? kLHandStart : kRHandStart;
      const int wrist = side == 0 ? 20 : 21;
      for (int f = 0; f < 5; ++f) {
        for (int s = 0; s < 3; ++s) {
          const int j = start + 3 * f + s;
          a[j] = s == 0 ? wrist : j - 1;
        }
      }
    }
    a[kJawJoint] = 15;
    return a;
  }();
  return p;
}

std::vector<int> part_joints(Part part) {
  std::vector<int> out;
  switch (part) {
    case Part::kBody:
      for (int j = 0; j < kNumBodyJoints; ++j) out.push_back(j);
      break;
    case Part::kLHand:
      for (int j = 0; j < kNumHandJoints; ++j) out.push_back(kLHandStart + j);
      break;
    case Part::kRHand:
      for (int j = 0; j < kNumHandJoints; ++j) out.push_back(kRHandStart + j);
      break;
    case Part::kFace:
      out.push_back(kJawJoint);
      break;
  }
  return out;
}

// ------------------------------------------------------------- ParamSet

Vec ParamSet::to_vector() const {
  Vec v(kNumParams);
  v.head<kNumPose>() = Eigen::Map<const Eigen::Matrix<double, kNumPose, 1>>(pose.data());
  v.segment<kNumShape>(kNumPose) = beta;
  v.segment<kNumExpr>(kNumPose + kNumShape) = psi;
  return v;
}

ParamSet ParamSet::from_vector(const Vec& v) {
  if (v.size() != kNumParams) throw InvalidParameterError("ParamSet::from_vector: expected 179 entries");
  ParamSet p;
  Eigen::Map<Eigen::Matrix<double, kNumPose, 1>>(p.pose.data()) = v.head<kNumPose>();
  p.beta = v.segment<kNumShape>(kNumPose);
  p.psi = v.segment<kNumExpr>(kNumPose + kNumShape);
  p.validate();
  p.wrap();
  return p;
}

void ParamSet::validate() const {
  if (!pose.allFinite() || !beta.allFinite() || !psi.allFinite()) {
    throw InvalidParameterError("ParamSet contains non-finite entries");
  }
}

void ParamSet::wrap() {
  for (int j = 0; j < kNumJoints; ++j) {
    const double n = pose.row(j).norm();
    if (n >= kTwoPi) {
      const double wrapped = std::fmod(n, kTwoPi);
      pose.row(j) *= wrapped / n;
    }
  }
}

ParamSet ParamSet::mirrored() const {
  ParamSet m;
  const auto& mirror = joint_mirror();
  for (int j = 0; j < kNumJoints; ++j) {
    const auto src = pose.row(mirror[j]);
    m.pose(j, 0) = src(0);
    m.pose(j, 1) = -src(1);
    m.pose(j, 2) = -src(2);
  }
  m.beta = beta;
  m.psi = psi;
  return m;
}

// ------------------------------------------------------------- Rodrigues

namespace {

// Coefficients of R = I + a K + b K^2 and their derivatives divided by theta.
struct RodCoeffs {
  double a, b, da, db;
};

RodCoeffs rod_coeffs(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-2) {
    const double t4 = t2 * t2;
    return {1.0 - t2 / 6.0 + t4 / 120.0, 0.5 - t2 / 24.0 + t4 / 720.0, -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0};
  }
  const double s = std::sin(theta);
  const double c = std::cos(theta);
  return {s / theta, (1.0 - c) / t2, (theta * c - s) / (t2 * theta), (theta * s - 2.0 * (1.0 - c)) / (t2 * t2)};
}

}  // namespace

Mat3 rodrigues(const Vec3& v) {
  if (!v.allFinite()) throw InvalidParameterError("rodrigues: non-finite axis-angle");
  const RodCoeffs c = rod_coeffs(v.norm());
  const Mat3 k = skew(v);
  return Mat3::Identity() + c.a * k + c.b * (k * k);
}

std::array<Mat3, 3> rodrigues_jacobian(const Vec3& v) {
  if (!v.allFinite()) throw InvalidParameterError("rodrigues: non-finite axis-angle");
  const RodCoeffs c = rod_coeffs(v.norm());
  const Mat3 k = skew(v);
  const Mat3 k2 = k * k;
  std::array<Mat3, 3> out;
  for (int i = 0; i < 3; ++i) {
    const Mat3 e = skew(Vec3::Unit(i));
    out[i] = c.da * v(i) * k + c.a * e + c.db * v(i) * k2 + c.b * (e * k + k * e);
  }
  return out;
}

// ------------------------------------------------------------- BodyModel

void BodyModel::validate() const {
  const int nv = num_vertices;
  const int nj = num_joints;
  if (nj != kNumJoints) throw InvalidParameterError("body model must have 53 skeleton joints");
  if (template_vertices.rows() != nv || template_vertices.cols() != 3) throw InvalidParameterError("template_vertices shape");
  if (shape_blendshapes.rows() != 3 * nv || shape_blendshapes.cols() != kNumShape) throw InvalidParameterError("shape_blendshapes shape");
  if (expression_blendshapes.rows() != 3 * nv || expression_blendshapes.cols() != kNumExpr) {
    throw InvalidParameterError("expression_blendshapes shape");
  }
  if (pose_blendshapes.rows() != 3 * nv || pose_blendshapes.cols() != kNumPoseFeatures) throw InvalidParameterError("pose_blendshapes shape");
  if (joint_regressor.rows() != nj || joint_regressor.cols() != nv) throw InvalidParameterError("joint_regressor shape");
  if (skinning_weights.rows() != nv || skinning_weights.cols() != nj) throw InvalidParameterError("skinning_weights shape");
  if (static_cast<int>(parents.size()) != nj) throw InvalidParameterError("kinematic_parents size");
  if (parents[0] != -1) throw InvalidParameterError("kinematic_parents: root must be -1");
  for (int j = 1; j < nj; ++j) {
    if (parents[j] < 0 || parents[j] >= j) throw InvalidParameterError("kinematic_parents: parent index must precede child");
  }
  if (!template_vertices.allFinite() || !shape_blendshapes.allFinite() || !expression_blendshapes.allFinite() ||
      !pose_blendshapes.allFinite() || !joint_regressor.allFinite() || !skinning_weights.allFinite()) {
    throw InvalidParameterError("body model contains non-finite values");
  }
  for (int i = 0; i < nv; ++i) {
    if (skinning_weights.row(i).minCoeff() < 0.0 || std::abs(skinning_weights.row(i).sum() - 1.0) > 1e-6) {
      throw InvalidParameterError("skinning_weights: row " + std::to_string(i) + " is not nonnegative summing to 1");
    }
  }
  for (int j = 0; j < nj; ++j) {
    if (joint_regressor.row(j).minCoeff() < 0.0 || std::abs(joint_regressor.row(j).sum() - 1.0) > 1e-6) {
      throw InvalidParameterError("joint_regressor: row " + std::to_string(j) + " is not nonnegative summing to 1");
    }
  }
  for (int p = 0; p < kNumParts; ++p) {
    for (int v : part_vertices[p]) {
      if (v < 0 || v >= nv) throw InvalidParameterError("part_vertex_masks: index out of range");
    }
  }
  if (static_cast<int>(part_vertices[static_cast<int>(Part::kFace)].size()) < kNumFaceKeypoints) {
    throw InvalidParameterError("face part needs at least 6 vertices for face keypoints");
  }
}

void BodyModel::finalize() {
  keypoint_regressor = Mat::Zero(kNumKeypoints, num_vertices);
  int k = 0;
  for (int j : body_keypoint_joints()) keypoint_regressor.row(k++) = joint_regressor.row(j);
  for (int j : hand_keypoint_joints(true)) keypoint_regressor.row(k++) = joint_regressor.row(j);
  for (int j : hand_keypoint_joints(false)) keypoint_regressor.row(k++) = joint_regressor.row(j);
  const auto& face = part_vertices[static_cast<int>(Part::kFace)];
  for (int i = 0; i < kNumFaceKeypoints; ++i) keypoint_regressor(k++, face[i]) = 1.0;
  has_pose_blendshapes = pose_blendshapes.size() > 0 && pose_blendshapes.cwiseAbs().maxCoeff() > 0.0;
}

void BodyModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  bin::write_magic(os, std::string_view(kModelMagic, 8));
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(num_vertices));
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(num_joints));
  bin::write_f64(os, template_vertices);
  bin::write_f64(os, shape_blendshapes);
  bin::write_f64(os, expression_blendshapes);
  bin::write_f64(os, pose_blendshapes);
  Mat par(1, num_joints);
  for (int j = 0; j < num_joints; ++j) par(0, j) = parents[j];
  bin::write_f64(os, par);
  bin::write_f64(os, joint_regressor);
  bin::write_f64(os, skinning_weights);
  Mat masks = Mat::Zero(num_vertices, kNumParts);
  for (int p = 0; p < kNumParts; ++p) {
    for (int v : part_vertices[p]) masks(v, p) = 1.0;
  }
  bin::write_f64(os, masks);
  if (!os) throw IoError("write failed: " + path.string());
}

BodyModel BodyModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  bin::expect_magic(is, std::string_view(kModelMagic, 8));
  BodyModel m;
  m.num_vertices = static_cast<int>(bin::read<std::uint32_t>(is));
  m.num_joints = static_cast<int>(bin::read<std::uint32_t>(is));
  if (m.num_joints != kNumJoints) throw IoError("body model file has unsupported joint count");
  const int nv = m.num_vertices;
  m.template_vertices.resize(nv, 3);
  m.shape_blendshapes.resize(3 * nv, kNumShape);
  m.expression_blendshapes.resize(3 * nv, kNumExpr);
  m.pose_blendshapes.resize(3 * nv, kNumPoseFeatures);
  m.joint_regressor.resize(m.num_joints, nv);
  m.skinning_weights.resize(nv, m.num_joints);
  bin::read_f64(is, m.template_vertices);
  bin::read_f64(is, m.shape_blendshapes);
  bin::read_f64(is, m.expression_blendshapes);
  bin::read_f64(is, m.pose_blendshapes);
  Mat par(1, m.num_joints);
  bin::read_f64(is, par);
  m.parents.resize(m.num_joints);
  for (int j = 0; j < m.num_joints; ++j) m.parents[j] = static_cast<int>(par(0, j));
  bin::read_f64(is, m.joint_regressor);
  bin::read_f64(is, m.skinning_weights);
  Mat masks(nv, kNumParts);
  bin::read_f64(is, masks);
  for (int p = 0; p < kNumParts; ++p) {
    for (int v = 0; v < nv; ++v) {
      if (masks(v, p) != 0.0) m.part_vertices[p].push_back(v);
    }
  }
  m.validate();
  m.finalize();
  return m;
}

// ------------------------------------------------------------- procedural template

namespace {

struct Builder {
  std::vector<Vec3> pos;
  std::vector<Vec3> radial;                           // offset from the local body axis
  std::vector<std::vector<std::pair<int, double>>> w;  // skinning (joint, weight)
  std::vector<int> mirror;
  std::vector<int> part;

  int add(const Vec3& p, const Vec3& r, std::vector<std::pair<int, double>> weights, int prt) {
    pos.push_back(p);
    radial.push_back(r);
    w.push_back(std::move(weights));
    mirror.push_back(-1);
    part.push_back(prt);
    return static_cast<int>(pos.size()) - 1;
  }

  // Adds p and its mirror image (or just p if it lies on the symmetry plane).
  void add_pair(const Vec3& p, const Vec3& r, const std::vector<std::pair<int, double>>& weights, int prt) {
    const int a = add(p, r, weights, prt);
    std::vector<std::pair<int, double>> mw;
    for (auto [j, x] : weights) mw.emplace_back(joint_mirror()[j], x);
    const int b = add(Vec3(-p.x(), p.y(), p.z()), Vec3(-r.x(), r.y(), r.z()), mw, prt);
    mirror[a] = b;
    mirror[b] = a;
  }
};

std::array<Vec3, kNumJoints> rest_joint_positions() {
  std::array<Vec3, kNumJoints> j{};
  auto lr = [&](int l, int r, Vec3 p) {
    j[l] = p;
    j[r] = Vec3(-p.x(), p.y(), p.z());
  };
  j[0] = Vec3(0, 0, 0);
  lr(1, 2, Vec3(0.09, 0.08, 0.0));
  j[3] = Vec3(0, -0.11, 0);
  lr(4, 5, Vec3(0.10, 0.47, 0.0));
  j[6] = Vec3(0, -0.24, 0);
  lr(7, 8, Vec3(0.10, 0.86, 0.0));
  j[9] = Vec3(0, -0.32, 0);
  lr(10, 11, Vec3(0.11, 0.91, -0.12));
  j[12] = Vec3(0, -0.52, 0);
  lr(13, 14, Vec3(0.07, -0.46, 0.0));
  j[15] = Vec3(0, -0.62, 0);
  lr(16, 17, Vec3(0.17, -0.47, 0.0));
  lr(18, 19, Vec3(0.43, -0.47, 0.0));
  lr(20, 21, Vec3(0.68, -0.47, 0.0));
  for (int f = 0; f < 5; ++f) {
    Vec3 base;
    Vec3 dir;
    if (f == 0) {
      base = j[20] + Vec3(0.03, 0.015, -0.035);
      dir = Vec3(0.6, 0.2, -0.77).normalized();
    } else {
      base = j[20] + Vec3(0.08, 0.0, (f - 2.5) * 0.018);
      dir = Vec3(1.0, 0.0, 0.0);
    }
    for (int s = 0; s < 3; ++s) {
      lr(kLHandStart + 3 * f + s, kRHandStart + 3 * f + s, base + dir * (0.025 * s));
    }
  }
  j[kJawJoint] = Vec3(0, -0.60, -0.04);
  return j;
}

double joint_radius(int j) {
  if (j >= kLHandStart && j < kJawJoint) return 0.008;
  switch (j) {
    case 0: return 0.12;
    case 1: case 2: return 0.08;
    case 3: case 6: case 9: return 0.12;
    case 4: case 5: return 0.06;
    case 7: case 8: return 0.045;
    case 10: case 11: return 0.04;
    case 12: return 0.05;
    case 13: case 14: return 0.05;
    case 15: return 0.09;
    case 16: case 17: return 0.055;
    case 18: case 19: return 0.045;
    case 20: case 21: return 0.035;
    case kJawJoint: return 0.03;
    default: return 0.05;
  }
}

// Two unit vectors orthogonal to dir, with u = +x whenever dir has no x component.
void orthonormal_frame(const Vec3& dir, Vec3& u, Vec3& w) {
  const Vec3 d = dir.normalized();
  if (std::abs(d.x()) < 1e-12) {
    u = Vec3::UnitX();
  } else {
    const Vec3 helper = std::abs(d.y()) < 0.9 ? Vec3::UnitY() : Vec3::UnitZ();
    u = (helper - helper.dot(d) * d).normalized();
  }
  w = d.cross(u).normalized();
}

int part_of_joint(int j) {
  if (j >= kLHandStart && j < kRHandStart) return static_cast<int>(Part::kLHand);
  if (j >= kRHandStart && j < kJawJoint) return static_cast<int>(Part::kRHand);
  return static_cast<int>(Part::kBody);
}

double frac(double x) { return x - std::floor(x); }

}  // namespace

BodyModel make_procedural_model(const TemplateOptions& options) {
  constexpr int kRingVerts = 4;
  constexpr int kFaceVerts = 40;
  const int min_vertices = kNumJoints * kRingVerts + kFaceVerts;
  if (options.num_vertices < min_vertices) {
    throw InvalidParameterError("procedural template needs at least " + std::to_string(min_vertices) + " vertices");
  }
  const auto joints = rest_joint_positions();
  const auto& parents = default_parents();
  const auto& jm = joint_mirror();

  std::vector<int> first_child(kNumJoints, -1);
  for (int j = kNumJoints - 1; j >= 1; --j) first_child[parents[j]] = j;

  Builder b;
  std::vector<int> ring_start(kNumJoints, -1);

  // Joint rings: the mean of each ring is exactly its joint.
  for (int j = 0; j < kNumJoints; ++j) {
    const int m = jm[j];
    const double r = joint_radius(j);
    std::vector<std::pair<int, double>> wts;
    if (parents[j] < 0) {
      wts = {{j, 1.0}};
    } else {
      wts = {{j, 0.5}, {parents[j], 0.5}};
    }
    const int prt = part_of_joint(j);
    if (m < j) {
      // Right-side joint: mirror of an already built left ring.
      ring_start[j] = static_cast<int>(b.pos.size());
      for (int k = 0; k < kRingVerts; ++k) {
        const int src = ring_start[m] + k;
        const Vec3& p = b.pos[src];
        const Vec3& rr = b.radial[src];
        std::vector<std::pair<int, double>> mw;
        for (auto [jj, x] : b.w[src]) mw.emplace_back(jm[jj], x);
        const int idx = b.add(Vec3(-p.x(), p.y(), p.z()), Vec3(-rr.x(), rr.y(), rr.z()), mw, prt);
        b.mirror[idx] = src;
        b.mirror[src] = idx;
      }
      continue;
    }
    Vec3 dir;
    if (j == 0) {
      dir = Vec3(0, -1, 0);
    } else if (first_child[j] >= 0) {
      dir = joints[first_child[j]] - joints[j];
    } else {
      dir = joints[j] - joints[parents[j]];
    }
    Vec3 u, w;
    orthonormal_frame(dir, u, w);
    ring_start[j] = static_cast<int>(b.pos.size());
    const Vec3 offs[kRingVerts] = {r * u, -r * u, r * w, -r * w};
    for (const Vec3& o : offs) {
      const int idx = b.add(joints[j] + o, o, wts, prt);
      if (m == j) b.mirror[idx] = idx;
    }
    if (m == j) {
      // Centerline ring: +u and -u are mirror images since u = +x.
      b.mirror[ring_start[j]] = ring_start[j] + 1;
      b.mirror[ring_start[j] + 1] = ring_start[j];
    }
  }

  // Face: six landmarks first (they define the face keypoints), then a shell.
  const int face = static_cast<int>(Part::kFace);
  const Vec3 head = joints[15];
  auto face_weights = [&](double yrel) -> std::vector<std::pair<int, double>> {
    if (yrel > 0.02) return {{kJawJoint, 0.8}, {15, 0.2}};
    return {{15, 1.0}};
  };
  {
    const Vec3 leye(0.03, -0.035, -0.085);
    const Vec3 nose(0.0, -0.005, -0.1);
    const Vec3 lmouth(0.025, 0.03, -0.085);
    const Vec3 chin(0.0, 0.06, -0.07);
    b.add_pair(head + leye, leye, face_weights(leye.y()), face);
    b.add(head + nose, nose, face_weights(nose.y()), face);
    b.mirror.back() = static_cast<int>(b.pos.size()) - 1;
    b.add_pair(head + lmouth, lmouth, face_weights(lmouth.y()), face);
    b.add(head + chin, chin, face_weights(chin.y()), face);
    b.mirror.back() = static_cast<int>(b.pos.size()) - 1;
  }
  for (int i = 0; i < (kFaceVerts - kNumFaceKeypoints) / 2; ++i) {
    const double phi = -0.6 + 1.3 * frac(i * 0.618033988749895);
    const double alpha = 0.15 + 0.85 * frac(i * 0.414213562373095 + 0.3);
    const Vec3 o(0.085 * std::sin(alpha) * std::cos(phi), 0.09 * std::sin(phi), -0.09 * std::cos(alpha) * std::cos(phi));
    b.add_pair(head + o, o, face_weights(o.y()), face);
  }

  // Surface samples along body bones, in mirror pairs.
  struct Bone {
    int a, b;
  };
  const Bone bones[] = {{0, 3}, {3, 6}, {6, 9}, {9, 12}, {12, 15}, {15, -1}, {0, 1}, {1, 4},
                        {4, 7}, {7, 10}, {9, 13}, {13, 16}, {16, 18}, {18, 20}};
  const int nb = static_cast<int>(std::size(bones));
  int remaining = options.num_vertices - static_cast<int>(b.pos.size());
  for (int m = 0; remaining >= 2; ++m) {
    const Bone& bone = bones[m % nb];
    const double t = 0.15 + 0.7 * frac((m + 1) * 0.618033988749895);
    const double ang = 2.0 * std::numbers::pi * frac((m + 1) * 0.414213562373095 + 0.1);
    const Vec3 pa = joints[bone.a];
    const Vec3 pb = bone.b >= 0 ? joints[bone.b] : joints[bone.a] + Vec3(0, -0.14, 0);
    const double ra = joint_radius(bone.a);
    const double rb = bone.b >= 0 ? joint_radius(bone.b) : 0.06;
    Vec3 u, w;
    orthonormal_frame(pb - pa, u, w);
    const Vec3 o = ((1 - t) * ra + t * rb) * (std::cos(ang) * u + std::sin(ang) * w);
    std::vector<std::pair<int, double>> wts;
    if (bone.b >= 0) {
      wts = {{bone.a, 1.0 - 0.5 * t * t}, {bone.b, 0.5 * t * t}};
    } else {
      wts = {{bone.a, 1.0}};
    }
    b.add_pair(pa + (pb - pa) * t + o, o, wts, static_cast<int>(Part::kBody));
    remaining -= 2;
  }
  if (remaining == 1) {
    const Vec3 o(0.0, 0.0, -joint_radius(3));
    b.add(joints[3] + Vec3(0, 0.05, 0) + o, o, {{0, 0.5}, {3, 0.5}}, static_cast<int>(Part::kBody));
    b.mirror.back() = static_cast<int>(b.pos.size()) - 1;
  }

  const int nv = static_cast<int>(b.pos.size());
  BodyModel model;
  model.num_vertices = nv;
  model.num_joints = kNumJoints;
  model.parents.assign(parents.begin(), parents.end());
  model.template_vertices.resize(nv, 3);
  model.skinning_weights = Mat::Zero(nv, kNumJoints);
  for (int i = 0; i < nv; ++i) {
    model.template_vertices.row(i) = b.pos[i].transpose();
    for (auto [j, x] : b.w[i]) model.skinning_weights(i, j) += x;
    model.part_vertices[b.part[i]].push_back(i);
  }
  model.joint_regressor = Mat::Zero(kNumJoints, nv);
  for (int j = 0; j < kNumJoints; ++j) {
    for (int k = 0; k < kRingVerts; ++k) model.joint_regressor(j, ring_start[j] + k) = 1.0 / kRingVerts;
  }

  // Shape blendshapes. Every field satisfies d(mirror(v)) = mirror(d(v)).
  Rng rng(options.seed);
  model.shape_blendshapes = Mat::Zero(3 * nv, kNumShape);
  struct Smooth {
    double a[3][4];
  };
  auto random_smooth = [&rng]() {
    Smooth s{};
    for (auto& row : s.a) {
      row[0] = rng.uniform(-4.0, 4.0);
      row[1] = rng.uniform(-4.0, 4.0);
      row[2] = rng.uniform(-4.0, 4.0);
      row[3] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    return s;
  };
  auto eval_smooth = [](const Smooth& s, const Vec3& p) {
    auto f = [&](int c) { return std::sin(s.a[c][0] * p.x() * p.x() + s.a[c][1] * p.y() + s.a[c][2] * p.z() + s.a[c][3]); };
    return Vec3(p.x() * f(0), f(1), f(2));
  };
  std::vector<Smooth> shape_fields;
  for (int k = 5; k < kNumShape; ++k) shape_fields.push_back(random_smooth());
  for (int i = 0; i < nv; ++i) {
    const Vec3& p = b.pos[i];
    Vec3 d[kNumShape];
    d[0] = Vec3(0, 0.1 * p.y(), 0);
    d[1] = Vec3(0.1 * p.x(), 0, 0);
    d[2] = 0.2 * b.radial[i];
    d[3] = p.y() > 0 ? Vec3(0, 0.1 * p.y(), 0) : Vec3::Zero();
    d[4] = Vec3(0.1 * std::copysign(std::max(std::abs(p.x()) - 0.17, 0.0), p.x()), 0, 0);
    for (int k = 5; k < kNumShape; ++k) d[k] = 0.04 * eval_smooth(shape_fields[k - 5], p);
    for (int k = 0; k < kNumShape; ++k) model.shape_blendshapes.block<3, 1>(3 * i, k) = d[k];
  }
  // Keep the pelvis at the origin for every shape.
  for (int k = 0; k < kNumShape; ++k) {
    Vec3 pelvis = Vec3::Zero();
    for (int i = 0; i < nv; ++i) pelvis += model.joint_regressor(0, i) * model.shape_blendshapes.block<3, 1>(3 * i, k);
    for (int i = 0; i < nv; ++i) model.shape_blendshapes.block<3, 1>(3 * i, k) -= pelvis;
  }

  model.expression_blendshapes = Mat::Zero(3 * nv, kNumExpr);
  for (int k = 0; k < kNumExpr; ++k) {
    const Smooth s = random_smooth();
    for (int i : model.part_vertices[face]) {
      model.expression_blendshapes.block<3, 1>(3 * i, k) = 0.01 * eval_smooth(s, b.pos[i] - head);
    }
  }

  model.pose_blendshapes = Mat::Zero(3 * nv, kNumPoseFeatures);
  if (options.pose_blend_scale > 0.0) {
    for (Eigen::Index i = 0; i < model.pose_blendshapes.size(); ++i) {
      model.pose_blendshapes.data()[i] = options.pose_blend_scale * rng.normal();
    }
  }

  model.validate();
  model.finalize();
  return model;
}

// ------------------------------------------------------------- forward / backward

BodyOutput forward(const BodyModel& model, const ParamSet& params, BodyState* state) {
  params.validate();
  const int nv = model.num_vertices;
  const int nj = model.num_joints;

  Vec offs = model.shape_blendshapes * params.beta + model.expression_blendshapes * params.psi;
  Mat shaped = model.template_vertices + Eigen::Map<const Mat>(offs.data(), nv, 3);
  Mat rest_joints = model.joint_regressor * shaped;

  std::vector<Mat3> rot(nj), grot(nj);
  std::vector<Vec3> gtrans(nj);
  for (int j = 0; j < nj; ++j) rot[j] = rodrigues(params.pose.row(j).transpose());
  grot[0] = rot[0];
  gtrans[0] = rest_joints.row(0).transpose();
  for (int j = 1; j < nj; ++j) {
    const int p = model.parents[j];
    grot[j] = grot[p] * rot[j];
    gtrans[j] = grot[p] * (rest_joints.row(j) - rest_joints.row(p)).transpose() + gtrans[p];
  }
  Mat skin(nj, 12);
  for (int j = 0; j < nj; ++j) {
    const Vec3 tj = gtrans[j] - grot[j] * rest_joints.row(j).transpose();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) skin(j, 4 * r + c) = grot[j](r, c);
      skin(j, 4 * r + 3) = tj(r);
    }
  }

  Mat posed_rest = shaped;
  if (model.has_pose_blendshapes) {
    Vec feat(kNumPoseFeatures);
    for (int j = 1; j < nj; ++j) {
      const Mat3 d = rot[j] - Mat3::Identity();
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) feat(9 * (j - 1) + 3 * r + c) = d(r, c);
      }
    }
    Vec po = model.pose_blendshapes * feat;
    posed_rest += Eigen::Map<const Mat>(po.data(), nv, 3);
  }

  Mat blended;
  blended.noalias() = model.skinning_weights * skin;
  BodyOutput out;
  out.vertices.resize(nv, 3);
  for (int i = 0; i < nv; ++i) {
    for (int r = 0; r < 3; ++r) {
      out.vertices(i, r) = blended(i, 4 * r) * posed_rest(i, 0) + blended(i, 4 * r + 1) * posed_rest(i, 1) +
                           blended(i, 4 * r + 2) * posed_rest(i, 2) + blended(i, 4 * r + 3);
    }
  }
  out.joints.noalias() = model.joint_regressor * out.vertices;
  out.keypoints.noalias() = model.keypoint_regressor * out.vertices;

  if (state) {
    state->params = params;
    state->shaped = std::move(shaped);
    state->rest_joints = std::move(rest_joints);
    state->local_rot = std::move(rot);
    state->global_rot = std::move(grot);
    state->global_trans = std::move(gtrans);
    state->skin_transforms = std::move(skin);
    state->posed_rest = std::move(posed_rest);
    state->blended = std::move(blended);
  }
  return out;
}

Vec backward(const BodyModel& model, const BodyState& st, const Mat& grad_vertices, const Mat& grad_joints,
             const Mat& grad_keypoints) {
  const int nv = model.num_vertices;
  const int nj = model.num_joints;

  Mat gv = Mat::Zero(nv, 3);
  if (grad_vertices.size()) gv += grad_vertices;
  if (grad_joints.size()) gv.noalias() += model.joint_regressor.transpose() * grad_joints;
  if (grad_keypoints.size()) gv.noalias() += model.keypoint_regressor.transpose() * grad_keypoints;

  Mat g_blended(nv, 12);
  Mat g_posed = Mat::Zero(nv, 3);
  for (int i = 0; i < nv; ++i) {
    for (int r = 0; r < 3; ++r) {
      const double g = gv(i, r);
      for (int c = 0; c < 3; ++c) {
        g_blended(i, 4 * r + c) = g * st.posed_rest(i, c);
        g_posed(i, c) += st.blended(i, 4 * r + c) * g;
      }
      g_blended(i, 4 * r + 3) = g;
    }
  }
  Mat g_skin;
  g_skin.noalias() = model.skinning_weights.transpose() * g_blended;

  std::vector<Mat3> g_grot(nj, Mat3::Zero());
  std::vector<Vec3> g_gtrans(nj, Vec3::Zero());
  std::vector<Mat3> g_rot(nj, Mat3::Zero());
  Mat g_rest_joints = Mat::Zero(nj, 3);
  for (int j = 0; j < nj; ++j) {
    Mat3 gm;
    Vec3 gs;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) gm(r, c) = g_skin(j, 4 * r + c);
      gs(r) = g_skin(j, 4 * r + 3);
    }
    const Vec3 jj = st.rest_joints.row(j).transpose();
    g_grot[j] += gm - gs * jj.transpose();
    g_gtrans[j] += gs;
    g_rest_joints.row(j) -= (st.global_rot[j].transpose() * gs).transpose();
  }
  for (int j = nj - 1; j >= 1; --j) {
    const int p = model.parents[j];
    const Vec3 d = (st.rest_joints.row(j) - st.rest_joints.row(p)).transpose();
    g_grot[p] += g_grot[j] * st.local_rot[j].transpose() + g_gtrans[j] * d.transpose();
    g_rot[j] += st.global_rot[p].transpose() * g_grot[j];
    g_gtrans[p] += g_gtrans[j];
    const Vec3 gd = st.global_rot[p].transpose() * g_gtrans[j];
    g_rest_joints.row(j) += gd.transpose();
    g_rest_joints.row(p) -= gd.transpose();
  }
  g_rot[0] += g_grot[0];
  g_rest_joints.row(0) += g_gtrans[0].transpose();

  Mat g_shaped = g_posed;
  if (model.has_pose_blendshapes) {
    Vec gf = model.pose_blendshapes.transpose() * Eigen::Map<const Vec>(g_posed.data(), 3 * nv);
    for (int j = 1; j < nj; ++j) {
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) g_rot[j](r, c) += gf(9 * (j - 1) + 3 * r + c);
      }
    }
  }
  g_shaped.noalias() += model.joint_regressor.transpose() * g_rest_joints;

  Vec grad(kNumParams);
  for (int j = 0; j < nj; ++j) {
    const auto jac = rodrigues_jacobian(st.params.pose.row(j).transpose());
    for (int k = 0; k < 3; ++k) grad(3 * j + k) = g_rot[j].cwiseProduct(jac[k]).sum();
  }
  const Eigen::Map<const Vec> gs_flat(g_shaped.data(), 3 * nv);
  grad.segment<kNumShape>(kNumPose) = model.shape_blendshapes.transpose() * gs_flat;
  grad.segment<kNumExpr>(kNumPose + kNumShape) = model.expression_blendshapes.transpose() * gs_flat;
  return grad;
}

// ------------------------------------------------------------- projection

Mat project(const Mat& points, const CameraModel& camera) {
  if (camera.focal <= 0.0) throw ProjectionDegenerateError("camera focal must be positive");
  Mat uv(points.rows(), 2);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double x = points(i, 0) + camera.translation.x();
    const double y = points(i, 1) + camera.translation.y();
    const double z = points(i, 2) + camera.translation.z();
    if (!(z > 1e-4)) throw ProjectionDegenerateError("point at or behind the camera plane");
    uv(i, 0) = camera.focal * x / z + camera.principal.x();
    uv(i, 1) = camera.focal * y / z + camera.principal.y();
  }
  return uv;
}

ProjectionGrad project_backward(const Mat& points, const CameraModel& camera, const Mat& grad_uv) {
  ProjectionGrad g;
  g.points = Mat::Zero(points.rows(), 3);
  g.translation = Vec3::Zero();
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double x = points(i, 0) + camera.translation.x();
    const double y = points(i, 1) + camera.translation.y();
    const double z = points(i, 2) + camera.translation.z();
    if (!(z > 1e-4)) throw ProjectionDegenerateError("point at or behind the camera plane");
    const double f = camera.focal;
    const double gu = grad_uv(i, 0);
    const double gvv = grad_uv(i, 1);
    const Vec3 gp(gu * f / z, gvv * f / z, -(gu * f * x + gvv * f * y) / (z * z));
    g.points.row(i) = gp.transpose();
    g.translation += gp;
  }
  return g;
}

}  // namespace aios::body
