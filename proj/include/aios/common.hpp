#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace aios {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

// Error hierarchy. Every failure the library reports is one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameterError : public Error {
 public:
  using Error::Error;
};

class ProjectionDegenerateError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class DegenerateBoxError : public Error {
 public:
  using Error::Error;
};

class AlignmentDegenerateError : public Error {
 public:
  using Error::Error;
};

class CheckpointIncompatibleError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

// Body-part indices shared by boxes, keypoint sets and metric breakdowns.
enum class Part : int { kBody = 0, kLHand = 1, kRHand = 2, kFace = 3 };
inline constexpr int kNumParts = 4;

inline const char* part_name(int p) {
  static const char* names[] = {"body", "lhand", "rhand", "face"};
  return names[p];
}

}  // namespace aios
