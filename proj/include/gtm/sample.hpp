#pragma once

#include "gtm/camera.hpp"
#include "gtm/common.hpp"

#include <string>
#include <vector>

namespace gtm {

/// One posed, timed observation.
template <typename Scalar>
struct TrainSample {
  std::string name;
  Image<Scalar> image;
  Camera<Scalar> camera;
  int time_index = 0;
};

/// In-memory training set: samples per split, SfM seed points, time count.
template <typename Scalar>
struct TrainingData {
  std::vector<TrainSample<Scalar>> train;
  std::vector<TrainSample<Scalar>> test;
  Matrix3X<Scalar> points;
  int num_times = 1;
  std::vector<std::string> time_tags;  // tag of each time index
};

}  // namespace gtm
