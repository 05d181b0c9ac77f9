#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeflow/rng.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

/// Named 2-D synthetic datasets. Everything is deterministic in (name, n,
/// seed) so runs can be replayed exactly.
struct Dataset {
    std::string name;
    Tensor x;                 // [n x 2]
    std::vector<int> labels;  // [n], in [0, n_classes)
    int n_classes = 1;
};

/// gmm8: 8 Gaussians, means on a circle of radius 4, sigma 0.3, label =
///   component.
/// checkerboard: uniform over the dark squares of a 4x4 board on [-4,4]^2,
///   single class.
/// conditional_gmm: dim 0 is a Gaussian at the label's position on a line
///   (spacing 2, centered, sigma 0.3); dim 1 is shared N(0,1) background
///   independent of the label. The label controls dim 0 only, which makes
///   dim 1 the natural "unedited" dimension for editing experiments.
Dataset make_dataset(const std::string& name, std::size_t n, std::uint64_t seed);

/// Component mean for a label (positions used by the generators above).
/// gmm8/conditional_gmm only; checkerboard has no labeled components.
std::vector<double> component_mean(const std::string& name, int label);

/// Index of the component whose mean is nearest to the point.
int nearest_component(const std::string& name, int n_classes, const double* point);

/// Dimensions the label does not control (empty when every dim is edited).
std::vector<std::size_t> unedited_dims(const std::string& name);

}  // namespace moeflow
