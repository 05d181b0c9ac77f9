#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moeflow/tensor.hpp"

namespace moeflow {

/// On-disk tensor container: a directory holding
///   manifest   - JSON description: per tensor {name, dtype, shape, offset, count}
///                with offset in bytes into the blob and count in elements
///   blob.bin   - raw little-endian values concatenated in manifest order
/// Round trips are bit-exact for f64 payloads.

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& dir, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& dir);

/// Lookup helper; throws ContractError when the name is absent.
const Tensor& checkpoint_get(const NamedTensors& tensors, const std::string& name);

}  // namespace moeflow
