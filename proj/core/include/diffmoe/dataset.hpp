#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "diffmoe/tensor.hpp"

namespace diffmoe {

// Synthetic 8x8 single-channel images in [-1, 1] drawn from four pattern
// families (checkerboards, gradients, stripes, blobs). Tokenized as 16
// row-major 2x2 patches of dimension 4.
class ToyDataset {
 public:
  static constexpr int64_t kImageSide = 8;
  static constexpr int64_t kPatchSide = 2;
  static constexpr int64_t kSeqLen = 16;    // (8/2)^2
  static constexpr int64_t kPatchDim = 4;   // 2*2
  static constexpr int64_t kNumClasses = 4;

  ToyDataset(int64_t size, uint64_t seed);

  int64_t size() const { return static_cast<int64_t>(labels_.size()); }
  std::span<const double> image(int64_t i) const;
  int64_t label(int64_t i) const { return labels_[static_cast<size_t>(i)]; }

  // Patch tokens for the given examples: [count * kSeqLen, kPatchDim].
  Tensor patches(std::span<const int64_t> indices) const;
  // All examples as flat image rows: [size, 64].
  Tensor images() const;

  static std::vector<double> patchify(std::span<const double> image);
  static std::vector<double> unpatchify(std::span<const double> patches);

 private:
  std::vector<double> pixels_;  // size * 64
  std::vector<int64_t> labels_;
};

}  // namespace diffmoe
