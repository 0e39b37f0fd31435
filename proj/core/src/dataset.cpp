#include "diffmoe/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "diffmoe/rng.hpp"

namespace diffmoe {

namespace {

constexpr int64_t kSide = ToyDataset::kImageSide;
constexpr double kPi = 3.14159265358979323846;

void paint_checkerboard(std::span<double> img, Rng& rng) {
  const int64_t cell = rng.uniform() < 0.5 ? 1 : 2;
  const int64_t phase = rng.index(2);
  const double amp = rng.uniform(0.6, 1.0) * (rng.uniform() < 0.5 ? 1.0 : -1.0);
  for (int64_t y = 0; y < kSide; ++y)
    for (int64_t x = 0; x < kSide; ++x)
      img[static_cast<size_t>(y * kSide + x)] =
          (((x / cell + y / cell + phase) % 2) == 0) ? amp : -amp;
}

void paint_gradient(std::span<double> img, Rng& rng) {
  const double angle = rng.uniform(0.0, 2.0 * kPi);
  const double dx = std::cos(angle), dy = std::sin(angle);
  const double offset = rng.uniform(-0.3, 0.3);
  for (int64_t y = 0; y < kSide; ++y)
    for (int64_t x = 0; x < kSide; ++x) {
      const double u = (static_cast<double>(x) / (kSide - 1) - 0.5) * dx +
                       (static_cast<double>(y) / (kSide - 1) - 0.5) * dy;
      img[static_cast<size_t>(y * kSide + x)] = std::clamp(2.0 * u + offset, -1.0, 1.0);
    }
}

void paint_stripes(std::span<double> img, Rng& rng) {
  const double freq = rng.uniform(1.0, 3.0);
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  const bool vertical = rng.uniform() < 0.5;
  const double amp = rng.uniform(0.6, 1.0);
  for (int64_t y = 0; y < kSide; ++y)
    for (int64_t x = 0; x < kSide; ++x) {
      const double c = static_cast<double>(vertical ? x : y) / (kSide - 1);
      img[static_cast<size_t>(y * kSide + x)] = amp * std::sin(2.0 * kPi * freq * c + phase);
    }
}

void paint_blobs(std::span<double> img, Rng& rng) {
  std::fill(img.begin(), img.end(), 0.0);
  const int64_t count = 1 + rng.index(3);
  for (int64_t b = 0; b < count; ++b) {
    const double cx = rng.uniform(1.0, kSide - 2.0);
    const double cy = rng.uniform(1.0, kSide - 2.0);
    const double width = rng.uniform(0.8, 2.0);
    const double amp = rng.uniform(0.5, 1.0) * (rng.uniform() < 0.5 ? 1.0 : -1.0);
    for (int64_t y = 0; y < kSide; ++y)
      for (int64_t x = 0; x < kSide; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        img[static_cast<size_t>(y * kSide + x)] += amp * std::exp(-r2 / (2.0 * width * width));
      }
  }
  for (double& v : img) v = std::clamp(v, -1.0, 1.0);
}

}  // namespace

ToyDataset::ToyDataset(int64_t size, uint64_t seed) {
  if (size < 1) throw std::invalid_argument("dataset: size must be positive");
  pixels_.resize(static_cast<size_t>(size) * kSide * kSide);
  labels_.resize(static_cast<size_t>(size));
  for (int64_t i = 0; i < size; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    const int64_t cls = rng.index(kNumClasses);
    labels_[static_cast<size_t>(i)] = cls;
    std::span<double> img(pixels_.data() + i * kSide * kSide,
                          static_cast<size_t>(kSide * kSide));
    switch (cls) {
      case 0: paint_checkerboard(img, rng); break;
      case 1: paint_gradient(img, rng); break;
      case 2: paint_stripes(img, rng); break;
      default: paint_blobs(img, rng); break;
    }
    for (double& v : img) v = std::clamp(v + 0.05 * rng.normal(), -1.0, 1.0);
  }
}

std::span<const double> ToyDataset::image(int64_t i) const {
  return {pixels_.data() + i * kSide * kSide, static_cast<size_t>(kSide * kSide)};
}

std::vector<double> ToyDataset::patchify(std::span<const double> image) {
  std::vector<double> out(static_cast<size_t>(kSeqLen * kPatchDim));
  int64_t token = 0;
  for (int64_t py = 0; py < kSide; py += kPatchSide)
    for (int64_t px = 0; px < kSide; px += kPatchSide, ++token)
      for (int64_t dy = 0; dy < kPatchSide; ++dy)
        for (int64_t dx = 0; dx < kPatchSide; ++dx)
          out[static_cast<size_t>(token * kPatchDim + dy * kPatchSide + dx)] =
              image[static_cast<size_t>((py + dy) * kSide + (px + dx))];
  return out;
}

std::vector<double> ToyDataset::unpatchify(std::span<const double> patches) {
  std::vector<double> out(static_cast<size_t>(kSide * kSide));
  int64_t token = 0;
  for (int64_t py = 0; py < kSide; py += kPatchSide)
    for (int64_t px = 0; px < kSide; px += kPatchSide, ++token)
      for (int64_t dy = 0; dy < kPatchSide; ++dy)
        for (int64_t dx = 0; dx < kPatchSide; ++dx)
          out[static_cast<size_t>((py + dy) * kSide + (px + dx))] =
              patches[static_cast<size_t>(token * kPatchDim + dy * kPatchSide + dx)];
  return out;
}

Tensor ToyDataset::patches(std::span<const int64_t> indices) const {
  const int64_t b = static_cast<int64_t>(indices.size());
  std::vector<double> out;
  out.reserve(static_cast<size_t>(b * kSeqLen * kPatchDim));
  for (int64_t i : indices) {
    if (i < 0 || i >= size()) throw std::out_of_range("dataset: index out of range");
    auto p = patchify(image(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  return Tensor::from({b * kSeqLen, kPatchDim}, std::move(out));
}

Tensor ToyDataset::images() const {
  return Tensor::from({size(), kSide * kSide}, pixels_);
}

}  // namespace diffmoe
