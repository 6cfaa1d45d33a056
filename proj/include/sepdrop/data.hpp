#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sepdrop/rng.hpp"

namespace sepdrop {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { Train, Test };

/// Images stored (count, channels, height, width) row-major in [0, 1] before
/// normalization.
struct LabeledImageSet {
  std::vector<float> images;
  std::vector<int> labels;
  std::vector<int> coarse_labels;  // CIFAR-100 only; empty otherwise
  int count = 0;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  Split split = Split::Train;

  std::int64_t image_size() const { return std::int64_t(channels) * height * width; }
  std::span<const float> image(int i) const { return {images.data() + i * image_size(), std::size_t(image_size())}; }
  std::span<float> image(int i) { return {images.data() + i * image_size(), std::size_t(image_size())}; }
};

// CIFAR binary records: label byte(s) followed by 3072 pixel bytes, R then G
// then B planes, each 32x32 row-major. CIFAR-100 stores (coarse, fine).
inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
std::size_t cifar_record_size(int num_classes);

/// Parses one CIFAR-10 (num_classes = 10) or CIFAR-100 (num_classes = 100)
/// binary file. Pixels are scaled to [0, 1]; the fine label is used.
LabeledImageSet load_cifar_binary(const std::filesystem::path& path, int num_classes, Split split = Split::Train);
LabeledImageSet parse_cifar_binary(std::span<const std::uint8_t> bytes, int num_classes, Split split = Split::Train);

/// The standard file layout of the binary distributions:
/// cifar10: data_batch_{1..5}.bin / test_batch.bin; cifar100: train.bin / test.bin.
LabeledImageSet load_cifar_dataset(const std::filesystem::path& dir, int num_classes, Split split);

/// Inverse of parse_cifar_binary for 3x32x32 sets (pixels rounded to bytes).
std::vector<std::uint8_t> encode_cifar_binary(const LabeledImageSet& set);
void write_cifar_binary(const LabeledImageSet& set, const std::filesystem::path& path);

LabeledImageSet concatenate(const LabeledImageSet& a, const LabeledImageSet& b);
LabeledImageSet subset(const LabeledImageSet& set, int first, int count);

/// Per-channel statistics of a training split plus augmentation flags.
struct PreprocessSpec {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool random_crop = true;
  bool horizontal_flip = true;
};

/// Mean and (population) standard deviation per channel. Rejects zero std.
PreprocessSpec compute_preprocess(const LabeledImageSet& train);

/// x <- (x - mean_c) / std_c for every image.
LabeledImageSet normalize(const LabeledImageSet& set, const PreprocessSpec& spec);
void normalize_image(std::span<float> image, int channels, const PreprocessSpec& spec);
LabeledImageSet denormalize(const LabeledImageSet& set, const PreprocessSpec& spec);

/// Text manifest of normalization statistics.
void write_preprocess_manifest(const PreprocessSpec& spec, const std::filesystem::path& path);
PreprocessSpec read_preprocess_manifest(const std::filesystem::path& path);

inline constexpr int kCropPadding = 4;

/// Crop offsets into the zero-padded image (0..2 * padding) and flip flag.
struct AugmentDraw {
  int dy = kCropPadding;
  int dx = kCropPadding;
  bool flip = false;
};

AugmentDraw draw_augment(Rng& rng, bool random_crop = true, bool horizontal_flip = true);

/// Pads 4 zero pixels on every side, crops the window at (dy, dx) and
/// optionally mirrors it horizontally.
std::vector<float> augment(std::span<const float> image, int channels, int height, int width, const AugmentDraw& draw);
std::vector<float> augment(std::span<const float> image, int channels, int height, int width, Rng& rng);

struct SyntheticOptions {
  double signal = 0.45;  // blob amplitude
  double noise = 0.08;   // pixel noise standard deviation
  double radius = 6.0;   // blob radius in pixels
};

/// Class-conditional Gaussian blobs on a grey background: each class has a
/// fixed centre and colour; samples add pixel noise and are clamped to
/// [0, 1]. Labels cycle 0, 1, ..., num_classes - 1.
LabeledImageSet synthesize_dataset(int num_classes, int count, int image_size, std::uint64_t seed,
                                   const SyntheticOptions& options = {}, Split split = Split::Train);

}  // namespace sepdrop
