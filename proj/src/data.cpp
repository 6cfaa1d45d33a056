#include "sepdrop/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sepdrop {

std::size_t cifar_record_size(int num_classes) {
  if (num_classes == 10) return 1 + kCifarPixels;
  if (num_classes == 100) return 2 + kCifarPixels;
  throw DataError("CIFAR binary format exists for 10 or 100 classes, not " + std::to_string(num_classes));
}

LabeledImageSet parse_cifar_binary(std::span<const std::uint8_t> bytes, int num_classes, Split split) {
  const std::size_t record = cifar_record_size(num_classes);
  if (bytes.empty()) throw DataError("CIFAR file is empty");
  if (bytes.size() % record != 0)
    throw DataError("truncated CIFAR file: " + std::to_string(bytes.size()) + " bytes is not a multiple of the " +
                    std::to_string(record) + "-byte record");
  LabeledImageSet set;
  set.count = static_cast<int>(bytes.size() / record);
  set.num_classes = num_classes;
  set.split = split;
  set.images.resize(std::size_t(set.count) * kCifarPixels);
  set.labels.resize(set.count);
  if (num_classes == 100) set.coarse_labels.resize(set.count);
  for (int i = 0; i < set.count; ++i) {
    const std::uint8_t* rec = bytes.data() + std::size_t(i) * record;
    int label = rec[0];
    if (num_classes == 100) {
      set.coarse_labels[i] = rec[0];
      label = rec[1];
    }
    if (label >= num_classes)
      throw DataError("record " + std::to_string(i) + " has label " + std::to_string(label) + " >= " + std::to_string(num_classes));
    set.labels[i] = label;
    const std::uint8_t* px = rec + (record - kCifarPixels);
    float* dst = set.images.data() + std::size_t(i) * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j) dst[j] = px[j] / 255.0f;
  }
  return set;
}

LabeledImageSet load_cifar_binary(const std::filesystem::path& path, int num_classes, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_cifar_binary(bytes, num_classes, split);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

LabeledImageSet load_cifar_dataset(const std::filesystem::path& dir, int num_classes, Split split) {
  std::vector<std::string> files;
  if (num_classes == 10) {
    if (split == Split::Train)
      for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    else
      files.push_back("test_batch.bin");
  } else if (num_classes == 100) {
    files.push_back(split == Split::Train ? "train.bin" : "test.bin");
  } else {
    throw DataError("CIFAR datasets have 10 or 100 classes");
  }
  LabeledImageSet out = load_cifar_binary(dir / files.front(), num_classes, split);
  for (std::size_t i = 1; i < files.size(); ++i) out = concatenate(out, load_cifar_binary(dir / files[i], num_classes, split));
  return out;
}

std::vector<std::uint8_t> encode_cifar_binary(const LabeledImageSet& set) {
  if (set.channels != 3 || set.height != 32 || set.width != 32)
    throw DataError("CIFAR encoding needs 3x32x32 images");
  const std::size_t record = cifar_record_size(set.num_classes);
  std::vector<std::uint8_t> bytes(record * set.count);
  for (int i = 0; i < set.count; ++i) {
    std::uint8_t* rec = bytes.data() + std::size_t(i) * record;
    if (set.num_classes == 100) {
      rec[0] = static_cast<std::uint8_t>(set.coarse_labels.empty() ? 0 : set.coarse_labels[i]);
      rec[1] = static_cast<std::uint8_t>(set.labels[i]);
    } else {
      rec[0] = static_cast<std::uint8_t>(set.labels[i]);
    }
    std::uint8_t* px = rec + (record - kCifarPixels);
    auto img = set.image(i);
    for (std::size_t j = 0; j < kCifarPixels; ++j)
      px[j] = static_cast<std::uint8_t>(std::lround(std::clamp(img[j], 0.0f, 1.0f) * 255.0f));
  }
  return bytes;
}

void write_cifar_binary(const LabeledImageSet& set, const std::filesystem::path& path) {
  const auto bytes = encode_cifar_binary(set);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

LabeledImageSet concatenate(const LabeledImageSet& a, const LabeledImageSet& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width || a.num_classes != b.num_classes)
    throw DataError("cannot concatenate datasets of different geometry");
  LabeledImageSet out = a;
  out.images.insert(out.images.end(), b.images.begin(), b.images.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.coarse_labels.insert(out.coarse_labels.end(), b.coarse_labels.begin(), b.coarse_labels.end());
  out.count += b.count;
  return out;
}

LabeledImageSet subset(const LabeledImageSet& set, int first, int count) {
  if (first < 0 || count < 0 || first + count > set.count) throw DataError("subset range outside dataset");
  LabeledImageSet out = set;
  out.count = count;
  out.images.assign(set.images.begin() + first * set.image_size(), set.images.begin() + (first + count) * set.image_size());
  out.labels.assign(set.labels.begin() + first, set.labels.begin() + first + count);
  if (!set.coarse_labels.empty())
    out.coarse_labels.assign(set.coarse_labels.begin() + first, set.coarse_labels.begin() + first + count);
  return out;
}

PreprocessSpec compute_preprocess(const LabeledImageSet& train) {
  if (train.count == 0) throw DataError("cannot compute statistics of an empty dataset");
  PreprocessSpec spec;
  const std::int64_t plane = std::int64_t(train.height) * train.width;
  const double m = double(plane) * train.count;
  for (int c = 0; c < train.channels; ++c) {
    double sum = 0.0;
    for (int i = 0; i < train.count; ++i) {
      const float* p = train.images.data() + i * train.image_size() + c * plane;
      for (std::int64_t j = 0; j < plane; ++j) sum += p[j];
    }
    const double mean = sum / m;
    double sq = 0.0;
    for (int i = 0; i < train.count; ++i) {
      const float* p = train.images.data() + i * train.image_size() + c * plane;
      for (std::int64_t j = 0; j < plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
    }
    const double sd = std::sqrt(sq / m);
    if (!(sd > 0.0)) throw DataError("channel " + std::to_string(c) + " has zero standard deviation");
    spec.mean.push_back(mean);
    spec.stddev.push_back(sd);
  }
  return spec;
}

void normalize_image(std::span<float> image, int channels, const PreprocessSpec& spec) {
  if (int(spec.mean.size()) != channels || int(spec.stddev.size()) != channels)
    throw DataError("normalization statistics do not match the channel count");
  const std::size_t plane = image.size() / channels;
  for (int c = 0; c < channels; ++c) {
    if (!(spec.stddev[c] > 0.0)) throw DataError("zero standard deviation in normalization statistics");
    const double mu = spec.mean[c], sd = spec.stddev[c];
    for (std::size_t j = 0; j < plane; ++j) image[c * plane + j] = static_cast<float>((image[c * plane + j] - mu) / sd);
  }
}

LabeledImageSet normalize(const LabeledImageSet& set, const PreprocessSpec& spec) {
  LabeledImageSet out = set;
  for (int i = 0; i < out.count; ++i) normalize_image(out.image(i), out.channels, spec);
  return out;
}

LabeledImageSet denormalize(const LabeledImageSet& set, const PreprocessSpec& spec) {
  LabeledImageSet out = set;
  const std::int64_t plane = std::int64_t(set.height) * set.width;
  for (int i = 0; i < out.count; ++i) {
    auto img = out.image(i);
    for (int c = 0; c < out.channels; ++c)
      for (std::int64_t j = 0; j < plane; ++j)
        img[c * plane + j] = static_cast<float>(img[c * plane + j] * spec.stddev[c] + spec.mean[c]);
  }
  return out;
}

void write_preprocess_manifest(const PreprocessSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  out << "channels=" << spec.mean.size() << "\n";
  for (std::size_t c = 0; c < spec.mean.size(); ++c) {
    out << "mean" << c << "=" << spec.mean[c] << "\n";
    out << "std" << c << "=" << spec.stddev[c] << "\n";
  }
  out << "random_crop=" << (spec.random_crop ? 1 : 0) << "\n";
  out << "horizontal_flip=" << (spec.horizontal_flip ? 1 : 0) << "\n";
}

PreprocessSpec read_preprocess_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  PreprocessSpec spec;
  std::string line;
  std::size_t channels = 0;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "channels") {
      channels = std::stoul(value);
      spec.mean.assign(channels, 0.0);
      spec.stddev.assign(channels, 0.0);
    } else if (key.rfind("mean", 0) == 0) {
      spec.mean.at(std::stoul(key.substr(4))) = std::stod(value);
    } else if (key.rfind("std", 0) == 0) {
      spec.stddev.at(std::stoul(key.substr(3))) = std::stod(value);
    } else if (key == "random_crop") {
      spec.random_crop = value == "1";
    } else if (key == "horizontal_flip") {
      spec.horizontal_flip = value == "1";
    }
  }
  if (channels == 0) throw DataError(path.string() + ": missing channel count");
  return spec;
}

AugmentDraw draw_augment(Rng& rng, bool random_crop, bool horizontal_flip) {
  AugmentDraw d;
  std::uniform_int_distribution<int> offset(0, 2 * kCropPadding);
  if (random_crop) {
    d.dy = offset(rng);
    d.dx = offset(rng);
  }
  if (horizontal_flip) d.flip = bernoulli(rng, 0.5);
  return d;
}

std::vector<float> augment(std::span<const float> image, int channels, int height, int width, const AugmentDraw& draw) {
  std::vector<float> out(image.size(), 0.0f);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y) {
      // padded coordinates (y + dy, x + dx) map to source (y + dy - pad, ...)
      const int sy = y + draw.dy - kCropPadding;
      if (sy < 0 || sy >= height) continue;
      for (int x = 0; x < width; ++x) {
        const int sx = x + draw.dx - kCropPadding;
        if (sx < 0 || sx >= width) continue;
        const int tx = draw.flip ? width - 1 - x : x;
        out[(std::size_t(c) * height + y) * width + tx] = image[(std::size_t(c) * height + sy) * width + sx];
      }
    }
  return out;
}

std::vector<float> augment(std::span<const float> image, int channels, int height, int width, Rng& rng) {
  return augment(image, channels, height, width, draw_augment(rng));
}

LabeledImageSet synthesize_dataset(int num_classes, int count, int image_size, std::uint64_t seed,
                                   const SyntheticOptions& options, Split split) {
  if (num_classes < 2) throw DataError("synthetic data needs at least 2 classes");
  if (count < 0) throw DataError("negative sample count " + std::to_string(count));
  if (image_size < 1) throw DataError("image size must be positive");

  // Class prototypes depend only on the seed, so both splits share them.
  Rng proto = derive_stream(seed, {static_cast<std::uint64_t>(StreamPurpose::Data), 0});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  struct Prototype {
    double cy, cx;
    double colour[3];
  };
  std::vector<Prototype> protos(num_classes);
  const double margin = image_size * 0.25;
  for (auto& p : protos) {
    p.cy = margin + unit(proto) * (image_size - 2 * margin);
    p.cx = margin + unit(proto) * (image_size - 2 * margin);
    for (double& c : p.colour) c = 2.0 * unit(proto) - 1.0;
  }

  Rng noise_rng = derive_stream(seed, {static_cast<std::uint64_t>(StreamPurpose::Data), split == Split::Train ? 1u : 2u});
  std::normal_distribution<double> noise(0.0, options.noise);
  LabeledImageSet set;
  set.count = count;
  set.channels = 3;
  set.height = set.width = image_size;
  set.num_classes = num_classes;
  set.split = split;
  set.images.resize(std::size_t(count) * set.image_size());
  set.labels.resize(count);
  const double r2 = 2.0 * options.radius * options.radius;
  for (int i = 0; i < count; ++i) {
    const int label = i % num_classes;
    set.labels[i] = label;
    const Prototype& p = protos[label];
    auto img = set.image(i);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
          const double d2 = (y - p.cy) * (y - p.cy) + (x - p.cx) * (x - p.cx);
          const double v = 0.5 + options.signal * p.colour[c] * std::exp(-d2 / r2) + noise(noise_rng);
          img[(std::size_t(c) * image_size + y) * image_size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
  }
  return set;
}

}  // namespace sepdrop
