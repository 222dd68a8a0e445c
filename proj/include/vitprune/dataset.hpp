#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vitprune/json_io.hpp"
#include "vitprune/tensor.hpp"

namespace vp {

struct Sample {
  std::vector<double> pixels;  // channels x size x size, raw intensities in [0, 1]
  int label = 0;
  int domain = 0;
};

/// Images from several domains sharing one class set. Pixels are stored raw;
/// batches are produced channel-normalized with the dataset statistics.
struct DomainDataset {
  std::vector<std::string> classes;
  std::vector<std::string> domains;
  std::int64_t channels = 3;
  std::int64_t image_size = 32;
  std::vector<Sample> samples;  // domain-major, then class, then file/render order
  std::string provenance;       // "synthetic" | "folder"
  std::vector<double> mean, stddev;  // per channel

  void validate() const;
  /// Recomputes mean/stddev over all samples.
  void compute_normalization();

  /// Normalized batch [n, C, S, S]; `flip` mirrors the selected rows horizontally.
  Tensor images(std::span<const std::size_t> indices, const std::vector<bool>* flip = nullptr) const;
  std::vector<int> labels(std::span<const std::size_t> indices) const;
  std::size_t size() const { return samples.size(); }

  Json summary() const;
};

struct SynthConfig {
  int classes = 7;
  int domains = 4;
  int images_per_domain = 200;
  std::int64_t image_size = 32;

  void validate() const;
};

/// Shape names for synthetic classes, in label order.
const std::vector<std::string>& synth_class_names();
/// Style names for synthetic domains, in domain order.
const std::vector<std::string>& synth_domain_names();

DomainDataset synth_generate(const SynthConfig& config, std::uint64_t seed);

/// root/domain/class/image.{ppm,pgm,png}; directories sorted lexicographically.
DomainDataset ingest_folder(const std::filesystem::path& root, std::int64_t image_size, std::int64_t channels = 3);

/// Writes the dataset as root/domain/class/NNNNN.ppm (8-bit).
void export_folder(const DomainDataset& data, const std::filesystem::path& root);

// Image codecs. Pixels are row-major interleaved 8-bit.
struct RawImage {
  std::int64_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};
RawImage read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RawImage& image);
void write_pgm(const std::filesystem::path& path, const RawImage& image);
/// Nearest-neighbor resize.
RawImage resize_nearest(const RawImage& image, std::int64_t width, std::int64_t height);

enum class SplitKind { kPooledHoldout, kLeaveOneDomainOut };
std::string to_string(SplitKind k);
SplitKind split_kind_from_string(const std::string& s);

struct SplitProtocol {
  SplitKind kind = SplitKind::kPooledHoldout;
  double train_fraction = 0.8;  // pooled: share of each domain kept for train+valid
  double valid_fraction = 0.1;  // share of train+valid moved to valid
  std::string holdout;          // LODO domain name
  std::uint64_t seed = 0;

  void validate() const;
};

struct Splits {
  std::vector<std::size_t> train, valid, test;  // sample indices, ascending
};

Splits make_splits(const DomainDataset& data, const SplitProtocol& protocol);

}  // namespace vp
