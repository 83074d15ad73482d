#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace vlmkd {

enum class ShapeKind { Circle, Square, Triangle, Cross, Diamond };
enum class ColorKind { Red, Green, Blue, Yellow, Purple };
enum class SizeKind { Small, Medium, Large };
enum class TextureKind { Plain, Striped, Dotted };
enum class Split { Many, Medium, Few };

inline constexpr int kNumShapes = 5;
inline constexpr int kNumColors = 5;
/// Each class owns a distinct (shape, color) pair.
inline constexpr int kMaxClasses = kNumShapes * kNumColors;

std::string_view to_string(ShapeKind v);
std::string_view to_string(ColorKind v);
std::string_view to_string(SizeKind v);
std::string_view to_string(TextureKind v);
std::string_view to_string(Split v);
Split split_from_string(std::string_view s);

struct Attributes {
  ShapeKind shape = ShapeKind::Circle;
  ColorKind color = ColorKind::Red;
  SizeKind size = SizeKind::Medium;
  TextureKind texture = TextureKind::Plain;
};

struct SyntheticImage {
  std::string id;
  std::size_t label = 0;
  Attributes attributes;
  std::uint64_t seed = 0;
  /// H x W x 3, row-major, values in [0, 1].
  std::vector<float> pixels;
};

struct DataConfig {
  std::size_t num_classes = 10;
  std::size_t n_max = 200;
  std::size_t n_min = 5;
  double gamma = 1.5;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  std::size_t val_per_class = 20;
  double noise_sigma = 0.05;
};

/// Class prototypes are per-class mean images. The set is separable when the
/// mean pairwise prototype distance exceeds the norm of the additive noise.
struct Separability {
  double mean_prototype_distance = 0.0;
  double min_prototype_distance = 0.0;
  double noise_spread = 0.0;
  bool separable = false;
};

struct SyntheticDataset {
  DataConfig config;
  std::vector<std::string> classnames;
  std::vector<SyntheticImage> images;      // training split, sorted by id
  std::vector<SyntheticImage> val_images;  // class-balanced held-out split
  std::vector<std::size_t> class_counts;
  std::vector<double> priors;
  std::vector<Split> split_of_class;
  Separability separability;

  std::size_t num_classes() const { return class_counts.size(); }
  std::size_t image_size() const { return config.image_size; }
};

/// (shape, color) pair that defines class `label`.
std::pair<ShapeKind, ColorKind> class_signature(std::size_t label);
std::string default_classname(std::size_t label);

/// n_c = max(n_min, floor(n_max * (c+1)^-gamma)).
std::vector<std::size_t> class_profile(const DataConfig& config);
Split class_split(std::size_t count);
std::vector<Split> class_split(const std::vector<std::size_t>& counts);
std::vector<double> priors_from_counts(const std::vector<std::size_t>& counts);
std::vector<double> priors(const SyntheticDataset& dataset);

/// Deterministic attribute draw for one image of class `label`.
Attributes draw_attributes(std::size_t label, std::uint64_t image_seed);
/// Renders attributes plus seeded Gaussian noise into an H x W x 3 image.
std::vector<float> render_image(const Attributes& attributes, std::size_t image_size, double noise_sigma,
                                std::uint64_t image_seed);

SyntheticDataset generate(const DataConfig& config);
Separability measure_separability(const std::vector<SyntheticImage>& images, std::size_t num_classes,
                                  std::size_t image_size, double noise_sigma);

/// One seeded permutation of training indices per epoch, cut into batches of
/// `batch_size`; the final short batch is kept.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t num_images, std::size_t batch_size, std::uint64_t seed,
                                                 std::uint64_t epoch);

std::vector<float> flip_horizontal(const std::vector<float>& pixels, std::size_t image_size);

/// Directory layout: meta.json, index.json, pixels.bin (float32 LE).
void save_dataset(const std::string& dir, const SyntheticDataset& dataset);
SyntheticDataset load_dataset(const std::string& dir);
nlohmann::json dataset_meta(const SyntheticDataset& dataset);
nlohmann::json to_json(const DataConfig& config);
/// Missing fields keep their defaults.
DataConfig data_config_from_json(const nlohmann::json& j);

}  // namespace vlmkd
