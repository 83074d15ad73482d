#include "vlmkd/synth_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <nlohmann/json.hpp>

#include "vlmkd/binio.hpp"
#include "vlmkd/error.hpp"
#include "vlmkd/rng.hpp"

namespace vlmkd {

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeNames{"circle", "square", "triangle", "cross", "diamond"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red", "green", "blue", "yellow", "purple"};
constexpr std::array<std::string_view, 3> kSizeNames{"small", "medium", "large"};
constexpr std::array<std::string_view, 3> kTextureNames{"plain", "striped", "dotted"};
constexpr std::array<std::string_view, 3> kSplitNames{"many", "medium", "few"};

constexpr std::array<std::array<double, 3>, kNumColors> kColorRgb{{
    {0.85, 0.15, 0.15},
    {0.15, 0.75, 0.20},
    {0.15, 0.25, 0.85},
    {0.90, 0.85, 0.15},
    {0.60, 0.20, 0.75},
}};
constexpr std::array<double, 3> kRadiusFraction{0.22, 0.30, 0.38};
constexpr double kBackground = 0.5;
constexpr std::uint64_t kValStream = 0x5EED0FF5E7ULL;

bool inside(ShapeKind shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeKind::Circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::Triangle: {
      if (dy < -r || dy > r) return false;
      const double t = (dy + r) / (2.0 * r);
      return std::abs(dx) <= t * r;
    }
    case ShapeKind::Cross:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    case ShapeKind::Diamond:
      return std::abs(dx) + std::abs(dy) <= r;
  }
  return false;
}

double texture_factor(TextureKind texture, std::size_t x, std::size_t y) {
  switch (texture) {
    case TextureKind::Plain:
      return 1.0;
    case TextureKind::Striped:
      return (y / 2) % 2 == 0 ? 0.55 : 1.0;
    case TextureKind::Dotted:
      return (x % 4 < 2 && y % 4 < 2) ? 0.55 : 1.0;
  }
  return 1.0;
}

std::string make_id(const char* prefix, std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%06zu", prefix, k);
  return buf;
}

template <std::size_t N>
std::size_t index_of(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return i;
  }
  throw FormatError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(ShapeKind v) { return kShapeNames[static_cast<std::size_t>(v)]; }
std::string_view to_string(ColorKind v) { return kColorNames[static_cast<std::size_t>(v)]; }
std::string_view to_string(SizeKind v) { return kSizeNames[static_cast<std::size_t>(v)]; }
std::string_view to_string(TextureKind v) { return kTextureNames[static_cast<std::size_t>(v)]; }
std::string_view to_string(Split v) { return kSplitNames[static_cast<std::size_t>(v)]; }
Split split_from_string(std::string_view s) { return static_cast<Split>(index_of(kSplitNames, s, "split")); }

std::pair<ShapeKind, ColorKind> class_signature(std::size_t label) {
  if (label >= static_cast<std::size_t>(kMaxClasses)) {
    throw ConfigError("class index " + std::to_string(label) + " exceeds the " + std::to_string(kMaxClasses) +
                      " available (shape, color) pairs");
  }
  const std::size_t shape = label % kNumShapes;
  const std::size_t color = (shape + label / kNumShapes) % kNumColors;
  return {static_cast<ShapeKind>(shape), static_cast<ColorKind>(color)};
}

std::string default_classname(std::size_t label) {
  return "class" + std::string(1, static_cast<char>('A' + label));
}

std::vector<std::size_t> class_profile(const DataConfig& config) {
  if (config.num_classes < 2) throw ConfigError("need at least 2 classes");
  if (config.num_classes > static_cast<std::size_t>(kMaxClasses)) {
    throw ConfigError("at most " + std::to_string(kMaxClasses) + " classes are supported");
  }
  if (config.n_min < 1 || config.n_max < config.n_min) throw ConfigError("need n_max >= n_min >= 1");
  if (config.gamma < 0.0) throw ConfigError("gamma must be non-negative");
  std::vector<std::size_t> counts(config.num_classes);
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    const double raw = static_cast<double>(config.n_max) * std::pow(static_cast<double>(c + 1), -config.gamma);
    counts[c] = std::max(config.n_min, static_cast<std::size_t>(std::floor(raw)));
  }
  return counts;
}

Split class_split(std::size_t count) {
  if (count > 100) return Split::Many;
  if (count >= 20) return Split::Medium;
  return Split::Few;
}

std::vector<Split> class_split(const std::vector<std::size_t>& counts) {
  std::vector<Split> out;
  out.reserve(counts.size());
  for (std::size_t n : counts) out.push_back(class_split(n));
  return out;
}

std::vector<double> priors_from_counts(const std::vector<std::size_t>& counts) {
  std::size_t total = 0;
  for (std::size_t n : counts) total += n;
  if (total == 0) throw ConfigError("priors of an empty dataset");
  std::vector<double> out;
  out.reserve(counts.size());
  for (std::size_t n : counts) out.push_back(static_cast<double>(n) / static_cast<double>(total));
  return out;
}

std::vector<double> priors(const SyntheticDataset& dataset) { return priors_from_counts(dataset.class_counts); }

Attributes draw_attributes(std::size_t label, std::uint64_t image_seed) {
  Rng rng(mix_seed(image_seed, 1));
  const auto [shape, color] = class_signature(label);
  Attributes a;
  a.shape = shape;
  a.color = color;
  a.size = static_cast<SizeKind>(rng.below(3));
  a.texture = static_cast<TextureKind>(rng.below(3));
  return a;
}

std::vector<float> render_image(const Attributes& attributes, std::size_t image_size, double noise_sigma,
                                std::uint64_t image_seed) {
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  Rng rng(mix_seed(image_seed, 2));
  const double s = static_cast<double>(image_size);
  const double r = kRadiusFraction[static_cast<std::size_t>(attributes.size)] * s;
  const double max_shift = std::min(s / 8.0, std::max(0.0, s / 2.0 - r - 1.0));
  const double cx = s / 2.0 + rng.uniform(-max_shift, max_shift);
  const double cy = s / 2.0 + rng.uniform(-max_shift, max_shift);
  const double brightness = rng.uniform(0.85, 1.1);
  const auto& rgb = kColorRgb[static_cast<std::size_t>(attributes.color)];

  std::vector<float> px(image_size * image_size * 3);
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const bool on = inside(attributes.shape, dx, dy, r);
      const double tex = on ? texture_factor(attributes.texture, x, y) : 1.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = on ? rgb[ch] * brightness * tex : kBackground;
        v += noise_sigma * rng.normal();
        px[(y * image_size + x) * 3 + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return px;
}

Separability measure_separability(const std::vector<SyntheticImage>& images, std::size_t num_classes,
                                  std::size_t image_size, double noise_sigma) {
  const std::size_t dim = image_size * image_size * 3;
  std::vector<std::vector<double>> proto(num_classes, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> n(num_classes, 0);
  for (const auto& im : images) {
    ++n[im.label];
    for (std::size_t i = 0; i < dim; ++i) proto[im.label][i] += im.pixels[i];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (n[c] == 0) continue;
    for (double& v : proto[c]) v /= static_cast<double>(n[c]);
  }
  Separability out;
  out.min_prototype_distance = std::numeric_limits<double>::infinity();
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < num_classes; ++a) {
    for (std::size_t b = a + 1; b < num_classes; ++b) {
      if (n[a] == 0 || n[b] == 0) continue;
      double d2 = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d2 += (proto[a][i] - proto[b][i]) * (proto[a][i] - proto[b][i]);
      out.min_prototype_distance = std::min(out.min_prototype_distance, std::sqrt(d2));
      total += std::sqrt(d2);
      ++pairs;
    }
  }
  out.noise_spread = noise_sigma * std::sqrt(static_cast<double>(dim));
  out.mean_prototype_distance = pairs ? total / static_cast<double>(pairs) : 0.0;
  out.separable = out.mean_prototype_distance > out.noise_spread;
  return out;
}

SyntheticDataset generate(const DataConfig& config) {
  if (config.image_size < 8) throw ConfigError("image_size must be at least 8");
  SyntheticDataset ds;
  ds.config = config;
  ds.class_counts = class_profile(config);
  ds.priors = priors_from_counts(ds.class_counts);
  ds.split_of_class = class_split(ds.class_counts);
  for (std::size_t c = 0; c < config.num_classes; ++c) ds.classnames.push_back(default_classname(c));

  std::size_t k = 0;
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    for (std::size_t i = 0; i < ds.class_counts[c]; ++i, ++k) {
      SyntheticImage im;
      im.id = make_id("train", k);
      im.label = c;
      im.seed = mix_seed(config.seed, k);
      im.attributes = draw_attributes(c, im.seed);
      im.pixels = render_image(im.attributes, config.image_size, config.noise_sigma, im.seed);
      ds.images.push_back(std::move(im));
    }
  }
  std::size_t v = 0;
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    for (std::size_t i = 0; i < config.val_per_class; ++i, ++v) {
      SyntheticImage im;
      im.id = make_id("val", v);
      im.label = c;
      im.seed = mix_seed(config.seed ^ kValStream, v);
      im.attributes = draw_attributes(c, im.seed);
      im.pixels = render_image(im.attributes, config.image_size, config.noise_sigma, im.seed);
      ds.val_images.push_back(std::move(im));
    }
  }
  ds.separability = measure_separability(ds.images, config.num_classes, config.image_size, config.noise_sigma);
  return ds;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t num_images, std::size_t batch_size, std::uint64_t seed,
                                                 std::uint64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order(num_images);
  for (std::size_t i = 0; i < num_images; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0xBA7C4000ULL + epoch));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < num_images; start += batch_size) {
    const std::size_t end = std::min(num_images, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  return batches;
}

std::vector<float> flip_horizontal(const std::vector<float>& pixels, std::size_t image_size) {
  std::vector<float> out(pixels.size());
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out[(y * image_size + x) * 3 + ch] = pixels[(y * image_size + (image_size - 1 - x)) * 3 + ch];
  return out;
}

nlohmann::json to_json(const DataConfig& c) {
  return {{"num_classes", c.num_classes}, {"n_max", c.n_max},       {"n_min", c.n_min},
          {"gamma", c.gamma},             {"image_size", c.image_size}, {"seed", c.seed},
          {"val_per_class", c.val_per_class}, {"noise_sigma", c.noise_sigma}};
}

DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig c;
  try {
    c.num_classes = j.value("num_classes", c.num_classes);
    c.n_max = j.value("n_max", c.n_max);
    c.n_min = j.value("n_min", c.n_min);
    c.gamma = j.value("gamma", c.gamma);
    c.image_size = j.value("image_size", c.image_size);
    c.seed = j.value("seed", c.seed);
    c.val_per_class = j.value("val_per_class", c.val_per_class);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed data config: ") + e.what());
  }
  return c;
}

nlohmann::json dataset_meta(const SyntheticDataset& ds) {
  nlohmann::json meta;
  const auto& c = ds.config;
  meta["format_version"] = 1;
  meta["config"] = to_json(c);
  meta["classnames"] = ds.classnames;
  meta["class_counts"] = ds.class_counts;
  meta["priors"] = ds.priors;
  std::vector<std::string> splits;
  for (Split s : ds.split_of_class) splits.emplace_back(to_string(s));
  meta["splits"] = splits;
  meta["num_train"] = ds.images.size();
  meta["num_val"] = ds.val_images.size();
  meta["separability"] = {{"mean_prototype_distance", ds.separability.mean_prototype_distance},
                          {"min_prototype_distance", ds.separability.min_prototype_distance},
                          {"noise_spread", ds.separability.noise_spread},
                          {"separable", ds.separability.separable}};
  return meta;
}

void save_dataset(const std::string& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  binio::Writer pixels;
  nlohmann::json index = nlohmann::json::array();
  auto emit = [&](const SyntheticImage& im, const char* split) {
    const std::size_t offset = pixels.bytes().size();
    for (float v : im.pixels) pixels.put_f32(v);
    index.push_back({{"id", im.id},
                     {"split", split},
                     {"label", im.label},
                     {"seed", im.seed},
                     {"offset", offset},
                     {"shape", to_string(im.attributes.shape)},
                     {"color", to_string(im.attributes.color)},
                     {"size", to_string(im.attributes.size)},
                     {"texture", to_string(im.attributes.texture)}});
  };
  for (const auto& im : ds.images) emit(im, "train");
  for (const auto& im : ds.val_images) emit(im, "val");
  binio::write_file(dir + "/pixels.bin", pixels.bytes());
  binio::write_text(dir + "/index.json", index.dump(1) + "\n");
  binio::write_text(dir + "/meta.json", dataset_meta(ds).dump(2) + "\n");
}

SyntheticDataset load_dataset(const std::string& dir) {
  if (!std::filesystem::exists(dir + "/meta.json")) {
    throw PathError("no dataset at '" + dir + "' (expected meta.json; run `vlmkd gen-data --out " + dir + "`)");
  }
  nlohmann::json meta, index;
  try {
    meta = nlohmann::json::parse(binio::read_file(dir + "/meta.json"));
    index = nlohmann::json::parse(binio::read_file(dir + "/index.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset metadata in '" + dir + "' is not valid JSON: " + e.what());
  }
  const std::string blob = binio::read_file(dir + "/pixels.bin");

  SyntheticDataset ds;
  ds.config = data_config_from_json(meta.at("config"));
  ds.classnames = meta.at("classnames").get<std::vector<std::string>>();
  ds.class_counts = meta.at("class_counts").get<std::vector<std::size_t>>();
  ds.priors = meta.at("priors").get<std::vector<double>>();
  for (const auto& s : meta.at("splits")) ds.split_of_class.push_back(split_from_string(s.get<std::string>()));
  const auto& sep = meta.at("separability");
  ds.separability = {sep.at("mean_prototype_distance"), sep.at("min_prototype_distance"), sep.at("noise_spread"), sep.at("separable")};

  const std::size_t n_values = ds.config.image_size * ds.config.image_size * 3;
  for (const auto& rec : index) {
    SyntheticImage im;
    im.id = rec.at("id");
    im.label = rec.at("label");
    im.seed = rec.at("seed");
    im.attributes.shape = static_cast<ShapeKind>(index_of(kShapeNames, rec.at("shape").get<std::string>(), "shape"));
    im.attributes.color = static_cast<ColorKind>(index_of(kColorNames, rec.at("color").get<std::string>(), "color"));
    im.attributes.size = static_cast<SizeKind>(index_of(kSizeNames, rec.at("size").get<std::string>(), "size"));
    im.attributes.texture =
        static_cast<TextureKind>(index_of(kTextureNames, rec.at("texture").get<std::string>(), "texture"));
    const std::size_t offset = rec.at("offset");
    binio::Reader rd(std::string_view(blob).substr(std::min(offset, blob.size())));
    im.pixels.resize(n_values);
    for (float& v : im.pixels) {
      if (!rd.get_f32(v)) throw CorruptionError("pixels.bin truncated while reading image " + im.id);
    }
    if (rec.at("split") == "train") {
      ds.images.push_back(std::move(im));
    } else {
      ds.val_images.push_back(std::move(im));
    }
  }
  return ds;
}

}  // namespace vlmkd
