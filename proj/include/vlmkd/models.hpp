#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vlmkd/autograd.hpp"
#include "vlmkd/synth_data.hpp"

namespace vlmkd {

enum class HeadKind { Linear, Cosine };
enum class Mode { Train, Eval };

inline constexpr double kTauInit = 0.07;
inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 10.0;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;

/// Architecture of a ModelBundle. Parameter names are derived from it, so two
/// bundles with equal configs have identical ParamStore layouts.
struct ModelConfig {
  std::size_t num_classes = 10;
  std::size_t image_size = 32;
  std::array<std::size_t, 4> channels{16, 32, 64, 128};
  std::size_t d_img = 128;
  HeadKind head = HeadKind::Cosine;
  double cosine_scale_init = 16.0;
  /// Hidden affine-BN-ReLU blocks per text adaptor (0, 1 or 2).
  std::size_t adaptor_depth = 1;
  /// Number of text adaptors; 0 means the bundle carries no text branch.
  std::size_t adaptor_count = 0;
  std::size_t cache_dim = 64;
  double tau_init = kTauInit;
  /// Teacher feature width for KD-Image; 0 disables the feature projection.
  std::size_t kd_teacher_dim = 0;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ModelBundle {
  ModelConfig config;
  ParamStore params;
};

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed);

/// (B, H, W, 3) tensor from images (optionally mirrored).
Tensor images_tensor(const std::vector<const SyntheticImage*>& images, std::size_t image_size,
                     const std::vector<bool>& flip = {});

/// Four stride-2 3x3 conv+ReLU blocks, global average pool, final affine.
Var backbone_forward(Graph& g, const ModelConfig& config, Var images);
Var classify(Graph& g, const ModelConfig& config, Var embeddings);
/// Projects embeddings into the text space with adaptor `index`. Train mode
/// uses batch statistics and updates the running moments in the graph's store.
Var adapt(Graph& g, const ModelConfig& config, std::size_t index, Var embeddings, Mode mode);
/// 1/tau as a differentiable scalar, tau = exp(-log_inv_tau) clamped to [1e-3, 10].
Var inverse_temperature(Graph& g);
double temperature(const ParamStore& params);
/// Student embedding mapped to teacher width (identity when widths agree).
Var kd_project(Graph& g, const ModelConfig& config, Var embeddings);

struct ForwardOutputs {
  Tensor embeddings;
  Tensor logits;
};
/// Eval-mode forward in fixed-size chunks; never mutates the bundle.
ForwardOutputs predict(const ModelBundle& bundle, const std::vector<const SyntheticImage*>& images,
                       std::size_t chunk = 128);

/// Copy without the training-only branches (text adaptors, temperature,
/// KD projection).
ModelBundle inference_bundle(const ModelBundle& bundle);

inline constexpr char kBundleMagic[8] = {'V', 'K', 'D', 'B', 'U', 'N', '0', '1'};
inline constexpr std::uint32_t kBundleVersion = 1;

/// Versioned binary of all tensors (float64, bit-exact) plus `<path>.json`
/// sidecar with the architecture config.
void save_bundle(const std::string& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::string& path);
/// Same as load_bundle, but raises ConfigError when the stored architecture
/// disagrees with `expected`.
ModelBundle load_bundle(const std::string& path, const ModelConfig& expected);

}  // namespace vlmkd
