#include "vlmkd/models.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "vlmkd/binio.hpp"
#include "vlmkd/error.hpp"
#include "vlmkd/rng.hpp"

namespace vlmkd {

namespace {

std::uint64_t name_stream(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor normal_init(const std::string& name, std::uint64_t seed, Shape shape, double stddev) {
  Rng rng(mix_seed(seed, name_stream(name)));
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = stddev * rng.normal();
  return t;
}

std::string conv_name(std::size_t i) { return "backbone.conv" + std::to_string(i + 1); }
std::string adaptor_prefix(std::size_t k) { return "adaptor" + std::to_string(k) + "."; }

const char* head_name(HeadKind k) { return k == HeadKind::Cosine ? "cosine" : "linear"; }

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_classes", c.num_classes},
          {"image_size", c.image_size},
          {"channels", c.channels},
          {"d_img", c.d_img},
          {"head", head_name(c.head)},
          {"cosine_scale_init", c.cosine_scale_init},
          {"adaptor_depth", c.adaptor_depth},
          {"adaptor_count", c.adaptor_count},
          {"cache_dim", c.cache_dim},
          {"tau_init", c.tau_init},
          {"kd_teacher_dim", c.kd_teacher_dim}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_classes = j.value("num_classes", c.num_classes);
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("channels")) c.channels = j.at("channels").get<std::array<std::size_t, 4>>();
    c.d_img = j.value("d_img", c.d_img);
    const std::string head = j.value("head", std::string("cosine"));
    if (head != "cosine" && head != "linear") throw ConfigError("unknown head kind '" + head + "'");
    c.head = head == "cosine" ? HeadKind::Cosine : HeadKind::Linear;
    c.cosine_scale_init = j.value("cosine_scale_init", c.cosine_scale_init);
    c.adaptor_depth = j.value("adaptor_depth", c.adaptor_depth);
    c.adaptor_count = j.value("adaptor_count", c.adaptor_count);
    c.cache_dim = j.value("cache_dim", c.cache_dim);
    c.tau_init = j.value("tau_init", c.tau_init);
    c.kd_teacher_dim = j.value("kd_teacher_dim", c.kd_teacher_dim);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

ModelBundle init_model(const ModelConfig& c, std::uint64_t seed) {
  if (c.adaptor_depth > 2) throw ConfigError("adaptor depth must be 0, 1 or 2");
  if (c.image_size < 8) throw ConfigError("image_size must be at least 8");
  if (c.adaptor_count > 0 && c.cache_dim < 1) throw ConfigError("adaptor needs a positive cache dim");
  if (!(c.tau_init >= kTauMin && c.tau_init <= kTauMax)) throw ConfigError("tau_init outside [1e-3, 10]");
  ModelBundle b;
  b.config = c;
  auto& p = b.params;

  std::size_t cin = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t fan_in = 9 * cin;
    p.add(conv_name(i) + ".w", normal_init(conv_name(i) + ".w", seed, {fan_in, c.channels[i]},
                                           std::sqrt(2.0 / static_cast<double>(fan_in))));
    p.add(conv_name(i) + ".b", Tensor(Shape{c.channels[i]}));
    cin = c.channels[i];
  }
  p.add("backbone.fc.w", normal_init("backbone.fc.w", seed, {cin, c.d_img}, std::sqrt(1.0 / static_cast<double>(cin))));
  p.add("backbone.fc.b", Tensor(Shape{c.d_img}));

  p.add("head.w", normal_init("head.w", seed, {c.num_classes, c.d_img}, std::sqrt(1.0 / static_cast<double>(c.d_img))));
  if (c.head == HeadKind::Cosine) {
    p.add("head.log_scale", Tensor(Shape{1}, std::log(c.cosine_scale_init)));
  } else {
    p.add("head.b", Tensor(Shape{c.num_classes}));
  }

  for (std::size_t k = 0; k < c.adaptor_count; ++k) {
    const std::string pre = adaptor_prefix(k);
    std::size_t width = c.d_img;
    for (std::size_t j = 0; j < c.adaptor_depth; ++j) {
      const std::string h = pre + "hidden" + std::to_string(j);
      const std::string bn = pre + "bn" + std::to_string(j);
      p.add(h + ".w", normal_init(h + ".w", seed, {width, c.d_img}, std::sqrt(2.0 / static_cast<double>(width))));
      p.add(h + ".b", Tensor(Shape{c.d_img}));
      p.add(bn + ".gamma", Tensor(Shape{c.d_img}, 1.0));
      p.add(bn + ".beta", Tensor(Shape{c.d_img}));
      p.add(bn + ".running_mean", Tensor(Shape{c.d_img}), false);
      p.add(bn + ".running_var", Tensor(Shape{c.d_img}, 1.0), false);
      width = c.d_img;
    }
    p.add(pre + "out.w", normal_init(pre + "out.w", seed, {width, c.cache_dim}, std::sqrt(1.0 / static_cast<double>(width))));
    p.add(pre + "out.b", Tensor(Shape{c.cache_dim}));
  }
  if (c.adaptor_count > 0) p.add("tau.log_inv_tau", Tensor(Shape{1}, -std::log(c.tau_init)));

  if (c.kd_teacher_dim > 0 && c.kd_teacher_dim != c.d_img) {
    p.add("kd.proj.w", normal_init("kd.proj.w", seed, {c.d_img, c.kd_teacher_dim},
                                   std::sqrt(1.0 / static_cast<double>(c.d_img))));
    p.add("kd.proj.b", Tensor(Shape{c.kd_teacher_dim}));
  }
  return b;
}

Tensor images_tensor(const std::vector<const SyntheticImage*>& images, std::size_t image_size,
                     const std::vector<bool>& flip) {
  const std::size_t per = image_size * image_size * 3;
  Tensor t(Shape{images.size(), image_size, image_size, 3});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& px = images[i]->pixels;
    if (px.size() != per) {
      throw ContractError("image " + images[i]->id + " has " + std::to_string(px.size()) + " values, expected " +
                          std::to_string(per));
    }
    double* dst = t.ptr() + i * per;
    if (!flip.empty() && flip[i]) {
      for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            dst[(y * image_size + x) * 3 + ch] = px[(y * image_size + (image_size - 1 - x)) * 3 + ch];
    } else {
      for (std::size_t k = 0; k < per; ++k) dst[k] = px[k];
    }
  }
  return t;
}

Var backbone_forward(Graph& g, const ModelConfig& c, Var images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != 3) {
    throw ContractError("backbone expects (B, " + std::to_string(c.image_size) + ", " + std::to_string(c.image_size) +
                        ", 3) input, got " + shape_string(s));
  }
  Var x = images;
  for (std::size_t i = 0; i < 4; ++i) {
    x = relu(conv2d(x, g.param(conv_name(i) + ".w"), g.param(conv_name(i) + ".b"), 3, 2, 1));
  }
  x = global_avg_pool(x);
  return add_bias(matmul(x, g.param("backbone.fc.w")), g.param("backbone.fc.b"));
}

Var classify(Graph& g, const ModelConfig& c, Var embeddings) {
  if (embeddings.shape().size() != 2 || embeddings.shape()[1] != c.d_img) {
    throw ContractError("classifier expects (B, " + std::to_string(c.d_img) + ") embeddings, got " +
                        shape_string(embeddings.shape()));
  }
  if (c.head == HeadKind::Linear) {
    return add_bias(matmul_nt(embeddings, g.param("head.w")), g.param("head.b"));
  }
  Var cos = matmul_nt(l2_normalize_rows(embeddings), l2_normalize_rows(g.param("head.w")));
  return mul_scalar(cos, exp(g.param("head.log_scale")));
}

Var adapt(Graph& g, const ModelConfig& c, std::size_t index, Var embeddings, Mode mode) {
  if (index >= c.adaptor_count) {
    throw ContractError("adaptor " + std::to_string(index) + " requested but the model has " +
                        std::to_string(c.adaptor_count));
  }
  const std::string pre = adaptor_prefix(index);
  Var x = embeddings;
  for (std::size_t j = 0; j < c.adaptor_depth; ++j) {
    const std::string h = pre + "hidden" + std::to_string(j);
    const std::string bn = pre + "bn" + std::to_string(j);
    x = add_bias(matmul(x, g.param(h + ".w")), g.param(h + ".b"));
    if (mode == Mode::Train) {
      if (x.shape()[0] < 2) {
        throw ContractError("text adaptor in train mode needs a batch of at least 2 (batch normalization); got " +
                            std::to_string(x.shape()[0]) + "; increase the batch size");
      }
      BatchStats stats;
      x = batch_norm_train(x, g.param(bn + ".gamma"), g.param(bn + ".beta"), kBnEps, &stats);
      if (ParamStore* store = g.store()) {
        Tensor& rm = store->value(bn + ".running_mean");
        Tensor& rv = store->value(bn + ".running_var");
        for (std::size_t i = 0; i < rm.size(); ++i) {
          rm[i] = (1.0 - kBnMomentum) * rm[i] + kBnMomentum * stats.mean[i];
          rv[i] = (1.0 - kBnMomentum) * rv[i] + kBnMomentum * stats.var_unbiased[i];
        }
      }
    } else {
      const ParamStore* store = g.store();
      if (!store) throw ContractError("eval-mode adaptor needs a parameter store for running moments");
      x = batch_norm_eval(x, g.param(bn + ".gamma"), g.param(bn + ".beta"), store->value(bn + ".running_mean"),
                          store->value(bn + ".running_var"), kBnEps);
    }
    x = relu(x);
  }
  return add_bias(matmul(x, g.param(pre + "out.w")), g.param(pre + "out.b"));
}

Var inverse_temperature(Graph& g) {
  return exp(clamp(g.param("tau.log_inv_tau"), -std::log(kTauMax), -std::log(kTauMin)));
}

double temperature(const ParamStore& params) {
  const double log_inv = params.value("tau.log_inv_tau")[0];
  return std::clamp(std::exp(-log_inv), kTauMin, kTauMax);
}

Var kd_project(Graph& g, const ModelConfig& c, Var embeddings) {
  if (c.kd_teacher_dim == 0 || c.kd_teacher_dim == c.d_img) return embeddings;
  return add_bias(matmul(embeddings, g.param("kd.proj.w")), g.param("kd.proj.b"));
}

ForwardOutputs predict(const ModelBundle& bundle, const std::vector<const SyntheticImage*>& images, std::size_t chunk) {
  ForwardOutputs out;
  const auto& c = bundle.config;
  out.embeddings = Tensor(Shape{images.size(), c.d_img});
  out.logits = Tensor(Shape{images.size(), c.num_classes});
  // Eval mode only reads the store; the const_cast never leads to a write.
  auto* store = const_cast<ParamStore*>(&bundle.params);
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<const SyntheticImage*> part(images.begin() + static_cast<long>(start),
                                            images.begin() + static_cast<long>(end));
    Graph g(store);
    g.set_grad_enabled(false);
    Var emb = backbone_forward(g, c, g.constant(images_tensor(part, c.image_size)));
    Var logits = classify(g, c, emb);
    std::copy(emb.value().data().begin(), emb.value().data().end(), out.embeddings.ptr() + start * c.d_img);
    std::copy(logits.value().data().begin(), logits.value().data().end(), out.logits.ptr() + start * c.num_classes);
  }
  return out;
}

ModelBundle inference_bundle(const ModelBundle& bundle) {
  ModelBundle out;
  out.config = bundle.config;
  out.config.adaptor_count = 0;
  out.config.kd_teacher_dim = 0;
  for (const auto& [name, e] : bundle.params.entries()) {
    if (name.starts_with("adaptor") || name.starts_with("tau.") || name.starts_with("kd.")) continue;
    out.params.add(name, e.value, e.trainable);
  }
  return out;
}

void save_bundle(const std::string& path, const ModelBundle& bundle) {
  binio::Writer w;
  w.put_bytes(std::string_view(kBundleMagic, sizeof(kBundleMagic)));
  w.put<std::uint32_t>(kBundleVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.params.size()));
  for (const auto& [name, e] : bundle.params.entries()) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(e.trainable ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.put<std::uint64_t>(d);
    for (double x : e.value.data()) w.put_f64(x);
  }
  binio::write_file(path, w.bytes());
  nlohmann::json side = {{"format", "vlmkd-bundle"}, {"version", kBundleVersion}, {"architecture", to_json(bundle.config)}};
  binio::write_text(path + ".json", side.dump(2) + "\n");
}

ModelBundle load_bundle(const std::string& path) {
  if (!std::filesystem::exists(path)) throw PathError("model weights '" + path + "' do not exist");
  if (!std::filesystem::exists(path + ".json")) {
    throw PathError("model sidecar '" + path + ".json' is missing; weights cannot be interpreted");
  }
  ModelBundle b;
  try {
    b.config = model_config_from_json(nlohmann::json::parse(binio::read_file(path + ".json")).at("architecture"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model sidecar '" + path + ".json' unreadable: " + e.what());
  }

  const std::string bytes = binio::read_file(path);
  binio::Reader r(bytes);
  std::string magic;
  if (!r.get_bytes(sizeof(kBundleMagic), magic) || std::memcmp(magic.data(), kBundleMagic, sizeof(kBundleMagic)) != 0) {
    throw FormatError("'" + path + "' is not a model bundle (bad magic)");
  }
  std::uint32_t version = 0, count = 0;
  if (!r.get(version) || !r.get(count)) throw CorruptionError("bundle header truncated at byte " + std::to_string(r.offset()));
  if (version != kBundleVersion) throw FormatError("unsupported bundle version " + std::to_string(version));
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint16_t len = 0;
    std::string name;
    std::uint8_t trainable = 0;
    std::uint32_t rank = 0;
    if (!r.get(len) || !r.get_bytes(len, name) || !r.get(trainable) || !r.get(rank)) {
      throw CorruptionError("bundle truncated at byte " + std::to_string(r.offset()));
    }
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!r.get(v)) throw CorruptionError("bundle truncated at byte " + std::to_string(r.offset()));
      d = static_cast<std::size_t>(v);
    }
    Tensor t(shape);
    for (double& x : t.data()) {
      if (!r.get_f64(x)) throw CorruptionError("bundle truncated in '" + name + "' at byte " + std::to_string(r.offset()));
    }
    b.params.add(name, std::move(t), trainable != 0);
  }

  // Layout check against a freshly initialized model of the declared architecture.
  const ModelBundle ref = init_model(b.config, 0);
  if (ref.params.names() != b.params.names()) {
    throw ConfigError("bundle '" + path + "' parameters do not match its declared architecture");
  }
  for (const auto& name : ref.params.names()) {
    if (ref.params.value(name).shape() != b.params.value(name).shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_string(b.params.value(name).shape()) +
                        ", architecture expects " + shape_string(ref.params.value(name).shape()));
    }
  }
  return b;
}

ModelBundle load_bundle(const std::string& path, const ModelConfig& expected) {
  ModelBundle b = load_bundle(path);
  if (!(b.config == expected)) {
    throw ConfigError("bundle '" + path + "' architecture " + to_json(b.config).dump() + " does not match expected " +
                      to_json(expected).dump());
  }
  return b;
}

}  // namespace vlmkd
