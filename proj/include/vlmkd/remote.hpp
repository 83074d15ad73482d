#pragma once

#include <string>
#include <vector>

#include "vlmkd/captions.hpp"
#include "vlmkd/text_embedding.hpp"

namespace vlmkd {

inline constexpr const char* kApiKeyEnv = "VLMKD_API_KEY";

/// An OpenAI-compatible HTTP endpoint. `url` is the full request URL, e.g.
/// http://localhost:8000/v1/chat/completions.
struct Endpoint {
  std::string url;
  std::string model;
  std::string api_key;  // sent as a bearer token; never logged
  int attempts = 3;
  double backoff_seconds = 0.5;  // doubled after every failed attempt
  int timeout_seconds = 120;
};

/// Value of VLMKD_API_KEY, or empty when unset.
std::string api_key_from_env();

/// Endpoint description safe for logs and manifests (no key).
std::string describe(const Endpoint& endpoint);

std::string base64_encode(const std::vector<unsigned char>& bytes);
/// 8-bit RGB PNG of an H x W x 3 float image in [0, 1].
std::vector<unsigned char> encode_png(const std::vector<float>& pixels, std::size_t image_size);

/// POSTs `body` as JSON and returns the parsed response. Connection failures
/// and non-2xx statuses are retried; after the last attempt a TransportError
/// naming the attempt count is raised. A body that is not JSON raises
/// MalformedResponseError.
nlohmann::json post_json(const Endpoint& endpoint, const nlohmann::json& body);

/// Chat-completions request with the rendered prompt and the image as a
/// base64 data URL; returns the first choice's message text.
std::string remote_caption(const Endpoint& endpoint, const PromptTemplate& prompt,
                           const std::vector<unsigned char>& png, const std::string& classname);
Captioner remote_captioner(const Endpoint& endpoint, std::size_t image_size);

/// Embeddings request `{model, input: [...]}` answered by `{data: [{index, embedding}]}`.
/// Vectors are l2-normalized here; differing dimensions raise ProtocolError.
std::vector<std::vector<double>> remote_embed(const Endpoint& endpoint, const std::vector<std::string>& inputs);

/// Encodes every caption of `captions` through `remote_embed` in batches.
EmbeddingCache encode_caption_set_remote(const CaptionSet& captions, const Endpoint& endpoint,
                                         std::size_t batch_size = 32);
std::string remote_encoder_id(const Endpoint& endpoint);

}  // namespace vlmkd
