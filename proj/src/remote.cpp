#include "vlmkd/remote.hpp"

#include <httplib.h>
#include <openssl/evp.h>
#include <png.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <thread>

#include "vlmkd/error.hpp"

namespace vlmkd {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint '" + url + "' has no scheme (http:// or https://)");
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

}  // namespace

std::string api_key_from_env() {
  const char* v = std::getenv(kApiKeyEnv);
  return v ? std::string(v) : std::string();
}

std::string describe(const Endpoint& e) {
  return e.url + (e.model.empty() ? "" : " (model " + e.model + ")") + (e.api_key.empty() ? "" : " [key set]");
}

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<unsigned char> encode_png(const std::vector<float>& pixels, std::size_t image_size) {
  if (pixels.size() != image_size * image_size * 3) throw ContractError("encode_png: pixel count does not match size");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> out;
  std::vector<unsigned char> rows(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    rows[i] = static_cast<unsigned char>(std::lround(std::clamp(pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG encoding failed");
  }
  const auto side = static_cast<png_uint_32>(image_size);
  png_set_write_fn(png, &out, png_write_to_vector, nullptr);
  png_set_IHDR(png, info, side, side, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image_size; ++y) png_write_row(png, rows.data() + y * image_size * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

nlohmann::json post_json(const Endpoint& endpoint, const nlohmann::json& body) {
  const SplitUrl u = split_url(endpoint.url);
  httplib::Client client(u.origin);
  client.set_connection_timeout(endpoint.timeout_seconds, 0);
  client.set_read_timeout(endpoint.timeout_seconds, 0);
  client.set_write_timeout(endpoint.timeout_seconds, 0);
  httplib::Headers headers;
  if (!endpoint.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint.api_key);

  const std::string payload = body.dump();
  const int attempts = std::max(1, endpoint.attempts);
  double wait = endpoint.backoff_seconds;
  std::string last_error;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    auto res = client.Post(u.path, headers, payload, "application/json");
    if (res && res->status >= 200 && res->status < 300) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::parse_error&) {
        throw MalformedResponseError("response from " + endpoint.url + " is not valid JSON");
      }
    }
    last_error = res ? "HTTP " + std::to_string(res->status) : "connection failed (" + httplib::to_string(res.error()) + ")";
    spdlog::warn("request to {} failed on attempt {}/{}: {}", endpoint.url, attempt, attempts, last_error);
    if (attempt < attempts) {
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      wait *= 2.0;
    }
  }
  throw TransportError("request to " + endpoint.url + " failed after " + std::to_string(attempts) +
                       " attempts: " + last_error);
}

std::string remote_caption(const Endpoint& endpoint, const PromptTemplate& prompt,
                           const std::vector<unsigned char>& png, const std::string& classname) {
  const std::string text = render_prompt(prompt, classname);
  nlohmann::json content = nlohmann::json::array();
  content.push_back({{"type", "text"}, {"text", text}});
  content.push_back({{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + base64_encode(png)}}}});
  nlohmann::json body = {{"messages", {{{"role", "user"}, {"content", content}}}}};
  if (!endpoint.model.empty()) body["model"] = endpoint.model;

  const nlohmann::json res = post_json(endpoint, body);
  std::string caption;
  try {
    caption = res.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw MalformedResponseError("chat completion from " + endpoint.url + " has no choices[0].message.content");
  }
  if (caption.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw MalformedResponseError("chat completion from " + endpoint.url + " is empty");
  }
  spdlog::debug("caption for prompt '{}': {}", prompt.id, caption);
  return caption;
}

Captioner remote_captioner(const Endpoint& endpoint, std::size_t image_size) {
  return [endpoint, image_size](const SyntheticImage& image, const PromptTemplate& prompt, const std::string& classname) {
    return remote_caption(endpoint, prompt, encode_png(image.pixels, image_size), classname);
  };
}

std::vector<std::vector<double>> remote_embed(const Endpoint& endpoint, const std::vector<std::string>& inputs) {
  nlohmann::json body = {{"input", inputs}};
  if (!endpoint.model.empty()) body["model"] = endpoint.model;
  const nlohmann::json res = post_json(endpoint, body);

  std::vector<std::vector<double>> out(inputs.size());
  std::vector<bool> seen(inputs.size(), false);
  try {
    const auto& data = res.at("data");
    if (data.size() != inputs.size()) {
      throw ProtocolError("embeddings response has " + std::to_string(data.size()) + " vectors for " +
                          std::to_string(inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t index = data[i].value("index", i);
      if (index >= inputs.size() || seen[index]) throw ProtocolError("embeddings response has a bad index");
      seen[index] = true;
      out[index] = data[i].at("embedding").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception&) {
    throw MalformedResponseError("embeddings response from " + endpoint.url + " lacks data[].embedding");
  }
  for (auto& v : out) {
    if (v.size() != out.front().size()) {
      throw ProtocolError("embeddings response mixes dimensions " + std::to_string(out.front().size()) + " and " +
                          std::to_string(v.size()));
    }
    if (v.empty()) throw ProtocolError("embeddings response contains an empty vector");
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0) {
      for (double& x : v) x /= n;
    }
  }
  return out;
}

std::string remote_encoder_id(const Endpoint& endpoint) {
  return "remote:" + (endpoint.model.empty() ? std::string("default") : endpoint.model);
}

EmbeddingCache encode_caption_set_remote(const CaptionSet& captions, const Endpoint& endpoint, std::size_t batch_size) {
  EmbeddingCache cache;
  cache.encoder_id = remote_encoder_id(endpoint);
  cache.sources = {captions.prompt_id};
  std::vector<std::string> ids, texts;
  for (const auto& [id, caption] : captions.records) {
    ids.push_back(id);
    texts.push_back(caption);
  }
  const std::size_t step = std::max<std::size_t>(1, batch_size);
  for (std::size_t start = 0; start < texts.size(); start += step) {
    const std::size_t end = std::min(texts.size(), start + step);
    const auto vectors = remote_embed(endpoint, {texts.begin() + start, texts.begin() + end});
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      if (cache.dim == 0) cache.dim = vectors[i].size();
      if (vectors[i].size() != cache.dim) {
        throw ProtocolError("embedding dim changed from " + std::to_string(cache.dim) + " to " +
                            std::to_string(vectors[i].size()) + " between batches");
      }
      std::vector<float> f(vectors[i].begin(), vectors[i].end());
      if (std::all_of(f.begin(), f.end(), [](float x) { return x == 0.0f; })) cache.flagged.insert(ids[start + i]);
      cache.entries[ids[start + i]] = std::move(f);
    }
  }
  return cache;
}

}  // namespace vlmkd
