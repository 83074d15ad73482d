#include "vlmkd/text_embedding.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "vlmkd/binio.hpp"
#include "vlmkd/error.hpp"

namespace vlmkd {

namespace {

constexpr double kNormTolerance = 1e-3;

std::vector<float> normalized_f32(const std::vector<float>& v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (norm == 0.0) return v;
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

}  // namespace

const std::vector<float>& EmbeddingCache::at(const std::string& id) const {
  auto it = entries.find(id);
  if (it == entries.end()) throw WiringError("embedding cache has no entry for id '" + id + "'");
  return it->second;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = kFnvOffset;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::vector<double> encode_hashed_bow(std::string_view caption, std::size_t dim, bool* empty) {
  if (dim < 8) throw ConfigError("hashed encoder dim must be at least 8");
  std::vector<double> v(dim, 0.0);
  const auto tokens = tokenize(caption);
  if (empty) *empty = tokens.empty();
  for (const auto& tok : tokens) {
    const std::uint64_t h = fnv1a64(tok);
    v[h % dim] += (h >> 63) ? -1.0 : 1.0;
  }
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double denom = std::max(std::sqrt(sq), 1e-12);
  for (double& x : v) x /= denom;
  return v;
}

std::string hashed_encoder_id(std::size_t dim) { return "hashed_bow-fnv1a64-d" + std::to_string(dim); }

namespace {

EmbeddingCache encode_map(const std::map<std::string, std::string>& captions, std::size_t dim) {
  EmbeddingCache cache;
  cache.dim = dim;
  cache.encoder_id = hashed_encoder_id(dim);
  for (const auto& [id, caption] : captions) {
    bool empty = false;
    const auto v = encode_hashed_bow(caption, dim, &empty);
    cache.entries[id] = std::vector<float>(v.begin(), v.end());
    if (empty) cache.flagged.insert(id);
  }
  return cache;
}

}  // namespace

EmbeddingCache encode_caption_set_hashed(const CaptionSet& captions, std::size_t dim) {
  EmbeddingCache cache = encode_map(captions.records, dim);
  cache.sources = {captions.prompt_id};
  return cache;
}

std::map<std::string, std::string> concatenate_captions(const std::vector<CaptionSet>& sets) {
  if (sets.empty()) throw ConfigError("concatenation needs at least one caption set");
  std::map<std::string, std::string> joined;
  for (const auto& [id, caption] : sets.front().records) {
    std::string text = caption;
    for (std::size_t k = 1; k < sets.size(); ++k) {
      auto it = sets[k].records.find(id);
      if (it == sets[k].records.end()) {
        throw WiringError("caption set '" + sets[k].prompt_id + "' is missing id '" + id + "'");
      }
      text += " " + it->second;
    }
    joined[id] = std::move(text);
  }
  for (std::size_t k = 1; k < sets.size(); ++k) {
    if (sets[k].records.size() != sets.front().records.size()) {
      throw WiringError("caption sets cover different ids; cannot concatenate");
    }
  }
  return joined;
}

EmbeddingCache encode_concatenated_hashed(const std::vector<CaptionSet>& sets, std::size_t dim) {
  EmbeddingCache cache = encode_map(concatenate_captions(sets), dim);
  for (const auto& s : sets) cache.sources.push_back(s.prompt_id);
  return cache;
}

std::vector<char> cache_bytes(const EmbeddingCache& cache) {
  binio::Writer w;
  w.put_bytes(std::string_view(kCacheMagic, sizeof(kCacheMagic)));
  w.put<std::uint32_t>(kCacheVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cache.dim));
  w.put<std::uint64_t>(cache.entries.size());
  for (const auto& [id, vec] : cache.entries) {
    if (vec.size() != cache.dim) {
      throw ContractError("cache entry '" + id + "' has dim " + std::to_string(vec.size()) + ", expected " +
                          std::to_string(cache.dim));
    }
    if (id.size() > 0xFFFF) throw ContractError("cache id longer than 65535 bytes");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(id.size()));
    w.put_bytes(id);
    for (float x : normalized_f32(vec)) w.put_f32(x);
  }
  return w.bytes();
}

void cache_write(const std::string& path, const EmbeddingCache& cache) { binio::write_file(path, cache_bytes(cache)); }

EmbeddingCache cache_parse(std::string_view bytes) {
  binio::Reader r(bytes);
  std::string magic;
  if (!r.get_bytes(sizeof(kCacheMagic), magic) || std::memcmp(magic.data(), kCacheMagic, sizeof(kCacheMagic)) != 0) {
    throw FormatError("not an embedding cache: bad magic");
  }
  std::uint32_t version = 0, dim = 0;
  std::uint64_t count = 0;
  if (!r.get(version) || !r.get(dim) || !r.get(count)) {
    throw CorruptionError("embedding cache truncated in header at byte offset " + std::to_string(r.offset()));
  }
  if (version != kCacheVersion) throw FormatError("unsupported embedding cache version " + std::to_string(version));
  if (dim == 0) throw FormatError("embedding cache declares dim 0");

  EmbeddingCache cache;
  cache.dim = dim;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::size_t entry_offset = r.offset();
    std::uint16_t len = 0;
    std::string id;
    if (!r.get(len) || !r.get_bytes(len, id)) {
      throw CorruptionError("embedding cache truncated in entry " + std::to_string(k) + " at byte offset " +
                            std::to_string(entry_offset));
    }
    std::vector<float> vec(dim);
    for (float& x : vec) {
      if (!r.get_f32(x)) {
        throw CorruptionError("embedding cache truncated in entry '" + id + "' at byte offset " +
                              std::to_string(r.offset()));
      }
    }
    double sq = 0.0;
    for (float x : vec) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm == 0.0) {
      cache.flagged.insert(id);
    } else if (std::abs(norm - 1.0) > kNormTolerance) {
      throw IntegrityError("embedding for id '" + id + "' has norm " + std::to_string(norm));
    }
    if (!cache.entries.emplace(id, std::move(vec)).second) throw CorruptionError("duplicate cache id '" + id + "'");
  }
  if (r.remaining() != 0) {
    throw CorruptionError("embedding cache has " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                          std::to_string(r.offset()));
  }
  return cache;
}

EmbeddingCache cache_read(const std::string& path) { return cache_parse(binio::read_file(path)); }

void save_cache(const std::string& path, const EmbeddingCache& cache) {
  cache_write(path, cache);
  nlohmann::json side{{"dim", cache.dim},
                      {"encoder_id", cache.encoder_id},
                      {"count", cache.entries.size()},
                      {"sources", cache.sources},
                      {"flagged", std::vector<std::string>(cache.flagged.begin(), cache.flagged.end())}};
  binio::write_text(path + ".json", side.dump(2) + "\n");
}

EmbeddingCache load_cache(const std::string& path) {
  if (!std::filesystem::exists(path)) {
    throw PathError("embedding cache '" + path + "' does not exist (build it with `vlmkd encode`)");
  }
  EmbeddingCache cache = cache_read(path);
  const std::string side_path = path + ".json";
  if (std::filesystem::exists(side_path)) {
    try {
      const auto side = nlohmann::json::parse(binio::read_file(side_path));
      cache.encoder_id = side.value("encoder_id", "");
      cache.sources = side.value("sources", std::vector<std::string>{});
      for (const auto& id : side.value("flagged", std::vector<std::string>{})) cache.flagged.insert(id);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("cache sidecar '" + side_path + "' is not valid JSON: " + e.what());
    }
  }
  if (cache.sources.empty()) cache.sources = {std::filesystem::path(path).stem().string()};
  return cache;
}

}  // namespace vlmkd
