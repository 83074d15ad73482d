#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "vlmkd/captions.hpp"

namespace vlmkd {

/// Unit-norm text features keyed by image id. Entries whose caption produced
/// no tokens are stored as zero vectors and listed in `flagged`.
struct EmbeddingCache {
  std::size_t dim = 0;
  std::string encoder_id;
  std::map<std::string, std::vector<float>> entries;
  std::vector<std::string> sources;  // prompt ids whose captions were encoded
  std::set<std::string> flagged;

  const std::vector<float>& at(const std::string& id) const;
};

enum class EncoderKind { HashedBow, Remote };

struct TextEncoderSpec {
  EncoderKind kind = EncoderKind::HashedBow;
  std::size_t dim = 64;
  std::string endpoint;
  std::string model;
};

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv1a64(std::string_view bytes);
/// Lowercased maximal runs of ASCII alphanumerics, in order of appearance.
std::vector<std::string> tokenize(std::string_view text);

/// Signed feature hashing: each token adds +1 (bit 63 of its FNV-1a hash clear)
/// or -1 (set) to bucket hash % dim, then the sum is l2-normalized. A caption
/// without tokens yields the zero vector and sets `*empty`.
std::vector<double> encode_hashed_bow(std::string_view caption, std::size_t dim, bool* empty = nullptr);
std::string hashed_encoder_id(std::size_t dim);

EmbeddingCache encode_caption_set_hashed(const CaptionSet& captions, std::size_t dim);
/// One cache from the per-image concatenation (joined with a space, in the
/// given prompt order) of several caption sets covering the same ids.
EmbeddingCache encode_concatenated_hashed(const std::vector<CaptionSet>& sets, std::size_t dim);
std::map<std::string, std::string> concatenate_captions(const std::vector<CaptionSet>& sets);

inline constexpr char kCacheMagic[8] = {'V', 'K', 'D', 'E', 'M', 'B', '0', '1'};
inline constexpr std::uint32_t kCacheVersion = 1;

/// Binary layout (little-endian): magic "VKDEMB01", u32 version, u32 dim,
/// u64 count, then per entry in id order: u16 id length, id bytes, dim f32.
std::vector<char> cache_bytes(const EmbeddingCache& cache);
void cache_write(const std::string& path, const EmbeddingCache& cache);
EmbeddingCache cache_parse(std::string_view bytes);
EmbeddingCache cache_read(const std::string& path);

/// Binary cache plus `<path>.json` sidecar (encoder id, sources, flagged ids).
void save_cache(const std::string& path, const EmbeddingCache& cache);
EmbeddingCache load_cache(const std::string& path);

}  // namespace vlmkd
