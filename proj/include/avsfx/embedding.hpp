#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace avsfx {

/// Embeddings are stored in 32-bit floats; every reduction over them
/// accumulates in double.
using Vector = std::vector<float>;

inline constexpr std::size_t kDefaultEmbeddingDim = 512;
inline constexpr std::size_t kMaxIdBytes = 256;

enum class ItemKind { Audio, Frame, Text };
enum class Split { Train, Val, Test };

std::string_view to_string(ItemKind kind) noexcept;
std::string_view to_string(Split split) noexcept;
ItemKind parse_item_kind(std::string_view s);
Split parse_split(std::string_view s);

/// Metadata record that travels with every stored vector. Audio items use
/// tags/category/duration, frames use video_id/frame_index, text items
/// (sentence embeddings) are keyed by the audio id they describe.
struct ItemMeta {
  std::string id;
  ItemKind kind = ItemKind::Text;
  std::vector<std::string> tags;
  std::string category;
  std::optional<Split> split;
  std::string video_id;
  std::optional<std::uint32_t> frame_index;
  std::optional<double> duration_s;

  bool operator==(const ItemMeta&) const = default;
};

nlohmann::json meta_to_json(const ItemMeta& meta);
/// Unknown fields are ignored; required fields are checked per kind.
ItemMeta meta_from_json(const nlohmann::json& j);

/// Sum of products accumulated in double.
double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> v);

/// Throws ZeroVector when the norm is at or below 1e-12.
Vector l2_normalize(std::span<const float> v);

/// Dot product of two unit vectors clamped to [-1, 1]. Throws DimMismatch.
double cosine(std::span<const float> a, std::span<const float> b);

/// Immutable, row-ordered collection of unit vectors with one metadata
/// record per row. Build it with StoreBuilder or load_store().
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::size_t dim);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return meta_.size(); }
  bool empty() const noexcept { return meta_.empty(); }

  const std::string& id(std::size_t row) const { return meta_[row].id; }
  const ItemMeta& meta(std::size_t row) const { return meta_[row]; }
  const std::vector<ItemMeta>& metas() const noexcept { return meta_; }
  std::span<const float> vector(std::size_t row) const {
    return {data_.data() + row * dim_, dim_};
  }
  std::span<const float> data() const noexcept { return data_; }

  /// Position of the row's id in ascending lexicographic id order. Used for
  /// integer tie-breaking on the scan hot path.
  std::uint32_t lex_rank(std::size_t row) const { return lex_rank_[row]; }

  std::optional<std::size_t> find(std::string_view id) const;
  /// Throws UnknownId.
  std::size_t row_of(std::string_view id) const;
  bool contains(std::string_view id) const { return find(id).has_value(); }

  template <typename Pred>
  EmbeddingStore subset(Pred&& keep) const;

  /// Same vectors, metadata rewritten by `fn` (ids must not change).
  template <typename Fn>
  EmbeddingStore remap_meta(Fn&& fn) const;

  bool operator==(const EmbeddingStore& other) const;

 private:
  friend class StoreBuilder;
  void finalize();

  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<ItemMeta> meta_;
  std::vector<std::uint32_t> lex_rank_;
  std::unordered_map<std::string, std::size_t> index_;
};

class StoreBuilder {
 public:
  explicit StoreBuilder(std::size_t dim);

  /// Normalizes `raw` and appends it. Throws DimMismatch, ZeroVector,
  /// DuplicateId, BadMetadata (non-ASCII or oversized id).
  StoreBuilder& add(ItemMeta meta, std::span<const float> raw);
  /// Appends a vector that is already unit-normalized, bit for bit.
  StoreBuilder& add_normalized(ItemMeta meta, std::span<const float> unit);

  std::size_t size() const noexcept { return store_.meta_.size(); }
  EmbeddingStore build() &&;

 private:
  void check(const ItemMeta& meta, std::size_t n) const;
  EmbeddingStore store_;
};

template <typename Pred>
EmbeddingStore EmbeddingStore::subset(Pred&& keep) const {
  StoreBuilder b(dim_);
  for (std::size_t r = 0; r < size(); ++r) {
    if (keep(meta_[r])) b.add_normalized(meta_[r], vector(r));
  }
  return std::move(b).build();
}

template <typename Fn>
EmbeddingStore EmbeddingStore::remap_meta(Fn&& fn) const {
  StoreBuilder b(dim_);
  for (std::size_t r = 0; r < size(); ++r) {
    ItemMeta m = fn(meta_[r]);
    m.id = meta_[r].id;
    b.add_normalized(std::move(m), vector(r));
  }
  return std::move(b).build();
}

// On-disk layout (little-endian):
//   "AVCE" | u16 version=1 | u16 flags (bit0: pre-normalized) | u32 dim | u64 count
//   count x { u16 id_len | id bytes | dim x f32 }
// Metadata lives in a JSON-lines sidecar next to the binary file.
inline constexpr std::uint16_t kStoreVersion = 1;
inline constexpr std::uint16_t kFlagPreNormalized = 0x1;

std::filesystem::path sidecar_path(const std::filesystem::path& store_path);

/// Throws BadMagic, VersionUnsupported, DimMismatch, DuplicateId,
/// TruncatedFile, IoFailure, BadMetadata.
EmbeddingStore load_store(const std::filesystem::path& path);
/// Throws IoFailure.
void save_store(const EmbeddingStore& store, const std::filesystem::path& path);

/// Writes the binary part only, optionally as raw (un-normalized) vectors.
/// Exposed for fixtures that need files produced by external tools.
void write_store_file(const std::filesystem::path& path, std::size_t dim,
                      const std::vector<std::string>& ids, std::span<const float> data,
                      bool pre_normalized);

}  // namespace avsfx
