#include "avsfx/embedding.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "avsfx/error.hpp"

namespace avsfx {

static_assert(std::endian::native == std::endian::little,
              "store files are written with native little-endian layout");

namespace {

constexpr char kMagic[4] = {'A', 'V', 'C', 'E'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 2 + 4 + 8;

bool is_ascii(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return static_cast<unsigned char>(c) < 0x80; });
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    std::string_view v(bytes_.data() + pos_, n);
    pos_ += n;
    return v;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::TruncatedFile, "unexpected end of store file at byte " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoFailure, "read error on " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw Error(ErrorCode::IoFailure, "write error on " + path.string());
}

}  // namespace

std::string_view to_string(ItemKind kind) noexcept {
  switch (kind) {
    case ItemKind::Audio: return "audio";
    case ItemKind::Frame: return "frame";
    case ItemKind::Text: return "text";
  }
  return "text";
}

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

ItemKind parse_item_kind(std::string_view s) {
  if (s == "audio") return ItemKind::Audio;
  if (s == "frame") return ItemKind::Frame;
  if (s == "text") return ItemKind::Text;
  throw Error(ErrorCode::BadMetadata, "unknown item kind '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw Error(ErrorCode::BadMetadata, "unknown split '" + std::string(s) + "'");
}

nlohmann::json meta_to_json(const ItemMeta& meta) {
  nlohmann::json j;
  j["id"] = meta.id;
  j["kind"] = to_string(meta.kind);
  j["tags"] = meta.tags;
  if (!meta.category.empty()) j["category"] = meta.category;
  if (meta.split) j["split"] = to_string(*meta.split);
  if (!meta.video_id.empty()) j["video_id"] = meta.video_id;
  if (meta.frame_index) j["frame_index"] = *meta.frame_index;
  if (meta.duration_s) j["duration_s"] = *meta.duration_s;
  return j;
}

ItemMeta meta_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::BadMetadata, "metadata record is not an object");
  ItemMeta m;
  try {
    if (!j.contains("id")) throw Error(ErrorCode::BadMetadata, "record without id");
    m.id = j.at("id").get<std::string>();
    m.kind = parse_item_kind(j.value("kind", std::string("text")));
    if (auto it = j.find("tags"); it != j.end() && !it->is_null()) m.tags = it->get<std::vector<std::string>>();
    if (auto it = j.find("category"); it != j.end() && !it->is_null()) m.category = it->get<std::string>();
    if (auto it = j.find("split"); it != j.end() && !it->is_null()) m.split = parse_split(it->get<std::string>());
    if (auto it = j.find("video_id"); it != j.end() && !it->is_null()) m.video_id = it->get<std::string>();
    if (auto it = j.find("frame_index"); it != j.end() && !it->is_null()) m.frame_index = it->get<std::uint32_t>();
    if (auto it = j.find("duration_s"); it != j.end() && !it->is_null()) m.duration_s = it->get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMetadata, std::string("malformed metadata record: ") + e.what());
  }
  switch (m.kind) {
    case ItemKind::Audio:
      if (m.category.empty()) throw Error(ErrorCode::BadMetadata, "audio item '" + m.id + "' has no category");
      if (m.duration_s && *m.duration_s < 0) throw Error(ErrorCode::BadMetadata, "negative duration on '" + m.id + "'");
      break;
    case ItemKind::Frame:
      if (m.video_id.empty() || !m.frame_index) {
        throw Error(ErrorCode::BadMetadata, "frame item '" + m.id + "' needs video_id and frame_index");
      }
      break;
    case ItemKind::Text:
      break;
  }
  return m;
}

double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

Vector l2_normalize(std::span<const float> v) {
  const double norm = l2_norm(v);
  if (!(norm > 1e-12)) throw Error(ErrorCode::ZeroVector, "cannot normalize a vector with norm " + std::to_string(norm));
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(static_cast<double>(v[i]) / norm);
  return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  return std::clamp(dot(a, b), -1.0, 1.0);
}

// --- EmbeddingStore ---------------------------------------------------------

EmbeddingStore::EmbeddingStore(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw Error(ErrorCode::BadConfig, "embedding dim must be positive");
}

std::optional<std::size_t> EmbeddingStore::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t EmbeddingStore::row_of(std::string_view id) const {
  auto row = find(id);
  if (!row) throw Error(ErrorCode::UnknownId, "no item '" + std::string(id) + "'");
  return *row;
}

bool EmbeddingStore::operator==(const EmbeddingStore& other) const {
  if (dim_ != other.dim_ || meta_ != other.meta_ || data_.size() != other.data_.size()) return false;
  return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

void EmbeddingStore::finalize() {
  std::vector<std::uint32_t> order(meta_.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return meta_[a].id < meta_[b].id; });
  lex_rank_.assign(meta_.size(), 0);
  for (std::uint32_t pos = 0; pos < order.size(); ++pos) lex_rank_[order[pos]] = pos;
}

StoreBuilder::StoreBuilder(std::size_t dim) : store_(dim) {}

void StoreBuilder::check(const ItemMeta& meta, std::size_t n) const {
  if (n != store_.dim_) {
    throw Error(ErrorCode::DimMismatch, "item '" + meta.id + "' has dim " + std::to_string(n) + ", store has " +
                                            std::to_string(store_.dim_));
  }
  if (meta.id.empty() || meta.id.size() > kMaxIdBytes || !is_ascii(meta.id)) {
    throw Error(ErrorCode::BadMetadata, "ids must be non-empty ASCII of at most 256 bytes: '" + meta.id + "'");
  }
  if (store_.index_.count(meta.id) != 0) throw Error(ErrorCode::DuplicateId, "duplicate id '" + meta.id + "'");
}

StoreBuilder& StoreBuilder::add(ItemMeta meta, std::span<const float> raw) {
  check(meta, raw.size());
  Vector unit = l2_normalize(raw);
  return add_normalized(std::move(meta), unit);
}

StoreBuilder& StoreBuilder::add_normalized(ItemMeta meta, std::span<const float> unit) {
  check(meta, unit.size());
  store_.index_.emplace(meta.id, store_.meta_.size());
  store_.data_.insert(store_.data_.end(), unit.begin(), unit.end());
  store_.meta_.push_back(std::move(meta));
  return *this;
}

EmbeddingStore StoreBuilder::build() && {
  store_.finalize();
  return std::move(store_);
}

// --- file format ------------------------------------------------------------

std::filesystem::path sidecar_path(const std::filesystem::path& store_path) {
  std::filesystem::path p = store_path;
  p += ".meta.jsonl";
  return p;
}

void write_store_file(const std::filesystem::path& path, std::size_t dim, const std::vector<std::string>& ids,
                      std::span<const float> data, bool pre_normalized) {
  if (data.size() != ids.size() * dim) throw Error(ErrorCode::DimMismatch, "payload size does not match ids x dim");
  std::string out;
  out.reserve(kHeaderBytes + ids.size() * (2 + 16 + dim * sizeof(float)));
  out.append(kMagic, 4);
  put<std::uint16_t>(out, kStoreVersion);
  put<std::uint16_t>(out, pre_normalized ? kFlagPreNormalized : 0);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
  put<std::uint64_t>(out, ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(ids[r].size()));
    out.append(ids[r]);
    out.append(reinterpret_cast<const char*>(data.data() + r * dim), dim * sizeof(float));
  }
  write_file(path, out);
}

void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  std::vector<std::string> ids;
  ids.reserve(store.size());
  std::string sidecar;
  for (const auto& m : store.metas()) {
    ids.push_back(m.id);
    sidecar += meta_to_json(m).dump();
    sidecar += '\n';
  }
  write_store_file(path, store.dim(), ids, store.data(), true);
  write_file(sidecar_path(path), sidecar);
}

EmbeddingStore load_store(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Reader rd(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::BadMagic, path.string() + " is not an embedding store");
  }
  rd.take(4);
  const auto version = rd.get<std::uint16_t>();
  if (version != kStoreVersion) throw Error(ErrorCode::VersionUnsupported, "store version " + std::to_string(version));
  const auto flags = rd.get<std::uint16_t>();
  const auto dim = rd.get<std::uint32_t>();
  const auto count = rd.get<std::uint64_t>();
  if (dim == 0) throw Error(ErrorCode::DimMismatch, "store declares dim 0");
  const bool pre_normalized = (flags & kFlagPreNormalized) != 0;

  // Metadata first so that records can be paired with vectors as they stream.
  std::vector<ItemMeta> metas;
  const auto side = sidecar_path(path);
  {
    std::ifstream in(side);
    if (!in) throw Error(ErrorCode::IoFailure, "missing metadata sidecar " + side.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::BadMetadata, std::string("sidecar line is not JSON: ") + e.what());
      }
      metas.push_back(meta_from_json(j));
    }
  }
  std::unordered_map<std::string, std::size_t> meta_index;
  for (std::size_t i = 0; i < metas.size(); ++i) {
    if (!meta_index.emplace(metas[i].id, i).second) {
      throw Error(ErrorCode::DuplicateId, "duplicate id '" + metas[i].id + "' in sidecar");
    }
  }

  StoreBuilder builder(dim);
  std::vector<float> vec(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto id_len = rd.get<std::uint16_t>();
    std::string id(rd.take(id_len));
    std::string_view raw = rd.take(std::size_t{dim} * sizeof(float));
    std::memcpy(vec.data(), raw.data(), raw.size());
    auto it = meta_index.find(id);
    if (it == meta_index.end()) throw Error(ErrorCode::BadMetadata, "vector '" + id + "' has no metadata record");
    ItemMeta meta = metas[it->second];
    if (pre_normalized) {
      builder.add_normalized(std::move(meta), vec);
    } else {
      builder.add(std::move(meta), vec);
    }
  }
  if (rd.remaining() != 0) {
    throw Error(ErrorCode::DimMismatch, "trailing bytes after " + std::to_string(count) + " records");
  }
  if (builder.size() != metas.size()) {
    throw Error(ErrorCode::BadMetadata, "sidecar has " + std::to_string(metas.size()) + " records, store has " +
                                            std::to_string(builder.size()));
  }
  return std::move(builder).build();
}

}  // namespace avsfx
