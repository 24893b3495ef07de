#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "avsfx/embedding.hpp"

namespace avsfx {

// --- dataset filtering ------------------------------------------------------

/// Matching is case-insensitive. Categories match whole; tag terms match as a
/// contiguous run of whole tokens inside a tag ("speech" hits "Human Speech"
/// but not "speechless").
struct FilterSpec {
  std::set<std::string> excluded_categories;
  std::set<std::string> excluded_tag_terms;
};

bool is_excluded(const ItemMeta& item, const FilterSpec& spec);
std::vector<ItemMeta> filter_items(std::span<const ItemMeta> items, const FilterSpec& spec);

/// Lowercased alphanumeric tokens of `text`.
std::vector<std::string> tokenize(std::string_view text);

// --- frame sampling ---------------------------------------------------------

inline constexpr std::size_t kDefaultFramesPerVideo = 10;

/// Sorted 1 FPS offsets: a seeded uniform subset (without replacement) of
/// {0, ..., floor(duration_s) - 1} of size min(max_frames, floor(duration_s)).
std::vector<std::uint32_t> sample_frames(std::string_view video_id, double duration_s,
                                         std::size_t max_frames = kDefaultFramesPerVideo, std::uint64_t seed = 0);

// --- tag -> sentence prompting -----------------------------------------------

struct PromptExemplar {
  std::vector<std::string> tags;
  std::string sentence;
};

struct PromptSpec {
  std::string instruction;
  std::vector<PromptExemplar> exemplars;
  std::vector<std::string> query_tags;
};

PromptSpec prompt_spec_from_json(const nlohmann::json& j);

/// Few-shot analogy prompt, lines joined by '\n' with no trailing newline:
///
///   <instruction>
///   Tags: door, slam => Description: A door slams shut.
///   ...
///   Tags: glass, shatter => Description:
///
/// Throws EmptyExemplars (also for an exemplar with an empty sentence).
std::string build_prompt(const PromptSpec& spec);

inline constexpr std::size_t kDefaultTemplateTags = 4;

/// "a photo of <t1> <t2> ..." over the first `max_tags` tags, lowercased.
/// Throws NoTags.
std::string template_sentence(std::span<const std::string> tags, std::size_t max_tags = kDefaultTemplateTags);

/// Client for a text-generation service. Implementations throw
/// BackendUnavailable when the service cannot be reached.
class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

struct GenerationOptions {
  bool fallback_to_template = false;
  std::size_t template_tags = kDefaultTemplateTags;
};

/// First non-empty line of `completion`, whitespace-trimmed; empty if none.
std::string first_line(std::string_view completion);

/// Throws BackendUnavailable, EmptyCompletion (unless falling back).
std::string generate_sentence(const PromptSpec& spec, TextBackend& backend, const GenerationOptions& opts = {});

// --- constrained pairing ----------------------------------------------------

inline constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

enum class PairingMode { SequentialGreedy, GlobalGreedy };

struct PairingConfig {
  std::size_t frame_capacity = 1;    ///< N: SFX per frame before it leaves the pool
  std::size_t frames_per_audio = 1;  ///< k: augmentation factor
  PairingMode mode = PairingMode::SequentialGreedy;
  std::size_t threads = 1;  ///< retrieval prefetch only; assignment is sequential
};

/// "inf", "infinity" or a positive integer.
std::size_t parse_pairing_limit(std::string_view text);
std::string format_pairing_limit(std::size_t limit);
PairingMode parse_pairing_mode(std::string_view text);

struct CuratedPair {
  std::string audio_id;
  std::string frame_id;
  double score = 0.0;
  std::size_t rank_within_audio = 1;
  std::optional<Split> split;

  bool operator==(const CuratedPair&) const = default;
};

/// Pairs sentence embeddings (keyed by audio id) with frames.
///
/// SequentialGreedy visits audio ids in ascending order and gives each its
/// best-ranked frames that still have capacity. GlobalGreedy accepts edges in
/// (score desc, audio id asc, frame id asc) order while both ends have room.
/// Throws DimMismatch, EmptyInput, NoFramesAvailable.
std::vector<CuratedPair> make_pairs(const EmbeddingStore& text, const EmbeddingStore& frames,
                                    const PairingConfig& cfg);

/// Runs make_pairs independently inside each split (text split vs frame
/// split). Stores without split metadata are paired as one group.
std::vector<CuratedPair> make_pairs_by_split(const EmbeddingStore& text, const EmbeddingStore& frames,
                                             const PairingConfig& cfg);

std::size_t distinct_frames(std::span<const CuratedPair> pairs);

nlohmann::json pair_to_json(const CuratedPair& p);
CuratedPair pair_from_json(const nlohmann::json& j);
void write_pairs(const std::filesystem::path& path, std::span<const CuratedPair> pairs);
std::vector<CuratedPair> read_pairs(const std::filesystem::path& path);

// --- disjoint splits --------------------------------------------------------

struct SplitAssignment {
  std::map<std::string, Split> audio;  ///< audio id -> split
  std::map<std::string, Split> video;  ///< video id -> split

  bool operator==(const SplitAssignment&) const = default;
};

/// Seeded partition of audio ids and of videos (frames move with their video).
/// Throws InsufficientItems.
SplitAssignment make_splits(std::span<const ItemMeta> audio, std::span<const ItemMeta> frames, std::size_t val_count,
                            std::size_t test_count, std::uint64_t seed);

/// Copies `store` with split fields set: frames by video id, everything else
/// by item id. Throws UnknownId for items the assignment does not cover.
EmbeddingStore apply_splits(const EmbeddingStore& store, const SplitAssignment& assignment);

}  // namespace avsfx
