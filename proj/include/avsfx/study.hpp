#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "avsfx/embedding.hpp"

namespace avsfx {

/// The two frame pools a study draws from (production footage vs. in-the-wild).
enum class StudyDataset { A, B };
/// "12": system 1 is played on the left; "21": system 2 is.
enum class PresentationOrder { Order12, Order21 };
enum class SystemChoice { System1, System2 };
enum class Side { Left, Right };

std::string_view to_string(StudyDataset d) noexcept;
std::string_view to_string(PresentationOrder o) noexcept;
std::string_view to_string(SystemChoice c) noexcept;
std::string_view to_string(Side s) noexcept;
StudyDataset parse_dataset(std::string_view s);
PresentationOrder parse_order(std::string_view s);
SystemChoice parse_choice(std::string_view s);
Side parse_side(std::string_view s);

/// Maps what the rater clicked back to the system that produced that sound.
SystemChoice resolve_choice(Side side, PresentationOrder order) noexcept;

inline constexpr std::size_t kDefaultPoolPerDataset = 400;
inline constexpr std::size_t kDefaultSessionSize = 30;

/// One query frame and the top SFX each system retrieved for it.
struct StudyCandidate {
  std::string frame_id;
  StudyDataset dataset = StudyDataset::A;
  std::string sfx_system_1;
  std::string sfx_system_2;

  bool operator==(const StudyCandidate&) const = default;
};

struct StudyPool {
  std::vector<StudyCandidate> items;
};

/// Top-1 audio of each system for every frame. Frames where both systems
/// return the same SFX are dropped (there is nothing to compare).
std::vector<StudyCandidate> study_candidates(const EmbeddingStore& frames, const EmbeddingStore& system_1_audio,
                                             const EmbeddingStore& system_2_audio, StudyDataset dataset,
                                             std::size_t threads = 1);

/// Seeded uniform sample without replacement of `per_dataset` candidates from
/// each list. Throws InsufficientFrames.
StudyPool build_pool(std::span<const StudyCandidate> frames_a, std::span<const StudyCandidate> frames_b,
                     std::size_t per_dataset, std::uint64_t seed);

struct ComparisonItem {
  std::string comparison_id;
  std::string frame_id;
  StudyDataset dataset = StudyDataset::A;
  std::string sfx_system_1;
  std::string sfx_system_2;
  PresentationOrder presentation_order = PresentationOrder::Order12;

  const std::string& left_audio() const {
    return presentation_order == PresentationOrder::Order12 ? sfx_system_1 : sfx_system_2;
  }
  const std::string& right_audio() const {
    return presentation_order == PresentationOrder::Order12 ? sfx_system_2 : sfx_system_1;
  }
  bool operator==(const ComparisonItem&) const = default;
};

struct StudySession {
  std::string session_id;
  std::string rater_id;
  std::vector<ComparisonItem> items;
  std::string created_at;

  bool operator==(const StudySession&) const = default;
};

/// `session_size` distinct frames, split as evenly as the pool allows between
/// the two datasets and shuffled; each item gets a fair-coin presentation
/// order. Throws PoolTooSmall.
StudySession make_session(const StudyPool& pool, const std::string& rater_id, std::uint64_t seed,
                          std::size_t session_size = kDefaultSessionSize, std::string created_at = {});

struct Vote {
  std::string session_id;
  std::string comparison_id;
  SystemChoice choice = SystemChoice::System1;
  std::optional<Side> side;  ///< raw click, when known
  std::string timestamp;

  bool operator==(const Vote&) const = default;
};

/// P(X >= k) for X ~ Binomial(n, p0). Exact integer coefficients up to n = 50,
/// log-domain tail sum above. Throws BadArgs.
double binom_test_one_sided(std::uint64_t k, std::uint64_t n, double p0 = 0.5);

struct DatasetResult {
  std::size_t n = 0;
  std::size_t k_system_1 = 0;
  double proportion = 0.0;
  std::optional<double> p_value;  ///< empty when n == 0
};

struct StudyResult {
  std::map<StudyDataset, DatasetResult> per_dataset;
};

/// Counts, per dataset, how often system 1 was preferred. Votes carrying the
/// raw side are de-randomized through the session's presentation order.
/// Unknown comparisons and repeated votes are ignored.
StudyResult aggregate(std::span<const Vote> votes, std::span<const StudySession> sessions);

nlohmann::json to_json(const StudyCandidate& c);
StudyCandidate study_candidate_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StudySession& s);
StudySession study_session_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Vote& v);
Vote vote_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StudyResult& r);
std::string format_study_table(const StudyResult& r);

std::vector<StudyCandidate> read_candidates(const std::filesystem::path& path);
void write_candidates(const std::filesystem::path& path, std::span<const StudyCandidate> candidates);

/// Reads a JSON-lines log. A final line without a newline is treated as an
/// interrupted append and skipped.
std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path);
std::vector<Vote> read_votes(const std::filesystem::path& path);
std::vector<StudySession> read_sessions(const std::filesystem::path& path);

struct StudyConfig {
  std::uint64_t seed = 0;
  std::size_t per_dataset = kDefaultPoolPerDataset;
  std::size_t session_size = kDefaultSessionSize;
  std::filesystem::path candidates;  ///< JSON lines of StudyCandidate
};
StudyConfig study_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// Session registry plus the append-only vote log. Both are JSON-lines files
/// replayed on construction; every write goes through one mutex and is
/// flushed before the call returns.
class StudyLedger {
 public:
  StudyLedger(std::filesystem::path session_log, std::filesystem::path vote_log);

  void add_session(const StudySession& session);
  /// Throws UnknownSession, UnknownComparison, DuplicateVote.
  void record_vote(const Vote& vote);

  std::optional<StudySession> session(const std::string& session_id) const;
  std::vector<StudySession> sessions() const;
  std::vector<Vote> votes() const;
  std::size_t session_count() const;
  StudyResult result() const;

 private:
  mutable std::shared_mutex mu_;
  std::filesystem::path session_path_, vote_path_;
  std::ofstream session_out_, vote_out_;
  std::vector<StudySession> sessions_;
  std::unordered_map<std::string, std::size_t> session_index_;
  std::vector<Vote> votes_;
  std::unordered_map<std::string, std::size_t> voted_;  // "session\x1fcomparison"
};

std::string utc_timestamp();

}  // namespace avsfx
