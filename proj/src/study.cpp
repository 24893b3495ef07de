#include "avsfx/study.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "avsfx/error.hpp"
#include "avsfx/similarity.hpp"

namespace avsfx {
namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string vote_key(std::string_view session, std::string_view comparison) {
  std::string k(session);
  k += '\x1f';
  k += comparison;
  return k;
}

template <typename T>
std::vector<T> sample_without_replacement(std::span<const T> items, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<T> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(items[idx[i]]);
  return out;
}

}  // namespace

std::string_view to_string(StudyDataset d) noexcept { return d == StudyDataset::A ? "A" : "B"; }
std::string_view to_string(PresentationOrder o) noexcept { return o == PresentationOrder::Order12 ? "12" : "21"; }
std::string_view to_string(SystemChoice c) noexcept { return c == SystemChoice::System1 ? "system_1" : "system_2"; }
std::string_view to_string(Side s) noexcept { return s == Side::Left ? "left" : "right"; }

StudyDataset parse_dataset(std::string_view s) {
  if (s == "A") return StudyDataset::A;
  if (s == "B") return StudyDataset::B;
  throw Error(ErrorCode::BadArgs, "dataset must be A or B, got '" + std::string(s) + "'");
}
PresentationOrder parse_order(std::string_view s) {
  if (s == "12") return PresentationOrder::Order12;
  if (s == "21") return PresentationOrder::Order21;
  throw Error(ErrorCode::BadArgs, "presentation order must be 12 or 21");
}
SystemChoice parse_choice(std::string_view s) {
  if (s == "system_1") return SystemChoice::System1;
  if (s == "system_2") return SystemChoice::System2;
  throw Error(ErrorCode::BadArgs, "choice must be system_1 or system_2");
}
Side parse_side(std::string_view s) {
  if (s == "left") return Side::Left;
  if (s == "right") return Side::Right;
  throw Error(ErrorCode::BadArgs, "choice must be left or right, got '" + std::string(s) + "'");
}

SystemChoice resolve_choice(Side side, PresentationOrder order) noexcept {
  const bool left_is_1 = order == PresentationOrder::Order12;
  return (side == Side::Left) == left_is_1 ? SystemChoice::System1 : SystemChoice::System2;
}

// --- pool and sessions ------------------------------------------------------

std::vector<StudyCandidate> study_candidates(const EmbeddingStore& frames, const EmbeddingStore& system_1_audio,
                                             const EmbeddingStore& system_2_audio, StudyDataset dataset,
                                             std::size_t threads) {
  std::vector<Vector> queries;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    auto v = frames.vector(r);
    queries.emplace_back(v.begin(), v.end());
  }
  const auto top1 = batch_top_k(system_1_audio, queries, 1, {}, ScanOptions{threads});
  const auto top2 = batch_top_k(system_2_audio, queries, 1, {}, ScanOptions{threads});
  std::vector<StudyCandidate> out;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    const auto& a = top1[r].entries.front().id;
    const auto& b = top2[r].entries.front().id;
    if (a == b) continue;
    out.push_back({frames.id(r), dataset, a, b});
  }
  return out;
}

StudyPool build_pool(std::span<const StudyCandidate> frames_a, std::span<const StudyCandidate> frames_b,
                     std::size_t per_dataset, std::uint64_t seed) {
  if (frames_a.size() < per_dataset || frames_b.size() < per_dataset) {
    throw Error(ErrorCode::InsufficientFrames, "pool needs " + std::to_string(per_dataset) + " frames per dataset, have " +
                                                   std::to_string(frames_a.size()) + " and " +
                                                   std::to_string(frames_b.size()));
  }
  std::mt19937_64 rng(mix(seed));
  StudyPool pool;
  pool.items = sample_without_replacement(frames_a, per_dataset, rng);
  auto b = sample_without_replacement(frames_b, per_dataset, rng);
  pool.items.insert(pool.items.end(), b.begin(), b.end());
  return pool;
}

StudySession make_session(const StudyPool& pool, const std::string& rater_id, std::uint64_t seed,
                          std::size_t session_size, std::string created_at) {
  std::vector<StudyCandidate> by_dataset[2];
  std::set<std::string> seen;
  for (const auto& c : pool.items) {
    if (c.sfx_system_1 == c.sfx_system_2 || !seen.insert(c.frame_id).second) continue;
    by_dataset[c.dataset == StudyDataset::A ? 0 : 1].push_back(c);
  }
  if (by_dataset[0].size() + by_dataset[1].size() < session_size || session_size == 0) {
    throw Error(ErrorCode::PoolTooSmall, "pool has " + std::to_string(by_dataset[0].size() + by_dataset[1].size()) +
                                             " usable frames, session needs " + std::to_string(session_size));
  }
  std::size_t take_a = std::min(by_dataset[0].size(), (session_size + 1) / 2);
  std::size_t take_b = std::min(by_dataset[1].size(), session_size - take_a);
  take_a = session_size - take_b;

  const std::uint64_t session_seed = mix(seed ^ mix(hash_str(rater_id)));
  std::mt19937_64 rng(session_seed);
  auto picked = sample_without_replacement<StudyCandidate>(by_dataset[0], take_a, rng);
  auto picked_b = sample_without_replacement<StudyCandidate>(by_dataset[1], take_b, rng);
  picked.insert(picked.end(), picked_b.begin(), picked_b.end());
  std::shuffle(picked.begin(), picked.end(), rng);

  char id[40];
  std::snprintf(id, sizeof id, "sess-%016llx", static_cast<unsigned long long>(session_seed));
  StudySession s;
  s.session_id = id;
  s.rater_id = rater_id;
  s.created_at = created_at.empty() ? utc_timestamp() : std::move(created_at);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < picked.size(); ++i) {
    char cid[64];
    std::snprintf(cid, sizeof cid, "%s-c%02zu", id, i);
    const auto order = coin(rng) ? PresentationOrder::Order21 : PresentationOrder::Order12;
    s.items.push_back({cid, picked[i].frame_id, picked[i].dataset, picked[i].sfx_system_1, picked[i].sfx_system_2,
                       order});
  }
  return s;
}

// --- significance -----------------------------------------------------------

double binom_test_one_sided(std::uint64_t k, std::uint64_t n, double p0) {
  if (k > n || !(p0 > 0.0 && p0 < 1.0)) {
    throw Error(ErrorCode::BadArgs, "binomial test needs 0 <= k <= n and 0 < p0 < 1");
  }
  if (k == 0) return 1.0;
  const double q0 = 1.0 - p0;
  double tail = 0.0;
  if (n <= 50) {
    // C(n, j) stays below 2^53 for n <= 50, so every coefficient is exact.
    std::uint64_t c = 1;
    for (std::uint64_t j = 0; j <= n; ++j) {
      if (j >= k) tail += static_cast<double>(c) * std::pow(p0, static_cast<double>(j)) *
                          std::pow(q0, static_cast<double>(n - j));
      c = c * (n - j) / (j + 1);
    }
  } else {
    const double lp = std::log(p0), lq = std::log(q0);
    const double lnf = std::lgamma(static_cast<double>(n) + 1.0);
    auto log_pmf = [&](std::uint64_t j) {
      const double jd = static_cast<double>(j), nd = static_cast<double>(n);
      return lnf - std::lgamma(jd + 1.0) - std::lgamma(nd - jd + 1.0) + jd * lp + (nd - jd) * lq;
    };
    double m = -std::numeric_limits<double>::infinity();
    for (std::uint64_t j = k; j <= n; ++j) m = std::max(m, log_pmf(j));
    double s = 0.0;
    for (std::uint64_t j = k; j <= n; ++j) s += std::exp(log_pmf(j) - m);
    tail = std::exp(m + std::log(s));
  }
  return std::clamp(tail, std::numeric_limits<double>::denorm_min(), 1.0);
}

StudyResult aggregate(std::span<const Vote> votes, std::span<const StudySession> sessions) {
  std::unordered_map<std::string, const ComparisonItem*> items;
  for (const auto& s : sessions) {
    for (const auto& it : s.items) items.emplace(vote_key(s.session_id, it.comparison_id), &it);
  }
  StudyResult r;
  r.per_dataset[StudyDataset::A];
  r.per_dataset[StudyDataset::B];
  std::set<std::string> counted;
  for (const auto& v : votes) {
    const std::string key = vote_key(v.session_id, v.comparison_id);
    auto it = items.find(key);
    if (it == items.end() || !counted.insert(key).second) continue;
    const SystemChoice who = v.side ? resolve_choice(*v.side, it->second->presentation_order) : v.choice;
    auto& d = r.per_dataset[it->second->dataset];
    ++d.n;
    if (who == SystemChoice::System1) ++d.k_system_1;
  }
  for (auto& [ds, d] : r.per_dataset) {
    if (d.n == 0) continue;
    d.proportion = static_cast<double>(d.k_system_1) / static_cast<double>(d.n);
    d.p_value = binom_test_one_sided(d.k_system_1, d.n);
  }
  return r;
}

// --- serialization ----------------------------------------------------------

nlohmann::json to_json(const StudyCandidate& c) {
  return {{"frame_id", c.frame_id},
          {"dataset", to_string(c.dataset)},
          {"sfx_system_1", c.sfx_system_1},
          {"sfx_system_2", c.sfx_system_2}};
}

StudyCandidate study_candidate_from_json(const nlohmann::json& j) {
  return {j.at("frame_id").get<std::string>(), parse_dataset(j.at("dataset").get<std::string>()),
          j.at("sfx_system_1").get<std::string>(), j.at("sfx_system_2").get<std::string>()};
}

nlohmann::json to_json(const StudySession& s) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : s.items) {
    items.push_back({{"comparison_id", it.comparison_id},
                     {"frame_id", it.frame_id},
                     {"dataset", to_string(it.dataset)},
                     {"sfx_system_1", it.sfx_system_1},
                     {"sfx_system_2", it.sfx_system_2},
                     {"presentation_order", to_string(it.presentation_order)}});
  }
  return {{"session_id", s.session_id}, {"rater_id", s.rater_id}, {"created_at", s.created_at}, {"items", items}};
}

StudySession study_session_from_json(const nlohmann::json& j) {
  StudySession s;
  s.session_id = j.at("session_id").get<std::string>();
  s.rater_id = j.at("rater_id").get<std::string>();
  s.created_at = j.value("created_at", std::string());
  for (const auto& it : j.at("items")) {
    s.items.push_back({it.at("comparison_id").get<std::string>(), it.at("frame_id").get<std::string>(),
                       parse_dataset(it.at("dataset").get<std::string>()), it.at("sfx_system_1").get<std::string>(),
                       it.at("sfx_system_2").get<std::string>(),
                       parse_order(it.at("presentation_order").get<std::string>())});
  }
  return s;
}

nlohmann::json to_json(const Vote& v) {
  nlohmann::json j{{"session_id", v.session_id},
                   {"comparison_id", v.comparison_id},
                   {"choice", to_string(v.choice)},
                   {"timestamp", v.timestamp}};
  if (v.side) j["side"] = to_string(*v.side);
  return j;
}

Vote vote_from_json(const nlohmann::json& j) {
  Vote v;
  v.session_id = j.at("session_id").get<std::string>();
  v.comparison_id = j.at("comparison_id").get<std::string>();
  v.choice = parse_choice(j.at("choice").get<std::string>());
  v.timestamp = j.value("timestamp", std::string());
  if (auto it = j.find("side"); it != j.end() && !it->is_null()) v.side = parse_side(it->get<std::string>());
  return v;
}

nlohmann::json to_json(const StudyResult& r) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [ds, d] : r.per_dataset) {
    out[std::string(to_string(ds))] = {
        {"n", d.n},
        {"k_system_1", d.k_system_1},
        {"proportion", d.n ? nlohmann::json(d.proportion) : nlohmann::json(nullptr)},
        {"p_value", d.p_value ? nlohmann::json(*d.p_value) : nlohmann::json(nullptr)},
        {"defined", d.n > 0}};
  }
  return {{"datasets", out}};
}

std::string format_study_table(const StudyResult& r) {
  std::ostringstream os;
  os << "| Dataset |    n | system_1 | proportion |    p (1-sided) |\n";
  os << "|---------|------|----------|------------|----------------|\n";
  for (const auto& [ds, d] : r.per_dataset) {
    char line[160];
    if (d.n == 0) {
      std::snprintf(line, sizeof line, "| %-7s | %4zu | %8zu | %10s | %14s |\n", std::string(to_string(ds)).c_str(),
                    d.n, d.k_system_1, "n/a", "undefined");
    } else {
      std::snprintf(line, sizeof line, "| %-7s | %4zu | %8zu | %9.1f%% | %14.4g |\n",
                    std::string(to_string(ds)).c_str(), d.n, d.k_system_1, 100.0 * d.proportion, *d.p_value);
    }
    os << line;
  }
  return os.str();
}

std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  while (pos < all.size()) {
    const auto nl = all.find('\n', pos);
    if (nl == std::string::npos) break;  // interrupted append
    const std::string line = all.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::BadMetadata, path.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<Vote> read_votes(const std::filesystem::path& path) {
  std::vector<Vote> out;
  try {
    for (const auto& j : read_json_lines(path)) out.push_back(vote_from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMetadata, path.string() + ": " + e.what());
  }
  return out;
}

std::vector<StudySession> read_sessions(const std::filesystem::path& path) {
  std::vector<StudySession> out;
  try {
    for (const auto& j : read_json_lines(path)) out.push_back(study_session_from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMetadata, path.string() + ": " + e.what());
  }
  return out;
}

std::vector<StudyCandidate> read_candidates(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::IoFailure, "missing candidates file " + path.string());
  std::vector<StudyCandidate> out;
  try {
    for (const auto& j : read_json_lines(path)) out.push_back(study_candidate_from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMetadata, path.string() + ": " + e.what());
  }
  return out;
}

void write_candidates(const std::filesystem::path& path, std::span<const StudyCandidate> candidates) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  for (const auto& c : candidates) out << to_json(c).dump() << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write error on " + path.string());
}

StudyConfig study_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  StudyConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.per_dataset = j.value("per_dataset", cfg.per_dataset);
    cfg.session_size = j.value("session_size", cfg.session_size);
    cfg.candidates = j.at("candidates").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed study config: ") + e.what());
  }
  if (cfg.candidates.is_relative() && !base_dir.empty()) cfg.candidates = base_dir / cfg.candidates;
  return cfg;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// --- ledger -----------------------------------------------------------------

StudyLedger::StudyLedger(std::filesystem::path session_log, std::filesystem::path vote_log)
    : session_path_(std::move(session_log)), vote_path_(std::move(vote_log)) {
  for (auto& s : read_sessions(session_path_)) {
    session_index_[s.session_id] = sessions_.size();
    sessions_.push_back(std::move(s));
  }
  for (auto& v : read_votes(vote_path_)) {
    const std::string key = vote_key(v.session_id, v.comparison_id);
    if (voted_.contains(key)) continue;
    voted_[key] = votes_.size();
    votes_.push_back(std::move(v));
  }
  session_out_.open(session_path_, std::ios::app | std::ios::binary);
  vote_out_.open(vote_path_, std::ios::app | std::ios::binary);
  if (!session_out_ || !vote_out_) throw Error(ErrorCode::IoFailure, "cannot open study logs for appending");
}

void StudyLedger::add_session(const StudySession& session) {
  std::unique_lock lock(mu_);
  if (session_index_.contains(session.session_id)) {
    throw Error(ErrorCode::DuplicateId, "session '" + session.session_id + "' already exists");
  }
  session_out_ << to_json(session).dump() << '\n';
  session_out_.flush();
  if (!session_out_) throw Error(ErrorCode::IoFailure, "session log append failed");
  session_index_[session.session_id] = sessions_.size();
  sessions_.push_back(session);
}

void StudyLedger::record_vote(const Vote& vote) {
  std::unique_lock lock(mu_);
  auto s = session_index_.find(vote.session_id);
  if (s == session_index_.end()) throw Error(ErrorCode::UnknownSession, "session '" + vote.session_id + "'");
  const auto& items = sessions_[s->second].items;
  const auto item = std::find_if(items.begin(), items.end(),
                                 [&](const ComparisonItem& c) { return c.comparison_id == vote.comparison_id; });
  if (item == items.end()) throw Error(ErrorCode::UnknownComparison, "comparison '" + vote.comparison_id + "'");
  const std::string key = vote_key(vote.session_id, vote.comparison_id);
  if (voted_.contains(key)) throw Error(ErrorCode::DuplicateVote, "comparison '" + vote.comparison_id + "' already voted");
  Vote stored = vote;
  if (stored.side) stored.choice = resolve_choice(*stored.side, item->presentation_order);
  if (stored.timestamp.empty()) stored.timestamp = utc_timestamp();
  vote_out_ << to_json(stored).dump() << '\n';
  vote_out_.flush();
  if (!vote_out_) throw Error(ErrorCode::IoFailure, "vote log append failed");
  voted_[key] = votes_.size();
  votes_.push_back(std::move(stored));
}

std::optional<StudySession> StudyLedger::session(const std::string& session_id) const {
  std::shared_lock lock(mu_);
  auto it = session_index_.find(session_id);
  if (it == session_index_.end()) return std::nullopt;
  return sessions_[it->second];
}

std::vector<StudySession> StudyLedger::sessions() const {
  std::shared_lock lock(mu_);
  return sessions_;
}

std::vector<Vote> StudyLedger::votes() const {
  std::shared_lock lock(mu_);
  return votes_;
}

std::size_t StudyLedger::session_count() const {
  std::shared_lock lock(mu_);
  return sessions_.size();
}

StudyResult StudyLedger::result() const {
  std::shared_lock lock(mu_);
  return aggregate(votes_, sessions_);
}

}  // namespace avsfx
