#include "avsfx/curation.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include "avsfx/error.hpp"
#include "avsfx/similarity.hpp"

namespace avsfx {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  auto b = std::find_if_not(s.begin(), s.end(), is_space);
  auto e = std::find_if_not(s.rbegin(), s.rend(), is_space).base();
  return b < e ? std::string(b, e) : std::string();
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool contains_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

// --- filtering --------------------------------------------------------------

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

bool is_excluded(const ItemMeta& item, const FilterSpec& spec) {
  if (!spec.excluded_categories.empty()) {
    const std::string cat = lower(trim(item.category));
    for (const auto& c : spec.excluded_categories) {
      if (lower(trim(c)) == cat) return true;
    }
  }
  if (spec.excluded_tag_terms.empty()) return false;
  std::vector<std::vector<std::string>> terms;
  for (const auto& t : spec.excluded_tag_terms) terms.push_back(tokenize(t));
  for (const auto& tag : item.tags) {
    const auto tokens = tokenize(tag);
    for (const auto& term : terms) {
      if (contains_run(tokens, term)) return true;
    }
  }
  return false;
}

std::vector<ItemMeta> filter_items(std::span<const ItemMeta> items, const FilterSpec& spec) {
  std::vector<ItemMeta> out;
  std::copy_if(items.begin(), items.end(), std::back_inserter(out),
               [&](const ItemMeta& m) { return !is_excluded(m, spec); });
  return out;
}

// --- frame sampling ---------------------------------------------------------

std::vector<std::uint32_t> sample_frames(std::string_view video_id, double duration_s, std::size_t max_frames,
                                         std::uint64_t seed) {
  if (!(duration_s >= 0) || max_frames == 0) {
    throw Error(ErrorCode::BadArgs, "sample_frames needs duration >= 0 and max_frames >= 1");
  }
  const auto seconds = static_cast<std::uint32_t>(std::floor(duration_s));
  std::vector<std::uint32_t> all(seconds);
  std::iota(all.begin(), all.end(), 0u);
  const std::size_t take = std::min<std::size_t>(max_frames, seconds);
  std::mt19937_64 rng(splitmix(fnv1a(video_id) ^ splitmix(seed)));
  // partial Fisher-Yates
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(take);
  std::sort(all.begin(), all.end());
  return all;
}

// --- prompting --------------------------------------------------------------

PromptSpec prompt_spec_from_json(const nlohmann::json& j) {
  PromptSpec spec;
  try {
    spec.instruction = j.value("instruction", std::string());
    for (const auto& e : j.value("exemplars", nlohmann::json::array())) {
      spec.exemplars.push_back({e.at("tags").get<std::vector<std::string>>(), e.at("sentence").get<std::string>()});
    }
    spec.query_tags = j.value("query_tags", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed prompt spec: ") + e.what());
  }
  return spec;
}

std::string build_prompt(const PromptSpec& spec) {
  if (spec.exemplars.empty()) throw Error(ErrorCode::EmptyExemplars, "a prompt needs at least one exemplar");
  auto join = [](const std::vector<std::string>& tags) {
    std::string out;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (i) out += ", ";
      out += trim(tags[i]);
    }
    return out;
  };
  std::string out = spec.instruction;
  for (const auto& ex : spec.exemplars) {
    if (trim(ex.sentence).empty()) throw Error(ErrorCode::EmptyExemplars, "exemplar with an empty sentence");
    out += "\nTags: " + join(ex.tags) + " => Description: " + trim(ex.sentence);
  }
  out += "\nTags: " + join(spec.query_tags) + " => Description:";
  return out;
}

std::string template_sentence(std::span<const std::string> tags, std::size_t max_tags) {
  std::string out = "a photo of";
  std::size_t used = 0;
  for (const auto& t : tags) {
    if (used == max_tags) break;
    const std::string word = lower(trim(t));
    if (word.empty()) continue;
    out += ' ';
    out += word;
    ++used;
  }
  if (used == 0) throw Error(ErrorCode::NoTags, "template sentence needs at least one tag");
  return out;
}

std::string first_line(std::string_view completion) {
  std::size_t pos = 0;
  while (pos <= completion.size()) {
    std::size_t nl = completion.find('\n', pos);
    if (nl == std::string_view::npos) nl = completion.size();
    std::string line = trim(completion.substr(pos, nl - pos));
    if (!line.empty()) return line;
    pos = nl + 1;
  }
  return {};
}

std::string generate_sentence(const PromptSpec& spec, TextBackend& backend, const GenerationOptions& opts) {
  const std::string prompt = build_prompt(spec);
  try {
    std::string line = first_line(backend.complete(prompt));
    if (line.empty()) throw Error(ErrorCode::EmptyCompletion, "backend returned no text");
    return line;
  } catch (const Error& e) {
    const bool recoverable = e.code() == ErrorCode::BackendUnavailable || e.code() == ErrorCode::EmptyCompletion;
    if (!recoverable || !opts.fallback_to_template) throw;
    return template_sentence(spec.query_tags, opts.template_tags);
  }
}

// --- pairing ----------------------------------------------------------------

std::size_t parse_pairing_limit(std::string_view text) {
  const std::string t = lower(trim(text));
  if (t == "inf" || t == "infinity" || t == "unlimited") return kUnlimited;
  std::size_t value = 0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (t.empty() || ec != std::errc() || end != t.data() + t.size()) {
    throw Error(ErrorCode::BadConfig, "pairing limit must be a positive integer or 'inf', got '" + t + "'");
  }
  if (value == 0) throw Error(ErrorCode::BadConfig, "pairing limit must be at least 1");
  return value;
}

std::string format_pairing_limit(std::size_t limit) {
  return limit == kUnlimited ? std::string("inf") : std::to_string(limit);
}

PairingMode parse_pairing_mode(std::string_view text) {
  const std::string t = lower(trim(text));
  if (t == "sequential" || t == "sequential_greedy") return PairingMode::SequentialGreedy;
  if (t == "global" || t == "global_greedy") return PairingMode::GlobalGreedy;
  throw Error(ErrorCode::BadConfig, "unknown pairing mode '" + t + "'");
}

namespace {

std::vector<CuratedPair> sequential_greedy(const EmbeddingStore& text, const EmbeddingStore& frames,
                                           const PairingConfig& cfg) {
  const std::size_t k = cfg.frames_per_audio;
  const std::size_t n_frames = frames.size();
  std::vector<std::size_t> remaining(n_frames, cfg.frame_capacity);
  std::size_t open_frames = n_frames;

  std::vector<std::size_t> order(text.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return text.lex_rank(a) < text.lex_rank(b); });

  // Each audio's ranking is independent of pool state, so a prefix of it is
  // fetched in parallel ahead of the sequential assignment. A deeper rescan
  // over the open pool runs only when the whole prefix is already taken.
  const std::size_t depth =
      cfg.frame_capacity == kUnlimited ? std::min(k, n_frames) : std::min(n_frames, std::max<std::size_t>(4 * k, 16));
  constexpr std::size_t kBlock = 1024;

  std::vector<CuratedPair> out;
  for (std::size_t block = 0; block < order.size(); block += kBlock) {
    const std::size_t end = std::min(order.size(), block + kBlock);
    std::vector<Vector> queries;
    for (std::size_t i = block; i < end; ++i) {
      auto v = text.vector(order[i]);
      queries.emplace_back(v.begin(), v.end());
    }
    const auto prefetched = batch_top_k(frames, queries, depth, {}, ScanOptions{cfg.threads});

    for (std::size_t i = block; i < end; ++i) {
      const std::size_t a = order[i];
      std::vector<std::size_t> chosen;
      auto take = [&](const ScoredItem& hit) {
        chosen.push_back(hit.row);
        out.push_back({text.id(a), hit.id, hit.score, chosen.size(), std::nullopt});
        if (cfg.frame_capacity != kUnlimited && --remaining[hit.row] == 0) --open_frames;
      };
      for (const auto& hit : prefetched[i - block].entries) {
        if (chosen.size() == k) break;
        if (remaining[hit.row] > 0) take(hit);
      }
      if (chosen.size() < k && prefetched[i - block].entries.size() == depth && depth < n_frames) {
        const std::size_t still_open = open_frames;
        if (still_open > 0) {
          // Rows chosen above may still be open; skip them explicitly.
          std::vector<char> mine(n_frames, 0);
          for (auto r : chosen) mine[r] = 1;
          auto open = [&](const ItemMeta& m) {
            const std::size_t r = frames.row_of(m.id);
            return remaining[r] > 0 && !mine[r];
          };
          try {
            const auto more = top_k(frames, text.vector(a), k - chosen.size(), open, ScanOptions{cfg.threads});
            for (const auto& hit : more.entries) take(hit);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::EmptyCandidateSet) throw;
          }
        }
      }
      if (chosen.empty()) {
        throw Error(ErrorCode::NoFramesAvailable,
                    "frame pool exhausted before '" + text.id(a) + "' received a frame; raise the pairing limit");
      }
    }
  }
  return out;
}

std::vector<CuratedPair> global_greedy(const EmbeddingStore& text, const EmbeddingStore& frames,
                                       const PairingConfig& cfg) {
  struct Edge {
    double score;
    std::uint32_t audio_lex;
    std::uint32_t frame_lex;
    std::uint32_t audio;
    std::uint32_t frame;
  };
  std::vector<Edge> edges;
  edges.reserve(text.size() * frames.size());
  for (std::size_t a = 0; a < text.size(); ++a) {
    for (std::size_t f = 0; f < frames.size(); ++f) {
      edges.push_back({cosine(text.vector(a), frames.vector(f)), text.lex_rank(a), frames.lex_rank(f),
                       static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(f)});
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.audio_lex != y.audio_lex) return x.audio_lex < y.audio_lex;
    return x.frame_lex < y.frame_lex;
  });
  std::vector<std::size_t> audio_used(text.size(), 0);
  std::vector<std::size_t> frame_used(frames.size(), 0);
  std::vector<CuratedPair> out;
  for (const auto& e : edges) {
    if (audio_used[e.audio] >= cfg.frames_per_audio || frame_used[e.frame] >= cfg.frame_capacity) continue;
    ++audio_used[e.audio];
    ++frame_used[e.frame];
    out.push_back({text.id(e.audio), frames.id(e.frame), e.score, audio_used[e.audio], std::nullopt});
  }
  for (std::size_t a = 0; a < text.size(); ++a) {
    if (audio_used[a] == 0) {
      throw Error(ErrorCode::NoFramesAvailable,
                  "frame pool exhausted before '" + text.id(a) + "' received a frame; raise the pairing limit");
    }
  }
  // Group by audio id for output stability.
  std::stable_sort(out.begin(), out.end(), [](const CuratedPair& x, const CuratedPair& y) {
    return x.audio_id < y.audio_id;
  });
  return out;
}

}  // namespace

std::vector<CuratedPair> make_pairs(const EmbeddingStore& text, const EmbeddingStore& frames,
                                    const PairingConfig& cfg) {
  if (cfg.frame_capacity == 0 || cfg.frames_per_audio == 0) {
    throw Error(ErrorCode::BadConfig, "pairing limit N and frames per audio k must be at least 1");
  }
  if (text.dim() != frames.dim()) {
    throw Error(ErrorCode::DimMismatch,
                "sentence dim " + std::to_string(text.dim()) + " vs frame dim " + std::to_string(frames.dim()));
  }
  if (text.empty()) throw Error(ErrorCode::EmptyInput, "no sentence embeddings to pair");
  if (frames.empty()) throw Error(ErrorCode::NoFramesAvailable, "no frames to pair with");
  return cfg.mode == PairingMode::SequentialGreedy ? sequential_greedy(text, frames, cfg)
                                                   : global_greedy(text, frames, cfg);
}

std::vector<CuratedPair> make_pairs_by_split(const EmbeddingStore& text, const EmbeddingStore& frames,
                                             const PairingConfig& cfg) {
  const bool text_split = std::any_of(text.metas().begin(), text.metas().end(), [](auto& m) { return m.split; });
  const bool frame_split =
      std::any_of(frames.metas().begin(), frames.metas().end(), [](auto& m) { return m.split; });
  if (!text_split && !frame_split) return make_pairs(text, frames, cfg);

  std::vector<CuratedPair> out;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    auto in_split = [s](const ItemMeta& m) {
      if (!m.split) throw Error(ErrorCode::BadMetadata, "item '" + m.id + "' has no split but others do");
      return *m.split == s;
    };
    const auto t = text.subset(in_split);
    if (t.empty()) continue;
    const auto f = frames.subset(in_split);
    if (f.empty()) {
      throw Error(ErrorCode::NoFramesAvailable, "split '" + std::string(to_string(s)) + "' has no frames");
    }
    for (auto& p : make_pairs(t, f, cfg)) {
      p.split = s;
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::size_t distinct_frames(std::span<const CuratedPair> pairs) {
  std::set<std::string_view> seen;
  for (const auto& p : pairs) seen.insert(p.frame_id);
  return seen.size();
}

nlohmann::json pair_to_json(const CuratedPair& p) {
  nlohmann::json j{{"audio_id", p.audio_id},
                   {"frame_id", p.frame_id},
                   {"score", p.score},
                   {"rank_within_audio", p.rank_within_audio}};
  j["split"] = p.split ? nlohmann::json(to_string(*p.split)) : nlohmann::json(nullptr);
  return j;
}

CuratedPair pair_from_json(const nlohmann::json& j) {
  CuratedPair p;
  try {
    p.audio_id = j.at("audio_id").get<std::string>();
    p.frame_id = j.at("frame_id").get<std::string>();
    p.score = j.at("score").get<double>();
    p.rank_within_audio = j.value("rank_within_audio", std::size_t{1});
    if (auto it = j.find("split"); it != j.end() && !it->is_null()) p.split = parse_split(it->get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMetadata, std::string("malformed pair record: ") + e.what());
  }
  return p;
}

void write_pairs(const std::filesystem::path& path, std::span<const CuratedPair> pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write error on " + path.string());
}

std::vector<CuratedPair> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
  std::vector<CuratedPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      pairs.push_back(pair_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::BadMetadata, std::string("pair line is not JSON: ") + e.what());
    }
  }
  return pairs;
}

// --- splits -----------------------------------------------------------------

SplitAssignment make_splits(std::span<const ItemMeta> audio, std::span<const ItemMeta> frames, std::size_t val_count,
                            std::size_t test_count, std::uint64_t seed) {
  std::vector<std::string> audio_ids;
  for (const auto& m : audio) audio_ids.push_back(m.id);
  std::sort(audio_ids.begin(), audio_ids.end());
  audio_ids.erase(std::unique(audio_ids.begin(), audio_ids.end()), audio_ids.end());
  if (val_count + test_count >= audio_ids.size()) {
    throw Error(ErrorCode::InsufficientItems, std::to_string(audio_ids.size()) + " audio items cannot hold " +
                                                  std::to_string(val_count) + " val + " + std::to_string(test_count) +
                                                  " test plus a training split");
  }
  std::vector<std::string> videos;
  for (const auto& m : frames) videos.push_back(m.video_id.empty() ? m.id : m.video_id);
  std::sort(videos.begin(), videos.end());
  videos.erase(std::unique(videos.begin(), videos.end()), videos.end());

  std::mt19937_64 rng(splitmix(seed));
  std::shuffle(audio_ids.begin(), audio_ids.end(), rng);
  std::shuffle(videos.begin(), videos.end(), rng);

  SplitAssignment out;
  for (std::size_t i = 0; i < audio_ids.size(); ++i) {
    out.audio[audio_ids[i]] = i < val_count ? Split::Val : i < val_count + test_count ? Split::Test : Split::Train;
  }

  // Videos are divided in the same proportions as audio.
  if (!videos.empty()) {
    const double n = static_cast<double>(audio_ids.size());
    const double v = static_cast<double>(videos.size());
    auto share = [&](std::size_t count) {
      if (count == 0) return std::size_t{0};
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(v * static_cast<double>(count) / n)));
    };
    const std::size_t val_videos = share(val_count);
    const std::size_t test_videos = share(test_count);
    if (val_videos + test_videos >= videos.size()) {
      throw Error(ErrorCode::InsufficientItems,
                  std::to_string(videos.size()) + " videos are too few for disjoint train/val/test splits");
    }
    for (std::size_t i = 0; i < videos.size(); ++i) {
      out.video[videos[i]] =
          i < val_videos ? Split::Val : i < val_videos + test_videos ? Split::Test : Split::Train;
    }
  }
  return out;
}

EmbeddingStore apply_splits(const EmbeddingStore& store, const SplitAssignment& assignment) {
  return store.remap_meta([&](const ItemMeta& m) {
    ItemMeta out = m;
    if (m.kind == ItemKind::Frame) {
      const std::string& key = m.video_id.empty() ? m.id : m.video_id;
      auto it = assignment.video.find(key);
      if (it == assignment.video.end()) throw Error(ErrorCode::UnknownId, "video '" + key + "' has no split");
      out.split = it->second;
    } else {
      auto it = assignment.audio.find(m.id);
      if (it == assignment.audio.end()) throw Error(ErrorCode::UnknownId, "item '" + m.id + "' has no split");
      out.split = it->second;
    }
    return out;
  });
}

}  // namespace avsfx
