#include <doctest.h>

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <thread>

#include "avsfx/curation.hpp"
#include "avsfx/error.hpp"
#include "avsfx/text_backend.hpp"
#include "oracles/oracles.hpp"
#include "test_util.hpp"

using namespace avsfx;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an avsfx::Error");
  return ErrorCode::BadArgs;
}

ItemMeta audio_meta(std::string id, std::string category, std::vector<std::string> tags = {}) {
  ItemMeta m;
  m.id = std::move(id);
  m.kind = ItemKind::Audio;
  m.category = std::move(category);
  m.tags = std::move(tags);
  return m;
}

EmbeddingStore text_store(std::vector<std::pair<std::string, Vector>> items) {
  StoreBuilder b(items.front().second.size());
  for (auto& [id, v] : items) b.add(audio_meta(id, "x"), v);
  return std::move(b).build();
}

EmbeddingStore frame_store(std::vector<std::pair<std::string, Vector>> items) {
  StoreBuilder b(items.front().second.size());
  for (auto& [id, v] : items) {
    ItemMeta m;
    m.id = id;
    m.kind = ItemKind::Frame;
    m.video_id = "video_" + id;
    m.frame_index = 0;
    b.add(std::move(m), v);
  }
  return std::move(b).build();
}

// Similarity matrix [[.9,.1],[.8,.2]] for audio a1,a2 against frames f1,f2.
std::pair<EmbeddingStore, EmbeddingStore> hub_fixture() {
  const float z1 = static_cast<float>(std::sqrt(1.0 - 0.81 - 0.01));
  const float z2 = static_cast<float>(std::sqrt(1.0 - 0.64 - 0.04));
  return {text_store({{"a1", {0.9f, 0.1f, z1}}, {"a2", {0.8f, 0.2f, z2}}}),
          frame_store({{"f1", {1, 0, 0}}, {"f2", {0, 1, 0}}})};
}

std::vector<CuratedPair> naive_sequential(const EmbeddingStore& text, const EmbeddingStore& frames, std::size_t n,
                                          std::size_t k) {
  std::vector<std::string> order(text.size());
  for (std::size_t r = 0; r < text.size(); ++r) order[r] = text.id(r);
  std::sort(order.begin(), order.end());
  std::map<std::string, std::size_t> used;
  std::vector<CuratedPair> out;
  for (const auto& a : order) {
    const auto ranking = oracle::full_ranking(frames, text.vector(text.row_of(a)));
    std::size_t got = 0;
    for (const auto& f : ranking) {
      if (got == k) break;
      if (used[f.id] >= n) continue;
      ++used[f.id];
      ++got;
      out.push_back({a, f.id, f.score, got, std::nullopt});
    }
  }
  return out;
}

std::vector<CuratedPair> naive_global(const EmbeddingStore& text, const EmbeddingStore& frames, std::size_t n,
                                      std::size_t k) {
  struct Edge {
    double s;
    std::string a, f;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < text.size(); ++i)
    for (std::size_t j = 0; j < frames.size(); ++j)
      edges.push_back({oracle::raw_dot(text.vector(i), frames.vector(j)), text.id(i), frames.id(j)});
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
    if (x.s != y.s) return x.s > y.s;
    if (x.a != y.a) return x.a < y.a;
    return x.f < y.f;
  });
  std::map<std::string, std::size_t> per_audio, per_frame;
  std::vector<CuratedPair> out;
  for (const auto& e : edges) {
    if (per_audio[e.a] >= k || per_frame[e.f] >= n) continue;
    ++per_frame[e.f];
    out.push_back({e.a, e.f, e.s, ++per_audio[e.a], std::nullopt});
  }
  return out;
}

std::set<std::pair<std::string, std::string>> edges_of(const std::vector<CuratedPair>& pairs) {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& p : pairs) out.insert({p.audio_id, p.frame_id});
  return out;
}

EmbeddingStore shuffled_copy(const EmbeddingStore& s, std::uint64_t seed) {
  std::vector<std::size_t> rows(s.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  StoreBuilder b(s.dim());
  for (auto r : rows) b.add_normalized(s.meta(r), s.vector(r));
  return std::move(b).build();
}

struct StubBackend : TextBackend {
  std::string reply;
  bool fail = false;
  std::string last_prompt;
  std::string complete(const std::string& prompt) override {
    last_prompt = prompt;
    if (fail) throw Error(ErrorCode::BackendUnavailable, "stub down");
    return reply;
  }
};

PromptSpec door_spec() {
  PromptSpec s;
  s.instruction = "Describe the scene where each sound could be heard.";
  s.exemplars = {{{"door", "slam"}, "A door slams shut."}};
  s.query_tags = {"glass", "shatter"};
  return s;
}

}  // namespace

TEST_CASE("filter_items") {
  const std::vector<ItemMeta> items = {audio_meta("1", "speech"), audio_meta("2", "glass"),
                                       audio_meta("3", "orchestra")};
  CHECK(filter_items(items, {}).size() == 3);
  const auto kept = filter_items(items, {{"speech", "orchestra"}, {}});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].id == "2");
  CHECK(filter_items(items, {{"  SPEECH "}, {}}).size() == 2);

  const std::vector<ItemMeta> tagged = {audio_meta("a", "human", {"Human Speech", "indoor"}),
                                        audio_meta("b", "fx", {"speechless crowd"}),
                                        audio_meta("c", "fx", {"baby crying loud"}),
                                        audio_meta("d", "fx", {"crying", "baby"})};
  const auto t = filter_items(tagged, {{}, {"speech", "baby crying"}});
  REQUIRE(t.size() == 2);
  CHECK(t[0].id == "b");
  CHECK(t[1].id == "d");
}

TEST_CASE("filter_items matches a re-evaluated predicate") {
  const std::vector<std::string> vocab = {"rain", "Heavy", "speech", "music", "door", "glass", "metal", "wind"};
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> pick(0, vocab.size() - 1), ntags(0, 3);
  std::vector<ItemMeta> items;
  for (int i = 0; i < 100; ++i) {
    std::vector<std::string> tags;
    for (std::size_t t = ntags(rng); t > 0; --t) tags.push_back(vocab[pick(rng)] + (t % 2 ? " " + vocab[pick(rng)] : ""));
    items.push_back(audio_meta("i" + std::to_string(i), vocab[pick(rng)], tags));
  }
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  for (int trial = 0; trial < 20; ++trial) {
    FilterSpec spec;
    spec.excluded_categories = {vocab[pick(rng)]};
    spec.excluded_tag_terms = {lower(vocab[pick(rng)])};
    std::vector<std::string> expect;
    for (const auto& m : items) {
      bool drop = spec.excluded_categories.count(m.category) > 0;
      for (const auto& tag : m.tags) {
        std::istringstream words(lower(tag));
        for (std::string w; words >> w;) drop = drop || spec.excluded_tag_terms.count(w) > 0;
      }
      if (!drop) expect.push_back(m.id);
    }
    std::vector<std::string> got;
    for (const auto& m : filter_items(items, spec)) got.push_back(m.id);
    CHECK(got == expect);
  }
}

TEST_CASE("sample_frames") {
  CHECK(sample_frames("v", 5.0, 10) == std::vector<std::uint32_t>{0, 1, 2, 3, 4});
  CHECK(sample_frames("v", 0.5, 10).empty());
  CHECK(sample_frames("v", 0.0).empty());
  const auto a = sample_frames("clip", 60.0, 10, 3);
  CHECK(a == sample_frames("clip", 60.0, 10, 3));
  CHECK(a.size() == 10);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::set<std::uint32_t>(a.begin(), a.end()).size() == 10);
  CHECK(a.back() < 60);
  CHECK(code_of([] { sample_frames("v", -1.0); }) == ErrorCode::BadArgs);
  CHECK(code_of([] { sample_frames("v", 3.0, 0); }) == ErrorCode::BadArgs);

  // Every second of a 20 s clip is drawn at rate 10/20 across many videos.
  std::vector<int> hits(20);
  const int videos = 4000;
  for (int v = 0; v < videos; ++v)
    for (auto i : sample_frames("vid" + std::to_string(v), 20.9, 10, 1)) ++hits[i];
  for (int h : hits) CHECK(std::abs(h - videos / 2) < 4 * std::sqrt(videos * 0.25));
}

TEST_CASE("build_prompt") {
  const std::string golden =
      "Describe the scene where each sound could be heard.\n"
      "Tags: door, slam => Description: A door slams shut.\n"
      "Tags: glass, shatter => Description:";
  CHECK(build_prompt(door_spec()) == golden);

  auto two = door_spec();
  two.exemplars.push_back({{"rain"}, "Rain falls on a tin roof."});
  auto swapped = two;
  std::swap(swapped.exemplars[0], swapped.exemplars[1]);
  CHECK(build_prompt(two) != build_prompt(swapped));

  auto none = door_spec();
  none.exemplars.clear();
  CHECK(code_of([&] { build_prompt(none); }) == ErrorCode::EmptyExemplars);

  const auto parsed = prompt_spec_from_json(nlohmann::json::parse(
      R"({"instruction":"Describe the scene where each sound could be heard.",
          "exemplars":[{"tags":["door","slam"],"sentence":"A door slams shut."}],
          "query_tags":["glass","shatter"]})"));
  CHECK(build_prompt(parsed) == golden);
}

TEST_CASE("template_sentence") {
  CHECK(template_sentence(std::vector<std::string>{"Glass", "Shatter"}) == "a photo of glass shatter");
  CHECK(template_sentence(std::vector<std::string>{"rain"}) == "a photo of rain");
  CHECK(template_sentence(std::vector<std::string>{"a", "b", "c", "d", "e", "f"}) == "a photo of a b c d");
  CHECK(template_sentence(std::vector<std::string>{"a", "b", "c"}, 2) == "a photo of a b");
  CHECK(code_of([] { template_sentence(std::vector<std::string>{}); }) == ErrorCode::NoTags);
}

TEST_CASE("generate_sentence") {
  StubBackend stub;
  stub.reply = "A glass shatters on the floor.";
  CHECK(generate_sentence(door_spec(), stub) == "A glass shatters on the floor.");
  CHECK(stub.last_prompt == build_prompt(door_spec()));

  stub.reply = "  line1\nline2";
  CHECK(generate_sentence(door_spec(), stub) == "line1");
  stub.reply = "\n \n  tail line \n";
  CHECK(generate_sentence(door_spec(), stub) == "tail line");
  CHECK(first_line("\r\n x \r\n") == "x");

  stub.reply = " \n\t";
  CHECK(code_of([&] { generate_sentence(door_spec(), stub); }) == ErrorCode::EmptyCompletion);
  CHECK(generate_sentence(door_spec(), stub, {true, 4}) == "a photo of glass shatter");

  stub.fail = true;
  CHECK(code_of([&] { generate_sentence(door_spec(), stub); }) == ErrorCode::BackendUnavailable);
  CHECK(generate_sentence(door_spec(), stub, {true, 4}) == "a photo of glass shatter");
}

TEST_CASE("HTTP text backend") {
  httplib::Server server;
  int calls = 0;
  nlohmann::json seen;
  server.Post("/v1/complete", [&](const httplib::Request& req, httplib::Response& res) {
    if (++calls == 1) {
      res.status = 503;
      return;
    }
    seen = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"text", " A cup falls.\nmore"}}.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpBackendConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/complete";
  cfg.max_tokens = 20;
  cfg.timeout_s = 5;
  cfg.retries = 1;
  HttpTextBackend backend(cfg);
  CHECK(generate_sentence(door_spec(), backend) == "A cup falls.");
  CHECK(calls == 2);
  CHECK(seen["prompt"] == build_prompt(door_spec()));
  CHECK(seen["max_tokens"] == 20);
  CHECK(seen["temperature"] == 0.0);

  cfg.retries = 0;
  HttpTextBackend once(cfg);
  calls = 0;
  CHECK(code_of([&] { once.complete("x"); }) == ErrorCode::BackendUnavailable);
  server.stop();
  worker.join();

  HttpBackendConfig dead;
  dead.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/complete";
  dead.timeout_s = 1;
  dead.retries = 1;
  HttpTextBackend gone(dead);
  CHECK(code_of([&] { gone.complete("x"); }) == ErrorCode::BackendUnavailable);
  CHECK(code_of([] { HttpTextBackend({"no-scheme"}); }) == ErrorCode::BadConfig);
  CHECK(http_backend_from_json({{"url", "http://h:1/x"}, {"retries", 5}}).retries == 5);
}

TEST_CASE("pairing on the hub matrix") {
  const auto [text, frames] = hub_fixture();
  PairingConfig cfg;
  cfg.frame_capacity = kUnlimited;
  auto p = make_pairs(text, frames, cfg);
  REQUIRE(p.size() == 2);
  CHECK(p[0].audio_id == "a1");
  CHECK(p[0].frame_id == "f1");
  CHECK(p[0].score == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p[1].audio_id == "a2");
  CHECK(p[1].frame_id == "f1");
  CHECK(p[1].score == doctest::Approx(0.8).epsilon(1e-6));

  cfg.frame_capacity = 1;
  p = make_pairs(text, frames, cfg);
  REQUIRE(p.size() == 2);
  CHECK(p[0].frame_id == "f1");
  CHECK(p[1].audio_id == "a2");
  CHECK(p[1].frame_id == "f2");
  CHECK(p[1].score == doctest::Approx(0.2).epsilon(1e-6));
  CHECK(p[1].rank_within_audio == 1);

  cfg.mode = PairingMode::GlobalGreedy;
  CHECK(edges_of(make_pairs(text, frames, cfg)) ==
        std::set<std::pair<std::string, std::string>>{{"a1", "f1"}, {"a2", "f2"}});

  cfg.mode = PairingMode::SequentialGreedy;
  cfg.frames_per_audio = 2;
  cfg.frame_capacity = kUnlimited;
  p = make_pairs(text, frames, cfg);
  REQUIRE(p.size() == 4);
  CHECK(p[1].frame_id == "f2");
  CHECK(p[1].rank_within_audio == 2);
}

TEST_CASE("pairing limits and errors") {
  for (const char* s : {"1", "2", "5", "10", "100"}) CHECK(parse_pairing_limit(s) == std::stoul(s));
  CHECK(parse_pairing_limit("inf") == kUnlimited);
  CHECK(parse_pairing_limit("INFINITY") == kUnlimited);
  CHECK(format_pairing_limit(kUnlimited) == "inf");
  CHECK(format_pairing_limit(5) == "5");
  CHECK(code_of([] { parse_pairing_limit("0"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_pairing_limit("-3"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_pairing_limit("many"); }) == ErrorCode::BadConfig);
  CHECK(parse_pairing_mode("global_greedy") == PairingMode::GlobalGreedy);

  const auto [text, frames] = hub_fixture();
  PairingConfig cfg;
  cfg.frame_capacity = 0;
  CHECK(code_of([&] { make_pairs(text, frames, cfg); }) == ErrorCode::BadConfig);
  cfg.frame_capacity = 1;
  CHECK(code_of([&] { make_pairs(text, frame_store({{"f", {1, 0}}}), cfg); }) == ErrorCode::DimMismatch);
  const auto three = text_store({{"a1", {1, 0, 0}}, {"a2", {0, 1, 0}}, {"a3", {0, 0, 1}}});
  for (auto mode : {PairingMode::SequentialGreedy, PairingMode::GlobalGreedy}) {
    cfg.mode = mode;
    CHECK(code_of([&] { make_pairs(three, frames, cfg); }) == ErrorCode::NoFramesAvailable);
  }
}

TEST_CASE("pairing invariants against naive oracles") {
  std::mt19937_64 rng(2024);
  const std::vector<std::size_t> limits = {1, 2, 5, 10, 100, kUnlimited};
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n_audio = 5 + rng() % 40;
    const std::size_t k = 1 + rng() % 3;
    const std::size_t n_frames = k * n_audio + rng() % 60;
    const std::size_t dim = 2 + rng() % 6;
    const auto text = random_store(rng(), n_audio, dim, ItemKind::Text, "a");
    const auto frames = random_store(rng(), n_frames, dim, ItemKind::Frame, "f");
    for (auto mode : {PairingMode::SequentialGreedy, PairingMode::GlobalGreedy}) {
      std::size_t prev_distinct = SIZE_MAX;
      for (std::size_t n : limits) {
        PairingConfig cfg{n, k, mode, 1 + trial % 3};
        const auto got = make_pairs(text, frames, cfg);
        const auto expect =
            mode == PairingMode::SequentialGreedy ? naive_sequential(text, frames, n, k) : naive_global(text, frames, n, k);
        CHECK(edges_of(got) == edges_of(expect));
        CHECK(edges_of(got).size() == got.size());
        std::map<std::string, std::size_t> per_frame, per_audio;
        for (const auto& p : got) {
          ++per_frame[p.frame_id];
          ++per_audio[p.audio_id];
          CHECK(p.score >= -1.0);
          CHECK(p.score <= 1.0);
        }
        for (const auto& [f, c] : per_frame) CHECK(c <= n);
        for (const auto& [a, c] : per_audio) CHECK(c <= k);
        CHECK(per_audio.size() == n_audio);
        CHECK(got.size() <= k * n_audio);
        if (n == 1) CHECK(distinct_frames(got) == got.size());
        {
          CHECK(distinct_frames(got) <= prev_distinct);
          prev_distinct = distinct_frames(got);
        }
        if (n == kUnlimited) CHECK(got.size() == k * n_audio);
      }
    }
    PairingConfig inf{kUnlimited, 1, PairingMode::SequentialGreedy, 2};
    const auto argmax = oracle::argmax_pairs(text, frames);
    for (const auto& p : make_pairs(text, frames, inf)) CHECK(argmax.at(p.audio_id).id == p.frame_id);

    PairingConfig global{2, k, PairingMode::GlobalGreedy, 1};
    CHECK(edges_of(make_pairs(shuffled_copy(text, trial), shuffled_copy(frames, trial + 1), global)) ==
          edges_of(make_pairs(text, frames, global)));
  }
}

TEST_CASE("pair serialization") {
  TempDir dir;
  std::vector<CuratedPair> pairs = {{"a1", "f1", 0.5, 1, Split::Train}, {"a2", "f9", -0.25, 2, std::nullopt}};
  const auto j = pair_to_json(pairs[0]);
  CHECK(j["audio_id"] == "a1");
  CHECK(j["split"] == "train");
  CHECK(pair_to_json(pairs[1])["split"].is_null());
  write_pairs(dir / "p.jsonl", pairs);
  CHECK(read_pairs(dir / "p.jsonl") == pairs);
  CHECK(code_of([&] { read_pairs(dir / "missing.jsonl"); }) == ErrorCode::IoFailure);
}

TEST_CASE("make_splits") {
  std::vector<ItemMeta> audio, frames;
  for (int i = 0; i < 100; ++i) audio.push_back(audio_meta("s" + std::to_string(i), "c"));
  for (int v = 0; v < 30; ++v) {
    for (std::uint32_t f = 0; f < 10; ++f) {
      ItemMeta m;
      m.id = "v" + std::to_string(v) + "_" + std::to_string(f);
      m.kind = ItemKind::Frame;
      m.video_id = "v" + std::to_string(v);
      m.frame_index = f;
      frames.push_back(m);
    }
  }
  const auto s = make_splits(audio, frames, 10, 15, 42);
  CHECK(s == make_splits(audio, frames, 10, 15, 42));
  CHECK(!(s == make_splits(audio, frames, 10, 15, 43)));
  std::map<Split, std::size_t> counts, video_counts;
  for (const auto& [id, sp] : s.audio) ++counts[sp];
  for (const auto& [id, sp] : s.video) ++video_counts[sp];
  CHECK(s.audio.size() == 100);
  CHECK(counts[Split::Val] == 10);
  CHECK(counts[Split::Test] == 15);
  CHECK(counts[Split::Train] == 75);
  CHECK(s.video.size() == 30);
  for (auto sp : {Split::Train, Split::Val, Split::Test}) CHECK(video_counts[sp] >= 1);

  const auto frame_st = [&] {
    StoreBuilder b(2);
    for (const auto& m : frames) b.add(m, Vector{1, static_cast<float>(m.frame_index.value())});
    return std::move(b).build();
  }();
  const auto assigned = apply_splits(frame_st, s);
  std::map<std::string, std::set<Split>> per_video;
  for (const auto& m : assigned.metas()) per_video[m.video_id].insert(m.split.value());
  for (const auto& [v, set] : per_video) CHECK(set.size() == 1);

  CHECK(code_of([&] { make_splits(audio, frames, 50, 50, 1); }) == ErrorCode::InsufficientItems);
  CHECK(code_of([&] { make_splits(audio, std::vector<ItemMeta>(frames.begin(), frames.begin() + 20), 10, 10, 1); }) ==
        ErrorCode::InsufficientItems);
}

TEST_CASE("make_splits at catalogue scale") {
  std::vector<ItemMeta> audio;
  audio.reserve(332000);
  for (int i = 0; i < 332000; ++i) audio.push_back(audio_meta("sfx" + std::to_string(i), "c"));
  const auto s = make_splits(audio, {}, 4000, 4000, 7);
  std::map<Split, std::size_t> counts;
  for (const auto& [id, sp] : s.audio) ++counts[sp];
  CHECK(counts[Split::Val] == 4000);
  CHECK(counts[Split::Test] == 4000);
  CHECK(counts[Split::Train] == 324000);
}

TEST_CASE("pairing runs per split") {
  const auto text = random_store(1, 40, 4, ItemKind::Text, "a");
  const auto frames = random_store(2, 60, 4, ItemKind::Frame, "f");
  const auto s = make_splits(text.metas(), frames.metas(), 8, 8, 5);
  const auto t = apply_splits(text, s);
  const auto f = apply_splits(frames, s);
  PairingConfig cfg{1, 1, PairingMode::SequentialGreedy, 1};
  const auto pairs = make_pairs_by_split(t, f, cfg);
  CHECK(pairs.size() == 40);
  for (const auto& p : pairs) {
    REQUIRE(p.split.has_value());
    CHECK(s.audio.at(p.audio_id) == *p.split);
    CHECK(f.meta(f.row_of(p.frame_id)).split == *p.split);
  }
}
