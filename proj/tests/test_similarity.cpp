#include <doctest.h>

#include <atomic>
#include <random>

#include "avsfx/error.hpp"
#include "avsfx/similarity.hpp"
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

EmbeddingStore tiny(std::vector<std::pair<std::string, Vector>> items) {
  StoreBuilder b(items.front().second.size());
  for (auto& [id, v] : items) {
    ItemMeta m;
    m.id = id;
    m.kind = ItemKind::Text;
    m.category = id.substr(0, 1);
    b.add(std::move(m), v);
  }
  return std::move(b).build();
}

Vector random_query(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> g;
  Vector q(dim);
  for (auto& x : q) x = static_cast<float>(g(rng));
  return l2_normalize(q);
}

}  // namespace

TEST_CASE("top_k small examples") {
  const auto s = tiny({{"a", {1, 0}}, {"b", {0, 1}}});
  const auto r = top_k(s, Vector{1, 0}, 1);
  REQUIRE(r.entries.size() == 1);
  CHECK(r.entries[0].id == "a");
  CHECK(r.entries[0].score == 1.0);

  const auto twins = tiny({{"zeta", {0.6f, 0.8f}}, {"alpha", {0.6f, 0.8f}}, {"mid", {0.6f, 0.8f}}});
  const auto t = top_k(twins, Vector{0.6f, 0.8f}, 2);
  REQUIRE(t.entries.size() == 2);
  CHECK(t.entries[0].id == "alpha");
  CHECK(t.entries[1].id == "mid");
  CHECK(t.entries[0].score == t.entries[1].score);

  CHECK(top_k(s, Vector{1, 0}, 10).entries.size() == 2);
  CHECK(code_of([&] { top_k(s, Vector{1, 0, 0}, 1); }) == ErrorCode::DimMismatch);
  CHECK(code_of([&] { top_k(s, Vector{1, 0}, 0); }) == ErrorCode::BadArgs);
  CHECK(code_of([&] { top_k(s, Vector{0, 0}, 1); }) == ErrorCode::ZeroVector);
  CHECK(code_of([&] { top_k(s, Vector{1, 0}, 1, [](const ItemMeta&) { return false; }); }) ==
        ErrorCode::EmptyCandidateSet);
  CHECK(code_of([&] { top_k(StoreBuilder(2).build(), Vector{1, 0}, 1); }) == ErrorCode::EmptyCandidateSet);
}

TEST_CASE("top_k matches a sort-everything oracle") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const auto store = random_store(100 + trial, 50, 8);
    const Vector q = random_query(rng, 8);
    const auto oracle = oracle::full_ranking(store, q);
    for (std::size_t k : {1u, 10u, 50u, 80u}) {
      const auto got = top_k(store, q, k);
      REQUIRE(got.entries.size() == std::min<std::size_t>(k, 50));
      for (std::size_t i = 0; i < got.entries.size(); ++i) {
        CHECK(got.entries[i].id == oracle[i].id);
        CHECK(got.entries[i].score == doctest::Approx(oracle[i].score).epsilon(1e-12));
        CHECK(store.id(got.entries[i].row) == got.entries[i].id);
      }
    }
  }
}

TEST_CASE("filtered top_k and rank_of match the oracle") {
  std::mt19937_64 rng(7);
  const auto store = random_store(3, 200, 12);
  const MetaFilter keep = [](const ItemMeta& m) { return m.category != "c1"; };
  for (int trial = 0; trial < 20; ++trial) {
    const Vector q = random_query(rng, 12);
    const auto oracle = oracle::full_ranking(store, q, keep);
    const auto got = top_k(store, q, 25, keep);
    for (std::size_t i = 0; i < got.entries.size(); ++i) CHECK(got.entries[i].id == oracle[i].id);
    for (std::size_t i = 0; i < oracle.size(); i += 13) CHECK(rank_of(store, q, oracle[i].id, keep) == i + 1);
  }
  const Vector q = random_query(rng, 12);
  CHECK(code_of([&] { rank_of(store, q, "v_1001", keep); }) == ErrorCode::FilteredOut);
  CHECK(code_of([&] { rank_of(store, q, "missing", keep); }) == ErrorCode::UnknownId);
}

TEST_CASE("rank_of examples") {
  const auto s = tiny({{"a", {1, 0}}, {"b", {0, 1}}, {"c", {0.7f, 0.7f}}});
  CHECK(rank_of(s, Vector{1, 0}, "a") == 1);
  CHECK(rank_of(s, Vector{1, 0}, "c") == 2);
  CHECK(rank_of(s, Vector{1, 0}, "b") == 3);
  const auto tie = tiny({{"b", {1, 0}}, {"a", {1, 0}}});
  CHECK(rank_of(tie, Vector{1, 0}, "a") == 1);
  CHECK(rank_of(tie, Vector{1, 0}, "b") == 2);
}

TEST_CASE("top_k properties") {
  std::mt19937_64 rng(21);
  const auto store = random_store(77, 300, 16);
  for (int trial = 0; trial < 25; ++trial) {
    const Vector q = random_query(rng, 16);
    const auto big = top_k(store, q, 40);
    for (std::size_t i = 1; i < big.entries.size(); ++i) {
      const auto& a = big.entries[i - 1];
      const auto& b = big.entries[i];
      CHECK((a.score > b.score || (a.score == b.score && a.id < b.id)));
    }
    for (std::size_t k = 1; k <= 40; k += 7) {
      const auto small = top_k(store, q, k);
      for (std::size_t i = 0; i < k; ++i) CHECK(small.entries[i] == big.entries[i]);
    }
    for (std::size_t i = 0; i < 40; i += 9) CHECK(rank_of(store, q, big.entries[i].id) == i + 1);
    for (std::size_t threads : {2u, 3u, 8u}) CHECK(top_k(store, q, 40, {}, {threads}) == big);
  }
}

TEST_CASE("ties survive the parallel merge") {
  StoreBuilder b(2);
  for (int i = 0; i < 500; ++i) {
    ItemMeta m;
    m.id = "dup_" + std::to_string(1000 - i);
    m.kind = ItemKind::Text;
    b.add(std::move(m), Vector{1, 1});
  }
  const auto store = std::move(b).build();
  const auto serial = top_k(store, Vector{1, 1}, 30);
  CHECK(serial.entries.front().id == "dup_1000");
  CHECK(serial.entries[1].id == "dup_501");
  for (std::size_t threads : {2u, 4u, 7u}) CHECK(top_k(store, Vector{1, 1}, 30, {}, {threads}) == serial);
}

TEST_CASE("batch_top_k equals per-query top_k") {
  std::mt19937_64 rng(4);
  const auto store = random_store(5, 120, 10);
  std::vector<Vector> qs;
  for (int i = 0; i < 100; ++i) qs.push_back(random_query(rng, 10));
  const auto one = batch_top_k(store, qs, 5, {}, {1});
  const auto four = batch_top_k(store, qs, 5, {}, {4});
  REQUIRE(one.size() == qs.size());
  CHECK(one == four);
  for (std::size_t i = 0; i < qs.size(); ++i) CHECK(one[i] == top_k(store, qs[i], 5));
  CHECK(batch_top_k(store, std::vector<Vector>{}, 5, {}, {4}).empty());
}

TEST_CASE("parallel_for covers each index once") {
  for (std::size_t threads : {1u, 3u, 16u}) {
    std::vector<std::atomic<int>> seen(1000);
    parallel_for(seen.size(), threads, [&](std::size_t i) { seen[i].fetch_add(1); });
    for (auto& s : seen) CHECK(s.load() == 1);
  }
  parallel_for(0, 4, [](std::size_t) { FAIL("no work expected"); });
  CHECK(resolve_threads(0) >= 1);
  CHECK(resolve_threads(5) == 5);
}
