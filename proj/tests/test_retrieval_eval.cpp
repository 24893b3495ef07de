#include <doctest.h>

#include <cmath>
#include <random>

#include "avsfx/error.hpp"
#include "avsfx/retrieval_eval.hpp"
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

using Ranks = std::vector<std::size_t>;
using Lists = std::vector<std::vector<std::string>>;

// One pair per audio item, frame i paired with audio i.
std::vector<CuratedPair> diagonal_pairs(const EmbeddingStore& audio, const EmbeddingStore& frames, std::size_t n) {
  std::vector<CuratedPair> pairs;
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({audio.id(i), frames.id(i), 0.0, 1, Split::Test});
  return pairs;
}

EmbeddingStore with_vectors(const EmbeddingStore& like, const std::vector<Vector>& vectors, std::size_t dim) {
  StoreBuilder b(dim);
  for (std::size_t r = 0; r < like.size(); ++r) b.add(like.meta(r), vectors[r]);
  return std::move(b).build();
}

}  // namespace

TEST_CASE("median_rank") {
  CHECK(median_rank(Ranks{1, 2, 3}) == 2);
  CHECK(median_rank(Ranks{1, 1, 1, 1}) == 1);
  CHECK(median_rank(Ranks{5, 2, 9, 7}) == 5);
  CHECK(median_rank(Ranks{4}) == 4);
  CHECK(code_of([] { median_rank(Ranks{}); }) == ErrorCode::EmptyInput);
}

TEST_CASE("recall_at_k") {
  CHECK(recall_at_k(Ranks{1, 10, 4}, 10) == 1.0);
  CHECK(recall_at_k(Ranks{3, 11, 10, 200}, 10) == 0.5);
  CHECK(code_of([] { recall_at_k(Ranks{}, 10); }) == ErrorCode::EmptyInput);
  CHECK(code_of([] { recall_at_k(Ranks{1}, 0); }) == ErrorCode::BadArgs);
}

TEST_CASE("category metrics") {
  const Lists all_right = {std::vector<std::string>(10, "a"), std::vector<std::string>(10, "b")};
  const std::vector<std::string> truth = {"a", "b"};
  CHECK(category_precision_at_k(all_right, truth, 10) == 1.0);
  CHECK(category_recall_at_k(all_right, truth, 10) == 1.0);

  const Lists four = {{"a", "x", "a", "x", "a", "x", "x", "a", "x", "x"}};
  CHECK(category_precision_at_k(four, std::vector<std::string>{"a"}, 10) == doctest::Approx(0.4));
  CHECK(category_recall_at_k(Lists{std::vector<std::string>(10, "x")}, std::vector<std::string>{"a"}, 10) == 0.0);
  CHECK(category_precision_at_k(Lists{{"a", "a"}}, std::vector<std::string>{"a"}, 10) == doctest::Approx(0.2));
  CHECK(code_of([] { category_precision_at_k({}, std::vector<std::string>{}, 10); }) == ErrorCode::EmptyInput);
  CHECK(code_of([] { category_recall_at_k({}, std::vector<std::string>{}, 10); }) == ErrorCode::EmptyInput);

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> cat(0, 4);
  Lists lists;
  std::vector<std::string> t;
  for (int q = 0; q < 100; ++q) {
    lists.emplace_back();
    for (int i = 0; i < 10; ++i) lists.back().push_back("c" + std::to_string(cat(rng)));
    t.push_back("c" + std::to_string(cat(rng)));
  }
  double hits = 0, prec = 0;
  for (std::size_t q = 0; q < lists.size(); ++q) {
    const auto m = std::count(lists[q].begin(), lists[q].end(), t[q]);
    hits += m > 0;
    prec += m / 10.0;
  }
  CHECK(category_recall_at_k(lists, t, 10) == doctest::Approx(hits / 100));
  CHECK(category_precision_at_k(lists, t, 10) == doctest::Approx(prec / 100));
}

TEST_CASE("evaluate matches the naive evaluator") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 12 + trial * 3;
    const auto audio = random_store(rng(), n, 6, ItemKind::Audio, "a", 4);
    const auto frames = random_store(rng(), n + 5, 6, ItemKind::Frame, "f");
    auto pairs = diagonal_pairs(audio, frames, n);
    // two frames share an audio target
    pairs.push_back({audio.id(0), frames.id(n + 1), 0.0, 2, Split::Test});
    const auto got = evaluate(audio, pairs, frames, {"t", 10, 1 + trial % 4});
    const auto naive = oracle::naive_evaluate(audio, pairs, frames, 10);
    CHECK(got.n_queries == pairs.size());
    CHECK(got.n_candidates == n);
    CHECK(got.exact_mr == naive.mr);
    CHECK(got.exact_r_at_k == doctest::Approx(naive.r10).epsilon(1e-12));
    CHECK(got.category_r_at_k == doctest::Approx(naive.cat_r10).epsilon(1e-12));
    CHECK(got.category_p_at_k == doctest::Approx(naive.cat_p10).epsilon(1e-12));
    CHECK(got.category_r_at_k >= got.exact_r_at_k);
    CHECK(got.exact_mr >= 1);
    CHECK(got.exact_mr <= n);
    CHECK(evaluate(audio, pairs, frames, {"t", 10, 1}) == got);
  }
}

TEST_CASE("evaluate on constructed perfect retrieval") {
  const std::size_t n = 12;
  StoreBuilder ab(n), fb(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vector e(n, 0.0f);
    e[i] = 1.0f;
    ItemMeta a;
    a.id = "a" + std::to_string(10 + i);
    a.kind = ItemKind::Audio;
    a.category = i < 8 ? "big" : "small";
    ab.add(a, e);
    ItemMeta f;
    f.id = "f" + std::to_string(10 + i);
    f.kind = ItemKind::Frame;
    f.video_id = f.id;
    f.frame_index = 0;
    fb.add(f, e);
  }
  const auto audio = std::move(ab).build();
  const auto frames = std::move(fb).build();
  const auto pairs = diagonal_pairs(audio, frames, n);
  const auto r = evaluate(audio, pairs, frames);
  CHECK(r.exact_mr == 1);
  CHECK(r.exact_r_at_k == 1.0);
  CHECK(r.category_r_at_k == 1.0);
  // Ties among the orthogonal items fall back to id order.
  const auto naive = oracle::naive_evaluate(audio, pairs, frames, 10);
  CHECK(r.category_p_at_k == doctest::Approx(naive.cat_p10));
  CHECK(r.category_p_at_k <= (8.0 * 8 / 10 + 4.0 * 4 / 10) / n + 1e-12);
}

TEST_CASE("evaluate properties") {
  const auto audio = random_store(31, 60, 8, ItemKind::Audio, "a", 5);
  const auto frames = random_store(32, 60, 8, ItemKind::Frame, "f");
  const auto pairs = diagonal_pairs(audio, frames, 60);
  const auto base = evaluate(audio, pairs, frames);

  SUBCASE("rescaled raw queries give the same exact metrics") {
    std::vector<Vector> scaled;
    for (std::size_t r = 0; r < frames.size(); ++r) {
      Vector v(frames.vector(r).begin(), frames.vector(r).end());
      for (auto& x : v) x *= 37.5f;
      scaled.push_back(v);
    }
    const auto r = evaluate(audio, pairs, with_vectors(frames, scaled, 8));
    CHECK(r.exact_mr == base.exact_mr);
    CHECK(r.exact_r_at_k == base.exact_r_at_k);
  }
  SUBCASE("a duplicate of the true audio cannot hurt category metrics") {
    StoreBuilder b(8);
    for (std::size_t r = 0; r < audio.size(); ++r) b.add_normalized(audio.meta(r), audio.vector(r));
    ItemMeta dup = audio.meta(0);
    dup.id = "a_dup";
    b.add_normalized(dup, audio.vector(0));
    const auto more = std::move(b).build();
    auto q = pairs;
    q.push_back({"a_dup", frames.id(0), 0.0, 1, Split::Test});
    const auto with = evaluate(more, q, frames);
    const auto without = evaluate(audio, pairs, frames);
    CHECK(with.n_candidates == without.n_candidates + 1);
    const auto shared = oracle::naive_evaluate(more, std::vector<CuratedPair>(q.begin(), q.end()), frames, 10);
    CHECK(shared.cat_p10 == doctest::Approx(with.category_p_at_k));
    double before = 0, after = 0;
    const std::set<std::string> cand_a = [&] {
      std::set<std::string> s;
      for (const auto& x : pairs) s.insert(x.audio_id);
      return s;
    }();
    std::set<std::string> cand_b = cand_a;
    cand_b.insert("a_dup");
    for (std::size_t i = 0; i < 60; ++i) {
      const auto qv = frames.vector(frames.row_of(pairs[i].frame_id));
      const auto truth = audio.meta(audio.row_of(pairs[i].audio_id)).category;
      auto count = [&](const EmbeddingStore& s, const std::set<std::string>& cand) {
        const auto rk = oracle::full_ranking(s, qv, [&](const ItemMeta& m) { return cand.count(m.id) > 0; });
        int c = 0;
        for (std::size_t j = 0; j < 10; ++j) c += s.meta(s.row_of(rk[j].id)).category == truth;
        return c;
      };
      if (pairs[i].audio_id != audio.id(0)) continue;
      before += count(audio, cand_a);
      after += count(more, cand_b);
    }
    CHECK(after >= before);
  }
  SUBCASE("worker count does not change results") {
    for (std::size_t t : {2u, 5u}) CHECK(evaluate(audio, pairs, frames, {"test", 10, t}) == base);
  }
  SUBCASE("errors") {
    auto bad = pairs;
    bad[3].frame_id = "nope";
    CHECK(code_of([&] { evaluate(audio, bad, frames); }) == ErrorCode::UnknownId);
    bad = pairs;
    bad[3].audio_id = "nope";
    CHECK(code_of([&] { evaluate(audio, bad, frames); }) == ErrorCode::UnknownId);
    CHECK(code_of([&] { evaluate(audio, std::vector<CuratedPair>{}, frames); }) == ErrorCode::EmptyTestSet);
  }
}

TEST_CASE("random retrieval sits at the category base rate") {
  const std::size_t n = 500, c = 5;
  const auto audio = random_store(101, n, 16, ItemKind::Audio, "a", c);
  const auto frames = random_store(202, n, 16, ItemKind::Frame, "f");
  const auto pairs = diagonal_pairs(audio, frames, n);
  const auto r = evaluate(audio, pairs, frames);
  const double p = 1.0 / c;
  CHECK(random_baseline_p_at_k(pairs, categories_of(audio)) == doctest::Approx(p));
  const double sigma = std::sqrt(p * (1 - p) / (10.0 * n));
  CHECK(std::abs(r.category_p_at_k - p) <= 3 * sigma);
}

TEST_CASE("report formats") {
  EvalReport r{"ave", 30, 30, 10, 4, 0.5, 0.9, 0.43333};
  CHECK(eval_report_from_json(to_json(r)) == r);
  const auto j = to_json(r);
  CHECK(j["exact"]["mr"] == 4.0);
  CHECK(j["exact"]["r_at_k"] == 0.5);
  CHECK(j["category"]["r_at_k"] == 0.9);
  CHECK(j["category"]["p_at_k"] == 0.43333);
  CHECK(j["dataset"] == "ave");
  const auto table = format_table(std::vector<EvalReport>{r, {"pse", 7, 7, 10, 122, 0.1, 0.2, 0.3}});
  CHECK(table.find("Exact MR") != std::string::npos);
  CHECK(table.find("Category P@10") != std::string::npos);
  CHECK(table.find("ave") != std::string::npos);
  CHECK(table.find("122") != std::string::npos);

  const auto csv = format_sweep_csv({"val", "test"}, std::vector<SweepRow>{{1, {0.5, 0.25}}, {kUnlimited, {0.125, 1}}});
  CHECK(csv == "pairing_limit,val,test\n1,0.5000,0.2500\ninf,0.1250,1.0000\n");
}
