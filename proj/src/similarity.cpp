#include "avsfx/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <exception>
#include <mutex>
#include <queue>
#include <thread>

#include "avsfx/error.hpp"

namespace avsfx {
namespace {

struct Hit {
  double score;
  std::uint32_t lex;  // lexicographic id rank, the tie-breaker
  std::size_t row;
};

// a ranks before b
inline bool better(const Hit& a, const Hit& b) {
  return a.score > b.score || (a.score == b.score && a.lex < b.lex);
}

struct WorstOnTop {
  bool operator()(const Hit& a, const Hit& b) const { return better(a, b); }
};

inline double score_row(const EmbeddingStore& store, std::size_t row, std::span<const float> q) {
  return std::clamp(dot(store.vector(row), q), -1.0, 1.0);
}

std::vector<Hit> scan_chunk(const EmbeddingStore& store, std::span<const float> q, std::size_t k,
                            const MetaFilter& filter, std::size_t begin, std::size_t end) {
  std::priority_queue<Hit, std::vector<Hit>, WorstOnTop> heap;
  for (std::size_t r = begin; r < end; ++r) {
    if (filter && !filter(store.meta(r))) continue;
    Hit h{score_row(store, r, q), store.lex_rank(r), r};
    if (heap.size() < k) {
      heap.push(h);
    } else if (better(h, heap.top())) {
      heap.pop();
      heap.push(h);
    }
  }
  std::vector<Hit> out;
  out.reserve(heap.size());
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  return out;
}

Vector checked_query(const EmbeddingStore& store, std::span<const float> query) {
  if (query.size() != store.dim()) {
    throw Error(ErrorCode::DimMismatch,
                "query dim " + std::to_string(query.size()) + " vs store dim " + std::to_string(store.dim()));
  }
  // Stored vectors are already unit length; use them bit for bit so scores
  // match cosine() on the same pair.
  if (std::abs(l2_norm(query) - 1.0) <= 1e-6) return Vector(query.begin(), query.end());
  return l2_normalize(query);
}

RankedList scan(const EmbeddingStore& store, std::span<const float> q, std::size_t k, const MetaFilter& filter,
                std::size_t threads) {
  const std::size_t n = store.size();
  const std::size_t chunks = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::vector<Hit>> partial(chunks);
  const std::size_t per = (n + chunks - 1) / chunks;
  parallel_for(chunks, chunks, [&](std::size_t c) {
    const std::size_t begin = std::min(n, c * per);
    const std::size_t end = std::min(n, begin + per);
    partial[c] = scan_chunk(store, q, k, filter, begin, end);
  });
  std::vector<Hit> merged;
  for (auto& p : partial) merged.insert(merged.end(), p.begin(), p.end());
  if (merged.empty()) throw Error(ErrorCode::EmptyCandidateSet, "no candidate passes the filter");
  const std::size_t take = std::min(k, merged.size());
  std::partial_sort(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(take), merged.end(), better);
  RankedList out;
  out.k = k;
  out.entries.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    out.entries.push_back({store.id(merged[i].row), merged[i].score, merged[i].row});
  }
  return out;
}

}  // namespace

std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(resolve_threads(threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

RankedList top_k(const EmbeddingStore& store, std::span<const float> query, std::size_t k, const MetaFilter& filter,
                 ScanOptions opts) {
  if (k == 0) throw Error(ErrorCode::BadArgs, "k must be at least 1");
  const Vector q = checked_query(store, query);
  return scan(store, q, k, filter, resolve_threads(opts.threads));
}

std::size_t rank_of(const EmbeddingStore& store, std::span<const float> query, std::string_view target_id,
                    const MetaFilter& filter, ScanOptions opts) {
  const Vector q = checked_query(store, query);
  const std::size_t target = store.row_of(target_id);
  if (filter && !filter(store.meta(target))) {
    throw Error(ErrorCode::FilteredOut, "target '" + std::string(target_id) + "' is excluded by the filter");
  }
  const Hit t{score_row(store, target, q), store.lex_rank(target), target};
  const std::size_t n = store.size();
  const std::size_t chunks = std::max<std::size_t>(1, std::min(resolve_threads(opts.threads), n));
  const std::size_t per = (n + chunks - 1) / chunks;
  std::vector<std::size_t> ahead(chunks, 0);
  parallel_for(chunks, chunks, [&](std::size_t c) {
    const std::size_t begin = std::min(n, c * per);
    const std::size_t end = std::min(n, begin + per);
    std::size_t count = 0;
    for (std::size_t r = begin; r < end; ++r) {
      if (r == target || (filter && !filter(store.meta(r)))) continue;
      if (better(Hit{score_row(store, r, q), store.lex_rank(r), r}, t)) ++count;
    }
    ahead[c] = count;
  });
  std::size_t rank = 1;
  for (auto a : ahead) rank += a;
  return rank;
}

std::vector<RankedList> batch_top_k(const EmbeddingStore& store, std::span<const Vector> queries, std::size_t k,
                                    const MetaFilter& filter, ScanOptions opts) {
  if (k == 0) throw Error(ErrorCode::BadArgs, "k must be at least 1");
  std::vector<RankedList> out(queries.size());
  parallel_for(queries.size(), opts.threads, [&](std::size_t i) {
    out[i] = scan(store, checked_query(store, queries[i]), k, filter, 1);
  });
  return out;
}

}  // namespace avsfx
