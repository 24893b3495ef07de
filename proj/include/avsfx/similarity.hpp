#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "avsfx/embedding.hpp"

namespace avsfx {

struct ScoredItem {
  std::string id;
  double score = 0.0;
  std::size_t row = 0;  ///< row in the searched store

  bool operator==(const ScoredItem&) const = default;
};

/// Ordered by score descending, ties by ascending id. No duplicates;
/// length is min(k, number of candidates).
struct RankedList {
  std::vector<ScoredItem> entries;
  std::size_t k = 0;

  bool operator==(const RankedList&) const = default;
};

using MetaFilter = std::function<bool(const ItemMeta&)>;

struct ScanOptions {
  /// Worker count for the scan; 0 means hardware concurrency.
  std::size_t threads = 1;
};

/// Exact top-k by cosine. The query is normalized first. Throws DimMismatch,
/// ZeroVector, EmptyCandidateSet, BadArgs (k == 0).
RankedList top_k(const EmbeddingStore& store, std::span<const float> query, std::size_t k,
                 const MetaFilter& filter = {}, ScanOptions opts = {});

/// 1-based rank of `target_id` under the top_k ordering.
/// Throws UnknownId, FilteredOut, DimMismatch.
std::size_t rank_of(const EmbeddingStore& store, std::span<const float> query, std::string_view target_id,
                    const MetaFilter& filter = {}, ScanOptions opts = {});

/// Elementwise top_k; queries are distributed over `opts.threads` workers.
std::vector<RankedList> batch_top_k(const EmbeddingStore& store, std::span<const Vector> queries, std::size_t k,
                                    const MetaFilter& filter = {}, ScanOptions opts = {});

std::size_t resolve_threads(std::size_t requested);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// claimed dynamically; callers write results by index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace avsfx
