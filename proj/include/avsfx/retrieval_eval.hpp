#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "avsfx/curation.hpp"
#include "avsfx/embedding.hpp"

namespace avsfx {

inline constexpr std::size_t kDefaultEvalK = 10;

/// Odd count: the middle rank. Even count: the lower of the two middle ranks,
/// so the result is always an attained rank. Throws EmptyInput.
double median_rank(std::span<const std::size_t> ranks);

/// Fraction of ranks <= k. Throws EmptyInput, BadArgs (k == 0).
double recall_at_k(std::span<const std::size_t> ranks, std::size_t k);

/// Mean over queries of (#entries in the true category) / k. Lists shorter
/// than k count the missing slots as misses. Throws EmptyInput, BadArgs.
double category_precision_at_k(const std::vector<std::vector<std::string>>& topk_categories,
                               std::span<const std::string> true_category, std::size_t k);

/// Fraction of queries with at least one of the first k entries in the true
/// category. Throws EmptyInput, BadArgs.
double category_recall_at_k(const std::vector<std::vector<std::string>>& topk_categories,
                            std::span<const std::string> true_category, std::size_t k);

struct EvalReport {
  std::string dataset_name;
  std::size_t n_queries = 0;
  std::size_t n_candidates = 0;
  std::size_t k = kDefaultEvalK;
  double exact_mr = 0.0;
  double exact_r_at_k = 0.0;
  double category_r_at_k = 0.0;
  double category_p_at_k = 0.0;

  bool operator==(const EvalReport&) const = default;
};

struct EvalOptions {
  std::string dataset_name = "test";
  std::size_t k = kDefaultEvalK;
  std::size_t threads = 1;
};

using CategoryMap = std::unordered_map<std::string, std::string>;

/// Every pair contributes one query: its frame embedding ranks all distinct
/// audio of `test_pairs`; the paired audio is the exact target and its
/// category the category target. Throws UnknownId, EmptyTestSet.
EvalReport evaluate(const EmbeddingStore& projected_audio, std::span<const CuratedPair> test_pairs,
                    const EmbeddingStore& frames, const CategoryMap& categories, const EvalOptions& opts = {});

/// Categories taken from the projected store's metadata.
EvalReport evaluate(const EmbeddingStore& projected_audio, std::span<const CuratedPair> test_pairs,
                    const EmbeddingStore& frames, const EvalOptions& opts = {});

/// Expected category P@k of a uniformly random ranking: the mean over
/// queries of the true category's share of the candidate set.
double random_baseline_p_at_k(std::span<const CuratedPair> test_pairs, const CategoryMap& categories);

CategoryMap categories_of(const EmbeddingStore& store);

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Aligned text table, one row per report, columns
/// Exact MR | Exact R@k | Category R@k | Category P@k.
std::string format_table(std::span<const EvalReport> reports);

/// Pairing-limit ablation: one row per limit, one P@k column per dataset.
struct SweepRow {
  std::size_t pairing_limit = 1;
  std::vector<double> p_at_k;  ///< aligned with the column names
};
std::string format_sweep_csv(const std::vector<std::string>& dataset_columns, std::span<const SweepRow> rows);

}  // namespace avsfx
