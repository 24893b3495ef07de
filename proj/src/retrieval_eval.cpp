#include "avsfx/retrieval_eval.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "avsfx/error.hpp"
#include "avsfx/similarity.hpp"

namespace avsfx {
namespace {

void require(bool ok, ErrorCode code, const char* what) {
  if (!ok) throw Error(code, what);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

double median_rank(std::span<const std::size_t> ranks) {
  require(!ranks.empty(), ErrorCode::EmptyInput, "median of no ranks");
  std::vector<std::size_t> sorted(ranks.begin(), ranks.end());
  const std::size_t mid = (sorted.size() - 1) / 2;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid), sorted.end());
  return static_cast<double>(sorted[mid]);
}

double recall_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  require(!ranks.empty(), ErrorCode::EmptyInput, "recall of no ranks");
  require(k >= 1, ErrorCode::BadArgs, "k must be at least 1");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double category_precision_at_k(const std::vector<std::vector<std::string>>& topk_categories,
                               std::span<const std::string> true_category, std::size_t k) {
  require(!topk_categories.empty(), ErrorCode::EmptyInput, "precision of no queries");
  require(k >= 1, ErrorCode::BadArgs, "k must be at least 1");
  require(topk_categories.size() == true_category.size(), ErrorCode::BadArgs, "one true category per query");
  double total = 0.0;
  for (std::size_t q = 0; q < topk_categories.size(); ++q) {
    const auto& list = topk_categories[q];
    const std::size_t n = std::min(k, list.size());
    const auto hits = std::count(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(n), true_category[q]);
    total += static_cast<double>(hits) / static_cast<double>(k);
  }
  return total / static_cast<double>(topk_categories.size());
}

double category_recall_at_k(const std::vector<std::vector<std::string>>& topk_categories,
                            std::span<const std::string> true_category, std::size_t k) {
  require(!topk_categories.empty(), ErrorCode::EmptyInput, "recall of no queries");
  require(k >= 1, ErrorCode::BadArgs, "k must be at least 1");
  require(topk_categories.size() == true_category.size(), ErrorCode::BadArgs, "one true category per query");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < topk_categories.size(); ++q) {
    const auto& list = topk_categories[q];
    const std::size_t n = std::min(k, list.size());
    if (std::find(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(n), true_category[q]) !=
        list.begin() + static_cast<std::ptrdiff_t>(n)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(topk_categories.size());
}

CategoryMap categories_of(const EmbeddingStore& store) {
  CategoryMap out;
  for (const auto& m : store.metas()) out.emplace(m.id, m.category);
  return out;
}

EvalReport evaluate(const EmbeddingStore& projected_audio, std::span<const CuratedPair> test_pairs,
                    const EmbeddingStore& frames, const CategoryMap& categories, const EvalOptions& opts) {
  require(!test_pairs.empty(), ErrorCode::EmptyTestSet, "no test pairs");
  require(opts.k >= 1, ErrorCode::BadArgs, "k must be at least 1");

  std::set<std::string> candidate_ids;
  for (const auto& p : test_pairs) {
    if (!projected_audio.contains(p.audio_id)) throw Error(ErrorCode::UnknownId, "audio '" + p.audio_id + "'");
    if (!frames.contains(p.frame_id)) throw Error(ErrorCode::UnknownId, "frame '" + p.frame_id + "'");
    if (!categories.contains(p.audio_id)) throw Error(ErrorCode::UnknownId, "no category for '" + p.audio_id + "'");
    candidate_ids.insert(p.audio_id);
  }
  const EmbeddingStore candidates =
      projected_audio.subset([&](const ItemMeta& m) { return candidate_ids.contains(m.id); });
  if (frames.dim() != candidates.dim()) {
    throw Error(ErrorCode::DimMismatch, "frame dim " + std::to_string(frames.dim()) + " vs audio dim " +
                                            std::to_string(candidates.dim()));
  }

  const std::size_t n = test_pairs.size();
  std::vector<std::size_t> ranks(n);
  std::vector<std::vector<std::string>> topk_cats(n);
  std::vector<std::string> truth(n);
  parallel_for(n, opts.threads, [&](std::size_t q) {
    const auto& p = test_pairs[q];
    const auto query = frames.vector(frames.row_of(p.frame_id));
    ranks[q] = rank_of(candidates, query, p.audio_id);
    const auto top = top_k(candidates, query, opts.k);
    for (const auto& e : top.entries) topk_cats[q].push_back(categories.at(e.id));
    truth[q] = categories.at(p.audio_id);
  });

  EvalReport r;
  r.dataset_name = opts.dataset_name;
  r.n_queries = n;
  r.n_candidates = candidates.size();
  r.k = opts.k;
  r.exact_mr = median_rank(ranks);
  r.exact_r_at_k = recall_at_k(ranks, opts.k);
  r.category_r_at_k = category_recall_at_k(topk_cats, truth, opts.k);
  r.category_p_at_k = category_precision_at_k(topk_cats, truth, opts.k);
  return r;
}

EvalReport evaluate(const EmbeddingStore& projected_audio, std::span<const CuratedPair> test_pairs,
                    const EmbeddingStore& frames, const EvalOptions& opts) {
  return evaluate(projected_audio, test_pairs, frames, categories_of(projected_audio), opts);
}

double random_baseline_p_at_k(std::span<const CuratedPair> test_pairs, const CategoryMap& categories) {
  require(!test_pairs.empty(), ErrorCode::EmptyTestSet, "no test pairs");
  std::set<std::string> ids;
  for (const auto& p : test_pairs) ids.insert(p.audio_id);
  std::unordered_map<std::string, std::size_t> per_category;
  for (const auto& id : ids) {
    auto it = categories.find(id);
    if (it == categories.end()) throw Error(ErrorCode::UnknownId, "no category for '" + id + "'");
    ++per_category[it->second];
  }
  double total = 0.0;
  for (const auto& p : test_pairs) {
    total += static_cast<double>(per_category.at(categories.at(p.audio_id))) / static_cast<double>(ids.size());
  }
  return total / static_cast<double>(test_pairs.size());
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"dataset", r.dataset_name},
          {"n_queries", r.n_queries},
          {"n_candidates", r.n_candidates},
          {"k", r.k},
          {"exact", {{"mr", r.exact_mr}, {"r_at_k", r.exact_r_at_k}}},
          {"category", {{"r_at_k", r.category_r_at_k}, {"p_at_k", r.category_p_at_k}}}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.dataset_name = j.at("dataset").get<std::string>();
  r.n_queries = j.at("n_queries").get<std::size_t>();
  r.n_candidates = j.at("n_candidates").get<std::size_t>();
  r.k = j.at("k").get<std::size_t>();
  r.exact_mr = j.at("exact").at("mr").get<double>();
  r.exact_r_at_k = j.at("exact").at("r_at_k").get<double>();
  r.category_r_at_k = j.at("category").at("r_at_k").get<double>();
  r.category_p_at_k = j.at("category").at("p_at_k").get<double>();
  return r;
}

std::string format_table(std::span<const EvalReport> reports) {
  const std::size_t k = reports.empty() ? kDefaultEvalK : reports.front().k;
  const std::string ks = std::to_string(k);
  std::size_t name_w = 7;
  for (const auto& r : reports) name_w = std::max(name_w, r.dataset_name.size());
  std::vector<std::string> heads = {"Exact MR", "Exact R@" + ks, "Category R@" + ks, "Category P@" + ks};

  std::ostringstream os;
  auto cell = [&](const std::string& s, std::size_t w) {
    os << ' ' << std::string(w > s.size() ? w - s.size() : 0, ' ') << s << " |";
  };
  os << "| " << "Dataset" << std::string(name_w - 7, ' ') << " |";
  for (const auto& h : heads) cell(h, h.size());
  os << '\n' << "|" << std::string(name_w + 2, '-') << "|";
  for (const auto& h : heads) os << std::string(h.size() + 2, '-') << "|";
  os << '\n';
  for (const auto& r : reports) {
    os << "| " << r.dataset_name << std::string(name_w - r.dataset_name.size(), ' ') << " |";
    cell(fixed(r.exact_mr, 0), heads[0].size());
    cell(fixed(r.exact_r_at_k, 2), heads[1].size());
    cell(fixed(r.category_r_at_k, 2), heads[2].size());
    cell(fixed(r.category_p_at_k, 2), heads[3].size());
    os << '\n';
  }
  return os.str();
}

std::string format_sweep_csv(const std::vector<std::string>& dataset_columns, std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << "pairing_limit";
  for (const auto& c : dataset_columns) os << ',' << c;
  os << '\n';
  for (const auto& row : rows) {
    os << format_pairing_limit(row.pairing_limit);
    for (double v : row.p_at_k) os << ',' << fixed(v, 4);
    os << '\n';
  }
  return os.str();
}

}  // namespace avsfx
