#include "avsfx/synth.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "avsfx/curation.hpp"
#include "avsfx/error.hpp"

namespace avsfx {
namespace {

std::string numbered(const std::string& prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, i);
  return prefix + "_" + buf;
}

std::string category_name(std::size_t c) { return "cat_" + std::to_string(c); }

std::vector<Vector> random_centers(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vector> centers;
  for (std::size_t c = 0; c < n; ++c) {
    Vector v(dim);
    do {
      for (auto& x : v) x = static_cast<float>(gauss(rng));
    } while (l2_norm(v) < 1e-6);
    centers.push_back(l2_normalize(v));
  }
  return centers;
}

// center + noise with E|noise| ~= spread
Vector jitter(std::mt19937_64& rng, std::span<const float> center, double spread) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma = spread / std::sqrt(static_cast<double>(center.size()));
  Vector v(center.begin(), center.end());
  if (spread > 0) {
    for (auto& x : v) x = static_cast<float>(x + sigma * gauss(rng));
  }
  return v;
}

}  // namespace

EmbeddingStore synth_store(std::uint64_t seed, std::size_t n_items, std::size_t dim, std::size_t n_categories,
                           double cluster_spread, ItemKind kind, const std::string& id_prefix) {
  if (dim == 0 || n_categories == 0 || n_categories > n_items || !(cluster_spread >= 0)) {
    throw Error(ErrorCode::BadConfig, "synth_store needs dim > 0, 1 <= n_categories <= n_items, spread >= 0");
  }
  std::mt19937_64 rng(seed);
  const auto centers = random_centers(rng, n_categories, dim);
  StoreBuilder b(dim);
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t c = i % n_categories;
    ItemMeta m;
    m.id = numbered(id_prefix, i, 6);
    m.kind = kind;
    m.category = category_name(c);
    m.tags = {m.category};
    if (kind == ItemKind::Frame) {
      m.video_id = m.id;
      m.frame_index = 0;
    }
    b.add(std::move(m), jitter(rng, centers[c], cluster_spread));
  }
  return std::move(b).build();
}

SynthCorpus synth_corpus(const SynthCorpusConfig& cfg) {
  if (cfg.n_categories == 0 || cfg.n_categories > cfg.n_audio || cfg.frames_per_video == 0 ||
      cfg.n_frames < cfg.frames_per_video || cfg.embedding_dim == 0 || cfg.audio_feature_dim == 0 ||
      !(cfg.cluster_spread >= 0)) {
    throw Error(ErrorCode::BadConfig, "invalid synthetic corpus configuration");
  }
  std::mt19937_64 rng(cfg.seed);
  const auto image_centers = random_centers(rng, cfg.n_categories, cfg.embedding_dim);
  const auto audio_centers = random_centers(rng, cfg.n_categories, cfg.audio_feature_dim);

  StoreBuilder audio(cfg.audio_feature_dim);
  StoreBuilder text(cfg.embedding_dim);
  std::uniform_real_distribution<double> dur(0.5, 8.0);
  for (std::size_t i = 0; i < cfg.n_audio; ++i) {
    const std::size_t c = i % cfg.n_categories;
    ItemMeta m;
    m.id = numbered("sfx", i, 6);
    m.kind = ItemKind::Audio;
    m.category = category_name(c);
    m.tags = {m.category, "take " + std::to_string(i % 7)};
    m.duration_s = std::round(dur(rng) * 100.0) / 100.0;
    audio.add(m, jitter(rng, audio_centers[c], cfg.cluster_spread));
    ItemMeta t = m;
    t.kind = ItemKind::Text;
    t.duration_s.reset();
    text.add(std::move(t), jitter(rng, image_centers[c], cfg.cluster_spread));
  }

  // Videos are long enough to yield exactly frames_per_video samples at 1 FPS;
  // the last video takes whatever remains.
  StoreBuilder frames(cfg.embedding_dim);
  std::size_t made = 0;
  for (std::size_t v = 0; made < cfg.n_frames; ++v) {
    const std::size_t c = v % cfg.n_categories;
    const std::string video_id = numbered("vid", v, 5);
    const std::size_t want = std::min(cfg.frames_per_video, cfg.n_frames - made);
    const double duration = static_cast<double>(cfg.frames_per_video * 3);
    const auto indices = sample_frames(video_id, duration, want, cfg.seed);
    const Vector video_center = jitter(rng, image_centers[c], cfg.cluster_spread / 2);
    for (auto idx : indices) {
      ItemMeta m;
      m.id = video_id + "_f" + std::to_string(idx);
      m.kind = ItemKind::Frame;
      m.video_id = video_id;
      m.frame_index = idx;
      m.category = category_name(c);
      frames.add(std::move(m), jitter(rng, video_center, cfg.cluster_spread / 2));
      ++made;
    }
  }
  return {std::move(audio).build(), std::move(text).build(), std::move(frames).build()};
}

}  // namespace avsfx
