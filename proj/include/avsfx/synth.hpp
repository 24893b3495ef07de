#pragma once

#include <cstdint>
#include <string>

#include "avsfx/embedding.hpp"

namespace avsfx {

/// Category-clustered unit vectors: item i belongs to category i % n_categories
/// ("cat_<c>") and is its category center plus isotropic noise of expected norm
/// `cluster_spread`. Pure function of its arguments. Throws BadConfig.
EmbeddingStore synth_store(std::uint64_t seed, std::size_t n_items, std::size_t dim, std::size_t n_categories,
                           double cluster_spread, ItemKind kind = ItemKind::Audio,
                           const std::string& id_prefix = "item");

struct SynthCorpusConfig {
  std::uint64_t seed = 1;
  std::size_t n_audio = 500;
  std::size_t n_frames = 500;
  std::size_t frames_per_video = 5;
  std::size_t n_categories = 5;
  std::size_t embedding_dim = 16;  ///< joint text/image space
  std::size_t audio_feature_dim = 16;
  double cluster_spread = 0.1;
};

/// Three aligned stores standing in for the external encoders:
///   audio   - audio-feature vectors (projector input), own random geometry
///   text    - sentence embeddings keyed by audio id, in the image space
///   frames  - frame embeddings grouped into videos, in the image space
/// Text and frames share category centers; audio features do not.
struct SynthCorpus {
  EmbeddingStore audio;
  EmbeddingStore text;
  EmbeddingStore frames;
};

SynthCorpus synth_corpus(const SynthCorpusConfig& cfg);

}  // namespace avsfx
