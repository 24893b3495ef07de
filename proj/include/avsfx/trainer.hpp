#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "avsfx/curation.hpp"
#include "avsfx/embedding.hpp"

namespace avsfx {

enum class Activation { Relu, Gelu };
enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(Activation a) noexcept;
Activation parse_activation(std::string_view s);
OptimizerKind parse_optimizer(std::string_view s);

/// Multilayer perceptron from audio features into the image embedding space.
/// Hidden layers apply the activation; the output is L2-normalized.
///
/// Parameters live in one flat buffer, per layer the row-major weight matrix
/// (out x in) followed by the bias. That order is also the checkpoint payload.
template <typename T>
class BasicProjector {
 public:
  BasicProjector() = default;
  BasicProjector(std::vector<std::size_t> layer_dims, Activation activation);

  /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
  static BasicProjector random(std::vector<std::size_t> layer_dims, Activation activation, std::uint64_t seed);
  /// Single square layer with identity weights and zero bias.
  static BasicProjector identity(std::size_t dim);

  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  Activation activation() const noexcept { return activation_; }
  std::size_t num_layers() const noexcept { return dims_.empty() ? 0 : dims_.size() - 1; }
  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t output_dim() const noexcept { return dims_.back(); }

  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  std::span<T> weights(std::size_t layer) noexcept { return {params_.data() + offsets_[layer], dims_[layer + 1] * dims_[layer]}; }
  std::span<const T> weights(std::size_t layer) const noexcept {
    return {params_.data() + offsets_[layer], dims_[layer + 1] * dims_[layer]};
  }
  std::span<T> bias(std::size_t layer) noexcept {
    return {params_.data() + offsets_[layer] + dims_[layer + 1] * dims_[layer], dims_[layer + 1]};
  }
  std::span<const T> bias(std::size_t layer) const noexcept {
    return {params_.data() + offsets_[layer] + dims_[layer + 1] * dims_[layer], dims_[layer + 1]};
  }

  template <typename U>
  BasicProjector<U> cast() const {
    BasicProjector<U> out(dims_, activation_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i] = static_cast<U>(params_[i]);
    return out;
  }

  bool operator==(const BasicProjector&) const = default;

 private:
  std::vector<std::size_t> dims_;
  Activation activation_ = Activation::Relu;
  std::vector<T> params_;
  std::vector<std::size_t> offsets_;
};

using Projector = BasicProjector<float>;

/// Unit-norm embeddings of a batch of feature vectors. Throws DimMismatch.
std::vector<Vector> forward(const Projector& p, std::span<const Vector> features);

/// Projects every item of an audio-feature store; metadata is carried over.
EmbeddingStore project_all(const Projector& p, const EmbeddingStore& audio_features, std::size_t threads = 1);

/// Softmax-over-batch contrastive loss with s_ij = cos(audio_i, image_j):
///   mean_i -log(exp(s_ii/tau) / sum_j exp(s_ij/tau))
/// The symmetric form averages the audio->image and image->audio directions.
/// Throws BatchMismatch, BadTemperature.
double info_nce(std::span<const Vector> audio, std::span<const Vector> image, double temperature,
                bool symmetric = true);

/// Loss and d(loss)/d(audio_i). The image side is frozen data and gets no
/// gradient.
struct LossAndGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grad_audio;
};
LossAndGrad info_nce_with_grad(std::span<const std::vector<double>> audio, std::span<const Vector> image,
                               double temperature, bool symmetric);

/// Loss of info_nce(forward(p, features), images) and its gradient with respect
/// to every projector parameter, computed in the projector's precision with
/// double accumulation. Samples are split over `threads` fixed chunks whose
/// partial gradients are reduced in chunk order.
template <typename T>
double loss_and_param_grad(const BasicProjector<T>& p, std::span<const Vector> features,
                           std::span<const Vector> images, double temperature, bool symmetric,
                           std::vector<double>& grad, std::size_t threads = 1);

/// Maximum relative error between analytic and central-difference gradients
/// over `samples` seeded parameter indices (all of them when samples == 0),
/// evaluated in double precision: |a - n| / max(|a| + |n|, 1e-6).
double grad_check(const Projector& p, std::span<const Vector> features, std::span<const Vector> images,
                  double temperature, double epsilon, bool symmetric = true, std::size_t samples = 0,
                  std::uint64_t seed = 0);

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 1e-5;
  std::size_t max_epochs = 150;
  double temperature = 0.07;
  std::uint64_t seed = 0;
  bool symmetric_loss = true;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::vector<std::size_t> hidden_dims = {512};
  Activation activation = Activation::Relu;
  std::size_t eval_k = 10;
  std::size_t threads = 1;  ///< data-parallel gradient workers
};

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& cfg);

struct Checkpoint {
  std::size_t epoch = 0;
  Projector projector;
  double val_category_p10 = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const Checkpoint&) const = default;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_p10 = 0.0;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochLog> history;
};

/// Trains on (audio features -> frame embedding) pairs with seeded per-epoch
/// shuffling; after each epoch scores category P@k on `val_pairs` and keeps the
/// best epoch (earliest on ties). `init` switches from scratch to fine-tuning.
/// Throws EmptyTrainingSet, DimMismatch, BadConfig, BadTemperature.
FitResult fit(std::span<const CuratedPair> train_pairs, std::span<const CuratedPair> val_pairs,
              const EmbeddingStore& audio_features, const EmbeddingStore& frames, const TrainConfig& cfg,
              const Projector* init = nullptr, const std::function<void(const EpochLog&)>& on_epoch = {});

// Checkpoint file: one JSON header line, then the parameters as raw
// little-endian f32 in Projector::params() order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws BadMagic, VersionUnsupported, TruncatedFile, DimMismatch, IoFailure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const EpochLog& log);

}  // namespace avsfx
