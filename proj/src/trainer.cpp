#include "avsfx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "avsfx/error.hpp"
#include "avsfx/retrieval_eval.hpp"
#include "avsfx/similarity.hpp"

namespace avsfx {

std::string_view to_string(Activation a) noexcept { return a == Activation::Relu ? "relu" : "gelu"; }

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  throw Error(ErrorCode::BadConfig, "unknown activation '" + std::string(s) + "'");
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw Error(ErrorCode::BadConfig, "unknown optimizer '" + std::string(s) + "'");
}

// --- projector --------------------------------------------------------------

template <typename T>
BasicProjector<T>::BasicProjector(std::vector<std::size_t> layer_dims, Activation activation)
    : dims_(std::move(layer_dims)), activation_(activation) {
  if (dims_.size() < 2 || std::find(dims_.begin(), dims_.end(), 0u) != dims_.end()) {
    throw Error(ErrorCode::BadConfig, "a projector needs at least an input and an output dimension, all positive");
  }
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    offsets_.push_back(total);
    total += dims_[l] * dims_[l + 1] + dims_[l + 1];
  }
  params_.assign(total, T{0});
}

template <typename T>
BasicProjector<T> BasicProjector<T>::random(std::vector<std::size_t> layer_dims, Activation activation,
                                            std::uint64_t seed) {
  BasicProjector p(std::move(layer_dims), activation);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    const double fan_in = static_cast<double>(p.dims_[l]);
    const double fan_out = static_cast<double>(p.dims_[l + 1]);
    const bool last = l + 1 == p.num_layers();
    const double bound = last ? std::sqrt(6.0 / (fan_in + fan_out)) : std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& w : p.weights(l)) w = static_cast<T>(u(rng));
  }
  return p;
}

template <typename T>
BasicProjector<T> BasicProjector<T>::identity(std::size_t dim) {
  BasicProjector p({dim, dim}, Activation::Relu);
  auto w = p.weights(0);
  for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = T{1};
  return p;
}

template class BasicProjector<float>;
template class BasicProjector<double>;

namespace {

inline double act(Activation a, double x) {
  if (a == Activation::Relu) return x > 0 ? x : 0.0;
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline double act_grad(Activation a, double x) {
  if (a == Activation::Relu) return x > 0 ? 1.0 : 0.0;
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
}

// Per-sample activations kept for the backward pass. Values are rounded to
// the projector precision T after each double-accumulated matvec.
template <typename T>
struct Trace {
  std::vector<std::vector<T>> inputs;  // input of each layer
  std::vector<std::vector<T>> pre;     // pre-activation of each layer
  std::vector<double> out;             // normalized output
  double out_norm = 0.0;
};

template <typename T, typename In>
Trace<T> run_forward(const BasicProjector<T>& p, std::span<const In> x) {
  if (x.size() != p.input_dim()) {
    throw Error(ErrorCode::DimMismatch, "feature dim " + std::to_string(x.size()) + " vs projector input " +
                                            std::to_string(p.input_dim()));
  }
  Trace<T> t;
  std::vector<T> h(x.begin(), x.end());
  const std::size_t L = p.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in = p.layer_dims()[l];
    const std::size_t out = p.layer_dims()[l + 1];
    const auto W = p.weights(l);
    const auto b = p.bias(l);
    std::vector<T> z(out);
    for (std::size_t o = 0; o < out; ++o) {
      double acc = static_cast<double>(b[o]);
      const T* row = W.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * static_cast<double>(h[i]);
      z[o] = static_cast<T>(acc);
    }
    t.inputs.push_back(std::move(h));
    if (l + 1 < L) {
      h.resize(out);
      for (std::size_t o = 0; o < out; ++o) h[o] = static_cast<T>(act(p.activation(), static_cast<double>(z[o])));
    }
    t.pre.push_back(std::move(z));
  }
  const auto& z = t.pre.back();
  double sq = 0.0;
  for (auto v : z) sq += static_cast<double>(v) * static_cast<double>(v);
  t.out_norm = std::sqrt(sq);
  if (!(t.out_norm > 1e-12)) throw Error(ErrorCode::ZeroVector, "projector output collapsed to zero");
  t.out.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) t.out[i] = static_cast<double>(z[i]) / t.out_norm;
  return t;
}

// Accumulates d(loss)/d(params) for one sample given d(loss)/d(output).
template <typename T>
void run_backward(const BasicProjector<T>& p, const Trace<T>& t, std::span<const double> d_out,
                  std::span<double> grad) {
  const std::size_t L = p.num_layers();
  double y_dot = 0.0;
  for (std::size_t i = 0; i < d_out.size(); ++i) y_dot += t.out[i] * d_out[i];
  std::vector<double> dz(d_out.size());
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = (d_out[i] - t.out[i] * y_dot) / t.out_norm;

  std::size_t offset = grad.size();
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t in = p.layer_dims()[l];
    const std::size_t out = p.layer_dims()[l + 1];
    offset -= in * out + out;
    double* gW = grad.data() + offset;
    double* gb = gW + in * out;
    const auto& h = t.inputs[l];
    for (std::size_t o = 0; o < out; ++o) {
      const double d = dz[o];
      if (d == 0.0) continue;
      gb[o] += d;
      double* row = gW + o * in;
      for (std::size_t i = 0; i < in; ++i) row[i] += d * static_cast<double>(h[i]);
    }
    if (l == 0) break;
    const auto W = p.weights(l);
    const auto& z_prev = t.pre[l - 1];
    std::vector<double> dh(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double d = dz[o];
      if (d == 0.0) continue;
      const T* row = W.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dh[i] += static_cast<double>(row[i]) * d;
    }
    dz.assign(in, 0.0);
    for (std::size_t i = 0; i < in; ++i) dz[i] = dh[i] * act_grad(p.activation(), static_cast<double>(z_prev[i]));
  }
}

void check_loss_args(std::size_t audio, std::size_t image, double temperature) {
  if (audio != image || audio == 0) {
    throw Error(ErrorCode::BatchMismatch,
                "audio batch " + std::to_string(audio) + " vs image batch " + std::to_string(image));
  }
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::BadTemperature, "temperature must be positive, got " + std::to_string(temperature));
  }
}

}  // namespace

std::vector<Vector> forward(const Projector& p, std::span<const Vector> features) {
  std::vector<Vector> out;
  out.reserve(features.size());
  for (const auto& f : features) {
    const auto t = run_forward<float, float>(p, f);
    out.emplace_back(t.out.begin(), t.out.end());
  }
  return out;
}

EmbeddingStore project_all(const Projector& p, const EmbeddingStore& audio_features, std::size_t threads) {
  if (audio_features.dim() != p.input_dim()) {
    throw Error(ErrorCode::DimMismatch, "audio feature dim " + std::to_string(audio_features.dim()) +
                                            " vs projector input " + std::to_string(p.input_dim()));
  }
  std::vector<Vector> projected(audio_features.size());
  parallel_for(audio_features.size(), threads, [&](std::size_t r) {
    const auto t = run_forward<float, float>(p, audio_features.vector(r));
    projected[r].assign(t.out.begin(), t.out.end());
  });
  StoreBuilder b(p.output_dim());
  for (std::size_t r = 0; r < audio_features.size(); ++r) b.add_normalized(audio_features.meta(r), projected[r]);
  return std::move(b).build();
}

// --- loss -------------------------------------------------------------------

LossAndGrad info_nce_with_grad(std::span<const std::vector<double>> audio, std::span<const Vector> image,
                               double temperature, bool symmetric) {
  check_loss_args(audio.size(), image.size(), temperature);
  const std::size_t B = audio.size();
  const std::size_t D = image.front().size();
  std::vector<double> logits(B * B);
  for (std::size_t i = 0; i < B; ++i) {
    if (audio[i].size() != D || image[i].size() != D) throw Error(ErrorCode::DimMismatch, "embedding dims differ");
    for (std::size_t j = 0; j < B; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += audio[i][d] * static_cast<double>(image[j][d]);
      logits[i * B + j] = s / temperature;
    }
  }
  // Max-subtracted log-sum-exp per row (audio->image) and column (image->audio).
  std::vector<double> row_lse(B), col_lse(B);
  for (std::size_t i = 0; i < B; ++i) {
    double m = logits[i * B];
    for (std::size_t j = 1; j < B; ++j) m = std::max(m, logits[i * B + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < B; ++j) s += std::exp(logits[i * B + j] - m);
    row_lse[i] = m + std::log(s);
  }
  for (std::size_t j = 0; j < B; ++j) {
    double m = logits[j];
    for (std::size_t i = 1; i < B; ++i) m = std::max(m, logits[i * B + j]);
    double s = 0.0;
    for (std::size_t i = 0; i < B; ++i) s += std::exp(logits[i * B + j] - m);
    col_lse[j] = m + std::log(s);
  }
  double row_loss = 0.0, col_loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    row_loss += row_lse[i] - logits[i * B + i];
    col_loss += col_lse[i] - logits[i * B + i];
  }
  const double n = static_cast<double>(B);
  row_loss /= n;
  col_loss /= n;
  const double w_row = symmetric ? 0.5 : 1.0;
  const double w_col = symmetric ? 0.5 : 0.0;

  LossAndGrad out;
  out.loss = w_row * row_loss + w_col * col_loss;
  out.grad_audio.assign(B, std::vector<double>(D, 0.0));
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      const double delta = i == j ? 1.0 : 0.0;
      const double p_row = std::exp(logits[i * B + j] - row_lse[i]);
      const double p_col = std::exp(logits[i * B + j] - col_lse[j]);
      const double dS = (w_row * (p_row - delta) + w_col * (p_col - delta)) / (n * temperature);
      if (dS == 0.0) continue;
      for (std::size_t d = 0; d < D; ++d) out.grad_audio[i][d] += dS * static_cast<double>(image[j][d]);
    }
  }
  return out;
}

double info_nce(std::span<const Vector> audio, std::span<const Vector> image, double temperature, bool symmetric) {
  check_loss_args(audio.size(), image.size(), temperature);
  std::vector<std::vector<double>> a;
  a.reserve(audio.size());
  for (const auto& v : audio) a.emplace_back(v.begin(), v.end());
  return info_nce_with_grad(a, image, temperature, symmetric).loss;
}

template <typename T>
double loss_and_param_grad(const BasicProjector<T>& p, std::span<const Vector> features,
                           std::span<const Vector> images, double temperature, bool symmetric,
                           std::vector<double>& grad, std::size_t threads) {
  check_loss_args(features.size(), images.size(), temperature);
  const std::size_t B = features.size();
  const std::size_t chunks = std::max<std::size_t>(1, std::min(threads, B));
  const std::size_t per = (B + chunks - 1) / chunks;

  std::vector<Trace<T>> traces(B);
  parallel_for(chunks, chunks, [&](std::size_t c) {
    for (std::size_t i = c * per; i < std::min(B, (c + 1) * per); ++i) {
      traces[i] = run_forward<T, float>(p, features[i]);
    }
  });
  std::vector<std::vector<double>> outs;
  outs.reserve(B);
  for (const auto& t : traces) outs.push_back(t.out);
  const auto lg = info_nce_with_grad(outs, images, temperature, symmetric);

  std::vector<std::vector<double>> partial(chunks, std::vector<double>(p.params().size(), 0.0));
  parallel_for(chunks, chunks, [&](std::size_t c) {
    for (std::size_t i = c * per; i < std::min(B, (c + 1) * per); ++i) {
      run_backward(p, traces[i], lg.grad_audio[i], partial[c]);
    }
  });
  grad.assign(p.params().size(), 0.0);
  for (const auto& part : partial) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += part[i];
  }
  return lg.loss;
}

template double loss_and_param_grad<float>(const BasicProjector<float>&, std::span<const Vector>,
                                           std::span<const Vector>, double, bool, std::vector<double>&,
                                           std::size_t);
template double loss_and_param_grad<double>(const BasicProjector<double>&, std::span<const Vector>,
                                            std::span<const Vector>, double, bool, std::vector<double>&,
                                            std::size_t);

double grad_check(const Projector& p, std::span<const Vector> features, std::span<const Vector> images,
                  double temperature, double epsilon, bool symmetric, std::size_t samples, std::uint64_t seed) {
  BasicProjector<double> q = p.cast<double>();
  std::vector<double> analytic;
  loss_and_param_grad(q, features, images, temperature, symmetric, analytic);

  std::vector<std::size_t> idx(q.params().size());
  std::iota(idx.begin(), idx.end(), 0);
  if (samples != 0 && samples < idx.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(samples);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<double> scratch;
  double worst = 0.0;
  for (auto i : idx) {
    const double saved = q.params()[i];
    q.params()[i] = saved + epsilon;
    const double up = loss_and_param_grad(q, features, images, temperature, symmetric, scratch);
    q.params()[i] = saved - epsilon;
    const double down = loss_and_param_grad(q, features, images, temperature, symmetric, scratch);
    q.params()[i] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]) + std::abs(numeric), 1e-6);
    worst = std::max(worst, err);
  }
  return worst;
}

// --- training ---------------------------------------------------------------

namespace {

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size < 2 || cfg.max_epochs == 0 || !(cfg.learning_rate > 0)) {
    throw Error(ErrorCode::BadConfig, "batch_size >= 2, max_epochs >= 1 and learning_rate > 0 are required");
  }
  if (!(cfg.temperature > 0)) throw Error(ErrorCode::BadTemperature, "temperature must be positive");
  if (cfg.eval_k == 0) throw Error(ErrorCode::BadConfig, "eval_k must be at least 1");
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg) {
  try {
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.symmetric_loss = j.value("symmetric_loss", cfg.symmetric_loss);
    if (j.contains("optimizer")) cfg.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_epsilon = j.value("adam_epsilon", cfg.adam_epsilon);
    cfg.hidden_dims = j.value("hidden_dims", cfg.hidden_dims);
    if (j.contains("activation")) cfg.activation = parse_activation(j.at("activation").get<std::string>());
    cfg.eval_k = j.value("eval_k", cfg.eval_k);
    cfg.threads = j.value("threads", cfg.threads);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed training config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"max_epochs", cfg.max_epochs},
          {"temperature", cfg.temperature},
          {"seed", cfg.seed},
          {"symmetric_loss", cfg.symmetric_loss},
          {"optimizer", cfg.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
          {"adam_beta1", cfg.adam_beta1},
          {"adam_beta2", cfg.adam_beta2},
          {"adam_epsilon", cfg.adam_epsilon},
          {"hidden_dims", cfg.hidden_dims},
          {"activation", to_string(cfg.activation)},
          {"eval_k", cfg.eval_k},
          {"threads", cfg.threads}};
}

nlohmann::json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch}, {"train_loss", log.train_loss}, {"val_p10", log.val_p10}};
}

namespace {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<float> params, std::span<const double> grad) {
    ++t_;
    const double lr = cfg_.learning_rate;
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] = static_cast<float>(static_cast<double>(params[i]) - lr * grad[i]);
      }
      return;
    }
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      const double update = lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.adam_epsilon);
      params[i] = static_cast<float>(static_cast<double>(params[i]) - update);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace

FitResult fit(std::span<const CuratedPair> train_pairs, std::span<const CuratedPair> val_pairs,
              const EmbeddingStore& audio_features, const EmbeddingStore& frames, const TrainConfig& cfg,
              const Projector* init, const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_pairs.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training pairs");
  if (val_pairs.empty()) throw Error(ErrorCode::EmptyTestSet, "no validation pairs for model selection");
  validate(cfg);
  {
    std::set<std::pair<std::string_view, std::string_view>> train_keys;
    for (const auto& p : train_pairs) train_keys.emplace(p.audio_id, p.frame_id);
    for (const auto& p : val_pairs) {
      if (train_keys.contains({p.audio_id, p.frame_id})) {
        throw Error(ErrorCode::BadConfig, "validation pair (" + p.audio_id + ", " + p.frame_id + ") is also in training");
      }
    }
  }

  Projector model;
  if (init != nullptr) {
    model = *init;
  } else {
    std::vector<std::size_t> dims{audio_features.dim()};
    dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
    dims.push_back(frames.dim());
    model = Projector::random(std::move(dims), cfg.activation, cfg.seed);
  }
  if (model.input_dim() != audio_features.dim() || model.output_dim() != frames.dim()) {
    throw Error(ErrorCode::DimMismatch, "projector " + std::to_string(model.input_dim()) + "->" +
                                            std::to_string(model.output_dim()) + " does not map audio dim " +
                                            std::to_string(audio_features.dim()) + " to frame dim " +
                                            std::to_string(frames.dim()));
  }

  // Resolve rows once; the training set is referenced by row from here on.
  struct Row {
    std::size_t audio, frame;
  };
  std::vector<Row> rows;
  rows.reserve(train_pairs.size());
  for (const auto& p : train_pairs) rows.push_back({audio_features.row_of(p.audio_id), frames.row_of(p.frame_id)});

  std::set<std::string> val_ids;
  for (const auto& p : val_pairs) val_ids.insert(p.audio_id);
  const EmbeddingStore val_audio = audio_features.subset([&](const ItemMeta& m) { return val_ids.contains(m.id); });
  const CategoryMap val_categories = categories_of(val_audio);

  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
  Optimizer opt(cfg, model.params().size());
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad;
  std::vector<Vector> feats, imgs;

  FitResult result;
  result.best.epoch = 0;
  result.best.val_category_p10 = -1.0;
  result.best.seed = cfg.seed;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;  // a single-pair batch has no negatives
      feats.clear();
      imgs.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto a = audio_features.vector(rows[order[i]].audio);
        const auto f = frames.vector(rows[order[i]].frame);
        feats.emplace_back(a.begin(), a.end());
        imgs.emplace_back(f.begin(), f.end());
      }
      loss_sum += loss_and_param_grad(model, feats, imgs, cfg.temperature, cfg.symmetric_loss, grad, cfg.threads);
      opt.step(model.params(), grad);
      ++batches;
    }

    const EmbeddingStore projected = project_all(model, val_audio, cfg.threads);
    const auto report = evaluate(projected, val_pairs, frames, val_categories,
                                 EvalOptions{"val", cfg.eval_k, cfg.threads});
    EpochLog log{epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, report.category_p_at_k};
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_p10 > result.best.val_category_p10) {
      result.best.epoch = epoch;
      result.best.projector = model;
      result.best.val_category_p10 = log.val_p10;
    }
  }
  return result;
}

// --- checkpoint files -------------------------------------------------------

namespace {
constexpr const char* kCheckpointFormat = "avsfx-projector";
constexpr int kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& p = ckpt.projector;
  nlohmann::json header{{"format", kCheckpointFormat},
                        {"version", kCheckpointVersion},
                        {"layer_dims", p.layer_dims()},
                        {"activation", to_string(p.activation())},
                        {"epoch", ckpt.epoch},
                        {"val_category_p10", ckpt.val_category_p10},
                        {"seed", ckpt.seed},
                        {"param_count", p.params().size()}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(p.params().data()),
            static_cast<std::streamsize>(p.params().size() * sizeof(float)));
  out.flush();
  if (!out) throw Error(ErrorCode::IoFailure, "write error on " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto nl = bytes.find('\n');
  if (bytes.empty() || bytes.front() != '{' || nl == std::string::npos) {
    throw Error(ErrorCode::BadMagic, path.string() + " is not a projector checkpoint");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::parse_error&) {
    throw Error(ErrorCode::BadMagic, path.string() + " has a corrupt checkpoint header");
  }
  if (!header.is_object() || header.value("format", std::string()) != kCheckpointFormat) {
    throw Error(ErrorCode::BadMagic, path.string() + " is not a projector checkpoint");
  }
  if (header.value("version", -1) != kCheckpointVersion) {
    throw Error(ErrorCode::VersionUnsupported, "checkpoint version " + header.value("version", nlohmann::json()).dump());
  }
  Checkpoint ckpt;
  try {
    ckpt.projector = Projector(header.at("layer_dims").get<std::vector<std::size_t>>(),
                               parse_activation(header.at("activation").get<std::string>()));
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.val_category_p10 = header.at("val_category_p10").get<double>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMagic, std::string("checkpoint header is missing fields: ") + e.what());
  }
  const std::size_t want = ckpt.projector.params().size() * sizeof(float);
  const std::size_t have = bytes.size() - nl - 1;
  if (have < want) {
    throw Error(ErrorCode::TruncatedFile, "checkpoint payload has " + std::to_string(have) + " of " +
                                              std::to_string(want) + " bytes");
  }
  if (have > want) throw Error(ErrorCode::DimMismatch, "checkpoint payload is larger than its layer_dims");
  std::memcpy(ckpt.projector.params().data(), bytes.data() + nl + 1, want);
  return ckpt;
}

}  // namespace avsfx
