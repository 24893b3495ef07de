// avsfx: command-line driver for the curation, training and evaluation stages.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <pthread.h>
#include <sstream>
#include <thread>

#include "avsfx/curation.hpp"
#include "avsfx/embedding.hpp"
#include "avsfx/error.hpp"
#include "avsfx/retrieval_eval.hpp"
#include "avsfx/service.hpp"
#include "avsfx/similarity.hpp"
#include "avsfx/study.hpp"
#include "avsfx/synth.hpp"
#include "avsfx/text_backend.hpp"
#include "avsfx/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace avsfx;

namespace {

/// Bad flag combinations; reported like parse errors (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string log_level = "info";

  json config = json::object();
  fs::path config_dir;

  void load() {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open config " + config_path);
    config = json::parse(in, nullptr, false, true);
    if (config.is_discarded() || !config.is_object()) {
      throw Error(ErrorCode::BadConfig, "config " + config_path + " is not a JSON object");
    }
    config_dir = fs::absolute(config_path).parent_path();
  }

  json section(const char* name) const {
    if (config.contains(name) && config.at(name).is_object()) return config.at(name);
    return json::object();
  }

  /// Flag, then the section's value, then the top-level value, then `fallback`.
  std::uint64_t seed_for(const char* sec, std::uint64_t fallback = 0) const {
    if (seed) return *seed;
    const json s = section(sec);
    if (s.contains("seed")) return s.at("seed").get<std::uint64_t>();
    return config.value("seed", fallback);
  }

  std::size_t thread_count() const {
    if (threads) return *threads;
    return config.value("threads", std::size_t{1});
  }

  /// Paths in the config file are relative to the file.
  fs::path path_in(const json& sec, const char* key) const {
    if (!sec.contains(key)) return {};
    fs::path p = sec.at(key).get<std::string>();
    return p.is_relative() ? config_dir / p : p;
  }
};

template <typename T>
T pick(const std::optional<T>& flag, const json& sec, const char* key, T fallback) {
  if (flag) return *flag;
  if (sec.contains(key)) return sec.at(key).get<T>();
  return fallback;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.parent_path().string().size()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    spdlog::info("wrote {}", out_path);
  }
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

// --- synth ------------------------------------------------------------------

struct SynthOpts {
  std::string out_dir;
  std::optional<std::size_t> n_audio, n_frames, dim, audio_dim, categories, frames_per_video;
  std::optional<double> spread;
};

int run_synth(const Globals& g, const SynthOpts& o) {
  require(o.out_dir, "--out-dir");
  const json sec = g.section("synth");
  SynthCorpusConfig cfg;
  cfg.seed = g.seed_for("synth", cfg.seed);
  cfg.n_audio = pick(o.n_audio, sec, "n_audio", cfg.n_audio);
  cfg.n_frames = pick(o.n_frames, sec, "n_frames", cfg.n_frames);
  cfg.embedding_dim = pick(o.dim, sec, "embedding_dim", cfg.embedding_dim);
  cfg.audio_feature_dim = pick(o.audio_dim, sec, "audio_feature_dim", cfg.audio_feature_dim);
  cfg.n_categories = pick(o.categories, sec, "n_categories", cfg.n_categories);
  cfg.frames_per_video = pick(o.frames_per_video, sec, "frames_per_video", cfg.frames_per_video);
  cfg.cluster_spread = pick(o.spread, sec, "cluster_spread", cfg.cluster_spread);
  const auto corpus = synth_corpus(cfg);
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  save_store(corpus.audio, dir / "audio_features.avce");
  save_store(corpus.text, dir / "text.avce");
  save_store(corpus.frames, dir / "frames.avce");
  std::cout << "audio_features " << corpus.audio.size() << " x " << corpus.audio.dim() << "\n"
            << "text           " << corpus.text.size() << " x " << corpus.text.dim() << "\n"
            << "frames         " << corpus.frames.size() << " x " << corpus.frames.dim() << "\n";
  return 0;
}

// --- ingest -----------------------------------------------------------------

struct IngestOpts {
  std::string input, out, kind;
  std::vector<std::string> exclude_categories, exclude_tags;
};

int run_ingest(const Globals& g, const IngestOpts& o) {
  require(o.input, "--input");
  require(o.out, "--out");
  const json sec = g.section("filter");
  FilterSpec filter;
  for (const auto& c : sec.value("excluded_categories", std::vector<std::string>{})) filter.excluded_categories.insert(c);
  for (const auto& t : sec.value("excluded_tag_terms", std::vector<std::string>{})) filter.excluded_tag_terms.insert(t);
  filter.excluded_categories.insert(o.exclude_categories.begin(), o.exclude_categories.end());
  filter.excluded_tag_terms.insert(o.exclude_tags.begin(), o.exclude_tags.end());

  std::ifstream in(o.input);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + o.input);
  std::optional<StoreBuilder> builder;
  std::size_t line_no = 0, dropped = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("vector") || !j.at("vector").is_array()) {
      throw Error(ErrorCode::BadMetadata, o.input + ":" + std::to_string(line_no) + ": expected {id, vector, ...}");
    }
    const Vector v = j.at("vector").get<Vector>();
    j.erase("vector");
    if (!j.contains("kind")) {
      if (o.kind.empty()) throw UsageError("records carry no kind; pass --kind");
      j["kind"] = o.kind;
    }
    ItemMeta meta = meta_from_json(j);
    if (is_excluded(meta, filter)) {
      ++dropped;
      continue;
    }
    if (!builder) builder.emplace(v.size());
    builder->add(std::move(meta), v);
  }
  if (!builder) throw Error(ErrorCode::EmptyInput, "no records kept from " + o.input);
  const auto store = std::move(*builder).build();
  save_store(store, o.out);
  std::cout << "ingested " << store.size() << " items (dim " << store.dim() << "), filtered out " << dropped << "\n";
  return 0;
}

// --- prompt / sentence -------------------------------------------------------

PromptSpec default_prompt_spec() {
  PromptSpec s;
  s.instruction = "Rewrite sound effect tags as one short sentence describing what a camera would see.";
  s.exemplars = {{{"door", "slam", "wood", "interior"}, "A wooden door slams shut in a hallway."},
                 {{"glass", "break", "bottle", "close up"}, "A glass bottle shatters on a concrete floor."},
                 {{"car", "pass by", "left to right", "fast"}, "A car drives quickly down a street."}};
  return s;
}

PromptSpec load_prompt_spec(const Globals& g, const std::string& file) {
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + file);
    return prompt_spec_from_json(json::parse(in, nullptr, true, true));
  }
  const json sec = g.section("prompt");
  if (sec.contains("exemplars")) return prompt_spec_from_json(sec);
  PromptSpec s = default_prompt_spec();
  if (sec.contains("instruction")) s.instruction = sec.at("instruction").get<std::string>();
  return s;
}

struct PromptOpts {
  std::string tags, spec_file, out;
};

int run_prompt(const Globals& g, const PromptOpts& o) {
  require(o.tags, "--tags");
  PromptSpec spec = load_prompt_spec(g, o.spec_file);
  spec.query_tags = split_list(o.tags);
  emit(o.out, build_prompt(spec) + "\n");
  return 0;
}

struct SentenceOpts {
  std::string tags, input, out, spec_file, backend_url;
  bool template_only = false;
  bool fallback = false;
  std::optional<std::size_t> template_tags;
};

int run_sentence(const Globals& g, const SentenceOpts& o) {
  if (o.tags.empty() == o.input.empty()) throw UsageError("pass exactly one of --tags or --input");
  const json sec = g.section("backend");
  std::unique_ptr<TextBackend> backend;
  if (!o.template_only && (!o.backend_url.empty() || sec.contains("url"))) {
    HttpBackendConfig cfg = sec.contains("url") ? http_backend_from_json(sec) : HttpBackendConfig{};
    if (!o.backend_url.empty()) cfg.url = o.backend_url;
    backend = std::make_unique<HttpTextBackend>(cfg);
  }
  GenerationOptions gen;
  gen.fallback_to_template = o.fallback || sec.value("fallback_to_template", false);
  gen.template_tags = pick(o.template_tags, sec, "template_tags", kDefaultTemplateTags);
  const PromptSpec base = load_prompt_spec(g, o.spec_file);

  auto sentence_for = [&](const std::vector<std::string>& tags) {
    if (!backend) return template_sentence(tags, gen.template_tags);
    PromptSpec spec = base;
    spec.query_tags = tags;
    return generate_sentence(spec, *backend, gen);
  };

  if (!o.tags.empty()) {
    emit(o.out, sentence_for(split_list(o.tags)) + "\n");
    return 0;
  }
  std::ifstream in(o.input);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + o.input);
  std::string text;
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = json::parse(line);
    const auto tags = j.value("tags", std::vector<std::string>{});
    text += json{{"id", j.at("id")}, {"tags", tags}, {"sentence", sentence_for(tags)}}.dump() + "\n";
    ++n;
  }
  emit(o.out, text);
  spdlog::info("{} sentences ({})", n, backend ? "backend" : "template");
  return 0;
}

// --- match / pair / split -----------------------------------------------------

struct MatchOpts {
  std::string text, frames, out, query_id;
  std::size_t k = 10;
};

int run_match(const Globals& g, const MatchOpts& o) {
  require(o.text, "--text");
  require(o.frames, "--frames");
  const auto text = load_store(o.text);
  const auto frames = load_store(o.frames);
  std::vector<std::size_t> rows;
  if (!o.query_id.empty()) {
    rows.push_back(text.row_of(o.query_id));
  } else {
    for (std::size_t r = 0; r < text.size(); ++r) rows.push_back(r);
  }
  std::vector<Vector> queries;
  for (auto r : rows) queries.emplace_back(text.vector(r).begin(), text.vector(r).end());
  const auto ranked = batch_top_k(frames, queries, o.k, {}, {g.thread_count()});
  std::string out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json hits = json::array();
    for (const auto& e : ranked[i].entries) hits.push_back({{"frame_id", e.id}, {"score", e.score}});
    out += json{{"audio_id", text.id(rows[i])}, {"frames", hits}}.dump() + "\n";
  }
  emit(o.out, out);
  return 0;
}

PairingConfig pairing_config(const Globals& g, const std::string& n, const std::optional<std::size_t>& k,
                             const std::string& mode) {
  const json sec = g.section("pairing");
  PairingConfig cfg;
  if (!n.empty()) {
    cfg.frame_capacity = parse_pairing_limit(n);
  } else if (sec.contains("n")) {
    const auto& v = sec.at("n");
    cfg.frame_capacity = parse_pairing_limit(v.is_string() ? v.get<std::string>() : std::to_string(v.get<long long>()));
  }
  cfg.frames_per_audio = pick(k, sec, "k", cfg.frames_per_audio);
  if (!mode.empty()) {
    cfg.mode = parse_pairing_mode(mode);
  } else if (sec.contains("mode")) {
    cfg.mode = parse_pairing_mode(sec.at("mode").get<std::string>());
  }
  cfg.threads = g.thread_count();
  return cfg;
}

struct PairOpts {
  std::string text, frames, out, n, mode;
  std::optional<std::size_t> k;
};

int run_pair(const Globals& g, const PairOpts& o) {
  require(o.text, "--text");
  require(o.frames, "--frames");
  require(o.out, "--out");
  const auto cfg = pairing_config(g, o.n, o.k, o.mode);
  const auto pairs = make_pairs_by_split(load_store(o.text), load_store(o.frames), cfg);
  write_pairs(o.out, pairs);
  std::cout << "pairs " << pairs.size() << ", distinct frames " << distinct_frames(pairs) << " (N="
            << format_pairing_limit(cfg.frame_capacity) << ", k=" << cfg.frames_per_audio << ")\n";
  return 0;
}

struct SplitOpts {
  std::string audio, text, frames, out_dir;
  std::optional<std::size_t> val, test;
};

int run_split(const Globals& g, const SplitOpts& o) {
  require(o.audio, "--audio");
  require(o.frames, "--frames");
  require(o.out_dir, "--out-dir");
  const json sec = g.section("split");
  const std::size_t val = pick(o.val, sec, "val_count", std::size_t{0});
  const std::size_t test = pick(o.test, sec, "test_count", std::size_t{0});
  if (val == 0 || test == 0) throw UsageError("--val and --test must be positive");
  const auto audio = load_store(o.audio);
  const auto frames = load_store(o.frames);
  const auto assignment = make_splits(audio.metas(), frames.metas(), val, test, g.seed_for("split"));
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  save_store(apply_splits(audio, assignment), dir / fs::path(o.audio).filename());
  save_store(apply_splits(frames, assignment), dir / fs::path(o.frames).filename());
  if (!o.text.empty()) save_store(apply_splits(load_store(o.text), assignment), dir / fs::path(o.text).filename());

  json j{{"audio", json::object()}, {"video", json::object()}};
  std::map<Split, std::size_t> counts;
  for (const auto& [id, s] : assignment.audio) {
    j["audio"][id] = to_string(s);
    ++counts[s];
  }
  for (const auto& [id, s] : assignment.video) j["video"][id] = to_string(s);
  write_text(dir / "splits.json", j.dump(1) + "\n");
  std::cout << "train " << counts[Split::Train] << ", val " << counts[Split::Val] << ", test " << counts[Split::Test]
            << " audio; " << assignment.video.size() << " videos\n";
  return 0;
}

// --- train / project / eval / sweep -------------------------------------------

struct TrainFlags {
  std::optional<std::size_t> batch_size, epochs, eval_k;
  std::optional<double> lr, temperature;
  std::string optimizer, activation, hidden;
  bool one_sided = false;
};

TrainConfig train_config(const Globals& g, const TrainFlags& f) {
  json sec = g.section("train");
  if (f.batch_size) sec["batch_size"] = *f.batch_size;
  if (f.epochs) sec["max_epochs"] = *f.epochs;
  if (f.eval_k) sec["eval_k"] = *f.eval_k;
  if (f.lr) sec["learning_rate"] = *f.lr;
  if (f.temperature) sec["temperature"] = *f.temperature;
  if (!f.optimizer.empty()) sec["optimizer"] = f.optimizer;
  if (!f.activation.empty()) sec["activation"] = f.activation;
  if (!f.hidden.empty()) {
    std::vector<std::size_t> dims;
    if (f.hidden != "none") {
      for (const auto& d : split_list(f.hidden)) dims.push_back(std::stoul(d));
    }
    sec["hidden_dims"] = dims;
  }
  if (f.one_sided) sec["symmetric_loss"] = false;
  sec["seed"] = g.seed_for("train");
  sec["threads"] = g.thread_count();
  return train_config_from_json(sec);
}

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--batch-size", f.batch_size, "Batch size");
  cmd->add_option("--lr", f.lr, "Learning rate");
  cmd->add_option("--epochs", f.epochs, "Maximum epochs");
  cmd->add_option("--temperature", f.temperature, "Softmax temperature");
  cmd->add_option("--optimizer", f.optimizer, "adam or sgd");
  cmd->add_option("--activation", f.activation, "relu or gelu");
  cmd->add_option("--hidden", f.hidden, "Hidden widths, e.g. 512 or 256,256; 'none' for a linear map");
  cmd->add_option("--eval-k", f.eval_k, "k for validation P@k");
  cmd->add_flag("--one-sided", f.one_sided, "Audio-to-image loss only");
}

void split_pairs(const std::vector<CuratedPair>& pairs, std::vector<CuratedPair>& train, std::vector<CuratedPair>& val) {
  for (const auto& p : pairs) {
    if (!p.split) throw Error(ErrorCode::BadArgs, "pairs carry no split labels; pair split stores first");
    if (*p.split == Split::Train) train.push_back(p);
    if (*p.split == Split::Val) val.push_back(p);
  }
}

struct TrainOpts {
  std::string pairs, val_pairs, audio, frames, out, log, init;
  TrainFlags flags;
};

int run_train(const Globals& g, const TrainOpts& o) {
  require(o.pairs, "--pairs");
  require(o.audio, "--audio");
  require(o.frames, "--frames");
  require(o.out, "--out");
  const TrainConfig cfg = train_config(g, o.flags);
  std::vector<CuratedPair> train, val;
  if (o.val_pairs.empty()) {
    split_pairs(read_pairs(o.pairs), train, val);
  } else {
    train = read_pairs(o.pairs);
    val = read_pairs(o.val_pairs);
  }
  const auto audio = load_store(o.audio);
  const auto frames = load_store(o.frames);
  std::optional<Projector> init;
  if (!o.init.empty()) init = load_checkpoint(o.init).projector;

  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log);
    if (!log) throw Error(ErrorCode::IoFailure, "cannot write " + o.log);
  }
  spdlog::info("training on {} pairs, validating on {}", train.size(), val.size());
  const auto result = fit(train, val, audio, frames, cfg, init ? &*init : nullptr, [&](const EpochLog& e) {
    spdlog::debug("epoch {} loss {:.5f} val P@{} {:.4f}", e.epoch, e.train_loss, cfg.eval_k, e.val_p10);
    if (log.is_open()) log << to_json(e).dump() << '\n' << std::flush;
  });
  save_checkpoint(result.best, o.out);
  std::cout << "best epoch " << result.best.epoch << " of " << result.history.size() << ", val P@" << cfg.eval_k
            << " " << result.best.val_category_p10 << "\n";
  return 0;
}

struct ProjectOpts {
  std::string checkpoint, audio, out;
};

int run_project(const Globals& g, const ProjectOpts& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.audio, "--audio");
  require(o.out, "--out");
  const auto ck = load_checkpoint(o.checkpoint);
  const auto projected = project_all(ck.projector, load_store(o.audio), g.thread_count());
  save_store(projected, o.out);
  std::cout << "projected " << projected.size() << " items into dim " << projected.dim() << "\n";
  return 0;
}

std::vector<CuratedPair> pairs_in_split(const std::vector<CuratedPair>& pairs, const std::string& split) {
  if (split == "all") return pairs;
  const Split want = parse_split(split);
  std::vector<CuratedPair> out;
  for (const auto& p : pairs) {
    if (p.split == want) out.push_back(p);
  }
  return out;
}

struct EvalOpts {
  std::string audio, pairs, frames, out, name, split = "test";
  std::optional<std::size_t> k;
};

int run_eval(const Globals& g, const EvalOpts& o) {
  require(o.audio, "--audio");
  require(o.pairs, "--pairs");
  require(o.frames, "--frames");
  const json sec = g.section("eval");
  EvalOptions opts;
  opts.k = pick(o.k, sec, "k", kDefaultEvalK);
  opts.threads = g.thread_count();
  opts.dataset_name = o.name.empty() ? o.split : o.name;
  const auto all = read_pairs(o.pairs);
  bool labelled = false;
  for (const auto& p : all) labelled = labelled || p.split.has_value();
  const auto pairs = labelled ? pairs_in_split(all, o.split) : all;
  const auto audio = load_store(o.audio);
  const auto report = evaluate(audio, pairs, load_store(o.frames), opts);
  std::cout << format_table(std::vector<EvalReport>{report});
  std::cout << "random baseline P@" << opts.k << " " << random_baseline_p_at_k(pairs, categories_of(audio)) << "\n";
  if (!o.out.empty()) write_text(o.out, to_json(report).dump(2) + "\n");
  return 0;
}

struct SweepOpts {
  std::string text, audio, frames, out, limits = "1,2,5,10,100,inf", eval_limit = "1", mode;
  std::optional<std::size_t> k;
  TrainFlags flags;
};

int run_sweep(const Globals& g, const SweepOpts& o) {
  require(o.text, "--text");
  require(o.audio, "--audio");
  require(o.frames, "--frames");
  const auto text = load_store(o.text);
  const auto audio = load_store(o.audio);
  const auto frames = load_store(o.frames);
  const TrainConfig cfg = train_config(g, o.flags);
  std::vector<std::size_t> limits;
  for (const auto& l : split_list(o.limits)) limits.push_back(parse_pairing_limit(l));
  if (limits.empty()) throw UsageError("--limits is empty");

  auto in_split = [](Split s) { return [s](const ItemMeta& m) { return m.split == s; }; };
  PairingConfig eval_cfg = pairing_config(g, o.eval_limit, o.k, o.mode);
  auto fixed_pairs = [&](Split s) {
    auto pairs = make_pairs(text.subset(in_split(s)), frames.subset(in_split(s)), eval_cfg);
    for (auto& p : pairs) p.split = s;
    return pairs;
  };
  const auto val_pairs = fixed_pairs(Split::Val);
  const auto test_pairs = fixed_pairs(Split::Test);
  const auto train_text = text.subset(in_split(Split::Train));
  const auto train_frames = frames.subset(in_split(Split::Train));

  EvalOptions eo;
  eo.k = cfg.eval_k;
  eo.threads = g.thread_count();
  std::vector<SweepRow> rows;
  std::vector<EvalReport> reports;
  for (std::size_t n : limits) {
    PairingConfig pc = eval_cfg;
    pc.frame_capacity = n;
    const auto train_pairs = make_pairs(train_text, train_frames, pc);
    const auto result = fit(train_pairs, val_pairs, audio, frames, cfg);
    const auto projected = project_all(result.best.projector, audio, g.thread_count());
    eo.dataset_name = "N=" + format_pairing_limit(n) + " val";
    const auto val_report = evaluate(projected, val_pairs, frames, eo);
    eo.dataset_name = "N=" + format_pairing_limit(n) + " test";
    const auto test_report = evaluate(projected, test_pairs, frames, eo);
    spdlog::info("N={} : {} train pairs over {} frames, best epoch {}", format_pairing_limit(n), train_pairs.size(),
                 distinct_frames(train_pairs), result.best.epoch);
    rows.push_back({n, {val_report.category_p_at_k, test_report.category_p_at_k}});
    reports.push_back(val_report);
    reports.push_back(test_report);
  }
  std::cerr << format_table(reports);
  emit(o.out, format_sweep_csv({"val", "test"}, rows));
  return 0;
}

// --- retrieval, study, service ------------------------------------------------

struct RetrieveOpts {
  std::string frames, audio, frame_id;
  std::size_t k = kDefaultRetrieveK;
};

int run_retrieve(const Globals& g, const RetrieveOpts& o) {
  require(o.frames, "--frames");
  require(o.audio, "--audio");
  require(o.frame_id, "--frame-id");
  std::cout << retrieve_json(load_store(o.frames), load_store(o.audio), o.frame_id, o.k, g.thread_count()).dump(2)
            << "\n";
  return 0;
}

struct StudyPoolOpts {
  std::string frames, system1, system2, dataset, out;
  bool append = false;
};

int run_study_pool(const Globals& g, const StudyPoolOpts& o) {
  require(o.frames, "--frames");
  require(o.system1, "--system-1");
  require(o.system2, "--system-2");
  require(o.dataset, "--dataset");
  require(o.out, "--out");
  auto cands = study_candidates(load_store(o.frames), load_store(o.system1), load_store(o.system2),
                                parse_dataset(o.dataset), g.thread_count());
  if (o.append && fs::exists(o.out)) {
    auto existing = read_candidates(o.out);
    existing.insert(existing.end(), cands.begin(), cands.end());
    cands = std::move(existing);
  }
  write_candidates(o.out, cands);
  std::cout << "wrote " << cands.size() << " candidates to " << o.out << "\n";
  return 0;
}

struct StudyReportOpts {
  std::string votes, sessions, out;
  bool json_out = false;
};

int run_study_report(const Globals& g, const StudyReportOpts& o) {
  const json sec = g.section("service");
  const fs::path votes = o.votes.empty() ? g.path_in(sec, "vote_log") : fs::path(o.votes);
  const fs::path sessions = o.sessions.empty() ? g.path_in(sec, "session_log") : fs::path(o.sessions);
  if (votes.empty() || sessions.empty()) throw UsageError("--votes and --sessions are required");
  const auto result = aggregate(read_votes(votes), read_sessions(sessions));
  const std::string j = to_json(result).dump(2) + "\n";
  if (o.json_out) {
    std::cout << j;
  } else {
    std::cout << format_study_table(result);
  }
  if (!o.out.empty()) write_text(o.out, j);
  return 0;
}

struct ServeOpts {
  std::string host;
  std::optional<int> port;
};

int run_serve(const Globals& g, const ServeOpts& o) {
  if (!g.config.contains("service")) throw UsageError("serve needs a config file with a \"service\" section");
  ServiceConfig cfg = service_config_from_json(g.section("service"), g.config_dir);
  if (!o.host.empty()) cfg.host = o.host;
  if (o.port) cfg.port = *o.port;
  if (g.threads) cfg.threads = *g.threads;

  // SIGINT/SIGTERM are taken synchronously by a watcher thread.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Service service(cfg);
  const int port = service.bind();
  std::cout << "listening on http://" << cfg.host << ":" << port << std::endl;
  std::jthread watcher([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    spdlog::info("signal {}, shutting down", sig);
    service.stop();
  });
  service.serve();
  // Wake the watcher if the server stopped on its own.
  pthread_kill(watcher.native_handle(), SIGTERM);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_logger_mt("avsfx");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);

  CLI::App app{"Sound-effect retrieval for video frames: curation, training, evaluation and study tools"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config with per-stage sections");
  app.add_option("--seed", g.seed, "Seed for every randomized stage");
  app.add_option("--threads", g.threads, "Worker threads for scans and evaluation");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  std::function<int()> action;

  SynthOpts synth;
  auto* c = app.add_subcommand("synth", "Write a synthetic clustered corpus (audio features, text, frames)");
  c->add_option("--out-dir", synth.out_dir, "Output directory");
  c->add_option("--n-audio", synth.n_audio);
  c->add_option("--n-frames", synth.n_frames);
  c->add_option("--dim", synth.dim, "Joint text/image dimension");
  c->add_option("--audio-dim", synth.audio_dim, "Audio feature dimension");
  c->add_option("--categories", synth.categories);
  c->add_option("--frames-per-video", synth.frames_per_video);
  c->add_option("--spread", synth.spread, "Cluster spread");
  c->callback([&] { action = [&] { return run_synth(g, synth); }; });

  IngestOpts ingest;
  c = app.add_subcommand("ingest", "Build a store from JSON lines {id, vector, kind, tags, category, ...}");
  c->add_option("--input", ingest.input);
  c->add_option("--out", ingest.out);
  c->add_option("--kind", ingest.kind, "Default kind: audio, frame or text")
      ->check(CLI::IsMember({"audio", "frame", "text"}));
  c->add_option("--exclude-category", ingest.exclude_categories, "Drop items of this category (repeatable)");
  c->add_option("--exclude-tag", ingest.exclude_tags, "Drop items with a tag containing this term (repeatable)");
  c->callback([&] { action = [&] { return run_ingest(g, ingest); }; });

  PromptOpts prompt;
  c = app.add_subcommand("prompt", "Print the few-shot prompt for a tag list");
  c->add_option("--tags", prompt.tags, "Comma-separated tags");
  c->add_option("--prompt-spec", prompt.spec_file, "JSON {instruction, exemplars}");
  c->add_option("--out", prompt.out);
  c->callback([&] { action = [&] { return run_prompt(g, prompt); }; });

  SentenceOpts sentence;
  c = app.add_subcommand("sentence", "Turn tags into a sentence (backend if configured, else template)");
  c->add_option("--tags", sentence.tags, "Comma-separated tags");
  c->add_option("--input", sentence.input, "JSON lines with id and tags");
  c->add_option("--out", sentence.out);
  c->add_option("--prompt-spec", sentence.spec_file);
  c->add_option("--backend-url", sentence.backend_url);
  c->add_option("--template-tags", sentence.template_tags);
  c->add_flag("--template", sentence.template_only, "Never call a backend");
  c->add_flag("--fallback", sentence.fallback, "Use the template when the backend fails");
  c->callback([&] { action = [&] { return run_sentence(g, sentence); }; });

  MatchOpts match;
  c = app.add_subcommand("match", "Top-k frames for each sentence embedding");
  c->add_option("--text", match.text);
  c->add_option("--frames", match.frames);
  c->add_option("--k", match.k)->check(CLI::PositiveNumber);
  c->add_option("--query-id", match.query_id, "Only this audio id");
  c->add_option("--out", match.out);
  c->callback([&] { action = [&] { return run_match(g, match); }; });

  PairOpts pair;
  c = app.add_subcommand("pair", "Capacity-constrained pairing of sentences with frames, per split");
  c->add_option("--text", pair.text);
  c->add_option("--frames", pair.frames);
  c->add_option("--n", pair.n, "Pairing limit per frame (integer or inf)");
  c->add_option("--k", pair.k, "Frames per audio item")->check(CLI::PositiveNumber);
  c->add_option("--mode", pair.mode, "sequential_greedy or global_greedy");
  c->add_option("--out", pair.out);
  c->callback([&] { action = [&] { return run_pair(g, pair); }; });

  SplitOpts split;
  c = app.add_subcommand("split", "Disjoint train/val/test splits over audio and videos");
  c->add_option("--audio", split.audio);
  c->add_option("--text", split.text, "Sentence store keyed by audio id");
  c->add_option("--frames", split.frames);
  c->add_option("--val", split.val);
  c->add_option("--test", split.test);
  c->add_option("--out-dir", split.out_dir);
  c->callback([&] { action = [&] { return run_split(g, split); }; });

  TrainOpts train;
  c = app.add_subcommand("train", "Fit the projector, keeping the best validation epoch");
  c->add_option("--pairs", train.pairs, "Pairs with split labels");
  c->add_option("--val-pairs", train.val_pairs, "Separate validation pairs");
  c->add_option("--audio", train.audio, "Audio feature store");
  c->add_option("--frames", train.frames);
  c->add_option("--init", train.init, "Checkpoint to fine-tune from");
  c->add_option("--out", train.out, "Checkpoint path");
  c->add_option("--log", train.log, "JSON-lines epoch log");
  add_train_flags(c, train.flags);
  c->callback([&] { action = [&] { return run_train(g, train); }; });

  ProjectOpts project;
  c = app.add_subcommand("project", "Embed audio features with a checkpoint");
  c->add_option("--checkpoint", project.checkpoint);
  c->add_option("--audio", project.audio);
  c->add_option("--out", project.out);
  c->callback([&] { action = [&] { return run_project(g, project); }; });

  EvalOpts eval;
  c = app.add_subcommand("eval", "Exact and category retrieval metrics");
  c->add_option("--audio", eval.audio, "Projected audio store");
  c->add_option("--pairs", eval.pairs);
  c->add_option("--frames", eval.frames);
  c->add_option("--split", eval.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  c->add_option("--k", eval.k)->check(CLI::PositiveNumber);
  c->add_option("--name", eval.name, "Dataset name in the report");
  c->add_option("--out", eval.out, "JSON report");
  c->callback([&] { action = [&] { return run_eval(g, eval); }; });

  SweepOpts sweep;
  c = app.add_subcommand("sweep", "Pairing-limit ablation: val/test P@k per limit as CSV");
  c->add_option("--text", sweep.text);
  c->add_option("--audio", sweep.audio, "Audio feature store");
  c->add_option("--frames", sweep.frames);
  c->add_option("--limits", sweep.limits, "Comma-separated pairing limits");
  c->add_option("--eval-limit", sweep.eval_limit, "Pairing limit for the fixed val/test pairs");
  c->add_option("--k", sweep.k, "Frames per audio item")->check(CLI::PositiveNumber);
  c->add_option("--mode", sweep.mode);
  c->add_option("--out", sweep.out, "CSV path");
  add_train_flags(c, sweep.flags);
  c->callback([&] { action = [&] { return run_sweep(g, sweep); }; });

  RetrieveOpts retrieve;
  c = app.add_subcommand("retrieve", "Ranked audio for one frame, as JSON");
  c->add_option("--frames", retrieve.frames);
  c->add_option("--audio", retrieve.audio, "Projected audio store");
  c->add_option("--frame-id", retrieve.frame_id);
  c->add_option("--k", retrieve.k);
  c->callback([&] { action = [&] { return run_retrieve(g, retrieve); }; });

  StudyPoolOpts pool;
  c = app.add_subcommand("study-pool", "Write study candidates: top-1 audio of two systems per frame");
  c->add_option("--frames", pool.frames);
  c->add_option("--system-1", pool.system1, "Projected audio store of the first system");
  c->add_option("--system-2", pool.system2, "Projected audio store of the second system");
  c->add_option("--dataset", pool.dataset, "A or B")->check(CLI::IsMember({"A", "B"}));
  c->add_option("--out", pool.out);
  c->add_flag("--append", pool.append);
  c->callback([&] { action = [&] { return run_study_pool(g, pool); }; });

  StudyReportOpts report;
  c = app.add_subcommand("study-report", "Per-dataset preference rates and one-sided binomial tests");
  c->add_option("--votes", report.votes);
  c->add_option("--sessions", report.sessions);
  c->add_option("--out", report.out, "JSON result");
  c->add_flag("--json", report.json_out, "Print JSON instead of the table");
  c->callback([&] { action = [&] { return run_study_report(g, report); }; });

  ServeOpts serve;
  c = app.add_subcommand("serve", "Run the HTTP API");
  c->add_option("--host", serve.host);
  c->add_option("--port", serve.port);
  c->callback([&] { action = [&] { return run_serve(g, serve); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  spdlog::set_level(spdlog::level::from_str(g.log_level));
  try {
    g.load();
    return action();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for more information.\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
