#include "avsfx/service.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <httplib.h>

#include "avsfx/error.hpp"
#include "avsfx/similarity.hpp"

namespace avsfx {
namespace {

std::filesystem::path resolve(const nlohmann::json& j, const char* key, const std::filesystem::path& base) {
  if (!j.contains(key) || j.at(key).is_null()) return {};
  std::filesystem::path p = j.at(key).get<std::string>();
  if (p.is_relative() && !base.empty()) p = base / p;
  return p;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownId:
    case ErrorCode::UnknownSession:
    case ErrorCode::UnknownComparison:
      return 404;
    case ErrorCode::DuplicateVote:
    case ErrorCode::PoolTooSmall:
    case ErrorCode::DuplicateId:
      return 409;
    case ErrorCode::BadArgs:
      return 400;
    default:
      return 500;
  }
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", message}, {"code", code}}.dump(), "application/json");
}

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string content_type(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".webp") return "image/webp";
  if (ext == ".wav") return "audio/wav";
  if (ext == ".mp3") return "audio/mpeg";
  if (ext == ".flac") return "audio/flac";
  if (ext == ".ogg") return "audio/ogg";
  return "application/octet-stream";
}

bool safe_id(std::string_view id) {
  return !id.empty() && id.find("..") == std::string_view::npos && id.find('/') == std::string_view::npos &&
         id.find('\\') == std::string_view::npos && id.find('\0') == std::string_view::npos;
}

}  // namespace

ServiceConfig service_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  ServiceConfig cfg;
  try {
    cfg.host = j.value("host", cfg.host);
    cfg.port = j.value("port", cfg.port);
    cfg.threads = j.value("threads", cfg.threads);
    cfg.frames_store = resolve(j, "frames_store", base_dir);
    cfg.audio_store = resolve(j, "audio_store", base_dir);
    cfg.media_root = resolve(j, "media_root", base_dir);
    cfg.media_manifest = resolve(j, "media_manifest", base_dir);
    cfg.study_config = resolve(j, "study_config", base_dir);
    cfg.vote_log = resolve(j, "vote_log", base_dir);
    cfg.session_log = resolve(j, "session_log", base_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed service config: ") + e.what());
  }
  return cfg;
}

nlohmann::json retrieve_json(const EmbeddingStore& frames, const EmbeddingStore& audio, const std::string& frame_id,
                             std::size_t k, std::size_t threads) {
  if (k < 1 || k > kMaxRetrieveK) throw Error(ErrorCode::BadArgs, "k must be in [1, 100]");
  const auto row = frames.find(frame_id);
  if (!row) throw Error(ErrorCode::UnknownId, "unknown frame '" + frame_id + "'");
  const auto ranked = top_k(audio, frames.vector(*row), k, {}, ScanOptions{threads});
  nlohmann::json results = nlohmann::json::array();
  for (const auto& e : ranked.entries) {
    results.push_back({{"audio_id", e.id}, {"score", e.score}, {"category", audio.meta(e.row).category}});
  }
  return {{"frame_id", frame_id}, {"k", k}, {"results", results}};
}

MediaManifest load_media_manifest(const std::filesystem::path& manifest, const std::filesystem::path& root) {
  MediaManifest m;
  if (manifest.empty()) return m;
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorCode::BadConfig, "missing media manifest " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::BadConfig, std::string("media manifest is not JSON: ") + e.what());
  }
  const auto canon_root = std::filesystem::weakly_canonical(root);
  auto load = [&](const char* key, std::map<std::string, std::filesystem::path>& out) {
    if (!j.contains(key)) return;
    for (const auto& [id, rel] : j.at(key).items()) {
      const auto full = std::filesystem::weakly_canonical(canon_root / rel.get<std::string>());
      const auto mismatch = std::mismatch(canon_root.begin(), canon_root.end(), full.begin(), full.end());
      if (mismatch.first != canon_root.end()) {
        throw Error(ErrorCode::BadConfig, "media entry '" + id + "' points outside the media root");
      }
      out[id] = full;
    }
  };
  load("frames", m.frames);
  load("audio", m.audio);
  return m;
}

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  auto must_exist = [](const std::filesystem::path& p, const char* what) {
    if (p.empty() || !std::filesystem::exists(p)) {
      throw Error(ErrorCode::BadConfig, std::string(what) + " not found: '" + p.string() + "'");
    }
  };
  must_exist(cfg_.frames_store, "frames store");
  must_exist(cfg_.audio_store, "audio store");
  if (!cfg_.media_manifest.empty()) must_exist(cfg_.media_root, "media root");
  if (cfg_.vote_log.empty() || cfg_.session_log.empty()) {
    throw Error(ErrorCode::BadConfig, "vote_log and session_log paths are required");
  }
  frames_ = load_store(cfg_.frames_store);
  audio_ = load_store(cfg_.audio_store);
  if (frames_.dim() != audio_.dim()) throw Error(ErrorCode::DimMismatch, "frame and audio stores differ in dim");
  media_ = load_media_manifest(cfg_.media_manifest, cfg_.media_root);
  if (!cfg_.study_config.empty()) {
    must_exist(cfg_.study_config, "study config");
    std::ifstream in(cfg_.study_config);
    study_cfg_ = study_config_from_json(nlohmann::json::parse(in, nullptr, true, true),
                                        cfg_.study_config.parent_path());
    const auto candidates = read_candidates(study_cfg_->candidates);
    std::vector<StudyCandidate> a, b;
    for (const auto& c : candidates) (c.dataset == StudyDataset::A ? a : b).push_back(c);
    pool_ = build_pool(a, b, study_cfg_->per_dataset, study_cfg_->seed);
  }
  ledger_ = std::make_unique<StudyLedger>(cfg_.session_log, cfg_.vote_log);
  server_ = std::make_unique<httplib::Server>();
  install_routes();
}

Service::~Service() { stop(); }

nlohmann::json Service::health() const {
  return {{"status", "ok"},
          {"versions", {{"api", "v1"}, {"store_format", kStoreVersion}, {"checkpoint_format", 1}}},
          {"store_sizes", {{"frames", frames_.size()}, {"audio", audio_.size()}}},
          {"study",
           {{"pool", pool_.items.size()},
            {"sessions", ledger_->session_count()},
            {"votes", ledger_->votes().size()}}}};
}

nlohmann::json Service::retrieve(const std::string& frame_id, std::size_t k) const {
  return retrieve_json(frames_, audio_, frame_id, k, cfg_.threads);
}

nlohmann::json Service::create_session(const std::string& rater_id) {
  if (!study_cfg_) throw Error(ErrorCode::PoolTooSmall, "no study pool configured");
  std::lock_guard lock(session_mu_);
  // The registry size enters the seed so repeat raters get fresh sessions.
  const std::uint64_t seed = study_cfg_->seed * 1000003ULL + ledger_->session_count();
  const StudySession s = make_session(pool_, rater_id, seed, study_cfg_->session_size);
  ledger_->add_session(s);

  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : s.items) {
    items.push_back({{"comparison_id", it.comparison_id},
                     {"frame_id", it.frame_id},
                     {"frame_url", "/v1/media/frame/" + it.frame_id},
                     {"left", {{"audio_url", "/v1/media/audio/" + it.left_audio()}}},
                     {"right", {{"audio_url", "/v1/media/audio/" + it.right_audio()}}}});
  }
  return {{"session_id", s.session_id},
          {"rater_id", s.rater_id},
          {"created_at", s.created_at},
          {"prompt", "Which video has a sound that better matches the image?"},
          {"items", items}};
}

void Service::vote(const std::string& session_id, const std::string& comparison_id, Side side) {
  Vote v;
  v.session_id = session_id;
  v.comparison_id = comparison_id;
  v.side = side;
  ledger_->record_vote(v);
}

nlohmann::json Service::results() const { return to_json(ledger_->result()); }

void Service::install_routes() {
  auto& srv = *server_;

  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const Error& e) {
      send_error(res, http_status(e.code()), to_string(e.code()), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "Internal", e.what());
    }
  });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) send_error(res, 404, "NotFound", "no such route");
  });

  srv.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) { send_json(res, health()); });

  srv.Get("/v1/retrieve", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.has_param("frame_id")) return send_error(res, 400, "BadRequest", "frame_id is required");
    const std::string frame_id = req.get_param_value("frame_id");
    long long k = static_cast<long long>(kDefaultRetrieveK);
    if (req.has_param("k")) {
      try {
        std::size_t used = 0;
        const std::string raw = req.get_param_value("k");
        k = std::stoll(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
      } catch (const std::exception&) {
        return send_error(res, 400, "BadK", "k must be an integer in [1, 100]");
      }
    }
    if (k < 1 || k > static_cast<long long>(kMaxRetrieveK)) {
      return send_error(res, 400, "BadK", "k must be an integer in [1, 100]");
    }
    if (!frames_.contains(frame_id)) return send_error(res, 404, "UnknownFrame", "unknown frame '" + frame_id + "'");
    send_json(res, retrieve(frame_id, static_cast<std::size_t>(k)));
  });

  srv.Post("/v1/study/session", [this](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("rater_id") || !body["rater_id"].is_string()) {
      return send_error(res, 400, "BadRequest", "body must be {\"rater_id\": string}");
    }
    send_json(res, create_session(body["rater_id"].get<std::string>()), 201);
  });

  srv.Post("/v1/study/vote", [this](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    const bool ok = !body.is_discarded() && body.is_object() && body.contains("session_id") &&
                    body["session_id"].is_string() && body.contains("comparison_id") &&
                    body["comparison_id"].is_string() && body.contains("choice") && body["choice"].is_string();
    if (!ok) return send_error(res, 400, "BadRequest", "body must be {session_id, comparison_id, choice}");
    const std::string choice = body["choice"].get<std::string>();
    if (choice != "left" && choice != "right") {
      return send_error(res, 400, "BadChoice", "choice must be \"left\" or \"right\"");
    }
    vote(body["session_id"].get<std::string>(), body["comparison_id"].get<std::string>(), parse_side(choice));
    res.status = 204;
  });

  srv.Get("/v1/study/results", [this](const httplib::Request&, httplib::Response& res) { send_json(res, results()); });

  srv.Get(R"(/v1/media/(frame|audio)/(.*))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string kind = req.matches[1];
    const std::string id = req.matches[2];
    if (!safe_id(id)) return send_error(res, 400, "BadMediaId", "media ids may not contain path separators");
    const auto& table = kind == "frame" ? media_.frames : media_.audio;
    auto it = table.find(id);
    if (it == table.end()) return send_error(res, 404, "UnknownMedia", "no " + kind + " media for '" + id + "'");
    std::ifstream in(it->second, std::ios::binary);
    if (!in) return send_error(res, 404, "UnknownMedia", "media file missing for '" + id + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    res.set_content(std::move(bytes), content_type(it->second));
  });
}

int Service::bind() {
  if (cfg_.port == 0) return server_->bind_to_any_port(cfg_.host);
  if (!server_->bind_to_port(cfg_.host, cfg_.port)) {
    throw Error(ErrorCode::IoFailure, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  }
  return cfg_.port;
}

void Service::serve() { server_->listen_after_bind(); }

void Service::stop() {
  if (server_) server_->stop();
}

}  // namespace avsfx
