#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "avsfx/embedding.hpp"
#include "avsfx/study.hpp"

namespace httplib {
class Server;
}

namespace avsfx {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  ///< 0 binds an ephemeral port
  std::filesystem::path frames_store;
  std::filesystem::path audio_store;  ///< projected audio embeddings
  std::filesystem::path media_root;
  std::filesystem::path media_manifest;  ///< {"frames": {id: path}, "audio": {id: path}}, paths under media_root
  std::filesystem::path study_config;    ///< optional; study endpoints answer 409 without it
  std::filesystem::path vote_log;
  std::filesystem::path session_log;
  std::size_t threads = 1;
};

/// Relative paths are resolved against `base_dir`.
ServiceConfig service_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// Ranked audio for one frame query, as served by /v1/retrieve and printed by
/// the CLI. Throws UnknownId, BadArgs (k outside [1, 100]).
nlohmann::json retrieve_json(const EmbeddingStore& frames, const EmbeddingStore& audio, const std::string& frame_id,
                             std::size_t k, std::size_t threads = 1);

inline constexpr std::size_t kMaxRetrieveK = 100;
inline constexpr std::size_t kDefaultRetrieveK = 10;

struct MediaManifest {
  std::map<std::string, std::filesystem::path> frames;
  std::map<std::string, std::filesystem::path> audio;
};

/// Throws BadConfig when an entry resolves outside `root`.
MediaManifest load_media_manifest(const std::filesystem::path& manifest, const std::filesystem::path& root);

/// The study and retrieval API. Handlers are thin adapters over the public
/// methods below, which tests may call in-process.
class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  nlohmann::json health() const;
  nlohmann::json retrieve(const std::string& frame_id, std::size_t k) const;
  /// Blinded view of a new persisted session. Throws PoolTooSmall.
  nlohmann::json create_session(const std::string& rater_id);
  /// Throws UnknownSession, UnknownComparison, DuplicateVote.
  void vote(const std::string& session_id, const std::string& comparison_id, Side side);
  nlohmann::json results() const;

  const StudyLedger& ledger() const { return *ledger_; }

  /// Binds the listening socket and returns the port.
  int bind();
  /// Serves until stop(); call bind() first.
  void serve();
  void stop();

 private:
  void install_routes();

  ServiceConfig cfg_;
  EmbeddingStore frames_;
  EmbeddingStore audio_;
  MediaManifest media_;
  std::optional<StudyConfig> study_cfg_;
  StudyPool pool_;
  std::unique_ptr<StudyLedger> ledger_;
  std::unique_ptr<httplib::Server> server_;
  std::mutex session_mu_;
};

}  // namespace avsfx
