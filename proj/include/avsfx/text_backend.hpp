#pragma once

#include <string>

#include "avsfx/curation.hpp"

namespace avsfx {

struct HttpBackendConfig {
  std::string url;  ///< e.g. http://127.0.0.1:8081/v1/complete
  int max_tokens = 48;
  double temperature = 0.0;
  double timeout_s = 30.0;
  int retries = 2;
};

HttpBackendConfig http_backend_from_json(const nlohmann::json& j);

/// POSTs {prompt, max_tokens, temperature} and reads {text} from the JSON
/// response. Connection failures, non-2xx statuses and malformed bodies are
/// retried `retries` times, then surface as BackendUnavailable.
class HttpTextBackend final : public TextBackend {
 public:
  explicit HttpTextBackend(HttpBackendConfig cfg);
  std::string complete(const std::string& prompt) override;

 private:
  HttpBackendConfig cfg_;
  std::string origin_;
  std::string path_;
};

}  // namespace avsfx
