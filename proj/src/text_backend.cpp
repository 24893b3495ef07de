#include "avsfx/text_backend.hpp"

#include <chrono>
#include <thread>

#include <httplib.h>

#include "avsfx/error.hpp"

namespace avsfx {

HttpBackendConfig http_backend_from_json(const nlohmann::json& j) {
  HttpBackendConfig cfg;
  try {
    cfg.url = j.at("url").get<std::string>();
    cfg.max_tokens = j.value("max_tokens", cfg.max_tokens);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.timeout_s = j.value("timeout_s", cfg.timeout_s);
    cfg.retries = j.value("retries", cfg.retries);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed backend config: ") + e.what());
  }
  return cfg;
}

HttpTextBackend::HttpTextBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
  const auto scheme = cfg_.url.find("://");
  if (scheme == std::string::npos) throw Error(ErrorCode::BadConfig, "backend url needs a scheme: " + cfg_.url);
  const auto slash = cfg_.url.find('/', scheme + 3);
  origin_ = cfg_.url.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : cfg_.url.substr(slash);
  if (cfg_.retries < 0 || cfg_.timeout_s <= 0) throw Error(ErrorCode::BadConfig, "bad backend timeout/retries");
}

std::string HttpTextBackend::complete(const std::string& prompt) {
  httplib::Client client(origin_);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(cfg_.timeout_s));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  const std::string body =
      nlohmann::json{{"prompt", prompt}, {"max_tokens", cfg_.max_tokens}, {"temperature", cfg_.temperature}}.dump();
  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("bad response body: ") + e.what();
    }
  }
  throw Error(ErrorCode::BackendUnavailable, cfg_.url + ": " + last_error);
}

}  // namespace avsfx
