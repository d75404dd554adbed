#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

#include "droidlab/agents.hpp"
#include "droidlab/error.hpp"

namespace droidlab {

using nlohmann::json;

std::string chat_request_body(std::string_view model, double temperature, std::string_view prompt) {
  return json{{"model", model},
              {"temperature", temperature},
              {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}}
      .dump();
}

std::string chat_response_content(std::string_view body) {
  try {
    const auto j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBackendUnavailable, std::string("malformed completion response: ") + e.what());
  }
}

HttpBackend::HttpBackend(const BackendDescriptor& d)
    : model_(d.model), temperature_(d.temperature), timeout_(d.timeout_seconds) {
  const auto scheme_end = d.endpoint.find("://");
  if (scheme_end == std::string::npos) fail(ErrorCode::kConfigInvalid, "endpoint '" + d.endpoint + "' has no scheme");
  const auto path_start = d.endpoint.find('/', scheme_end + 3);
  scheme_host_ = d.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : d.endpoint.substr(path_start);
  if (!d.credential_env.empty()) {
    const char* key = std::getenv(d.credential_env.c_str());
    if (!key || !*key) {
      fail(ErrorCode::kConfigInvalid, "credential variable " + d.credential_env + " is not set");
    }
    api_key_ = key;
  }
}

std::string HttpBackend::complete(const BackendRequest& request) {
  httplib::Client client(scheme_host_);
  if (!client.is_valid()) throw Error(ErrorCode::kBackendUnavailable, "unsupported endpoint " + scheme_host_, false);
  const auto secs = static_cast<time_t>(timeout_);
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const auto res = client.Post(path_, headers, chat_request_body(model_, temperature_, request.prompt),
                               "application/json");
  if (!res) fail(ErrorCode::kBackendUnavailable, "request failed: " + httplib::to_string(res.error()));
  if (res->status == 413) throw Error(ErrorCode::kPromptTooLarge, "endpoint rejected the prompt size", false);
  if (res->status == 429 || res->status >= 500) {
    fail(ErrorCode::kBackendUnavailable, "endpoint returned HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::kBackendUnavailable, "endpoint returned HTTP " + std::to_string(res->status), false);
  }
  return chat_response_content(res->body);
}

}  // namespace droidlab
