#include "it3d/remote.hpp"

#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace it3d {

namespace {

using json = nlohmann::json;

json tensor_json(const Tensord& t) { return {{"shape", t.shape()}, {"data", encode_f32_base64(t)}}; }

Tensord tensor_from(const json& j, const std::string& what) {
  try {
    return decode_f32_base64(j.at("data").get<std::string>(), j.at("shape").get<Shape>());
  } catch (const OracleError&) {
    throw;
  } catch (const std::exception& e) {
    throw OracleError("malformed tensor '" + what + "': " + e.what());
  }
}

}  // namespace

std::string encode_f32_base64(const Tensord& t) {
  std::string bytes(static_cast<std::size_t>(t.size()) * 4, '\0');
  for (Index i = 0; i < t.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(t[i]));
    for (int b = 0; b < 4; ++b) bytes[std::size_t(4 * i + b)] = char((u >> (8 * b)) & 0xff);
  }
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), int(bytes.size()));
  out.resize(std::size_t(n));
  return out;
}

Tensord decode_f32_base64(const std::string& data, const Shape& shape) {
  for (Index d : shape) {
    if (d < 1) throw OracleError("wire tensor dimensions must be positive, got " + shape_string(shape));
  }
  const Index n = shape_numel(shape);
  if (data.size() % 4 != 0) throw OracleError("wire tensor: base64 length is not a multiple of 4");
  std::string bytes(data.size() / 4 * 3, '\0');
  const int got = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(bytes.data()),
                                  reinterpret_cast<const unsigned char*>(data.data()), int(data.size()));
  if (got < 0) throw OracleError("wire tensor: invalid base64");
  // EVP_DecodeBlock keeps the zero bytes that stand in for '=' padding.
  std::size_t len = std::size_t(got);
  if (!data.empty() && data.back() == '=') --len;
  if (data.size() > 1 && data[data.size() - 2] == '=') --len;
  if (len != std::size_t(n) * 4) {
    throw OracleError("wire tensor: " + std::to_string(len) + " bytes for shape " + shape_string(shape));
  }
  Tensord t(shape);
  for (Index i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t(static_cast<unsigned char>(bytes[std::size_t(4 * i + b)])) << (8 * b);
    t[i] = double(std::bit_cast<float>(u));
  }
  return t;
}

std::string resolve_remote_url(const std::string& flag) {
  const std::string prefix = "remote:";
  if (flag.rfind(prefix, 0) == 0 && flag.size() > prefix.size()) return flag.substr(prefix.size());
  if (flag == "remote" || flag == prefix) {
    const char* env = std::getenv("INSTANT3D_ORACLE_URL");
    if (env && *env) return env;
    throw std::invalid_argument("--oracle remote needs a URL or INSTANT3D_ORACLE_URL");
  }
  throw std::invalid_argument("oracle must be 'synthetic' or 'remote:<url>', got '" + flag + "'");
}

struct RemoteClient::Impl {
  RemoteConfig cfg;
  std::string prefix;
  std::unique_ptr<httplib::Client> http;
  std::mutex mu;  // one request at a time per client

  json post(const std::string& endpoint, const json& body) {
    std::lock_guard lock(mu);
    const std::string path = prefix + endpoint;
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
      auto res = http->Post(path, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
        continue;
      }
      if (res->status != 200) {
        throw OracleError(endpoint + " returned HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        throw OracleError(endpoint + " returned invalid JSON: " + e.what());
      }
    }
    throw OracleError(endpoint + " at " + cfg.url + " failed after " + std::to_string(cfg.retries + 1) +
                      " attempts: " + last_error);
  }
};

RemoteClient::RemoteClient(RemoteConfig cfg) : impl_(std::make_unique<Impl>()) {
  const auto scheme_end = cfg.url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("oracle URL needs a scheme: " + cfg.url);
  const auto path_start = cfg.url.find('/', scheme_end + 3);
  const std::string host = cfg.url.substr(0, path_start);
  if (path_start != std::string::npos) {
    impl_->prefix = cfg.url.substr(path_start);
    while (!impl_->prefix.empty() && impl_->prefix.back() == '/') impl_->prefix.pop_back();
  }
  impl_->http = std::make_unique<httplib::Client>(host);
  if (!impl_->http->is_valid()) throw std::invalid_argument("unsupported oracle URL: " + cfg.url);
  auto seconds = [](double s) {
    return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(s));
  };
  impl_->http->set_connection_timeout(seconds(cfg.connect_timeout_s));
  impl_->http->set_read_timeout(seconds(cfg.read_timeout_s));
  impl_->http->set_write_timeout(seconds(cfg.read_timeout_s));
  impl_->cfg = std::move(cfg);
}

RemoteClient::~RemoteClient() = default;

std::vector<TextCondition<double>> RemoteClient::text_embeddings(const std::vector<std::string>& prompts) {
  const json res = impl_->post("/v1/text-embeddings", {{"prompts", prompts}});
  std::vector<TextCondition<double>> out;
  try {
    const auto& tok = res.at("token_embeddings");
    const auto& sen = res.at("sentence_embeddings");
    if (tok.size() != prompts.size() || sen.size() != prompts.size()) {
      throw OracleError("/v1/text-embeddings: expected " + std::to_string(prompts.size()) + " embeddings");
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      TextCondition<double> c{tensor_from(tok[i], "token_embeddings"), tensor_from(sen[i], "sentence_embeddings")};
      c.validate();
      out.push_back(std::move(c));
    }
  } catch (const OracleError&) {
    throw;
  } catch (const std::exception& e) {
    throw OracleError(std::string("/v1/text-embeddings: ") + e.what());
  }
  return out;
}

DenoiseResult RemoteClient::denoise(const Tensord& x_t, Index t, const std::string& prompt,
                                    const std::vector<std::string>& negatives) {
  const json body = {{"x_t", tensor_json(x_t)}, {"t", t}, {"prompt", prompt}, {"negative_prompts", negatives}};
  const json res = impl_->post("/v1/denoise", body);
  DenoiseResult r;
  try {
    r.eps_uncond = tensor_from(res.at("eps_uncond"), "eps_uncond");
    r.eps_cond = tensor_from(res.at("eps_cond"), "eps_cond");
    for (const auto& e : res.at("eps_neg")) r.eps_neg.push_back(tensor_from(e, "eps_neg"));
  } catch (const OracleError&) {
    throw;
  } catch (const std::exception& e) {
    throw OracleError(std::string("/v1/denoise: ") + e.what());
  }
  return r;
}

Tensord RemoteClient::image_features(const Tensord& image) {
  const json res = impl_->post("/v1/image-features", {{"image", tensor_json(image)}});
  try {
    return tensor_from(res.at("features"), "features");
  } catch (const OracleError&) {
    throw;
  } catch (const std::exception& e) {
    throw OracleError(std::string("/v1/image-features: ") + e.what());
  }
}

DenoiseResult RemoteOracle::denoise(const DenoiseQuery& q) {
  return client_.denoise(q.x_t, q.t, q.prompt, q.negatives);
}

void RemoteTextEncoder::store(const std::string& text, TextCondition<double> c) {
  if (c.tokens() != tokens_ || c.dim() != dim_) {
    throw OracleError("/v1/text-embeddings: got [" + std::to_string(c.tokens()) + ", " + std::to_string(c.dim()) +
                      "] token embeddings, the decoder expects [" + std::to_string(tokens_) + ", " +
                      std::to_string(dim_) + "]");
  }
  cache_.insert_or_assign(text, std::move(c));
}

TextCondition<double> RemoteTextEncoder::encode(const std::string& text) {
  if (auto it = cache_.find(text); it != cache_.end()) return it->second;
  auto got = client_.text_embeddings({text});
  store(text, std::move(got.at(0)));
  return cache_.at(text);
}

void RemoteTextEncoder::prefetch(const std::vector<std::string>& texts) {
  std::vector<std::string> todo;
  for (const auto& t : texts) {
    if (!cache_.count(t) && std::find(todo.begin(), todo.end(), t) == todo.end()) todo.push_back(t);
  }
  for (std::size_t at = 0; at < todo.size(); at += 64) {
    const std::vector<std::string> chunk(todo.begin() + std::ptrdiff_t(at),
                                         todo.begin() + std::ptrdiff_t(std::min(todo.size(), at + 64)));
    auto got = client_.text_embeddings(chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) store(chunk[i], std::move(got[i]));
  }
}

}  // namespace it3d
