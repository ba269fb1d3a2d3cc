#pragma once

#include "it3d/guidance.hpp"
#include "it3d/trainer.hpp"

#include <memory>
#include <string>
#include <vector>

namespace it3d {

/// Wire tensors are {"shape": [...], "data": base64 of little-endian f32}.
std::string encode_f32_base64(const Tensord& t);
Tensord decode_f32_base64(const std::string& data, const Shape& shape);

struct RemoteConfig {
  std::string url;  // scheme://host[:port][/prefix]
  double connect_timeout_s = 5.0;
  double read_timeout_s = 120.0;
  int retries = 1;
};

/// Resolves `--oracle` values: "remote:<url>", or bare "remote" which falls
/// back to INSTANT3D_ORACLE_URL. Throws std::invalid_argument otherwise.
std::string resolve_remote_url(const std::string& oracle_flag);

/// Blocking client for the guidance service. Transport errors and 5xx
/// responses are retried; everything else throws OracleError at once.
class RemoteClient {
 public:
  explicit RemoteClient(RemoteConfig cfg);
  ~RemoteClient();
  RemoteClient(const RemoteClient&) = delete;
  RemoteClient& operator=(const RemoteClient&) = delete;

  std::vector<TextCondition<double>> text_embeddings(const std::vector<std::string>& prompts);
  DenoiseResult denoise(const Tensord& x_t, Index t, const std::string& prompt,
                        const std::vector<std::string>& negatives);
  Tensord image_features(const Tensord& image);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class RemoteOracle : public ScoreOracle {
 public:
  explicit RemoteOracle(RemoteClient& client) : client_(client) {}
  DenoiseResult denoise(const DenoiseQuery& q) override;

 private:
  RemoteClient& client_;
};

/// Eval-only image encoder; contributes no gradient.
class RemoteImageEncoder : public FeatureOracle {
 public:
  explicit RemoteImageEncoder(RemoteClient& client) : client_(client) {}
  Tensord features(const Tensord& image) override { return client_.image_features(image); }

 private:
  RemoteClient& client_;
};

/// Text features from /v1/text-embeddings, cached per prompt. Embeddings must
/// match the decoder's token grid.
class RemoteTextEncoder : public TextEncoder {
 public:
  RemoteTextEncoder(RemoteClient& client, Index token_count, Index token_dim)
      : client_(client), tokens_(token_count), dim_(token_dim) {}

  TextCondition<double> encode(const std::string& text) override;
  /// Fetches uncached prompts in batches of at most 64.
  void prefetch(const std::vector<std::string>& texts);
  std::size_t cached() const { return cache_.size(); }

 private:
  void store(const std::string& text, TextCondition<double> c);

  RemoteClient& client_;
  Index tokens_, dim_;
  std::map<std::string, TextCondition<double>> cache_;
};

}  // namespace it3d
