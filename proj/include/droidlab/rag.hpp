#pragma once

// Retrieval-augmented context: documentation chunking, embedding providers,
// an exact L2 chunk index and assembly of the per-group retrievals into one
// context window.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "droidlab/features.hpp"

namespace droidlab {

struct Document {
  std::string source;
  std::string text;
};

struct Chunk {
  std::uint32_t id = 0;
  std::string source;
  std::string text;
};

inline constexpr std::size_t kMinParagraphChars = 40;

/// Loads every regular file under dir, ordered by relative path.
std::vector<Document> load_corpus(const std::filesystem::path& dir);

/// Splits on blank lines. Paragraphs shorter than 40 characters merge into
/// the following paragraph of the same document (a trailing stub merges into
/// the preceding one). Ids are dense in corpus order.
std::vector<Chunk> chunk_corpus(std::span<const Document> documents);

/// Unit-norm dense vector.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;
  /// Normalises; throws kInvalidArgument for zero or non-finite input.
  static EmbeddingVector normalized(std::vector<double> values);
  /// Takes already unit-norm values as-is; kMalformedInput otherwise.
  static EmbeddingVector stored(std::vector<double> values);

  std::span<const double> values() const noexcept { return values_; }
  std::size_t dimension() const noexcept { return values_.size(); }
  double dot(const EmbeddingVector& other) const;

 private:
  std::vector<double> values_;
};

double l2_distance(std::span<const double> a, std::span<const double> b);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  virtual std::vector<EmbeddingVector> embed_batch(std::span<const std::string> texts) const = 0;
  /// Identifies model, version and dimension; indexes remember it.
  virtual std::string fingerprint() const = 0;
  virtual std::size_t dimension() const = 0;
  /// False when calls must be serialised by the caller.
  virtual bool concurrent_safe() const { return true; }

  EmbeddingVector embed(std::string_view text) const;
};

/// Lowercase word tokens feature-hashed into `dimension` signed buckets.
class HashingEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HashingEmbeddingProvider(std::uint64_t seed = 0, std::size_t dimension = 384);

  std::vector<EmbeddingVector> embed_batch(std::span<const std::string> texts) const override;
  std::string fingerprint() const override;
  std::size_t dimension() const override { return dimension_; }

  static std::vector<std::string> tokenize(std::string_view text);
  /// Bucket and sign for one token.
  std::pair<std::size_t, double> slot(std::string_view token) const;

 private:
  std::uint64_t seed_;
  std::size_t dimension_;
};

/// A bidirectional newline-delimited channel.
class LineTransport {
 public:
  virtual ~LineTransport() = default;
  /// Sends one line (without '\n') and returns the reply line. Throws
  /// kBackendUnavailable on transport failure.
  virtual std::string exchange(const std::string& line) = 0;
};

std::unique_ptr<LineTransport> make_tcp_transport(std::string host, std::uint16_t port);
/// Spawns `command` via /bin/sh and talks to its stdin/stdout.
std::unique_ptr<LineTransport> make_subprocess_transport(std::string command);

/// Client of the external embedding service. One JSON object per line:
///   request  {"id":N,"op":"info"} or {"id":N,"op":"embed","texts":[...]}
///   response {"id":N,"fingerprint":S,"dimension":D[,"vectors":[[...],...]]}
///            or {"id":N,"error":{"code":S,"message":S}}
class ServiceEmbeddingProvider final : public EmbeddingProvider {
 public:
  /// Performs the info handshake.
  explicit ServiceEmbeddingProvider(std::unique_ptr<LineTransport> transport);

  std::vector<EmbeddingVector> embed_batch(std::span<const std::string> texts) const override;
  std::string fingerprint() const override { return fingerprint_; }
  std::size_t dimension() const override { return dimension_; }
  bool concurrent_safe() const override { return false; }

 private:
  std::string call(const std::string& request) const;

  std::unique_ptr<LineTransport> transport_;
  mutable std::mutex mutex_;
  mutable std::uint64_t next_id_ = 1;
  std::string fingerprint_;
  std::size_t dimension_ = 0;
};

struct Hit {
  std::uint32_t chunk_id = 0;
  double distance = 0.0;
  friend bool operator==(const Hit&, const Hit&) = default;
};

class ChunkIndex {
 public:
  static ChunkIndex build(std::vector<Chunk> chunks, const EmbeddingProvider& provider);
  /// Assembles an index from precomputed embeddings.
  ChunkIndex(std::vector<Chunk> chunks, std::vector<EmbeddingVector> embeddings, std::string fingerprint);

  std::size_t size() const noexcept { return chunks_.size(); }
  const Chunk& chunk(std::uint32_t id) const { return chunks_.at(id); }
  const EmbeddingVector& embedding(std::uint32_t id) const { return embeddings_.at(id); }
  const std::string& fingerprint() const noexcept { return fingerprint_; }
  std::size_t dimension() const noexcept { return embeddings_.empty() ? 0 : embeddings_.front().dimension(); }

  /// The k nearest chunks by L2 distance, ascending, ties by ascending id.
  std::vector<Hit> nearest(const EmbeddingVector& query, std::size_t k) const;

  std::string serialize() const;
  static ChunkIndex parse(std::string_view text);

 private:
  std::vector<Chunk> chunks_;
  std::vector<EmbeddingVector> embeddings_;
  std::string fingerprint_;
};

/// Embeds the query with `provider` and returns its k nearest chunks. Throws
/// kStaleIndex when the provider fingerprint differs from the index's.
std::vector<Hit> retrieve_top_k(const ChunkIndex& index, const EmbeddingProvider& provider,
                                std::string_view query, std::size_t k);

struct QueryGroup {
  std::string key;
  std::string text;
};

inline constexpr std::string_view kExplanationGroupKey = "analyzer explanation";

/// One query per feature group (feature lines joined by '\n'), followed by
/// the explanation as its own group when present.
std::vector<QueryGroup> query_groups(const FeatureSet& features,
                                     const std::optional<std::string>& explanation);

struct GroupRetrieval {
  std::string group_key;
  std::vector<Hit> hits;
};

struct ContextEntry {
  std::uint32_t chunk_id = 0;
  std::string group_key;
  std::string text;
  double distance = 0.0;
};

struct ContextWindow {
  std::vector<ContextEntry> entries;
  std::size_t budget = 0;
  bool truncated = false;

  std::size_t characters() const;
  /// Entries as "[group] text" blocks separated by blank lines.
  std::string render() const;
};

inline constexpr std::size_t kDefaultContextBudget = 12000;
inline constexpr std::size_t kDefaultTopK = 5;

/// Concatenates retrievals in group order, keeping the first occurrence of
/// every chunk and dropping whole chunks from the tail beyond the budget.
ContextWindow assemble_context(std::span<const GroupRetrieval> retrievals, const ChunkIndex& index,
                               std::size_t budget = kDefaultContextBudget);

/// Retrieval front end used by the agents.
class RagEngine {
 public:
  RagEngine(const ChunkIndex& index, const EmbeddingProvider& provider,
            std::size_t k = kDefaultTopK, std::size_t budget = kDefaultContextBudget);

  ContextWindow context_for(const FeatureSet& features,
                            const std::optional<std::string>& explanation = std::nullopt) const;

  std::size_t k() const noexcept { return k_; }

 private:
  std::vector<Hit> retrieve(std::string_view text) const;

  const ChunkIndex& index_;
  const EmbeddingProvider& provider_;
  std::size_t k_;
  std::size_t budget_;
  mutable std::mutex provider_mutex_;
};

}  // namespace droidlab
