#include "droidlab/rag.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <queue>
#include <unordered_set>

#include <json.hpp>

#include "droidlab/error.hpp"
#include "droidlab/rng.hpp"
#include "droidlab/text.hpp"

namespace droidlab {

using nlohmann::json;

std::vector<Document> load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorCode::kIo, "corpus directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  for (const auto& f : files) {
    docs.push_back({std::filesystem::relative(f, dir).generic_string(), text::read_file(f)});
  }
  return docs;
}

std::vector<Chunk> chunk_corpus(std::span<const Document> documents) {
  require(!documents.empty(), "corpus is empty");
  std::vector<Chunk> chunks;
  for (const auto& doc : documents) {
    std::vector<std::string> paragraphs;
    std::string current;
    auto flush = [&] {
      const auto t = text::trim(current);
      if (!t.empty()) paragraphs.emplace_back(t);
      current.clear();
    };
    for (const auto line : text::split_lines(doc.text)) {
      if (text::trim(line).empty()) {
        flush();
      } else {
        if (!current.empty()) current += '\n';
        current += line;
      }
    }
    flush();

    std::vector<std::string> merged;
    std::string carry;
    for (auto& p : paragraphs) {
      std::string para = carry.empty() ? std::move(p) : carry + "\n\n" + p;
      carry.clear();
      if (para.size() < kMinParagraphChars) {
        carry = std::move(para);
      } else {
        merged.push_back(std::move(para));
      }
    }
    if (!carry.empty()) {
      if (merged.empty()) merged.push_back(std::move(carry));
      else merged.back() += "\n\n" + carry;
    }
    for (auto& m : merged) {
      chunks.push_back({static_cast<std::uint32_t>(chunks.size()), doc.source, std::move(m)});
    }
  }
  require(!chunks.empty(), "corpus contains no text");
  return chunks;
}

// ---------------------------------------------------------------------------

EmbeddingVector EmbeddingVector::normalized(std::vector<double> values) {
  double norm2 = 0.0;
  for (double v : values) {
    require(std::isfinite(v), "embedding has non-finite entries");
    norm2 += v * v;
  }
  require(norm2 > 0.0, "embedding is the zero vector");
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& v : values) v *= inv;
  EmbeddingVector e;
  e.values_ = std::move(values);
  return e;
}

EmbeddingVector EmbeddingVector::stored(std::vector<double> values) {
  double norm2 = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::kMalformedInput, "stored embedding has non-finite entries");
    norm2 += v * v;
  }
  if (std::abs(norm2 - 1.0) > 1e-6) fail(ErrorCode::kMalformedInput, "stored embedding is not unit-norm");
  EmbeddingVector e;
  e.values_ = std::move(values);
  return e;
}

double EmbeddingVector::dot(const EmbeddingVector& other) const {
  double acc = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * other.values_[i];
  return acc;
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

EmbeddingVector EmbeddingProvider::embed(std::string_view text) const {
  std::vector<std::string> one{std::string(text)};
  auto out = embed_batch(one);
  return std::move(out.at(0));
}

HashingEmbeddingProvider::HashingEmbeddingProvider(std::uint64_t seed, std::size_t dimension)
    : seed_(seed), dimension_(dimension) {
  require(dimension > 0, "embedding dimension must be positive");
}

std::vector<std::string> HashingEmbeddingProvider::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '_') {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::pair<std::size_t, double> HashingEmbeddingProvider::slot(std::string_view token) const {
  const std::uint64_t h = mix_keys(seed_, text::fnv1a64(token));
  return {static_cast<std::size_t>(h % dimension_), (h >> 63) ? -1.0 : 1.0};
}

std::vector<EmbeddingVector> HashingEmbeddingProvider::embed_batch(std::span<const std::string> texts) const {
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    const auto trimmed = text::trim(t);
    require(!trimmed.empty(), "cannot embed empty text");
    auto tokens = tokenize(trimmed);
    // Punctuation-only text still needs a direction.
    if (tokens.empty()) tokens.push_back(text::to_lower(trimmed));
    std::vector<double> v(dimension_, 0.0);
    for (const auto& tok : tokens) {
      const auto [bucket, sign] = slot(tok);
      v[bucket] += sign;
    }
    // Colliding tokens with opposite signs can cancel out completely.
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
      v[slot(tokens.front()).first] = 1.0;
    }
    out.push_back(EmbeddingVector::normalized(std::move(v)));
  }
  return out;
}

std::string HashingEmbeddingProvider::fingerprint() const {
  return "hashing-v1/seed=" + std::to_string(seed_) + "/dim=" + std::to_string(dimension_);
}

// ---------------------------------------------------------------------------

ServiceEmbeddingProvider::ServiceEmbeddingProvider(std::unique_ptr<LineTransport> transport)
    : transport_(std::move(transport)) {
  const auto reply = json::parse(call(json{{"id", next_id_++}, {"op", "info"}}.dump()));
  fingerprint_ = reply.at("fingerprint").get<std::string>();
  dimension_ = reply.at("dimension").get<std::size_t>();
  require(dimension_ > 0, "embedding service reported zero dimension");
}

std::string ServiceEmbeddingProvider::call(const std::string& request) const {
  std::lock_guard lock(mutex_);
  const std::string reply = transport_->exchange(request);
  json j;
  try {
    j = json::parse(reply);
  } catch (const json::exception&) {
    fail(ErrorCode::kBackendUnavailable, "embedding service sent a malformed reply");
  }
  if (j.contains("error")) {
    const auto& e = j.at("error");
    fail(ErrorCode::kBackendUnavailable,
         "embedding service error " + e.value("code", std::string("unknown")) + ": " + e.value("message", std::string()));
  }
  return reply;
}

std::vector<EmbeddingVector> ServiceEmbeddingProvider::embed_batch(std::span<const std::string> texts) const {
  for (const auto& t : texts) require(!text::trim(t).empty(), "cannot embed empty text");
  std::uint64_t id;
  {
    std::lock_guard lock(mutex_);
    id = next_id_++;
  }
  const auto reply = json::parse(call(json{{"id", id}, {"op", "embed"}, {"texts", texts}}.dump()));
  try {
    if (reply.at("id").get<std::uint64_t>() != id) {
      fail(ErrorCode::kBackendUnavailable, "embedding service answered a different request");
    }
    if (reply.at("fingerprint").get<std::string>() != fingerprint_) {
      fail(ErrorCode::kStaleIndex, "embedding service changed its fingerprint");
    }
    const auto& vectors = reply.at("vectors");
    if (vectors.size() != texts.size()) {
      fail(ErrorCode::kBackendUnavailable, "embedding service returned the wrong number of vectors");
    }
    std::vector<EmbeddingVector> out;
    for (const auto& v : vectors) {
      auto values = v.get<std::vector<double>>();
      if (values.size() != dimension_) fail(ErrorCode::kBackendUnavailable, "embedding has wrong dimension");
      out.push_back(EmbeddingVector::normalized(std::move(values)));
    }
    return out;
  } catch (const json::exception& e) {
    fail(ErrorCode::kBackendUnavailable, std::string("embedding reply is incomplete: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

ChunkIndex::ChunkIndex(std::vector<Chunk> chunks, std::vector<EmbeddingVector> embeddings, std::string fingerprint)
    : chunks_(std::move(chunks)), embeddings_(std::move(embeddings)), fingerprint_(std::move(fingerprint)) {
  require(chunks_.size() == embeddings_.size(), "chunk and embedding counts differ");
  for (std::size_t i = 0; i < chunks_.size(); ++i) {
    require(chunks_[i].id == i, "chunk ids must be dense and in order");
    require(!chunks_[i].text.empty(), "chunk text must be non-empty");
    require(embeddings_[i].dimension() == embeddings_.front().dimension(), "embedding dimensions differ");
  }
}

ChunkIndex ChunkIndex::build(std::vector<Chunk> chunks, const EmbeddingProvider& provider) {
  std::vector<std::string> texts;
  texts.reserve(chunks.size());
  for (const auto& c : chunks) texts.push_back(c.text);
  auto embeddings = provider.embed_batch(texts);
  return ChunkIndex(std::move(chunks), std::move(embeddings), provider.fingerprint());
}

std::vector<Hit> ChunkIndex::nearest(const EmbeddingVector& query, std::size_t k) const {
  require(!chunks_.empty(), "index is empty");
  require(k >= 1, "k must be at least 1");
  require(query.dimension() == dimension(), "query dimension does not match the index");
  // Max-heap on (distance, id) holding the best k seen so far.
  auto worse = [](const Hit& a, const Hit& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.chunk_id < b.chunk_id);
  };
  std::priority_queue<Hit, std::vector<Hit>, decltype(worse)> heap(worse);
  for (std::uint32_t id = 0; id < chunks_.size(); ++id) {
    const Hit h{id, l2_distance(query.values(), embeddings_[id].values())};
    if (heap.size() < k) {
      heap.push(h);
    } else if (worse(h, heap.top())) {
      heap.pop();
      heap.push(h);
    }
  }
  std::vector<Hit> out(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = heap.top();
    heap.pop();
  }
  return out;
}

namespace {
constexpr std::string_view kIndexFormat = "droidlab-index";
constexpr int kIndexVersion = 1;
}  // namespace

std::string ChunkIndex::serialize() const {
  json chunks = json::array();
  for (std::size_t i = 0; i < chunks_.size(); ++i) {
    const auto v = embeddings_[i].values();
    chunks.push_back({{"id", chunks_[i].id},
                      {"source", chunks_[i].source},
                      {"text", chunks_[i].text},
                      {"embedding", std::vector<double>(v.begin(), v.end())}});
  }
  json j{{"format", kIndexFormat},
         {"version", kIndexVersion},
         {"fingerprint", fingerprint_},
         {"dimension", dimension()},
         {"chunks", std::move(chunks)}};
  return j.dump() + "\n";
}

ChunkIndex ChunkIndex::parse(std::string_view content) {
  try {
    const auto j = json::parse(content);
    if (j.at("format").get<std::string>() != kIndexFormat) fail(ErrorCode::kMalformedInput, "not an index file");
    if (j.at("version").get<int>() != kIndexVersion) fail(ErrorCode::kMalformedInput, "unsupported index version");
    std::vector<Chunk> chunks;
    std::vector<EmbeddingVector> embeddings;
    for (const auto& c : j.at("chunks")) {
      chunks.push_back({c.at("id").get<std::uint32_t>(), c.at("source").get<std::string>(),
                        c.at("text").get<std::string>()});
      embeddings.push_back(EmbeddingVector::stored(c.at("embedding").get<std::vector<double>>()));
    }
    return ChunkIndex(std::move(chunks), std::move(embeddings), j.at("fingerprint").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedInput, std::string("index file: ") + e.what());
  }
}

std::vector<Hit> retrieve_top_k(const ChunkIndex& index, const EmbeddingProvider& provider,
                                std::string_view query, std::size_t k) {
  if (provider.fingerprint() != index.fingerprint()) {
    fail(ErrorCode::kStaleIndex, "index built with '" + index.fingerprint() + "' but queried with '" +
                                     provider.fingerprint() + "'");
  }
  return index.nearest(provider.embed(query), k);
}

// ---------------------------------------------------------------------------

std::vector<QueryGroup> query_groups(const FeatureSet& features, const std::optional<std::string>& explanation) {
  std::vector<QueryGroup> groups;
  for (const auto& g : group_by_class(features)) {
    std::string body = to_lines(g.features);
    body.pop_back();
    groups.push_back({g.key, std::move(body)});
  }
  if (explanation && !text::trim(*explanation).empty()) {
    groups.push_back({std::string(kExplanationGroupKey), *explanation});
  }
  return groups;
}

std::size_t ContextWindow::characters() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.text.size();
  return n;
}

std::string ContextWindow::render() const {
  std::string out;
  for (const auto& e : entries) {
    if (!out.empty()) out += "\n\n";
    out += "[" + e.group_key + "] " + e.text;
  }
  return out;
}

ContextWindow assemble_context(std::span<const GroupRetrieval> retrievals, const ChunkIndex& index,
                               std::size_t budget) {
  ContextWindow window;
  window.budget = budget;
  std::unordered_set<std::uint32_t> seen;
  std::size_t used = 0;
  for (const auto& group : retrievals) {
    for (const auto& hit : group.hits) {
      if (!seen.insert(hit.chunk_id).second) continue;
      const auto& chunk = index.chunk(hit.chunk_id);
      if (window.truncated || used + chunk.text.size() > budget) {
        window.truncated = true;
        continue;
      }
      used += chunk.text.size();
      window.entries.push_back({hit.chunk_id, group.group_key, chunk.text, hit.distance});
    }
  }
  return window;
}

RagEngine::RagEngine(const ChunkIndex& index, const EmbeddingProvider& provider, std::size_t k, std::size_t budget)
    : index_(index), provider_(provider), k_(k), budget_(budget) {
  require(k >= 1, "k must be at least 1");
  if (provider.fingerprint() != index.fingerprint()) {
    fail(ErrorCode::kStaleIndex, "index built with '" + index.fingerprint() + "' but queried with '" +
                                     provider.fingerprint() + "'");
  }
}

std::vector<Hit> RagEngine::retrieve(std::string_view text) const {
  if (provider_.concurrent_safe()) return retrieve_top_k(index_, provider_, text, k_);
  std::lock_guard lock(provider_mutex_);
  return retrieve_top_k(index_, provider_, text, k_);
}

ContextWindow RagEngine::context_for(const FeatureSet& features, const std::optional<std::string>& explanation) const {
  std::vector<GroupRetrieval> retrievals;
  for (const auto& g : query_groups(features, explanation)) {
    retrievals.push_back({g.key, retrieve(g.text)});
  }
  return assemble_context(retrievals, index_, budget_);
}

}  // namespace droidlab
