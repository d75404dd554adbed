#include "droidlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <set>

#include <json.hpp>

#include "droidlab/error.hpp"
#include "droidlab/text.hpp"

namespace droidlab {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kBuiltinGreedy = "greedy-linear";
constexpr std::string_view kBuiltinSurrogate = "surrogate-linear";
constexpr std::string_view kBuiltinEcho = "echo";

bool safe_name(std::string_view s) {
  if (s.empty() || s == "." || s == "..") return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_' ||
           c == '.';
  });
}

// Collects type and key problems while reading a JSON object so that one
// pass reports everything.
class Reader {
 public:
  Reader(const json& obj, std::string where, std::vector<std::string>& problems)
      : obj_(obj), where_(std::move(where)), problems_(problems) {
    if (!obj_.is_object()) problems_.push_back(where_ + " must be an object");
  }

  ~Reader() = default;

  void finish(std::initializer_list<std::string_view> known) {
    if (!obj_.is_object()) return;
    for (const auto& [key, _] : obj_.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        problems_.push_back(where_ + ": unknown key '" + key + "'");
      }
    }
  }

  const json* get(std::string_view key) const {
    if (!obj_.is_object()) return nullptr;
    const auto it = obj_.find(key);
    return it == obj_.end() || it->is_null() ? nullptr : &*it;
  }

  template <typename T>
  void read(std::string_view key, T& out) {
    const auto* v = get(key);
    if (!v) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!v->is_number_unsigned()) throw std::runtime_error("x");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw std::runtime_error("x");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw std::runtime_error("x");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw std::runtime_error("x");
      }
      out = v->get<T>();
    } catch (const std::exception&) {
      problems_.push_back(where_ + "." + std::string(key) + " has the wrong type");
    }
  }

  void read_path(std::string_view key, fs::path& out, const fs::path& base) {
    std::string s;
    read(key, s);
    if (!s.empty()) out = base / fs::path(s);
  }

  std::vector<std::string>& problems() { return problems_; }
  const std::string& where() const { return where_; }

 private:
  const json& obj_;
  std::string where_;
  std::vector<std::string>& problems_;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string dataset_fingerprint(const std::vector<Sample>& samples) {
  std::string acc;
  for (const auto& s : samples) {
    acc += s.id;
    acc += '\0';
    acc += serialize_feature_file(s.features, s.label);
  }
  return text::digest(acc);
}

// Manifests are numbered so repeated commands in one run directory never
// touch an earlier record.
class ManifestWriter {
 public:
  ManifestWriter(const fs::path& run_dir, std::string command, ordered_json extra) {
    const auto dir = run_dir / "manifests";
    fs::create_directories(dir);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".json") ++n;
    }
    char prefix[16];
    while (true) {
      std::snprintf(prefix, sizeof prefix, "%03zu-", n);
      path_ = dir / (prefix + command + ".json");
      if (!fs::exists(path_)) break;
      ++n;
    }
    ordered_json j;
    j["command"] = command;
    j["version"] = std::string(kVersion);
    j["components"] = {{"features", "1"}, {"detectors", "1"}, {"rag", "1"}, {"attack", "1"}, {"defense", "1"}};
    j["start"] = timestamp();
    for (auto& [k, v] : extra.items()) j[k] = v;
    text::write_file_atomic(path_, j.dump(2) + "\n");
  }

  void complete() {
    auto done = path_;
    done.replace_extension(".completed");
    text::write_file_atomic(done, "end=" + timestamp() + "\n");
  }

 private:
  fs::path path_;
};

ordered_json base_manifest(const RunConfig& config) {
  ordered_json j;
  j["config"] = ordered_json::parse(config.snapshot());
  return j;
}

std::vector<std::string> read_id_list(const fs::path& path) {
  std::vector<std::string> ids;
  const auto content = text::read_file(path);
  for (const auto line : text::split_lines(content)) {
    const auto t = text::trim(line);
    if (!t.empty()) ids.emplace_back(t);
  }
  return ids;
}

std::string id_list(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) out += s.id + "\n";
  return out;
}

const BackendDescriptor* find_backend(const std::vector<BackendDescriptor>& list, std::string_view name) {
  for (const auto& b : list) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

std::vector<BackendDescriptor> with_builtins(const std::vector<BackendDescriptor>& configured) {
  auto all = configured;
  for (const auto name : {kBuiltinGreedy, kBuiltinSurrogate, kBuiltinEcho}) {
    if (!find_backend(all, name)) {
      BackendDescriptor d;
      d.name = std::string(name);
      d.type = std::string(name);
      all.push_back(d);
    }
  }
  return all;
}

bool needs_surrogate(const RunConfig& config) {
  const auto all = with_builtins(config.backends);
  for (const auto& p : config.pairings) {
    for (const auto& n : {p.manipulator, p.analyzer}) {
      const auto* b = find_backend(all, n);
      if (b && (b->type == "greedy-linear" || b->type == "surrogate-linear")) return true;
    }
  }
  return false;
}

std::string summary_text(const AttackSummary& s, const std::vector<EpisodeOutcome>& episodes) {
  std::size_t aborted = 0, analyzer = 0;
  for (const auto& ep : episodes) {
    if (ep.trace.outcome == Outcome::kAborted) ++aborted;
    if (ep.trace.outcome == Outcome::kEvaded) ++analyzer;
  }
  return key_value_report({{"attacked", std::to_string(s.attacked)},
                           {"evaded", std::to_string(s.evaded)},
                           {"failed", std::to_string(s.failed)},
                           {"asr", format_double(s.asr)},
                           {"mean_attempts", format_double(s.mean_attempts)},
                           {"max_attempts", std::to_string(s.max_attempts)},
                           {"aborted", std::to_string(aborted)},
                           {"analyzer_evaded", std::to_string(analyzer)},
                           {"episodes", std::to_string(episodes.size())}});
}

std::map<std::string, std::string> parse_key_values(std::string_view content) {
  std::map<std::string, std::string> out;
  for (const auto line : text::split_lines(content)) {
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  return out;
}

void write_campaign(const fs::path& dir, const std::vector<EpisodeOutcome>& episodes, const AttackSummary& summary) {
  fs::create_directories(dir / "traces");
  char name[32];
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    std::snprintf(name, sizeof name, "%05zu.jsonl", i);
    text::write_file_atomic(dir / "traces" / name, episodes[i].trace.serialize());
  }
  text::write_file_atomic(dir / "results.csv", results_table(episodes));
  text::write_file_atomic(dir / "summary.txt", summary_text(summary, episodes));
  text::write_file_atomic(dir / "histogram.csv", histogram_table(summary.histogram));
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> out;
  if (dataset.empty()) {
    out.push_back("dataset is required");
  } else if (!fs::is_directory(dataset) || !fs::exists(dataset / kManifestName)) {
    out.push_back("dataset " + dataset.string() + " is not a dataset directory (missing " +
                  std::string(kManifestName) + ")");
  }
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) out.push_back("split_fraction must lie in (0, 1)");
  if (detectors.empty()) out.push_back("detectors must not be empty");
  std::set<DetectorKind> seen;
  for (auto d : detectors) {
    if (!seen.insert(d).second) out.push_back("detector " + std::string(to_string(d)) + " listed twice");
  }
  if (projection_dim == 0) out.push_back("projection_dim must be positive");
  try {
    training.validate();
  } catch (const Error& e) {
    out.push_back(std::string("training: ") + e.what());
  }
  if (corpus.empty()) {
    out.push_back("corpus is required");
  } else if (!fs::is_directory(corpus)) {
    out.push_back("corpus " + corpus.string() + " is not a directory");
  }
  if (embedding.type == "hashing") {
    if (embedding.dimension == 0) out.push_back("embedding.dimension must be positive");
  } else if (embedding.type == "service-tcp") {
    if (embedding.host.empty() || embedding.port == 0) out.push_back("embedding service-tcp needs host and port");
  } else if (embedding.type == "service-command") {
    if (embedding.command.empty()) out.push_back("embedding service-command needs a command");
  } else {
    out.push_back("embedding.type must be hashing, service-tcp or service-command");
  }
  if (context_budget == 0) out.push_back("attack.context_budget must be positive");

  std::set<std::string> names;
  for (const auto& b : backends) {
    if (!names.insert(b.name).second) out.push_back("backend name '" + b.name + "' is not unique");
    if (b.type == "scripted") out.push_back("backend " + b.name + ": scripted backends come from mock_scenario");
    for (const auto& p : b.problems()) out.push_back("backend " + b.name + ": " + p);
  }
  const auto all = with_builtins(backends);
  std::set<std::string> pairing_names;
  if (pairings.empty() && !mock_scenario) out.push_back("pairings must not be empty");
  for (const auto& p : pairings) {
    if (!safe_name(p.name)) out.push_back("pairing name '" + p.name + "' must be a plain file name");
    if (!pairing_names.insert(p.name).second) out.push_back("pairing name '" + p.name + "' is not unique");
    if (!find_backend(all, p.manipulator)) {
      out.push_back("pairing " + p.name + ": unknown manipulator backend '" + p.manipulator + "'");
    }
    if (!find_backend(all, p.analyzer)) {
      out.push_back("pairing " + p.name + ": unknown analyzer backend '" + p.analyzer + "'");
    }
  }
  try {
    attack.validate();
  } catch (const Error& e) {
    out.push_back(std::string("attack: ") + e.what());
  }
  if (workers == 0) out.push_back("attack.workers must be positive");
  if (mock_scenario && !fs::exists(*mock_scenario)) {
    out.push_back("mock_scenario " + mock_scenario->string() + " does not exist");
  }
  if (defense.per_pairing == 0) out.push_back("defense.per_pairing must be positive");
  if (defense_mode != "replay" && defense_mode != "reattack") {
    out.push_back("defense.mode must be replay or reattack");
  }
  if (output.empty()) out.push_back("output is required");
  return out;
}

void RunConfig::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = std::to_string(p.size()) + " configuration problem(s):";
  for (const auto& s : p) msg += "\n  - " + s;
  fail(ErrorCode::kConfigInvalid, msg);
}

RunConfig RunConfig::parse(std::string_view json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfigInvalid, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  std::vector<std::string> problems;
  Reader top(j, "config", problems);
  top.read_path("dataset", c.dataset, base_dir);
  top.read("split_fraction", c.split_fraction);
  if (const auto* s = top.get("seeds")) {
    Reader r(*s, "seeds", problems);
    r.read("split", c.seeds.split);
    r.read("train", c.seeds.train);
    r.read("attack", c.seeds.attack);
    r.read("defense", c.seeds.defense);
    r.finish({"split", "train", "attack", "defense"});
  }
  if (const auto* d = top.get("detectors")) {
    c.detectors.clear();
    if (!d->is_array()) {
      problems.push_back("detectors must be an array");
    } else {
      for (const auto& v : *d) {
        const auto kind = v.is_string() ? parse_detector_kind(v.get<std::string>()) : std::nullopt;
        if (kind) {
          c.detectors.push_back(*kind);
        } else {
          problems.push_back("detectors: unknown detector " + v.dump());
        }
      }
    }
  }
  top.read("projection_dim", c.projection_dim);
  if (const auto* t = top.get("training")) {
    Reader r(*t, "training", problems);
    auto& tc = c.training;
    r.read("epochs", tc.epochs);
    r.read("batch_size", tc.batch_size);
    r.read("learning_rate", tc.learning_rate);
    r.read("hidden_layers", tc.hidden_layers);
    r.read("trees", tc.trees);
    r.read("tree_depth", tc.tree_depth);
    r.read("gbt_learning_rate", tc.gbt_learning_rate);
    r.read("leaf_l2", tc.leaf_l2);
    r.read("svm_epochs", tc.svm_epochs);
    r.read("svm_lambda", tc.svm_lambda);
    r.read("svm_learning_rate", tc.svm_learning_rate);
    r.finish({"epochs", "batch_size", "learning_rate", "hidden_layers", "trees", "tree_depth", "gbt_learning_rate",
              "leaf_l2", "svm_epochs", "svm_lambda", "svm_learning_rate"});
  }
  top.read_path("corpus", c.corpus, base_dir);
  if (const auto* e = top.get("embedding")) {
    Reader r(*e, "embedding", problems);
    r.read("type", c.embedding.type);
    r.read("dimension", c.embedding.dimension);
    r.read("seed", c.embedding.seed);
    r.read("host", c.embedding.host);
    r.read("port", c.embedding.port);
    r.read("command", c.embedding.command);
    r.finish({"type", "dimension", "seed", "host", "port", "command"});
  }
  if (const auto* bs = top.get("backends")) {
    if (!bs->is_array()) problems.push_back("backends must be an array");
    for (std::size_t i = 0; bs->is_array() && i < bs->size(); ++i) {
      Reader r((*bs)[i], "backends[" + std::to_string(i) + "]", problems);
      BackendDescriptor d;
      r.read("name", d.name);
      r.read("type", d.type);
      r.read("endpoint", d.endpoint);
      r.read("model", d.model);
      r.read("credential_env", d.credential_env);
      r.read("tokens_per_minute", d.tokens_per_minute);
      r.read("max_in_flight", d.max_in_flight);
      r.read("temperature", d.temperature);
      r.read("max_retries", d.max_retries);
      r.read("backoff_seconds", d.backoff_seconds);
      r.read("context_tokens", d.context_tokens);
      r.read("timeout_seconds", d.timeout_seconds);
      r.finish({"name", "type", "endpoint", "model", "credential_env", "tokens_per_minute", "max_in_flight",
                "temperature", "max_retries", "backoff_seconds", "context_tokens", "timeout_seconds"});
      c.backends.push_back(std::move(d));
    }
  }
  if (const auto* ps = top.get("pairings")) {
    if (!ps->is_array()) problems.push_back("pairings must be an array");
    for (std::size_t i = 0; ps->is_array() && i < ps->size(); ++i) {
      Reader r((*ps)[i], "pairings[" + std::to_string(i) + "]", problems);
      PairingConfig p;
      r.read("name", p.name);
      r.read("manipulator", p.manipulator);
      r.read("analyzer", p.analyzer);
      r.finish({"name", "manipulator", "analyzer"});
      c.pairings.push_back(std::move(p));
    }
  }
  if (const auto* a = top.get("attack")) {
    Reader r(*a, "attack", problems);
    r.read("max_attempts", c.attack.max_attempts);
    r.read("top_k", c.attack.top_k);
    r.read("reprompt_note", c.attack.reprompt_note);
    r.read("context_budget", c.context_budget);
    r.read("workers", c.workers);
    r.read("count_aborted", c.count_aborted);
    r.finish({"max_attempts", "top_k", "reprompt_note", "context_budget", "workers", "count_aborted"});
  }
  {
    fs::path scenario;
    top.read_path("mock_scenario", scenario, base_dir);
    if (!scenario.empty()) c.mock_scenario = scenario;
  }
  if (const auto* d = top.get("defense")) {
    Reader r(*d, "defense", problems);
    r.read("per_pairing", c.defense.per_pairing);
    r.read("mode", c.defense_mode);
    r.finish({"per_pairing", "mode"});
  }
  top.read_path("output", c.output, base_dir);
  top.finish({"dataset", "split_fraction", "seeds", "detectors", "projection_dim", "training", "corpus", "embedding",
              "backends", "pairings", "attack", "mock_scenario", "defense", "output"});

  c.training.seed = c.seeds.train;
  c.defense.seed = c.seeds.defense;
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " configuration problem(s):";
    for (const auto& s : problems) msg += "\n  - " + s;
    fail(ErrorCode::kConfigInvalid, msg);
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::string content;
  try {
    content = text::read_file(path);
  } catch (const Error& e) {
    fail(ErrorCode::kConfigInvalid, std::string("cannot read config: ") + e.what());
  }
  return parse(content, fs::absolute(path).parent_path());
}

std::string RunConfig::snapshot() const {
  ordered_json j;
  j["dataset"] = dataset.string();
  j["split_fraction"] = split_fraction;
  j["seeds"] = {{"split", seeds.split}, {"train", seeds.train}, {"attack", seeds.attack}, {"defense", seeds.defense}};
  j["detectors"] = ordered_json::array();
  for (auto d : detectors) j["detectors"].push_back(std::string(to_string(d)));
  j["projection_dim"] = projection_dim;
  j["training"] = {{"epochs", training.epochs},
                   {"batch_size", training.batch_size},
                   {"learning_rate", training.learning_rate},
                   {"hidden_layers", training.hidden_layers},
                   {"trees", training.trees},
                   {"tree_depth", training.tree_depth},
                   {"gbt_learning_rate", training.gbt_learning_rate},
                   {"leaf_l2", training.leaf_l2},
                   {"svm_epochs", training.svm_epochs},
                   {"svm_lambda", training.svm_lambda},
                   {"svm_learning_rate", training.svm_learning_rate}};
  j["corpus"] = corpus.string();
  j["embedding"] = {{"type", embedding.type},     {"dimension", embedding.dimension}, {"seed", embedding.seed},
                    {"host", embedding.host},     {"port", embedding.port},           {"command", embedding.command}};
  // Only the variable name of a credential is ever recorded.
  j["backends"] = ordered_json::array();
  for (const auto& b : backends) {
    j["backends"].push_back({{"name", b.name},
                             {"type", b.type},
                             {"endpoint", b.endpoint},
                             {"model", b.model},
                             {"credential_env", b.credential_env},
                             {"tokens_per_minute", b.tokens_per_minute},
                             {"max_in_flight", b.max_in_flight},
                             {"temperature", b.temperature},
                             {"max_retries", b.max_retries},
                             {"backoff_seconds", b.backoff_seconds},
                             {"context_tokens", b.context_tokens},
                             {"timeout_seconds", b.timeout_seconds}});
  }
  j["pairings"] = ordered_json::array();
  for (const auto& p : pairings) {
    j["pairings"].push_back({{"name", p.name}, {"manipulator", p.manipulator}, {"analyzer", p.analyzer}});
  }
  j["attack"] = {{"max_attempts", attack.max_attempts}, {"top_k", attack.top_k},
                 {"reprompt_note", attack.reprompt_note}, {"context_budget", context_budget},
                 {"workers", workers},                   {"count_aborted", count_aborted}};
  j["mock_scenario"] = mock_scenario ? json(mock_scenario->string()) : json(nullptr);
  j["defense"] = {{"per_pairing", defense.per_pairing}, {"mode", defense_mode}};
  j["output"] = output.string();
  return j.dump(2);
}

void apply_overrides(RunConfig& config, const CliOverrides& o) {
  if (o.out) config.output = *o.out;
  if (o.seed) {
    config.seeds = {*o.seed, *o.seed, *o.seed, *o.seed};
    config.training.seed = *o.seed;
    config.defense.seed = *o.seed;
  }
  if (o.detector) config.detectors = {*o.detector};
  if (o.manipulator || o.analyzer) {
    PairingConfig p = config.pairings.empty() ? PairingConfig{} : config.pairings.front();
    if (o.manipulator) p.manipulator = *o.manipulator;
    if (o.analyzer) p.analyzer = *o.analyzer;
    p.name = p.manipulator + "--" + p.analyzer;
    config.pairings = {p};
  }
  if (o.mock_scenario) config.mock_scenario = *o.mock_scenario;
  if (o.max_attempts) config.attack.max_attempts = *o.max_attempts;
}

// ---------------------------------------------------------------------------
// Building blocks

std::vector<Sample> load_split(const fs::path& run_dir, const std::vector<Sample>& dataset, std::string_view part) {
  const auto path = run_dir / "split" / (std::string(part) + ".txt");
  if (!fs::exists(path)) fail(ErrorCode::kIo, "no split at " + path.string() + "; run train first");
  std::map<std::string_view, const Sample*> by_id;
  for (const auto& s : dataset) by_id.emplace(s.id, &s);
  std::vector<Sample> out;
  for (const auto& id : read_id_list(path)) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) fail(ErrorCode::kMalformedInput, "split lists unknown sample " + id);
    out.push_back(*it->second);
  }
  return out;
}

void save_detector(const fs::path& dir, DetectorKind kind, const TrainedDetector& detector) {
  const std::string name(to_string(kind));
  text::write_file_atomic(dir / (name + ".vocab"), detector.vocabulary->serialize());
  text::write_file_atomic(dir / (name + ".json"), detector.model.serialize());
}

TrainedDetector load_detector(const fs::path& run_dir, DetectorKind kind) {
  const std::string name(to_string(kind));
  const auto dir = run_dir / "models";
  if (!fs::exists(dir / (name + ".json"))) {
    fail(ErrorCode::kIo, "no trained " + name + " model in " + dir.string() + "; run train first");
  }
  TrainedDetector d{std::make_shared<const FeatureVocabulary>(
                        FeatureVocabulary::parse(text::read_file(dir / (name + ".vocab")))),
                    DetectorModel::parse(text::read_file(dir / (name + ".json")))};
  if (d.model.kind() != kind) fail(ErrorCode::kMalformedInput, "model file " + name + ".json holds another kind");
  return d;
}

LinearSurrogate linear_surrogate(const TrainedDetector& svm) {
  if (svm.model.kind() != DetectorKind::kSvm || svm.model.projection()) {
    fail(ErrorCode::kInvalidArgument, "a linear surrogate needs an unprojected svm");
  }
  const auto& p = std::get<SvmParameters>(svm.model.parameters());
  if (p.weights.size() != svm.vocabulary->dimension()) {
    fail(ErrorCode::kMalformedInput, "svm weights do not match its vocabulary");
  }
  return {svm.vocabulary, p.weights, p.bias};
}

RagSetup build_rag(const RunConfig& config) {
  RagSetup r;
  if (config.embedding.type == "hashing") {
    r.provider = std::make_unique<HashingEmbeddingProvider>(config.embedding.seed, config.embedding.dimension);
  } else if (config.embedding.type == "service-tcp") {
    r.provider = std::make_unique<ServiceEmbeddingProvider>(
        make_tcp_transport(config.embedding.host, config.embedding.port));
  } else {
    r.provider = std::make_unique<ServiceEmbeddingProvider>(make_subprocess_transport(config.embedding.command));
  }
  const auto documents = load_corpus(config.corpus);
  if (documents.empty()) fail(ErrorCode::kConfigInvalid, "corpus " + config.corpus.string() + " is empty");
  r.index = std::make_unique<ChunkIndex>(ChunkIndex::build(chunk_corpus(documents), *r.provider));
  r.engine = std::make_unique<RagEngine>(*r.index, *r.provider, config.attack.top_k, config.context_budget);
  return r;
}

AgentFactory make_agents(const RunConfig& config, const PairingConfig& pairing,
                         const std::optional<LinearSurrogate>& surrogate, Clock& clock) {
  const auto all = with_builtins(config.backends);
  std::map<std::string, std::shared_ptr<RateLimiter>> limiters;
  auto make = [&](const std::string& name) {
    const auto* d = find_backend(all, name);
    if (!d) fail(ErrorCode::kConfigInvalid, "unknown backend " + name);
    std::shared_ptr<Backend> backend;
    if (d->type == "http") {
      backend = std::make_shared<HttpBackend>(*d);
    } else if (d->type == "echo") {
      backend = std::make_shared<EchoBackend>();
    } else if (d->type == "greedy-linear" || d->type == "surrogate-linear") {
      if (!surrogate) fail(ErrorCode::kConfigInvalid, "backend " + name + " needs a trained svm");
      if (d->type == "greedy-linear") {
        backend = std::make_shared<GreedyLinearBackend>(*surrogate);
      } else {
        backend = std::make_shared<SurrogateLinearBackend>(*surrogate);
      }
    } else {
      fail(ErrorCode::kConfigInvalid, "backend " + name + " has unsupported type " + d->type);
    }
    std::shared_ptr<RateLimiter> limiter;
    if (d->tokens_per_minute > 0) {
      auto& slot = limiters[d->name];
      if (!slot) slot = std::make_shared<RateLimiter>(d->tokens_per_minute, clock);
      limiter = slot;
    }
    return std::make_shared<AgentInvoker>(*d, backend, clock, limiter);
  };
  // Every backend type here is stateless per request, so one invoker per
  // role serves the whole campaign and bounds its concurrency.
  auto manipulator = make(pairing.manipulator);
  auto analyzer = make(pairing.analyzer);
  return [manipulator, analyzer](AgentRole role) {
    return role == AgentRole::kManipulator ? manipulator : analyzer;
  };
}

std::vector<PairingCampaign> load_campaigns(const fs::path& run_dir, DetectorKind kind) {
  const auto base = run_dir / "attack" / std::string(to_string(kind));
  if (!fs::is_directory(base)) {
    fail(ErrorCode::kIo, "no attack results for " + std::string(to_string(kind)) + "; run attack first");
  }
  const auto detector = load_detector(run_dir, kind);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(base)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<PairingCampaign> out;
  for (const auto& dir : dirs) {
    PairingCampaign c;
    c.pairing = dir.filename().string();
    const auto table = text::read_file(dir / "results.csv");
    const auto lines = text::split_lines(table);
    char name[32];
    std::size_t i = 0;
    for (std::size_t l = 1; l < lines.size(); ++l) {
      if (text::trim(lines[l]).empty()) continue;
      const auto comma = lines[l].find(',');
      EpisodeOutcome ep;
      ep.sample_id = std::string(lines[l].substr(0, comma));
      std::snprintf(name, sizeof name, "%05zu.jsonl", i++);
      ep.trace = AttackTrace::parse(text::read_file(dir / "traces" / name));
      if (ep.trace.outcome == Outcome::kEvaded) {
        ep.detector = finalize(ep.trace, *detector.vocabulary, detector.model);
      }
      c.episodes.push_back(std::move(ep));
    }
    out.push_back(std::move(c));
  }
  if (out.empty()) fail(ErrorCode::kIo, "no attack campaigns under " + base.string());
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_train(const RunConfig& config) {
  config.validate();
  const auto dataset = load_dataset(config.dataset);
  auto extra = base_manifest(config);
  extra["dataset_fingerprint"] = dataset_fingerprint(dataset);
  ManifestWriter manifest(config.output, "train", extra);

  const auto split = split_dataset(dataset, config.split_fraction, config.seeds.split);
  text::write_file_atomic(config.output / "split" / "train.txt", id_list(split.train));
  text::write_file_atomic(config.output / "split" / "test.txt", id_list(split.test));
  for (auto kind : config.detectors) {
    const auto dim = kind == DetectorKind::kNn ? config.projection_dim : 0;
    const auto detector = train_detector(split.train, kind, config.training, dim, config.seeds.train);
    save_detector(config.output / "models", kind, detector);
  }
  manifest.complete();
}

void cmd_eval(const RunConfig& config) {
  config.validate();
  const auto dataset = load_dataset(config.dataset);
  auto extra = base_manifest(config);
  extra["dataset_fingerprint"] = dataset_fingerprint(dataset);
  const auto test = load_split(config.output, dataset, "test");
  std::vector<TrainedDetector> detectors;
  for (auto kind : config.detectors) detectors.push_back(load_detector(config.output, kind));
  ManifestWriter manifest(config.output, "eval", extra);

  std::string table = "detector,tp,fp,tn,fn,tpr,fpr,accuracy,f1\n";
  for (std::size_t i = 0; i < detectors.size(); ++i) {
    const auto c = evaluate_detector(detectors[i], test);
    const auto r = rates(c);
    table += std::string(to_string(config.detectors[i])) + "," + std::to_string(c.tp) + "," + std::to_string(c.fp) +
             "," + std::to_string(c.tn) + "," + std::to_string(c.fn) + "," + format_double(r.tpr) + "," +
             format_double(r.fpr) + "," + format_double(r.acc) + "," + format_double(r.f1) + "\n";
  }
  text::write_file_atomic(config.output / "eval" / "metrics.csv", table);
  manifest.complete();
}

namespace {

std::vector<EpisodeOutcome> scenario_campaign(const std::vector<std::pair<fs::path, Scenario>>& scenarios,
                                              const RagEngine& rag, const TrainedDetector& detector) {
  std::vector<EpisodeOutcome> out;
  for (const auto& [path, s] : scenarios) {
    SimulatedClock clock;
    EpisodeOutcome ep;
    ep.sample_id = s.name;
    ep.trace = run_scenario(s, rag, clock);
    if (ep.trace.outcome == Outcome::kEvaded) ep.detector = finalize(ep.trace, *detector.vocabulary, detector.model);
    out.push_back(std::move(ep));
  }
  return out;
}

std::vector<std::pair<fs::path, Scenario>> scenarios_at(const fs::path& p) {
  if (fs::is_directory(p)) return load_scenarios(p);
  return {{p, load_scenario(p)}};
}

}  // namespace

void cmd_attack(const RunConfig& config) {
  config.validate();
  const auto dataset = load_dataset(config.dataset);
  const auto test = load_split(config.output, dataset, "test");
  std::map<DetectorKind, TrainedDetector> detectors;
  for (auto kind : config.detectors) detectors.emplace(kind, load_detector(config.output, kind));
  std::optional<LinearSurrogate> surrogate;
  if (!config.mock_scenario && needs_surrogate(config)) {
    surrogate = linear_surrogate(load_detector(config.output, DetectorKind::kSvm));
  }
  const auto rag = build_rag(config);
  std::vector<std::pair<fs::path, Scenario>> scenarios;
  if (config.mock_scenario) scenarios = scenarios_at(*config.mock_scenario);

  auto extra = base_manifest(config);
  extra["dataset_fingerprint"] = dataset_fingerprint(dataset);
  extra["embedding_fingerprint"] = rag.provider->fingerprint();
  extra["index_fingerprint"] = text::digest(rag.index->serialize());
  extra["index_chunks"] = rag.index->size();
  ManifestWriter manifest(config.output, "attack", extra);

  SystemClock clock;
  for (auto kind : config.detectors) {
    const auto& detector = detectors.at(kind);
    const auto base = config.output / "attack" / std::string(to_string(kind));
    if (config.mock_scenario) {
      std::size_t max_attempts = config.attack.max_attempts;
      for (const auto& [_, s] : scenarios) max_attempts = std::max(max_attempts, s.max_attempts);
      const auto episodes = scenario_campaign(scenarios, *rag.engine, detector);
      write_campaign(base / "scripted", episodes, summarize_campaign(episodes, max_attempts, config.count_aborted));
      continue;
    }
    const auto population = select_attack_population(detector, test);
    for (const auto& pairing : config.pairings) {
      const auto agents = make_agents(config, pairing, surrogate, clock);
      const auto episodes = run_campaign(population, agents, *rag.engine, config.attack, *detector.vocabulary,
                                         detector.model, {config.workers});
      write_campaign(base / pairing.name, episodes,
                     summarize_campaign(episodes, config.attack.max_attempts, config.count_aborted));
    }
  }
  manifest.complete();
}

void cmd_defend(const RunConfig& config) {
  config.validate();
  const auto dataset = load_dataset(config.dataset);
  const auto train = load_split(config.output, dataset, "train");
  const auto test = load_split(config.output, dataset, "test");

  struct Job {
    DetectorKind kind;
    TrainedDetector before;
    std::vector<PairingCampaign> campaigns;
  };
  std::vector<Job> jobs;
  for (auto kind : config.detectors) {
    jobs.push_back({kind, load_detector(config.output, kind), load_campaigns(config.output, kind)});
  }
  std::optional<RagSetup> rag;
  std::optional<LinearSurrogate> surrogate;
  if (config.defense_mode == "reattack") {
    rag = build_rag(config);
    if (needs_surrogate(config)) surrogate = linear_surrogate(load_detector(config.output, DetectorKind::kSvm));
  }

  auto extra = base_manifest(config);
  extra["dataset_fingerprint"] = dataset_fingerprint(dataset);
  ManifestWriter manifest(config.output, "defend", extra);

  SystemClock clock;
  for (const auto& job : jobs) {
    const std::string name(to_string(job.kind));
    const auto dir = config.output / "defend" / name;
    const auto augmentation = sample_adversarial(job.campaigns, config.defense);
    const auto dim = job.kind == DetectorKind::kNn ? config.projection_dim : 0;
    const auto after = retrain_with_augmentation(train, augmentation.examples, job.kind, config.training, dim,
                                                 config.seeds.train);
    save_detector(dir / "models", job.kind, after);

    std::string aug = "pairing,taken,shortfall\n";
    for (const auto& c : job.campaigns) {
      const auto t = augmentation.taken.find(c.pairing);
      const auto s = augmentation.shortfall.find(c.pairing);
      aug += c.pairing + "," + std::to_string(t == augmentation.taken.end() ? 0 : t->second) + "," +
             std::to_string(s == augmentation.shortfall.end() ? 0 : s->second) + "\n";
    }
    text::write_file_atomic(dir / "augmentation.csv", aug);

    DefenseReport report;
    if (config.defense_mode == "replay") {
      report = evaluate_defense(name, job.before, after, job.campaigns, config.count_aborted);
    } else {
      // The attacked population is rebuilt from the recorded ids.
      std::map<std::string_view, const Sample*> by_id;
      for (const auto& s : test) by_id.emplace(s.id, &s);
      std::vector<Sample> population;
      for (const auto& ep : job.campaigns.front().episodes) {
        const auto it = by_id.find(ep.sample_id);
        if (it == by_id.end()) fail(ErrorCode::kMalformedInput, "attacked sample " + ep.sample_id + " not in test split");
        population.push_back(*it->second);
      }
      std::map<std::string, AgentFactory> agents;
      for (const auto& p : config.pairings) agents.emplace(p.name, make_agents(config, p, surrogate, clock));
      report = reattack_defense(name, job.before, after, job.campaigns, population, agents, *rag->engine,
                                config.attack, {config.workers}, config.count_aborted);
    }
    text::write_file_atomic(dir / "report.csv", report.table());
  }
  manifest.complete();
}

void cmd_report(const fs::path& run_dir) {
  // Everything is computed in memory first so a failure leaves no files.
  std::map<std::string, std::string> outputs;

  const auto metrics = run_dir / "eval" / "metrics.csv";
  if (fs::exists(metrics)) outputs["detectors.csv"] = text::read_file(metrics);

  const auto attack = run_dir / "attack";
  if (fs::is_directory(attack)) {
    std::vector<fs::path> dirs;
    for (const auto& det : fs::directory_iterator(attack)) {
      if (!det.is_directory()) continue;
      for (const auto& p : fs::directory_iterator(det.path())) {
        if (p.is_directory() && fs::exists(p.path() / "summary.txt")) dirs.push_back(p.path());
      }
    }
    std::sort(dirs.begin(), dirs.end());
    if (!dirs.empty()) {
      std::string summary = "detector,pairing,attacked,evaded,aborted,asr,mean_attempts,max_attempts\n";
      std::string histogram = "detector,pairing,attempts,count\n";
      for (const auto& dir : dirs) {
        const auto det = dir.parent_path().filename().string();
        const auto pairing = dir.filename().string();
        auto kv = parse_key_values(text::read_file(dir / "summary.txt"));
        for (const auto* key : {"attacked", "evaded", "aborted", "asr", "mean_attempts", "max_attempts"}) {
          if (!kv.count(key)) fail(ErrorCode::kMalformedInput, (dir / "summary.txt").string() + " lacks " + key);
        }
        summary += det + "," + pairing + "," + kv["attacked"] + "," + kv["evaded"] + "," + kv["aborted"] + "," +
                   kv["asr"] + "," + kv["mean_attempts"] + "," + kv["max_attempts"] + "\n";
        const auto hist = text::read_file(dir / "histogram.csv");
        const auto rows = text::split_lines(hist);
        for (std::size_t i = 1; i < rows.size(); ++i) {
          if (!text::trim(rows[i]).empty()) histogram += det + "," + pairing + "," + std::string(rows[i]) + "\n";
        }
      }
      outputs["attack_summary.csv"] = summary;
      outputs["attempts_histogram.csv"] = histogram;
    }
  }

  const auto defend = run_dir / "defend";
  if (fs::is_directory(defend)) {
    std::vector<fs::path> reports;
    for (const auto& det : fs::directory_iterator(defend)) {
      if (det.is_directory() && fs::exists(det.path() / "report.csv")) reports.push_back(det.path() / "report.csv");
    }
    std::sort(reports.begin(), reports.end());
    if (!reports.empty()) {
      std::string table = "detector,pairing,asr_before,asr_after,delta\n";
      for (const auto& r : reports) {
        const auto content = text::read_file(r);
        const auto rows = text::split_lines(content);
        for (std::size_t i = 1; i < rows.size(); ++i) {
          if (!text::trim(rows[i]).empty()) table += std::string(rows[i]) + "\n";
        }
      }
      outputs["defense.csv"] = table;
    }
  }

  if (outputs.empty()) {
    fail(ErrorCode::kIo, "nothing to report in " + run_dir.string() + " (no eval, attack or defend results)");
  }
  for (const auto& [name, content] : outputs) text::write_file_atomic(run_dir / "report" / name, content);
}

}  // namespace droidlab
