#include "droidlab/features.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include "droidlab/error.hpp"
#include "droidlab/text.hpp"

namespace droidlab {

namespace {

struct CategoryInfo {
  Category category;
  std::string_view token;
  std::string_view name;
};

constexpr std::array<CategoryInfo, kCategoryCount> kCategories{{
    {Category::kApiCall, "api_call", "suspicious API calls"},
    {Category::kComponent, "component", "application components"},
    {Category::kHardware, "hardware", "hardware components"},
    {Category::kIntent, "intent", "filtered intents"},
    {Category::kPermission, "permission", "requested permissions"},
    {Category::kRestrictedApi, "restricted_api", "restricted API calls"},
    {Category::kUrl, "url", "network addresses"},
    {Category::kUsedPermission, "used_permission", "used permissions"},
}};

constexpr std::array<Category, kCategoryCount> kCategoryList{
    Category::kApiCall,    Category::kComponent,     Category::kHardware, Category::kIntent,
    Category::kPermission, Category::kRestrictedApi, Category::kUrl,      Category::kUsedPermission,
};

[[noreturn]] void malformed_line(std::size_t line_no, const std::string& what) {
  fail(ErrorCode::kMalformedInput, "line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

std::string_view category_token(Category category) {
  return kCategories[static_cast<std::size_t>(category)].token;
}

std::string_view category_name(Category category) {
  return kCategories[static_cast<std::size_t>(category)].name;
}

std::optional<Category> parse_category(std::string_view token) {
  for (const auto& info : kCategories) {
    if (info.token == token) return info.category;
  }
  return std::nullopt;
}

std::span<const Category> all_categories() { return kCategoryList; }

std::string_view to_string(Label label) {
  return label == Label::kMalicious ? "malicious" : "benign";
}

std::optional<Label> parse_label(std::string_view text) {
  const std::string lower = text::to_lower(text::trim(text));
  if (lower == "malicious") return Label::kMalicious;
  if (lower == "benign") return Label::kBenign;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

DrebinFeature::DrebinFeature(Category category, std::string value)
    : category_(category), value_(std::move(value)) {
  require(!value_.empty(), "feature value must be non-empty");
  require(value_.find_first_of("\r\n") == std::string::npos,
          "feature value must not contain line breaks");
}

DrebinFeature DrebinFeature::parse(std::string_view text) {
  const auto sep = text.find("::");
  if (sep == std::string_view::npos) {
    fail(ErrorCode::kMalformedInput, "expected category::value, got '" + std::string(text) + "'");
  }
  const auto token = text::trim(text.substr(0, sep));
  const auto category = parse_category(token);
  if (!category) fail(ErrorCode::kMalformedInput, "unknown category '" + std::string(token) + "'");
  const auto value = text::trim(text.substr(sep + 2));
  if (value.empty()) fail(ErrorCode::kMalformedInput, "empty feature value");
  return DrebinFeature(*category, std::string(value));
}

std::string DrebinFeature::to_string() const {
  std::string out(category_token(category_));
  out += "::";
  out += value_;
  return out;
}

std::size_t DrebinFeatureHash::operator()(const DrebinFeature& f) const noexcept {
  return std::hash<std::string>{}(f.value()) * 31u + static_cast<std::size_t>(f.category());
}

// ---------------------------------------------------------------------------

FeatureSet::FeatureSet(std::initializer_list<DrebinFeature> features) {
  for (const auto& f : features) insert(f);
}

FeatureSet::FeatureSet(std::span<const DrebinFeature> features) {
  for (const auto& f : features) insert(f);
}

bool FeatureSet::insert(DrebinFeature feature) {
  if (!index_.insert(feature).second) return false;
  items_.push_back(std::move(feature));
  return true;
}

bool FeatureSet::erase(const DrebinFeature& feature) {
  if (index_.erase(feature) == 0) return false;
  items_.erase(std::find(items_.begin(), items_.end(), feature));
  return true;
}

bool FeatureSet::contains(const DrebinFeature& feature) const {
  return index_.contains(feature);
}

FeatureSet FeatureSet::minus(const FeatureSet& other) const {
  FeatureSet out;
  for (const auto& f : items_) {
    if (!other.contains(f)) out.insert(f);
  }
  return out;
}

FeatureSet FeatureSet::united(const FeatureSet& other) const {
  FeatureSet out = *this;
  for (const auto& f : other) out.insert(f);
  return out;
}

bool FeatureSet::is_subset_of(const FeatureSet& other) const {
  return std::all_of(items_.begin(), items_.end(),
                     [&](const DrebinFeature& f) { return other.contains(f); });
}

bool operator==(const FeatureSet& a, const FeatureSet& b) {
  return a.size() == b.size() && a.is_subset_of(b);
}

std::string to_lines(const FeatureSet& set) {
  std::string out;
  for (const auto& f : set) {
    out += f.to_string();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

LabeledFeatureSet parse_feature_file(std::string_view content) {
  LabeledFeatureSet result;
  bool have_label = false;
  const auto lines = text::split_lines(content);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    const auto line = text::trim(lines[i]);
    if (line.empty() || line.front() == '#') continue;
    if (!have_label) {
      constexpr std::string_view kPrefix = "label:";
      if (!line.starts_with(kPrefix)) {
        fail(ErrorCode::kMalformedInput, "missing 'label:' header (line " +
                                             std::to_string(line_no) + ")");
      }
      const auto label = parse_label(line.substr(kPrefix.size()));
      if (!label) malformed_line(line_no, "label must be benign or malicious");
      result.label = *label;
      have_label = true;
      continue;
    }
    const auto sep = line.find("::");
    if (sep == std::string_view::npos) malformed_line(line_no, "expected category::value");
    const auto token = text::trim(line.substr(0, sep));
    const auto category = parse_category(token);
    if (!category) malformed_line(line_no, "unknown category '" + std::string(token) + "'");
    const auto value = text::trim(line.substr(sep + 2));
    if (value.empty()) malformed_line(line_no, "empty feature value");
    result.features.insert(DrebinFeature(*category, std::string(value)));
  }
  if (!have_label) fail(ErrorCode::kMalformedInput, "missing 'label:' header");
  return result;
}

std::string serialize_feature_file(const FeatureSet& set, Label label) {
  std::string out = "label: ";
  out += to_string(label);
  out += '\n';
  out += to_lines(set);
  return out;
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  const auto manifest = text::read_file(dir / kManifestName);
  std::vector<Sample> samples;
  for (const auto raw : text::split_lines(manifest)) {
    const auto rel = text::trim(raw);
    if (rel.empty() || rel.front() == '#') continue;
    const auto content = text::read_file(dir / std::filesystem::path(std::string(rel)));
    LabeledFeatureSet parsed;
    try {
      parsed = parse_feature_file(content);
    } catch (const Error& e) {
      fail(e.code(), std::string(rel) + ": " + e.what());
    }
    samples.push_back(Sample{std::string(rel), std::move(parsed.features), parsed.label});
  }
  return samples;
}

void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (const auto& s : samples) {
    text::write_file_atomic(dir / s.id, serialize_feature_file(s.features, s.label));
    manifest += s.id;
    manifest += '\n';
  }
  text::write_file_atomic(dir / kManifestName, manifest);
}

// ---------------------------------------------------------------------------

FeatureVocabulary::FeatureVocabulary(std::vector<DrebinFeature> features)
    : features_(std::move(features)) {
  std::sort(features_.begin(), features_.end());
  require(std::adjacent_find(features_.begin(), features_.end()) == features_.end(),
          "vocabulary features must be distinct");
  lookup_.reserve(features_.size());
  for (std::uint32_t i = 0; i < features_.size(); ++i) lookup_.emplace(features_[i], i);
}

std::optional<std::uint32_t> FeatureVocabulary::index_of(const DrebinFeature& f) const {
  const auto it = lookup_.find(f);
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::string FeatureVocabulary::serialize() const {
  std::string out;
  for (const auto& f : features_) {
    out += f.to_string();
    out += '\n';
  }
  return out;
}

FeatureVocabulary FeatureVocabulary::parse(std::string_view content) {
  std::vector<DrebinFeature> features;
  for (const auto line : text::split_lines(content)) {
    if (text::trim(line).empty()) continue;
    features.push_back(DrebinFeature::parse(line));
  }
  return FeatureVocabulary(std::move(features));
}

FeatureVocabulary build_vocabulary(std::span<const FeatureSet> corpus) {
  require(!corpus.empty(), "vocabulary corpus must be non-empty");
  std::unordered_set<DrebinFeature, DrebinFeatureHash> seen;
  std::vector<DrebinFeature> distinct;
  for (const auto& set : corpus) {
    for (const auto& f : set) {
      if (seen.insert(f).second) distinct.push_back(f);
    }
  }
  return FeatureVocabulary(std::move(distinct));
}

std::vector<double> BinaryFeatureVector::to_dense() const {
  std::vector<double> dense(dimension, 0.0);
  for (auto i : active) dense[i] = 1.0;
  return dense;
}

EncodeResult encode(const FeatureSet& set, const FeatureVocabulary& vocab) {
  EncodeResult result;
  result.vector.dimension = vocab.dimension();
  for (const auto& f : set) {
    if (auto idx = vocab.index_of(f)) {
      result.vector.active.push_back(*idx);
    } else {
      ++result.dropped;
    }
  }
  std::sort(result.vector.active.begin(), result.vector.active.end());
  return result;
}

// ---------------------------------------------------------------------------

std::optional<std::string> api_class_of(std::string_view signature) {
  // Argument lists may contain dotted type names, so only look before '('.
  const auto head = signature.substr(0, signature.find('('));
  const auto dot = head.rfind('.');
  if (dot == std::string_view::npos || dot == 0) return std::nullopt;
  return std::string(head.substr(0, dot));
}

std::vector<FeatureGroup> group_by_class(const FeatureSet& set) {
  std::vector<FeatureGroup> groups;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& f : set) {
    std::optional<std::string> key;
    if (f.category() == Category::kApiCall || f.category() == Category::kRestrictedApi) {
      key = api_class_of(f.value());
    }
    if (!key) key = std::string(category_name(f.category()));
    auto [it, fresh] = slot.emplace(*key, groups.size());
    if (fresh) groups.push_back(FeatureGroup{*key, {}});
    groups[it->second].features.insert(f);
  }
  return groups;
}

}  // namespace droidlab
