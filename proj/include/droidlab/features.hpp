#pragma once

// Drebin feature model: features, insertion-ordered feature sets, the on-disk
// feature-file grammar, vocabulary encoding and class-level grouping.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace droidlab {

// Enumerators are declared in the lexicographic order of their file tokens so
// that the derived ordering of features is lexicographic by category token.
enum class Category : std::uint8_t {
  kApiCall,         // suspicious API calls
  kComponent,       // application components
  kHardware,        // hardware components
  kIntent,          // filtered intents
  kPermission,      // requested permissions
  kRestrictedApi,   // restricted API calls
  kUrl,             // network addresses
  kUsedPermission,  // used permissions
};

inline constexpr std::size_t kCategoryCount = 8;

/// Token used in feature files, e.g. "permission".
std::string_view category_token(Category category);
/// Human-readable category name, e.g. "requested permissions".
std::string_view category_name(Category category);
std::optional<Category> parse_category(std::string_view token);
std::span<const Category> all_categories();

enum class Label : std::uint8_t { kBenign = 0, kMalicious = 1 };

std::string_view to_string(Label label);
std::optional<Label> parse_label(std::string_view text);

class DrebinFeature {
 public:
  /// Throws kInvalidArgument on an empty value or one containing a line break.
  DrebinFeature(Category category, std::string value);

  /// Parses "category::value"; throws kMalformedInput on bad input.
  static DrebinFeature parse(std::string_view text);

  Category category() const noexcept { return category_; }
  const std::string& value() const noexcept { return value_; }

  /// "category::value"
  std::string to_string() const;

  friend bool operator==(const DrebinFeature&, const DrebinFeature&) = default;
  friend auto operator<=>(const DrebinFeature&, const DrebinFeature&) = default;

 private:
  Category category_;
  std::string value_;
};

struct DrebinFeatureHash {
  std::size_t operator()(const DrebinFeature& f) const noexcept;
};

/// Duplicate-free collection of features that iterates in insertion order.
class FeatureSet {
 public:
  using const_iterator = std::vector<DrebinFeature>::const_iterator;

  FeatureSet() = default;
  FeatureSet(std::initializer_list<DrebinFeature> features);
  explicit FeatureSet(std::span<const DrebinFeature> features);

  /// Returns false when the feature was already present.
  bool insert(DrebinFeature feature);
  /// Order-preserving removal; returns false when absent.
  bool erase(const DrebinFeature& feature);
  bool contains(const DrebinFeature& feature) const;

  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const_iterator begin() const noexcept { return items_.begin(); }
  const_iterator end() const noexcept { return items_.end(); }
  const DrebinFeature& operator[](std::size_t i) const { return items_[i]; }
  std::span<const DrebinFeature> items() const noexcept { return items_; }

  /// Elements of *this not in other, in this set's order.
  FeatureSet minus(const FeatureSet& other) const;
  /// Elements of *this followed by the new elements of other.
  FeatureSet united(const FeatureSet& other) const;
  bool is_subset_of(const FeatureSet& other) const;

  /// Set equality; ignores order.
  friend bool operator==(const FeatureSet& a, const FeatureSet& b);

 private:
  std::vector<DrebinFeature> items_;
  std::unordered_set<DrebinFeature, DrebinFeatureHash> index_;
};

/// One feature per line as "category::value".
std::string to_lines(const FeatureSet& set);

struct LabeledFeatureSet {
  FeatureSet features;
  Label label = Label::kBenign;
};

/// Parses the feature-file grammar: a `label: benign|malicious` header, then
/// one `category::value` per non-empty line. `#` lines are comments.
LabeledFeatureSet parse_feature_file(std::string_view text);
std::string serialize_feature_file(const FeatureSet& set, Label label);

// ---------------------------------------------------------------------------
// Datasets: a directory of feature files plus manifest.txt listing their
// relative paths, one per line.

struct Sample {
  std::string id;  // relative path inside the dataset directory
  FeatureSet features;
  Label label = Label::kBenign;
};

inline constexpr std::string_view kManifestName = "manifest.txt";

std::vector<Sample> load_dataset(const std::filesystem::path& dir);
void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples);

// ---------------------------------------------------------------------------
// Vocabulary and binary encoding.

class FeatureVocabulary {
 public:
  /// Features must be distinct; they are indexed in sorted order.
  explicit FeatureVocabulary(std::vector<DrebinFeature> features);

  std::size_t dimension() const noexcept { return features_.size(); }
  std::optional<std::uint32_t> index_of(const DrebinFeature& f) const;
  const DrebinFeature& feature_at(std::uint32_t index) const { return features_.at(index); }
  std::span<const DrebinFeature> features() const noexcept { return features_; }

  /// One feature per line in index order.
  std::string serialize() const;
  static FeatureVocabulary parse(std::string_view text);

 private:
  std::vector<DrebinFeature> features_;
  std::unordered_map<DrebinFeature, std::uint32_t, DrebinFeatureHash> lookup_;
};

/// Indexes every distinct feature of the corpus, sorted by category then value.
FeatureVocabulary build_vocabulary(std::span<const FeatureSet> corpus);

struct BinaryFeatureVector {
  std::size_t dimension = 0;
  std::vector<std::uint32_t> active;  // strictly increasing, each < dimension

  std::vector<double> to_dense() const;
  friend bool operator==(const BinaryFeatureVector&, const BinaryFeatureVector&) = default;
};

struct EncodeResult {
  BinaryFeatureVector vector;
  std::size_t dropped = 0;  // out-of-vocabulary features
};

EncodeResult encode(const FeatureSet& set, const FeatureVocabulary& vocab);

// ---------------------------------------------------------------------------
// Grouping used to build retrieval queries.

struct FeatureGroup {
  std::string key;
  FeatureSet features;
};

/// API calls group under their defining class, everything else under its
/// category name. Groups appear in order of first member occurrence.
std::vector<FeatureGroup> group_by_class(const FeatureSet& set);

/// Class part of an API signature, or nullopt when it has no '.' before the
/// member name.
std::optional<std::string> api_class_of(std::string_view signature);

}  // namespace droidlab
