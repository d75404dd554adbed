#include "droidlab/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "droidlab/error.hpp"
#include "droidlab/rng.hpp"

namespace droidlab {

using nlohmann::json;

std::string_view to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::kSvm: return "svm";
    case DetectorKind::kGbt: return "gbt";
    case DetectorKind::kNn: return "nn";
  }
  return "?";
}

std::optional<DetectorKind> parse_detector_kind(std::string_view text) {
  if (text == "svm") return DetectorKind::kSvm;
  if (text == "gbt") return DetectorKind::kGbt;
  if (text == "nn") return DetectorKind::kNn;
  return std::nullopt;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void TrainingConfig::validate() const {
  require(epochs > 0 && batch_size > 0, "epochs and batch size must be positive");
  require(learning_rate > 0 && adam_epsilon > 0, "learning rate and epsilon must be positive");
  require(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1,
          "Adam moment parameters must lie in (0, 1)");
  require(trees > 0 && tree_depth > 0 && gbt_learning_rate > 0, "GBT settings must be positive");
  require(leaf_l2 >= 0 && min_child_hessian >= 0, "GBT regularisation must be non-negative");
  require(svm_epochs > 0 && svm_lambda > 0 && svm_learning_rate > 0,
          "SVM settings must be positive");
  for (auto h : hidden_layers) require(h > 0, "hidden layer sizes must be positive");
}

std::size_t TrainingSet::validate() const {
  require(!inputs.empty(), "training set is empty");
  require(inputs.size() == labels.size(), "inputs and labels differ in length");
  const std::size_t dim = inputs.front().size();
  require(dim > 0, "training inputs have zero dimension");
  for (const auto& row : inputs) {
    require(row.size() == dim, "training inputs have inconsistent dimensionality");
  }
  const bool has_malicious = std::find(labels.begin(), labels.end(), Label::kMalicious) != labels.end();
  const bool has_benign = std::find(labels.begin(), labels.end(), Label::kBenign) != labels.end();
  require(has_malicious && has_benign, "training set must contain both labels");
  return dim;
}

namespace {

double target(Label label) { return label == Label::kMalicious ? 1.0 : 0.0; }
double sign(Label label) { return label == Label::kMalicious ? 1.0 : -1.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Model evaluation.

double RegressionTree::evaluate(std::span<const double> x) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left
                                                                                        : n.right);
  }
  return nodes[i].value;
}

std::size_t RegressionTree::depth() const {
  std::vector<std::pair<std::int32_t, std::size_t>> stack{{0, 0}};
  std::size_t deepest = 0;
  while (!stack.empty()) {
    auto [i, d] = stack.back();
    stack.pop_back();
    deepest = std::max(deepest, d);
    const auto& n = nodes[static_cast<std::size_t>(i)];
    if (n.feature >= 0) {
      stack.push_back({n.left, d + 1});
      stack.push_back({n.right, d + 1});
    }
  }
  return deepest;
}

double TreeEnsembleParameters::raw_score(std::span<const double> x) const {
  double sum = 0.0;
  for (const auto& t : trees) sum += t.evaluate(x);
  return sum;
}

namespace {

void dense_forward(const DenseLayer& layer, std::span<const double> in, std::vector<double>& out) {
  out.assign(layer.outputs, 0.0);
  for (std::size_t o = 0; o < layer.outputs; ++o) {
    const double* w = layer.weights.data() + o * layer.inputs;
    double acc = layer.bias[o];
    for (std::size_t i = 0; i < layer.inputs; ++i) acc += w[i] * in[i];
    out[o] = acc;
  }
}

}  // namespace

double MlpParameters::logit(std::span<const double> x) const {
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    dense_forward(layers[l], cur, next);
    if (l + 1 < layers.size()) {
      for (auto& v : next) v = std::max(v, 0.0);
    }
    cur.swap(next);
  }
  return cur.front();
}

DetectorModel::DetectorModel(DetectorKind kind, std::size_t input_dim, std::uint64_t seed,
                             Parameters params)
    : kind_(kind), input_dim_(input_dim), seed_(seed), params_(std::move(params)) {
  const bool matches = (kind == DetectorKind::kSvm && std::holds_alternative<SvmParameters>(params_)) ||
                       (kind == DetectorKind::kGbt && std::holds_alternative<TreeEnsembleParameters>(params_)) ||
                       (kind == DetectorKind::kNn && std::holds_alternative<MlpParameters>(params_));
  require(matches, "detector kind does not match its parameters");
  if (const auto* svm = std::get_if<SvmParameters>(&params_)) {
    require(svm->weights.size() == input_dim, "svm weight vector has wrong dimension");
  }
  if (const auto* gbt = std::get_if<TreeEnsembleParameters>(&params_)) {
    for (const auto& t : gbt->trees) {
      require(!t.nodes.empty(), "empty regression tree");
      for (const auto& n : t.nodes) {
        require(n.feature < static_cast<std::int32_t>(input_dim), "tree split index out of range");
        if (n.feature >= 0) {
          require(n.left > 0 && n.right > 0 &&
                      static_cast<std::size_t>(std::max(n.left, n.right)) < t.nodes.size(),
                  "tree child index out of range");
        }
      }
    }
  }
  if (const auto* mlp = std::get_if<MlpParameters>(&params_)) {
    require(!mlp->layers.empty(), "network has no layers");
    std::size_t width = input_dim;
    for (const auto& layer : mlp->layers) {
      require(layer.inputs == width, "network layer shapes do not chain");
      require(layer.weights.size() == layer.inputs * layer.outputs && layer.bias.size() == layer.outputs,
              "network layer has inconsistent parameter sizes");
      width = layer.outputs;
    }
    require(width == 1, "network must end in a single output");
  }
}

Prediction DetectorModel::predict(std::span<const double> x) const {
  if (x.size() != input_dim_) {
    fail(ErrorCode::kInvalidArgument, "input has dimension " + std::to_string(x.size()) +
                                          ", model expects " + std::to_string(input_dim_));
  }
  Prediction p;
  switch (kind_) {
    case DetectorKind::kSvm: {
      const auto& svm = std::get<SvmParameters>(params_);
      p.score = std::inner_product(x.begin(), x.end(), svm.weights.begin(), svm.bias);
      p.label = p.score > 0.0 ? Label::kMalicious : Label::kBenign;
      return p;
    }
    case DetectorKind::kGbt:
      p.score = sigmoid(std::get<TreeEnsembleParameters>(params_).raw_score(x));
      break;
    case DetectorKind::kNn:
      p.score = sigmoid(std::get<MlpParameters>(params_).logit(x));
      break;
  }
  p.label = p.score > 0.5 ? Label::kMalicious : Label::kBenign;
  return p;
}

Prediction DetectorModel::predict(const BinaryFeatureVector& v) const {
  if (projection_) return predict(project(v, *projection_));
  if (v.dimension != input_dim_) {
    fail(ErrorCode::kInvalidArgument, "binary vector has dimension " + std::to_string(v.dimension) +
                                          ", model expects " + std::to_string(input_dim_));
  }
  return predict(v.to_dense());
}

// ---------------------------------------------------------------------------
// Serialization. Doubles go through JSON's shortest round-trip form, which
// reproduces every finite value bit for bit.

namespace {

constexpr std::string_view kModelFormat = "droidlab-model";
constexpr int kModelVersion = 1;

json layer_to_json(const DenseLayer& l) {
  return json{{"inputs", l.inputs}, {"outputs", l.outputs}, {"weights", l.weights}, {"bias", l.bias}};
}

DenseLayer layer_from_json(const json& j) {
  DenseLayer l;
  l.inputs = j.at("inputs").get<std::size_t>();
  l.outputs = j.at("outputs").get<std::size_t>();
  l.weights = j.at("weights").get<std::vector<double>>();
  l.bias = j.at("bias").get<std::vector<double>>();
  return l;
}

}  // namespace

std::string DetectorModel::serialize() const {
  json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  j["kind"] = to_string(kind_);
  j["input_dim"] = input_dim_;
  j["seed"] = seed_;
  j["training_accuracy"] = training_accuracy_;
  if (projection_) {
    j["projection"] = {{"seed", projection_->seed},
                       {"input_dim", projection_->input_dim},
                       {"output_dim", projection_->output_dim},
                       {"density", projection_->density}};
  }
  json params;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SvmParameters>) {
          params = {{"weights", p.weights}, {"bias", p.bias}, {"lambda", p.lambda}};
        } else if constexpr (std::is_same_v<T, TreeEnsembleParameters>) {
          json trees = json::array();
          for (const auto& t : p.trees) {
            json nodes = json::array();
            for (const auto& n : t.nodes) {
              nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
            }
            trees.push_back(std::move(nodes));
          }
          params = {{"learning_rate", p.learning_rate}, {"trees", std::move(trees)}};
        } else {
          json layers = json::array();
          for (const auto& l : p.layers) layers.push_back(layer_to_json(l));
          params = {{"layers", std::move(layers)}};
        }
      },
      params_);
  j["parameters"] = std::move(params);
  return j.dump() + "\n";
}

DetectorModel DetectorModel::parse(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedInput, std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kModelFormat) {
      fail(ErrorCode::kMalformedInput, "not a droidlab model file");
    }
    if (j.at("version").get<int>() != kModelVersion) {
      fail(ErrorCode::kMalformedInput, "unsupported model version " + j.at("version").dump());
    }
    const auto kind = parse_detector_kind(j.at("kind").get<std::string>());
    if (!kind) fail(ErrorCode::kMalformedInput, "unknown detector kind");
    const auto input_dim = j.at("input_dim").get<std::size_t>();
    const auto seed = j.at("seed").get<std::uint64_t>();
    const auto& pj = j.at("parameters");
    Parameters params;
    switch (*kind) {
      case DetectorKind::kSvm: {
        SvmParameters p;
        p.weights = pj.at("weights").get<std::vector<double>>();
        p.bias = pj.at("bias").get<double>();
        p.lambda = pj.at("lambda").get<double>();
        params = std::move(p);
        break;
      }
      case DetectorKind::kGbt: {
        TreeEnsembleParameters p;
        p.learning_rate = pj.at("learning_rate").get<double>();
        for (const auto& tj : pj.at("trees")) {
          RegressionTree t;
          for (const auto& nj : tj) {
            t.nodes.push_back({nj.at(0).get<std::int32_t>(), nj.at(1).get<double>(),
                               nj.at(2).get<std::int32_t>(), nj.at(3).get<std::int32_t>(),
                               nj.at(4).get<double>()});
          }
          p.trees.push_back(std::move(t));
        }
        params = std::move(p);
        break;
      }
      case DetectorKind::kNn: {
        MlpParameters p;
        for (const auto& lj : pj.at("layers")) p.layers.push_back(layer_from_json(lj));
        params = std::move(p);
        break;
      }
    }
    DetectorModel model(*kind, input_dim, seed, std::move(params));
    model.set_training_accuracy(j.value("training_accuracy", 0.0));
    if (j.contains("projection")) {
      const auto& prj = j.at("projection");
      model.set_projection(ProjectionSpec{prj.at("seed").get<std::uint64_t>(),
                                          prj.at("input_dim").get<std::size_t>(),
                                          prj.at("output_dim").get<std::size_t>(),
                                          prj.at("density").get<double>()});
    }
    return model;
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedInput, std::string("model file is incomplete: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training.

namespace training {

std::vector<SparseRow> to_sparse(const std::vector<std::vector<double>>& rows) {
  std::vector<SparseRow> out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      if (rows[r][i] != 0.0) {
        out[r].index.push_back(static_cast<std::uint32_t>(i));
        out[r].value.push_back(rows[r][i]);
      }
    }
  }
  return out;
}

namespace {

double sparse_dot(const SparseRow& row, std::span<const double> w) {
  double acc = 0.0;
  for (std::size_t k = 0; k < row.index.size(); ++k) acc += row.value[k] * w[row.index[k]];
  return acc;
}

}  // namespace

double svm_hinge_loss(const SvmParameters& p, std::span<const SparseRow> rows,
                      std::span<const Label> labels) {
  double loss = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double margin = sign(labels[i]) * (sparse_dot(rows[i], p.weights) + p.bias);
    // NaN margins must poison the loss rather than vanish inside max().
    loss += std::isnan(margin) ? margin : std::max(0.0, 1.0 - margin);
  }
  return loss;
}

double svm_objective(const SvmParameters& p, std::span<const SparseRow> rows,
                     std::span<const Label> labels) {
  double norm2 = 0.0;
  for (double w : p.weights) norm2 += w * w;
  return svm_hinge_loss(p, rows, labels) + p.lambda * norm2;
}

SvmParameters svm_train(std::span<const SparseRow> rows, std::span<const Label> labels,
                        std::size_t dim, const TrainingConfig& config) {
  const std::size_t n = rows.size();
  const double lambda = config.svm_lambda;
  // w = scale * v keeps the dense shrink step O(1).
  std::vector<double> v(dim, 0.0);
  double scale = 1.0;
  double bias = 0.0;

  auto snapshot = [&] {
    SvmParameters p;
    p.weights.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) p.weights[i] = scale * v[i];
    p.bias = bias;
    p.lambda = lambda;
    return p;
  };

  SvmParameters best = snapshot();
  double best_objective = svm_objective(best, rows, labels);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t t = 0;
  for (std::size_t epoch = 0; epoch < config.svm_epochs; ++epoch) {
    Rng rng(mix_keys(config.seed, 0x5356u, epoch));
    rng.shuffle(order);
    for (const std::size_t i : order) {
      const double eta = config.svm_learning_rate / (1.0 + static_cast<double>(t) / static_cast<double>(n));
      ++t;
      const double y = sign(labels[i]);
      const double margin = y * (scale * sparse_dot(rows[i], v) + bias);
      const double shrink = 1.0 - eta * 2.0 * lambda / static_cast<double>(n);
      if (shrink <= 0.0) {
        std::fill(v.begin(), v.end(), 0.0);
        scale = 1.0;
      } else {
        scale *= shrink;
      }
      if (margin < 1.0) {
        const double step = eta * y / scale;
        for (std::size_t k = 0; k < rows[i].index.size(); ++k) {
          v[rows[i].index[k]] += step * rows[i].value[k];
        }
        bias += eta * y;
      }
      if (scale < 1e-9) {
        for (auto& x : v) x *= scale;
        scale = 1.0;
      }
    }
    SvmParameters current = snapshot();
    const double objective = svm_objective(current, rows, labels);
    if (!std::isfinite(objective)) {
      fail(ErrorCode::kTrainingDiverged, "svm objective is not finite at epoch " + std::to_string(epoch + 1));
    }
    if (objective < best_objective) {
      best_objective = objective;
      best = std::move(current);
    }
  }
  return best;
}

double split_gain(double g_left, double h_left, double g_right, double h_right, double l2) {
  const double g = g_left + g_right;
  const double h = h_left + h_right;
  return g_left * g_left / (h_left + l2) + g_right * g_right / (h_right + l2) - g * g / (h + l2);
}

double logistic_loss(std::span<const double> raw_scores, std::span<const Label> labels) {
  double loss = 0.0;
  for (std::size_t i = 0; i < raw_scores.size(); ++i) {
    const double z = raw_scores[i];
    // log(1 + e^z) - y z, evaluated stably.
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += softplus - target(labels[i]) * z;
  }
  return loss / static_cast<double>(raw_scores.size());
}

namespace {

struct SplitChoice {
  std::int32_t feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

struct Entry {
  double value;
  double g;
  double h;
};

class TreeBuilder {
 public:
  TreeBuilder(std::span<const SparseRow> rows, std::span<const double> grad,
              std::span<const double> hess, const TrainingConfig& config)
      : rows_(rows), grad_(grad), hess_(hess), config_(config) {}

  RegressionTree build() {
    std::vector<std::size_t> all(rows_.size());
    std::iota(all.begin(), all.end(), 0);
    tree_.nodes.clear();
    grow(std::move(all), 0);
    return std::move(tree_);
  }

 private:
  std::int32_t grow(std::vector<std::size_t> members, std::size_t depth) {
    const auto id = static_cast<std::int32_t>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    double g = 0.0, h = 0.0;
    for (auto i : members) {
      g += grad_[i];
      h += hess_[i];
    }
    SplitChoice split;
    if (depth < config_.tree_depth && members.size() >= 2) split = best_split(members, g, h);
    if (split.feature < 0) {
      tree_.nodes[static_cast<std::size_t>(id)].value =
          -config_.gbt_learning_rate * g / (h + config_.leaf_l2);
      return id;
    }
    std::vector<std::size_t> left, right;
    for (auto i : members) {
      (value_of(i, static_cast<std::uint32_t>(split.feature)) <= split.threshold ? left : right).push_back(i);
    }
    members.clear();
    members.shrink_to_fit();
    const auto l = grow(std::move(left), depth + 1);
    const auto r = grow(std::move(right), depth + 1);
    auto& node = tree_.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  double value_of(std::size_t row, std::uint32_t feature) const {
    const auto& r = rows_[row];
    const auto it = std::lower_bound(r.index.begin(), r.index.end(), feature);
    if (it == r.index.end() || *it != feature) return 0.0;
    return r.value[static_cast<std::size_t>(it - r.index.begin())];
  }

  // Exact search over all features. Only nonzero entries are visited; the
  // zero-valued members of a feature are accounted for as one group.
  SplitChoice best_split(const std::vector<std::size_t>& members, double g_total, double h_total) {
    std::vector<std::uint32_t> touched;
    for (auto i : members) {
      const auto& r = rows_[i];
      for (std::size_t k = 0; k < r.index.size(); ++k) {
        auto& bucket = buckets_[r.index[k]];
        if (bucket.empty()) touched.push_back(r.index[k]);
        bucket.push_back({r.value[k], grad_[i], hess_[i]});
      }
    }
    std::sort(touched.begin(), touched.end());

    SplitChoice best;
    const double l2 = config_.leaf_l2;
    std::vector<Entry> groups;
    for (const auto feature : touched) {
      auto& bucket = buckets_[feature];
      std::sort(bucket.begin(), bucket.end(), [](const Entry& a, const Entry& b) { return a.value < b.value; });
      double g_nz = 0.0, h_nz = 0.0;
      for (const auto& e : bucket) {
        g_nz += e.g;
        h_nz += e.h;
      }
      const std::size_t zeros = members.size() - bucket.size();
      groups.clear();
      bool zero_placed = zeros == 0;
      for (const auto& e : bucket) {
        if (!zero_placed && e.value > 0.0) {
          groups.push_back({0.0, g_total - g_nz, h_total - h_nz});
          zero_placed = true;
        }
        if (!groups.empty() && groups.back().value == e.value) {
          groups.back().g += e.g;
          groups.back().h += e.h;
        } else {
          groups.push_back(e);
        }
      }
      if (!zero_placed) groups.push_back({0.0, g_total - g_nz, h_total - h_nz});

      double g_left = 0.0, h_left = 0.0;
      for (std::size_t k = 0; k + 1 < groups.size(); ++k) {
        g_left += groups[k].g;
        h_left += groups[k].h;
        const double h_right = h_total - h_left;
        if (h_left < config_.min_child_hessian || h_right < config_.min_child_hessian) continue;
        const double gain = split_gain(g_left, h_left, g_total - g_left, h_right, l2);
        if (gain > best.gain + 1e-12) {
          best.gain = gain;
          best.feature = static_cast<std::int32_t>(feature);
          best.threshold = 0.5 * (groups[k].value + groups[k + 1].value);
        }
      }
      bucket.clear();
    }
    return best;
  }

  std::span<const SparseRow> rows_;
  std::span<const double> grad_;
  std::span<const double> hess_;
  const TrainingConfig& config_;
  RegressionTree tree_;
  std::unordered_map<std::uint32_t, std::vector<Entry>> buckets_;
};

}  // namespace

RegressionTree gbt_fit_round(std::span<const SparseRow> rows, std::span<const Label> labels,
                             std::vector<double>& raw_scores, const TrainingConfig& config) {
  const std::size_t n = rows.size();
  std::vector<double> grad(n), hess(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = sigmoid(raw_scores[i]);
    grad[i] = p - target(labels[i]);
    hess[i] = p * (1.0 - p);
  }
  RegressionTree tree = TreeBuilder(rows, grad, hess, config).build();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t node = 0;
    while (tree.nodes[node].feature >= 0) {
      const auto& nd = tree.nodes[node];
      const auto f = static_cast<std::uint32_t>(nd.feature);
      const auto& r = rows[i];
      const auto it = std::lower_bound(r.index.begin(), r.index.end(), f);
      const double x = (it != r.index.end() && *it == f) ? r.value[static_cast<std::size_t>(it - r.index.begin())] : 0.0;
      node = static_cast<std::size_t>(x <= nd.threshold ? nd.left : nd.right);
    }
    raw_scores[i] += tree.nodes[node].value;
  }
  return tree;
}

MlpParameters mlp_init(std::size_t input_dim, std::span<const std::size_t> hidden, std::uint64_t seed) {
  MlpParameters p;
  Rng rng(mix_keys(seed, 0x4e4eu));
  std::size_t width = input_dim;
  std::vector<std::size_t> widths(hidden.begin(), hidden.end());
  widths.push_back(1);
  for (const auto out : widths) {
    DenseLayer layer;
    layer.inputs = width;
    layer.outputs = out;
    // He-uniform initialisation for the ReLU stack.
    const double bound = std::sqrt(6.0 / static_cast<double>(width));
    layer.weights.resize(width * out);
    for (auto& w : layer.weights) w = rng.uniform(-bound, bound);
    layer.bias.assign(out, 0.0);
    p.layers.push_back(std::move(layer));
    width = out;
  }
  return p;
}

namespace {

MlpParameters zeros_like(const MlpParameters& p) {
  MlpParameters z = p;
  for (auto& l : z.layers) {
    std::fill(l.weights.begin(), l.weights.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return z;
}

}  // namespace

double mlp_loss_and_gradient(const MlpParameters& p, std::span<const std::vector<double>> inputs,
                             std::span<const Label> labels, MlpParameters* gradient) {
  const std::size_t layers = p.layers.size();
  if (gradient) *gradient = zeros_like(p);
  const double inv_batch = 1.0 / static_cast<double>(inputs.size());
  double loss = 0.0;

  // activations[l] is the input to layer l; activations[layers] holds the logit.
  std::vector<std::vector<double>> activations(layers + 1);
  std::vector<double> delta, prev_delta;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    activations[0] = inputs[s];
    for (std::size_t l = 0; l < layers; ++l) {
      dense_forward(p.layers[l], activations[l], activations[l + 1]);
      if (l + 1 < layers) {
        for (auto& v : activations[l + 1]) v = std::max(v, 0.0);
      }
    }
    const double z = activations[layers][0];
    const double y = target(labels[s]);
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += (softplus - y * z) * inv_batch;
    if (!gradient) continue;

    delta.assign(1, (sigmoid(z) - y) * inv_batch);
    for (std::size_t l = layers; l-- > 0;) {
      const auto& layer = p.layers[l];
      auto& g = gradient->layers[l];
      const auto& in = activations[l];
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        g.bias[o] += delta[o];
        double* gw = g.weights.data() + o * layer.inputs;
        for (std::size_t i = 0; i < layer.inputs; ++i) gw[i] += delta[o] * in[i];
      }
      if (l == 0) break;
      prev_delta.assign(layer.inputs, 0.0);
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double* w = layer.weights.data() + o * layer.inputs;
        for (std::size_t i = 0; i < layer.inputs; ++i) prev_delta[i] += w[i] * delta[o];
      }
      // ReLU derivative; activations[l] > 0 exactly where the unit was active.
      for (std::size_t i = 0; i < layer.inputs; ++i) {
        if (in[i] <= 0.0) prev_delta[i] = 0.0;
      }
      delta.swap(prev_delta);
    }
  }
  return loss;
}

AdamState::AdamState(const MlpParameters& shape)
    : first_moment(zeros_like(shape)), second_moment(zeros_like(shape)) {}

double nn_adam_step(MlpParameters& p, AdamState& state, std::span<const std::vector<double>> inputs,
                    std::span<const Label> labels, const TrainingConfig& config) {
  MlpParameters grad;
  const double loss = mlp_loss_and_gradient(p, inputs, labels, &grad);
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto update = [&](std::vector<double>& param, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      param[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_epsilon);
    }
  };
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    update(p.layers[l].weights, grad.layers[l].weights, state.first_moment.layers[l].weights,
           state.second_moment.layers[l].weights);
    update(p.layers[l].bias, grad.layers[l].bias, state.first_moment.layers[l].bias,
           state.second_moment.layers[l].bias);
  }
  return loss;
}

}  // namespace training

// ---------------------------------------------------------------------------

namespace {

double accuracy(const DetectorModel& model, const TrainingSet& set) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (model.predict(set.inputs[i]).label == set.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

MlpParameters train_mlp(const TrainingSet& set, std::size_t dim, const TrainingConfig& config) {
  MlpParameters params = training::mlp_init(dim, config.hidden_layers, config.seed);
  training::AdamState state(params);
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> batch_inputs;
  std::vector<Label> batch_labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(mix_keys(config.seed, 0x5348u, epoch));
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch_inputs.clear();
      batch_labels.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch_inputs.push_back(set.inputs[order[k]]);
        batch_labels.push_back(set.labels[order[k]]);
      }
      epoch_loss += training::nn_adam_step(params, state, batch_inputs, batch_labels, config);
    }
    if (!std::isfinite(epoch_loss)) {
      fail(ErrorCode::kTrainingDiverged, "nn loss is not finite at epoch " + std::to_string(epoch + 1));
    }
  }
  return params;
}

TreeEnsembleParameters train_gbt(const TrainingSet& set, const TrainingConfig& config) {
  const auto rows = training::to_sparse(set.inputs);
  std::vector<double> raw(set.size(), 0.0);
  TreeEnsembleParameters params;
  params.learning_rate = config.gbt_learning_rate;
  for (std::size_t round = 0; round < config.trees; ++round) {
    params.trees.push_back(training::gbt_fit_round(rows, set.labels, raw, config));
    const double loss = training::logistic_loss(raw, set.labels);
    if (!std::isfinite(loss)) {
      fail(ErrorCode::kTrainingDiverged, "gbt loss is not finite at round " + std::to_string(round + 1));
    }
  }
  return params;
}

}  // namespace

DetectorModel train(DetectorKind kind, const TrainingSet& set, const TrainingConfig& config) {
  config.validate();
  const std::size_t dim = set.validate();
  DetectorModel::Parameters params;
  switch (kind) {
    case DetectorKind::kSvm: {
      const auto rows = training::to_sparse(set.inputs);
      params = training::svm_train(rows, set.labels, dim, config);
      break;
    }
    case DetectorKind::kGbt:
      params = train_gbt(set, config);
      break;
    case DetectorKind::kNn:
      params = train_mlp(set, dim, config);
      break;
  }
  DetectorModel model(kind, dim, config.seed, std::move(params));
  model.set_training_accuracy(accuracy(model, set));
  return model;
}

}  // namespace droidlab
