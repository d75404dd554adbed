#pragma once

// The three target classifiers: a linear SVM, a gradient-boosted tree
// ensemble with logistic loss, and a ReLU multilayer perceptron trained with
// Adam. All of them expose the same predict() contract through DetectorModel.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "droidlab/features.hpp"
#include "droidlab/projection.hpp"

namespace droidlab {

enum class DetectorKind : std::uint8_t { kSvm, kGbt, kNn };

std::string_view to_string(DetectorKind kind);
std::optional<DetectorKind> parse_detector_kind(std::string_view text);

struct TrainingConfig {
  std::uint64_t seed = 1;

  // Neural network.
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::vector<std::size_t> hidden_layers{240, 120, 60};

  // Gradient-boosted trees.
  std::size_t trees = 100;
  std::size_t tree_depth = 4;
  double gbt_learning_rate = 0.1;
  double leaf_l2 = 1.0;
  double min_child_hessian = 1e-3;

  // Linear SVM.
  std::size_t svm_epochs = 50;
  double svm_lambda = 1.0;
  double svm_learning_rate = 0.05;

  void validate() const;
};

/// Row-major inputs with one label per row.
struct TrainingSet {
  std::vector<std::vector<double>> inputs;
  std::vector<Label> labels;

  std::size_t size() const noexcept { return inputs.size(); }
  /// Checks non-emptiness, equal lengths, uniform dimension and that both
  /// labels occur; returns the dimension.
  std::size_t validate() const;
};

struct SvmParameters {
  std::vector<double> weights;
  double bias = 0.0;
  double lambda = 1.0;
};

struct RegressionTree {
  struct Node {
    std::int32_t feature = -1;  // -1 marks a leaf
    double threshold = 0.0;     // x[feature] <= threshold goes left
    std::int32_t left = -1;
    std::int32_t right = -1;
    double value = 0.0;  // leaf contribution, shrinkage already applied
  };
  std::vector<Node> nodes;  // nodes[0] is the root

  double evaluate(std::span<const double> x) const;
  std::size_t depth() const;
};

struct TreeEnsembleParameters {
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;

  /// Sum of leaf contributions; the score is its sigmoid.
  double raw_score(std::span<const double> x) const;
};

struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weights;  // outputs x inputs, row-major
  std::vector<double> bias;
};

struct MlpParameters {
  std::vector<DenseLayer> layers;  // ReLU between layers, sigmoid on the last

  /// Pre-sigmoid output.
  double logit(std::span<const double> x) const;
  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().inputs; }
};

struct Prediction {
  Label label = Label::kBenign;
  /// Signed margin for svm, probability of malicious for gbt and nn.
  double score = 0.0;
};

class DetectorModel {
 public:
  using Parameters = std::variant<SvmParameters, TreeEnsembleParameters, MlpParameters>;

  DetectorModel(DetectorKind kind, std::size_t input_dim, std::uint64_t seed, Parameters params);

  DetectorKind kind() const noexcept { return kind_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Parameters& parameters() const noexcept { return params_; }

  /// Projection applied to binary vectors before predict(), if any.
  const std::optional<ProjectionSpec>& projection() const noexcept { return projection_; }
  void set_projection(std::optional<ProjectionSpec> spec) { projection_ = std::move(spec); }

  double training_accuracy() const noexcept { return training_accuracy_; }
  void set_training_accuracy(double acc) { training_accuracy_ = acc; }

  /// Malicious iff margin > 0 (svm) or score > 0.5 (gbt, nn).
  Prediction predict(std::span<const double> x) const;
  /// Encodes a binary vector, projecting it when the model requires it.
  Prediction predict(const BinaryFeatureVector& v) const;

  std::string serialize() const;
  static DetectorModel parse(std::string_view text);

 private:
  DetectorKind kind_;
  std::size_t input_dim_;
  std::uint64_t seed_;
  Parameters params_;
  std::optional<ProjectionSpec> projection_;
  double training_accuracy_ = 0.0;
};

/// Trains a model; identical (set, config) yields identical parameters.
DetectorModel train(DetectorKind kind, const TrainingSet& set, const TrainingConfig& config);

double sigmoid(double z);

// ---------------------------------------------------------------------------
// Training internals, exposed for verification.

namespace training {

/// Nonzero entries of one row.
struct SparseRow {
  std::vector<std::uint32_t> index;
  std::vector<double> value;
};

std::vector<SparseRow> to_sparse(const std::vector<std::vector<double>>& rows);

/// Sum of hinge losses plus lambda * |w|^2.
double svm_objective(const SvmParameters& p, std::span<const SparseRow> rows,
                     std::span<const Label> labels);
double svm_hinge_loss(const SvmParameters& p, std::span<const SparseRow> rows,
                      std::span<const Label> labels);

/// Trains with per-sample subgradient steps on hinge_i + (lambda/n)|w|^2,
/// visiting samples in a seeded order each epoch and keeping the epoch-end
/// iterate with the lowest objective.
SvmParameters svm_train(std::span<const SparseRow> rows, std::span<const Label> labels,
                        std::size_t dim, const TrainingConfig& config);

/// Fits one regression tree to the Newton step of the logistic loss at the
/// current raw scores and adds its output to those scores.
RegressionTree gbt_fit_round(std::span<const SparseRow> rows, std::span<const Label> labels,
                             std::vector<double>& raw_scores, const TrainingConfig& config);

/// Mean logistic loss at the given raw scores.
double logistic_loss(std::span<const double> raw_scores, std::span<const Label> labels);

/// Split gain of the Newton criterion with L2 leaf regularisation.
double split_gain(double g_left, double h_left, double g_right, double h_right, double l2);

MlpParameters mlp_init(std::size_t input_dim, std::span<const std::size_t> hidden,
                       std::uint64_t seed);

/// Mean binary cross-entropy of the batch and its gradient with respect to
/// every weight and bias (same shapes as the parameters).
double mlp_loss_and_gradient(const MlpParameters& p,
                             std::span<const std::vector<double>> inputs,
                             std::span<const Label> labels, MlpParameters* gradient);

struct AdamState {
  MlpParameters first_moment;
  MlpParameters second_moment;
  std::uint64_t step = 0;

  explicit AdamState(const MlpParameters& shape);
};

/// One Adam update on a mini-batch; returns the pre-update batch loss.
double nn_adam_step(MlpParameters& p, AdamState& state,
                    std::span<const std::vector<double>> inputs, std::span<const Label> labels,
                    const TrainingConfig& config);

}  // namespace training

}  // namespace droidlab
