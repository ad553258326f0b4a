#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "protofed/sample.hpp"

namespace protofed {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Architecture of a dense ReLU network with a softmax cross-entropy head.
///
/// The encoder is every layer up to and including the last hidden layer; its
/// post-ReLU output is the embedding. The classifier is the final dense layer.
/// A network without hidden layers uses the ReLU of its only layer's output as
/// the embedding.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t num_classes = 0;

  std::size_t num_layers() const { return hidden_dims.size() + 1; }
  std::size_t feature_layer_index() const { return hidden_dims.empty() ? 0 : hidden_dims.size() - 1; }
  std::size_t embedding_dim() const { return hidden_dims.empty() ? num_classes : hidden_dims.back(); }
  std::size_t layer_in(std::size_t i) const { return i == 0 ? input_dim : hidden_dims[i - 1]; }
  std::size_t layer_out(std::size_t i) const { return i < hidden_dims.size() ? hidden_dims[i] : num_classes; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// All trainable parameters of a ModelSpec network, stored contiguously.
/// Layer i occupies a row-major out x in weight block followed by its bias.
class ParamSet {
 public:
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  ParamSet() = default;
  /// All-zero parameters for `spec`.
  explicit ParamSet(const ModelSpec& spec);

  /// Uniform Glorot initialization, zero biases.
  static ParamSet glorot(const ModelSpec& spec, std::uint64_t seed);

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t total_dim() const { return values_.size(); }
  std::size_t layer_in(std::size_t i) const { return layers_.at(i).in; }
  std::size_t layer_out(std::size_t i) const { return layers_.at(i).out; }

  MatrixMap weight(std::size_t i);
  ConstMatrixMap weight(std::size_t i) const;
  VectorMap bias(std::size_t i);
  ConstVectorMap bias(std::size_t i) const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  bool same_shape(const ParamSet& other) const { return layers_ == other.layers_; }
  bool matches(const ModelSpec& spec) const;
  bool all_finite() const;

  ParamSet& operator+=(const ParamSet& other);
  ParamSet& operator-=(const ParamSet& other);
  ParamSet& operator*=(double s);
  /// this += a * x
  ParamSet& axpy(double a, const ParamSet& x);

  double squared_norm() const;

  friend ParamSet operator+(ParamSet a, const ParamSet& b) { return a += b; }
  friend ParamSet operator-(ParamSet a, const ParamSet& b) { return a -= b; }
  friend ParamSet operator*(double s, ParamSet a) { return a *= s; }
  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  struct Layer {
    std::size_t out = 0;
    std::size_t in = 0;
    std::size_t offset = 0;
    friend bool operator==(const Layer&, const Layer&) = default;
  };

  std::vector<Layer> layers_;
  std::vector<double> values_;
};

/// Gradients share the ParamSet layout.
using Gradient = ParamSet;

struct ForwardResult {
  Vector logits;
  Vector embedding;
};

struct LossAndGrad {
  double loss = 0.0;
  Gradient grad;
};

/// FedProx-style proximal pull toward an anchor: adds mu * (params - anchor)
/// to the gradient.
struct Proximal {
  double mu = 0.0;
  const ParamSet* anchor = nullptr;
};

struct TrainOptions {
  std::size_t epochs = 1;
  double lr = 0.01;
  std::size_t batch_size = 10;
  std::optional<Proximal> proximal;
  /// Index of the first epoch; shuffles are keyed by absolute epoch so that
  /// splitting a schedule across calls reproduces a single long call.
  std::size_t first_epoch = 0;
};

ForwardResult forward(const ParamSet& params, const ModelSpec& spec, std::span<const double> x);

/// Batched forward pass. Row i of `x` is one input.
Matrix forward_logits(const ParamSet& params, const ModelSpec& spec, const Matrix& x);
Matrix forward_embeddings(const ParamSet& params, const ModelSpec& spec, const Matrix& x);

/// Mean softmax cross-entropy over `batch` and its exact gradient.
LossAndGrad loss_and_grad(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> batch);
/// Same, over the subset `samples[indices[i]]`.
LossAndGrad loss_and_grad(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> samples,
                          std::span<const std::size_t> indices);

/// Mean cross-entropy without the gradient.
double mean_loss(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> samples);

ParamSet sgd_step(const ParamSet& params, const Gradient& grad, double lr,
                  const std::optional<Proximal>& proximal = std::nullopt);
void sgd_step_inplace(ParamSet& params, const Gradient& grad, double lr,
                      const std::optional<Proximal>& proximal = std::nullopt);

/// `opts.epochs` passes of shuffled mini-batch SGD over `train`. The final
/// short batch of an epoch is kept.
ParamSet local_train(ParamSet params, const ModelSpec& spec, std::span<const Sample> train,
                     const TrainOptions& opts, std::uint64_t seed);

/// Stacks sample features into a row-per-sample matrix.
Matrix stack_inputs(std::span<const Sample> samples);

std::vector<double> softmax(std::span<const double> logits);

}  // namespace protofed
