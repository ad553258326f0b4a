#include "protofed/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "protofed/errors.hpp"
#include "protofed/rng.hpp"

namespace protofed {

ParamSet::ParamSet(const ModelSpec& spec) {
  if (spec.input_dim == 0 || spec.num_classes == 0) throw ShapeError("ModelSpec has a zero dimension");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < spec.num_layers(); ++i) {
    Layer l{spec.layer_out(i), spec.layer_in(i), offset};
    if (l.out == 0) throw ShapeError("hidden layer " + std::to_string(i) + " has zero width");
    layers_.push_back(l);
    offset += l.out * l.in + l.out;
  }
  values_.assign(offset, 0.0);
}

ParamSet ParamSet::glorot(const ModelSpec& spec, std::uint64_t seed) {
  ParamSet p(spec);
  Rng rng(derive_seed(seed, {kStreamInit}));
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    const double fan = static_cast<double>(p.layer_in(i) + p.layer_out(i));
    const double limit = std::sqrt(6.0 / fan);
    std::uniform_real_distribution<double> dist(-limit, limit);
    auto w = p.weight(i);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
  }
  return p;
}

ParamSet::MatrixMap ParamSet::weight(std::size_t i) {
  const auto& l = layers_.at(i);
  return MatrixMap(values_.data() + l.offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
}

ParamSet::ConstMatrixMap ParamSet::weight(std::size_t i) const {
  const auto& l = layers_.at(i);
  return ConstMatrixMap(values_.data() + l.offset, static_cast<Eigen::Index>(l.out),
                        static_cast<Eigen::Index>(l.in));
}

ParamSet::VectorMap ParamSet::bias(std::size_t i) {
  const auto& l = layers_.at(i);
  return VectorMap(values_.data() + l.offset + l.out * l.in, static_cast<Eigen::Index>(l.out));
}

ParamSet::ConstVectorMap ParamSet::bias(std::size_t i) const {
  const auto& l = layers_.at(i);
  return ConstVectorMap(values_.data() + l.offset + l.out * l.in, static_cast<Eigen::Index>(l.out));
}

bool ParamSet::matches(const ModelSpec& spec) const {
  if (layers_.size() != spec.num_layers()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].in != spec.layer_in(i) || layers_[i].out != spec.layer_out(i)) return false;
  return true;
}

bool ParamSet::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

ParamSet& ParamSet::operator+=(const ParamSet& other) { return axpy(1.0, other); }

ParamSet& ParamSet::operator-=(const ParamSet& other) { return axpy(-1.0, other); }

ParamSet& ParamSet::operator*=(double s) {
  for (auto& v : values_) v *= s;
  return *this;
}

ParamSet& ParamSet::axpy(double a, const ParamSet& x) {
  if (!same_shape(x)) throw ShapeError("ParamSet shapes differ");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += a * x.values_[i];
  return *this;
}

double ParamSet::squared_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return s;
}

namespace {

void check_params(const ParamSet& params, const ModelSpec& spec) {
  if (!params.matches(spec)) throw ShapeError("ParamSet does not match ModelSpec");
}

// Pre-activations z[l] and post-activations h[l] for every layer of a batch.
// The last layer has no activation, so h.back() aliases nothing and is unused.
struct Trace {
  std::vector<Matrix> z;
  std::vector<Matrix> h;
};

void run_forward(const ParamSet& params, const Matrix& x, Trace& tr) {
  const std::size_t n = params.num_layers();
  tr.z.resize(n);
  tr.h.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    const Matrix& in = l == 0 ? x : tr.h[l - 1];
    tr.z[l].noalias() = in * params.weight(l).transpose();
    tr.z[l].rowwise() += params.bias(l).transpose();
    if (l + 1 < n) tr.h[l] = tr.z[l].cwiseMax(0.0);
  }
}

// Row-wise log-softmax cross-entropy; writes dL/dz (unscaled) into `dz`.
double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix& dz) {
  const Eigen::Index b = logits.rows();
  const Eigen::Index c = logits.cols();
  dz.resize(b, c);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw UsageError("label " + std::to_string(y) + " out of range");
    const double m = logits.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index j = 0; j < c; ++j) {
      const double e = std::exp(logits(i, j) - m);
      dz(i, j) = e;
      s += e;
    }
    total += std::log(s) + m - logits(i, y);
    dz.row(i) /= s;
    dz(i, y) -= 1.0;
  }
  return total;
}

LossAndGrad backprop(const ParamSet& params, const Matrix& x, std::span<const int> labels) {
  Trace tr;
  run_forward(params, x, tr);
  const auto b = static_cast<double>(x.rows());
  Matrix dz;
  const double total = softmax_xent(tr.z.back(), labels, dz);
  dz /= b;

  LossAndGrad out{total / b, Gradient(params)};
  const std::size_t n = params.num_layers();
  for (std::size_t li = n; li-- > 0;) {
    const Matrix& in = li == 0 ? x : tr.h[li - 1];
    out.grad.weight(li).noalias() = dz.transpose() * in;
    out.grad.bias(li) = dz.colwise().sum().transpose();
    if (li > 0) {
      Matrix dh = dz * params.weight(li);
      dz = (tr.z[li - 1].array() > 0.0).select(dh, 0.0);
    }
  }
  return out;
}

}  // namespace

Matrix stack_inputs(std::span<const Sample> samples) {
  if (samples.empty()) return {};
  const auto d = static_cast<Eigen::Index>(samples.front().x.size());
  Matrix x(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (static_cast<Eigen::Index>(samples[i].x.size()) != d) throw ShapeError("ragged sample dimensions");
    x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(samples[i].x.data(), d);
  }
  return x;
}

ForwardResult forward(const ParamSet& params, const ModelSpec& spec, std::span<const double> x) {
  check_params(params, spec);
  if (x.size() != spec.input_dim)
    throw ShapeError("input has length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(spec.input_dim));
  Matrix in = Eigen::Map<const Eigen::RowVectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  Trace tr;
  run_forward(params, in, tr);
  ForwardResult r;
  r.logits = tr.z.back().row(0).transpose();
  const std::size_t f = spec.feature_layer_index();
  r.embedding = (f + 1 < params.num_layers() ? tr.h[f] : tr.z[f].cwiseMax(0.0)).row(0).transpose();
  return r;
}

Matrix forward_logits(const ParamSet& params, const ModelSpec& spec, const Matrix& x) {
  check_params(params, spec);
  if (x.cols() != static_cast<Eigen::Index>(spec.input_dim)) throw ShapeError("input width mismatch");
  Trace tr;
  run_forward(params, x, tr);
  return std::move(tr.z.back());
}

Matrix forward_embeddings(const ParamSet& params, const ModelSpec& spec, const Matrix& x) {
  check_params(params, spec);
  if (x.cols() != static_cast<Eigen::Index>(spec.input_dim)) throw ShapeError("input width mismatch");
  const std::size_t f = spec.feature_layer_index();
  Matrix h = x;
  for (std::size_t l = 0; l <= f; ++l) {
    Matrix z = h * params.weight(l).transpose();
    z.rowwise() += params.bias(l).transpose();
    h = z.cwiseMax(0.0);
  }
  return h;
}

LossAndGrad loss_and_grad(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> batch) {
  if (batch.empty()) throw UsageError("loss_and_grad: empty batch");
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), 0);
  return loss_and_grad(params, spec, batch, idx);
}

LossAndGrad loss_and_grad(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> samples,
                          std::span<const std::size_t> indices) {
  check_params(params, spec);
  if (indices.empty()) throw UsageError("loss_and_grad: empty batch");
  const auto d = static_cast<Eigen::Index>(spec.input_dim);
  Matrix x(static_cast<Eigen::Index>(indices.size()), d);
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples[indices[i]];
    if (static_cast<Eigen::Index>(s.x.size()) != d) throw ShapeError("sample has wrong input dimension");
    x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(s.x.data(), d);
    labels[i] = s.label;
  }
  return backprop(params, x, labels);
}

double mean_loss(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> samples) {
  if (samples.empty()) throw UsageError("mean_loss: no samples");
  const Matrix logits = forward_logits(params, spec, stack_inputs(samples));
  std::vector<int> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = samples[i].label;
  Matrix scratch;
  return softmax_xent(logits, labels, scratch) / static_cast<double>(samples.size());
}

void sgd_step_inplace(ParamSet& params, const Gradient& grad, double lr, const std::optional<Proximal>& proximal) {
  if (!params.same_shape(grad)) throw ShapeError("gradient shape differs from parameters");
  auto p = params.values();
  auto g = grad.values();
  if (proximal && proximal->mu != 0.0) {
    if (proximal->anchor == nullptr || !params.same_shape(*proximal->anchor))
      throw ShapeError("proximal anchor shape differs from parameters");
    auto a = proximal->anchor->values();
    const double mu = proximal->mu;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (g[i] + mu * (p[i] - a[i]));
  } else {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
}

ParamSet sgd_step(const ParamSet& params, const Gradient& grad, double lr, const std::optional<Proximal>& proximal) {
  ParamSet out = params;
  sgd_step_inplace(out, grad, lr, proximal);
  return out;
}

ParamSet local_train(ParamSet params, const ModelSpec& spec, std::span<const Sample> train, const TrainOptions& opts,
                     std::uint64_t seed) {
  if (opts.epochs == 0) return params;
  if (train.empty()) throw UsageError("local_train: empty training split");
  if (opts.batch_size == 0) throw UsageError("local_train: batch_size must be positive");
  if (!(opts.lr > 0.0)) throw UsageError("local_train: lr must be positive");
  check_params(params, spec);

  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {opts.first_epoch + e}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t len = std::min(opts.batch_size, order.size() - start);
      const auto lg = loss_and_grad(params, spec, train, std::span<const std::size_t>(order).subspan(start, len));
      sgd_step_inplace(params, lg.grad, opts.lr, opts.proximal);
    }
  }
  return params;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (out[i] = std::exp(logits[i] - m));
  for (auto& v : out) v /= s;
  return out;
}

}  // namespace protofed
