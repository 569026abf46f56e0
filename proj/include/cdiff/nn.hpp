#pragma once

/**
 * @file nn.hpp
 * @brief Small multilayer perceptron with hand-written backpropagation and Adam.
 *
 * Parameters live in one flat vector. Layer l contributes its weight matrix
 * (out x in, row-major) followed by its bias vector, so the flat vector is
 * also the on-disk order of a checkpoint. Hidden layers use the configured
 * activation; the output layer is affine.
 */

#include "cdiff/core.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

namespace cdiff {

enum class Activation { tanh, relu };

inline std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation activation_from_string(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw RejectedInput("unknown activation '" + std::string(s) + "'");
}

class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialised network.
  Mlp(std::vector<int> layer_dims, Activation hidden = Activation::tanh)
      : dims_(std::move(layer_dims)), act_(hidden) {
    require(dims_.size() >= 2, "Mlp needs at least an input and an output layer");
    for (int d : dims_) require(d > 0, "Mlp layer dimensions must be positive");
    offsets_.reserve(dims_.size());
    Index off = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      offsets_.push_back(off);
      off += Index(dims_[l + 1]) * dims_[l] + dims_[l + 1];
    }
    params_ = Vec::Zero(off);
  }

  /// Uniform init in +-sqrt(6/(fan_in+fan_out)), zero biases.
  static Mlp glorot(std::vector<int> layer_dims, Activation hidden, Rng& rng) {
    Mlp net(std::move(layer_dims), hidden);
    for (Index l = 0; l < net.num_layers(); ++l) {
      auto w = net.weight(l);
      const double lim = std::sqrt(6.0 / double(w.rows() + w.cols()));
      std::uniform_real_distribution<double> dist(-lim, lim);
      for (Index r = 0; r < w.rows(); ++r)
        for (Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
    }
    return net;
  }

  const std::vector<int>& layer_dims() const { return dims_; }
  Activation activation() const { return act_; }
  Index num_layers() const { return Index(dims_.size()) - 1; }
  Index input_dim() const { return dims_.front(); }
  Index output_dim() const { return dims_.back(); }
  Index num_parameters() const { return params_.size(); }

  Vec& parameters() { return params_; }
  const Vec& parameters() const { return params_; }

  Eigen::Map<RowMat> weight(Index l) {
    return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<const RowMat> weight(Index l) const {
    return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<Vec> bias(Index l) {
    return {params_.data() + offsets_[l] + Index(dims_[l + 1]) * dims_[l], dims_[l + 1]};
  }
  Eigen::Map<const Vec> bias(Index l) const {
    return {params_.data() + offsets_[l] + Index(dims_[l + 1]) * dims_[l], dims_[l + 1]};
  }

  /// Column-batched forward pass: each column of `inputs` is one sample.
  Mat forward_batch(const Mat& inputs) const {
    require_dim(input_dim(), inputs.rows(), "mlp_forward input");
    Mat a = inputs;
    for (Index l = 0; l < num_layers(); ++l) {
      Mat z = weight(l) * a;
      z.colwise() += bias(l);
      a = (l + 1 < num_layers()) ? activate(z) : std::move(z);
    }
    return a;
  }

  Vec forward(const Vec& input) const {
    require_dim(input_dim(), input.size(), "mlp_forward input");
    Vec a = input;
    for (Index l = 0; l < num_layers(); ++l) {
      Vec z = weight(l) * a + bias(l);
      a = (l + 1 < num_layers()) ? Vec(activate(z)) : std::move(z);
    }
    return a;
  }

  template <typename Derived>
  Mat activate(const Eigen::MatrixBase<Derived>& z) const {
    if (act_ == Activation::tanh) return z.array().tanh().matrix();
    return z.array().max(0.0).matrix();
  }

  /// Derivative of the activation given pre-activation z and output a.
  Mat activation_derivative(const Mat& z, const Mat& a) const {
    if (act_ == Activation::tanh) return (1.0 - a.array().square()).matrix();
    return (z.array() > 0.0).cast<double>().matrix();
  }

 private:
  std::vector<int> dims_;
  Activation act_ = Activation::tanh;
  std::vector<Index> offsets_;
  Vec params_;
};

/// Parameter gradient (flat, same layout as Mlp::parameters) plus input gradient.
struct MlpGradients {
  Vec params;
  Vec input;
};

/// Gradients for a batch: parameter gradient summed over samples, one input
/// gradient column per sample.
struct MlpBatchGradients {
  Vec params;
  Mat inputs;
};

inline Vec mlp_forward(const Mlp& net, const Vec& input) { return net.forward(input); }

inline MlpBatchGradients mlp_backward_batch(const Mlp& net, const Mat& inputs, const Mat& output_grads) {
  require_dim(net.input_dim(), inputs.rows(), "mlp_backward input");
  require_dim(net.output_dim(), output_grads.rows(), "mlp_backward output_grad");
  require_dim(inputs.cols(), output_grads.cols(), "mlp_backward batch size");

  const Index L = net.num_layers();
  std::vector<Mat> pre(L), post(L + 1);
  post[0] = inputs;
  for (Index l = 0; l < L; ++l) {
    pre[l] = net.weight(l) * post[l];
    pre[l].colwise() += net.bias(l);
    post[l + 1] = (l + 1 < L) ? net.activate(pre[l]) : pre[l];
  }

  Mlp shape = net;  // reuse the layout for the gradient buffer
  shape.parameters().setZero();
  Mat delta = output_grads;
  for (Index l = L - 1; l >= 0; --l) {
    shape.weight(l).noalias() = delta * post[l].transpose();
    shape.bias(l) = delta.rowwise().sum();
    Mat back = net.weight(l).transpose() * delta;
    if (l > 0) back.array() *= net.activation_derivative(pre[l - 1], post[l]).array();
    delta = std::move(back);
  }
  return {std::move(shape.parameters()), std::move(delta)};
}

inline MlpGradients mlp_backward(const Mlp& net, const Vec& input, const Vec& output_grad) {
  auto g = mlp_backward_batch(net, Mat(input), Mat(output_grad));
  return {std::move(g.params), g.inputs.col(0)};
}

struct AdamState {
  Vec first_moment;
  Vec second_moment;
  std::int64_t step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(Index n, double lr = 1e-3)
      : first_moment(Vec::Zero(n)), second_moment(Vec::Zero(n)), learning_rate(lr) {}
};

/// One bias-corrected Adam update, in place.
inline void adam_step(Vec& params, const Vec& grads, AdamState& st) {
  require_dim(params.size(), grads.size(), "adam_step gradient");
  require_dim(params.size(), st.first_moment.size(), "adam_step state");
  require_finite(grads, "adam_step gradient");
  require(st.learning_rate > 0 && st.beta1 > 0 && st.beta2 > 0 && st.epsilon > 0,
          "adam hyper-parameters must be positive");
  ++st.step_count;
  st.first_moment = st.beta1 * st.first_moment + (1.0 - st.beta1) * grads;
  st.second_moment = st.beta2 * st.second_moment + (1.0 - st.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(st.beta1, double(st.step_count));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.step_count));
  params.array() -= st.learning_rate * (st.first_moment.array() / c1) /
                    ((st.second_moment.array() / c2).sqrt() + st.epsilon);
}

struct RegressionConfig {
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-3;
  /// Learning rate decays geometrically to lr * final_lr_fraction at the last epoch.
  double final_lr_fraction = 1.0;
};

/// Minimise mean squared error of net(inputs) against targets (one sample per
/// column). Returns the training loss of every epoch.
inline std::vector<double> fit_regression(Mlp& net, const Mat& inputs, const Mat& targets,
                                          const RegressionConfig& cfg, Rng& rng) {
  require_dim(net.input_dim(), inputs.rows(), "fit_regression inputs");
  require_dim(net.output_dim(), targets.rows(), "fit_regression targets");
  require_dim(inputs.cols(), targets.cols(), "fit_regression sample count");
  require(inputs.cols() > 0, "fit_regression needs at least one sample");
  require(cfg.batch_size > 0, "batch_size must be positive");

  AdamState adam(net.num_parameters(), cfg.learning_rate);
  const double decay = cfg.epochs > 1 ? std::pow(cfg.final_lr_fraction, 1.0 / (cfg.epochs - 1)) : 1.0;
  std::vector<Index> order(inputs.cols());
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<double> history;
  history.reserve(cfg.epochs);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (Index start = 0; start < Index(order.size()); start += cfg.batch_size) {
      const Index n = std::min<Index>(cfg.batch_size, Index(order.size()) - start);
      Mat x(inputs.rows(), n), y(targets.rows(), n);
      for (Index k = 0; k < n; ++k) {
        x.col(k) = inputs.col(order[start + k]);
        y.col(k) = targets.col(order[start + k]);
      }
      Mat resid = net.forward_batch(x) - y;
      total += resid.squaredNorm();
      Mat grad_out = (2.0 / double(n * targets.rows())) * resid;
      adam_step(net.parameters(), mlp_backward_batch(net, x, grad_out).params, adam);
    }
    history.push_back(total / double(inputs.cols() * targets.rows()));
    adam.learning_rate *= decay;
  }
  return history;
}

}  // namespace cdiff
