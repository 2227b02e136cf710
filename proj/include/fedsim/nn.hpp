#pragma once

#include "fedsim/matrix.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace fedsim::nn {

enum class Activation { relu, sigmoid, tanh };
enum class OutputActivation { identity, sigmoid, softmax };

/// softmax_cross_entropy is fused with a softmax output layer: the gradient
/// returned by loss_and_grad is taken with respect to the pre-softmax logits,
/// and mlp_backward propagates it through a softmax output unchanged.
enum class LossKind { mse, softmax_cross_entropy };

struct MlpSpec {
  std::vector<Index> layer_sizes;  // input, hidden..., output
  Activation hidden = Activation::relu;
  OutputActivation output = OutputActivation::identity;

  Index input_size() const { return layer_sizes.front(); }
  Index output_size() const { return layer_sizes.back(); }
  Index num_layers() const { return static_cast<Index>(layer_sizes.size()) - 1; }
  void validate() const;
};

struct ModelParams {
  std::vector<Matrix> weights;     // weights[l]: layer_sizes[l] x layer_sizes[l+1]
  std::vector<RowVector> biases;   // biases[l]: layer_sizes[l+1]
};
using ParamGrads = ModelParams;

/// Glorot-uniform initialization, deterministic per seed.
ModelParams init_params(const MlpSpec& spec, std::uint64_t seed);
ModelParams zeros_like(const MlpSpec& spec);

Index param_count(const MlpSpec& spec);
Vector flatten(const ParamGrads& grads);
ParamGrads unflatten(const MlpSpec& spec, const Vector& flat);

/// Layer outputs of the forward pass; [0] is the input batch, back() the
/// network output. Kept around for mlp_backward.
using Activations = std::vector<Matrix>;

Activations mlp_forward(const MlpSpec& spec, const ModelParams& params, const Matrix& x);

/// Loss averaged over batch rows n: mse is (1/2n)*sum of squared residuals.
std::pair<double, Matrix> loss_and_grad(LossKind kind, const Matrix& pred, const Matrix& target);

struct BackwardResult {
  ParamGrads grads;
  Matrix dinput;
};

BackwardResult mlp_backward(const MlpSpec& spec, const ModelParams& params,
                            const Activations& acts, const Matrix& dout);

/// Gradient of each row's own loss (batch of one); the mean over rows equals
/// the batch gradient of the mean loss.
std::vector<ParamGrads> per_example_grads(const MlpSpec& spec, const ModelParams& params,
                                          const Matrix& x, const Matrix& targets, LossKind kind);

struct OptimizerState {
  enum class Kind { sgd, adam };
  Kind kind = Kind::sgd;
  double learning_rate = 0.01;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  long step_count = 0;
  // first/second moments, allocated on first adam step
  std::vector<Matrix> m_w, v_w;
  std::vector<RowVector> m_b, v_b;
};

/// sgd: p -= lr * (g + weight_decay * p); adam: bias-corrected update with
/// weight decay folded into the gradient.
void optimizer_step(ModelParams& params, const ParamGrads& grads, OptimizerState& state);

}  // namespace fedsim::nn
