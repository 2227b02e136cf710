#include "fedsim/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace fedsim::nn {

namespace {

Matrix apply_hidden(const Matrix& z, Activation act) {
  switch (act) {
    case Activation::relu:
      return z.cwiseMax(0.0);
    case Activation::sigmoid:
      return ((-z.array()).exp() + 1.0).inverse().matrix();
    case Activation::tanh:
      return z.array().tanh().matrix();
  }
  throw std::logic_error("unreachable activation");
}

// Derivative expressed in terms of the post-activation value.
Matrix hidden_deriv(const Matrix& a, Activation act) {
  switch (act) {
    case Activation::relu:
      return (a.array() > 0.0).cast<double>().matrix();
    case Activation::sigmoid:
      return (a.array() * (1.0 - a.array())).matrix();
    case Activation::tanh:
      return (1.0 - a.array().square()).matrix();
  }
  throw std::logic_error("unreachable activation");
}

Matrix softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    Eigen::ArrayXd shifted = z.row(i).array() - z.row(i).maxCoeff();
    Eigen::ArrayXd e = shifted.exp();
    out.row(i) = (e / e.sum()).matrix().transpose();
  }
  return out;
}

Matrix apply_output(const Matrix& z, OutputActivation act) {
  switch (act) {
    case OutputActivation::identity:
      return z;
    case OutputActivation::sigmoid:
      return ((-z.array()).exp() + 1.0).inverse().matrix();
    case OutputActivation::softmax:
      return softmax_rows(z);
  }
  throw std::logic_error("unreachable output activation");
}

// Gradient w.r.t. the output layer's pre-activation. For softmax the
// upstream gradient is already w.r.t. logits (fused with cross-entropy).
Matrix output_delta(const Matrix& out, const Matrix& dout, OutputActivation act) {
  switch (act) {
    case OutputActivation::identity:
    case OutputActivation::softmax:
      return dout;
    case OutputActivation::sigmoid:
      return dout.cwiseProduct((out.array() * (1.0 - out.array())).matrix());
  }
  throw std::logic_error("unreachable output activation");
}

void check_shapes(const MlpSpec& spec, const ModelParams& params) {
  const Index L = spec.num_layers();
  require(static_cast<Index>(params.weights.size()) == L &&
              static_cast<Index>(params.biases.size()) == L,
          "params layer count does not match spec");
  for (Index l = 0; l < L; ++l) {
    const auto& w = params.weights[static_cast<std::size_t>(l)];
    const auto& b = params.biases[static_cast<std::size_t>(l)];
    require(w.rows() == spec.layer_sizes[static_cast<std::size_t>(l)] &&
                w.cols() == spec.layer_sizes[static_cast<std::size_t>(l) + 1] &&
                b.size() == w.cols(),
            "parameter shapes do not match spec");
  }
}

}  // namespace

void MlpSpec::validate() const {
  require(layer_sizes.size() >= 2, "MlpSpec needs at least input and output sizes");
  for (Index s : layer_sizes) require(s >= 1, "MlpSpec layer sizes must be >= 1");
}

ModelParams init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ModelParams p;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index fan_in = spec.layer_sizes[static_cast<std::size_t>(l)];
    const Index fan_out = spec.layer_sizes[static_cast<std::size_t>(l) + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix w(fan_in, fan_out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(RowVector::Zero(fan_out));
  }
  return p;
}

ModelParams zeros_like(const MlpSpec& spec) {
  spec.validate();
  ModelParams p;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index fan_in = spec.layer_sizes[static_cast<std::size_t>(l)];
    const Index fan_out = spec.layer_sizes[static_cast<std::size_t>(l) + 1];
    p.weights.emplace_back(Matrix::Zero(fan_in, fan_out));
    p.biases.emplace_back(RowVector::Zero(fan_out));
  }
  return p;
}

Index param_count(const MlpSpec& spec) {
  Index count = 0;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index in = spec.layer_sizes[static_cast<std::size_t>(l)];
    const Index out = spec.layer_sizes[static_cast<std::size_t>(l) + 1];
    count += in * out + out;
  }
  return count;
}

Vector flatten(const ParamGrads& grads) {
  Index total = 0;
  for (const auto& w : grads.weights) total += w.size();
  for (const auto& b : grads.biases) total += b.size();
  Vector out(total);
  Index pos = 0;
  for (std::size_t l = 0; l < grads.weights.size(); ++l) {
    const auto& w = grads.weights[l];
    out.segment(pos, w.size()) = Eigen::Map<const Vector>(w.data(), w.size());
    pos += w.size();
    const auto& b = grads.biases[l];
    out.segment(pos, b.size()) = b.transpose();
    pos += b.size();
  }
  return out;
}

ParamGrads unflatten(const MlpSpec& spec, const Vector& flat) {
  require(flat.size() == param_count(spec), "unflatten: wrong element count");
  ParamGrads g = zeros_like(spec);
  Index pos = 0;
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    auto& w = g.weights[l];
    Eigen::Map<Vector>(w.data(), w.size()) = flat.segment(pos, w.size());
    pos += w.size();
    auto& b = g.biases[l];
    b = flat.segment(pos, b.size()).transpose();
    pos += b.size();
  }
  return g;
}

Activations mlp_forward(const MlpSpec& spec, const ModelParams& params, const Matrix& x) {
  check_shapes(spec, params);
  require(x.cols() == spec.input_size(), "mlp_forward: input width does not match spec");
  const Index L = spec.num_layers();
  Activations acts;
  acts.reserve(static_cast<std::size_t>(L) + 1);
  acts.push_back(x);
  for (Index l = 0; l < L; ++l) {
    Matrix z = acts.back() * params.weights[static_cast<std::size_t>(l)];
    z.rowwise() += params.biases[static_cast<std::size_t>(l)];
    acts.push_back(l + 1 < L ? apply_hidden(z, spec.hidden) : apply_output(z, spec.output));
  }
  if (!all_finite(acts.back())) throw std::runtime_error("mlp_forward: non-finite output");
  return acts;
}

std::pair<double, Matrix> loss_and_grad(LossKind kind, const Matrix& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(),
          "loss_and_grad: pred and target shapes differ");
  require(pred.rows() >= 1, "loss_and_grad: empty batch");
  const double n = static_cast<double>(pred.rows());
  switch (kind) {
    case LossKind::mse: {
      Matrix diff = pred - target;
      double loss = diff.squaredNorm() / (2.0 * n);
      return {loss, diff / n};
    }
    case LossKind::softmax_cross_entropy: {
      // pred holds post-softmax probabilities; the returned gradient is
      // w.r.t. the logits.
      double loss = 0.0;
      for (Index i = 0; i < pred.rows(); ++i) {
        for (Index j = 0; j < pred.cols(); ++j) {
          const double t = target(i, j);
          if (t != 0.0) loss -= t * std::log(std::max(pred(i, j), 1e-300));
        }
      }
      return {loss / n, (pred - target) / n};
    }
  }
  throw std::logic_error("unreachable loss kind");
}

BackwardResult mlp_backward(const MlpSpec& spec, const ModelParams& params,
                            const Activations& acts, const Matrix& dout) {
  check_shapes(spec, params);
  const Index L = spec.num_layers();
  require(static_cast<Index>(acts.size()) == L + 1, "mlp_backward: stale activations");
  require(dout.rows() == acts.back().rows() && dout.cols() == acts.back().cols(),
          "mlp_backward: dout shape mismatch");
  for (Index l = 0; l <= L; ++l)
    require(acts[static_cast<std::size_t>(l)].cols() == spec.layer_sizes[static_cast<std::size_t>(l)],
            "mlp_backward: activation widths do not match spec");

  BackwardResult res;
  res.grads.weights.resize(static_cast<std::size_t>(L));
  res.grads.biases.resize(static_cast<std::size_t>(L));

  Matrix delta = output_delta(acts.back(), dout, spec.output);
  for (Index l = L - 1; l >= 0; --l) {
    const auto& a_in = acts[static_cast<std::size_t>(l)];
    res.grads.weights[static_cast<std::size_t>(l)] = a_in.transpose() * delta;
    res.grads.biases[static_cast<std::size_t>(l)] = delta.colwise().sum();
    Matrix da = delta * params.weights[static_cast<std::size_t>(l)].transpose();
    if (l > 0) {
      delta = da.cwiseProduct(hidden_deriv(a_in, spec.hidden));
    } else {
      res.dinput = std::move(da);
    }
  }
  return res;
}

std::vector<ParamGrads> per_example_grads(const MlpSpec& spec, const ModelParams& params,
                                          const Matrix& x, const Matrix& targets, LossKind kind) {
  require(x.rows() == targets.rows(), "per_example_grads: row counts differ");
  require(x.rows() >= 1, "per_example_grads: empty batch");
  const Index L = spec.num_layers();
  const Index b = x.rows();
  Activations acts = mlp_forward(spec, params, x);

  // Row i's loss gradient for a batch of one (n = 1).
  Matrix dout = loss_and_grad(kind, acts.back(), targets).second * static_cast<double>(b);

  // Delta propagation is row-wise independent, so all rows run batched and
  // the per-example weight gradients are per-row outer products.
  std::vector<ParamGrads> out(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    out[static_cast<std::size_t>(i)].weights.resize(static_cast<std::size_t>(L));
    out[static_cast<std::size_t>(i)].biases.resize(static_cast<std::size_t>(L));
  }
  Matrix delta = output_delta(acts.back(), dout, spec.output);
  for (Index l = L - 1; l >= 0; --l) {
    const auto& a_in = acts[static_cast<std::size_t>(l)];
    for (Index i = 0; i < b; ++i) {
      auto& g = out[static_cast<std::size_t>(i)];
      g.weights[static_cast<std::size_t>(l)] = a_in.row(i).transpose() * delta.row(i);
      g.biases[static_cast<std::size_t>(l)] = delta.row(i);
    }
    if (l > 0) {
      delta = (delta * params.weights[static_cast<std::size_t>(l)].transpose())
                  .cwiseProduct(hidden_deriv(a_in, spec.hidden));
    }
  }
  return out;
}

void optimizer_step(ModelParams& params, const ParamGrads& grads, OptimizerState& state) {
  require(params.weights.size() == grads.weights.size() &&
              params.biases.size() == grads.biases.size(),
          "optimizer_step: param/grad layer counts differ");
  for (const auto& w : grads.weights)
    if (!w.allFinite()) throw std::runtime_error("optimizer_step: non-finite gradient");
  for (const auto& bvec : grads.biases)
    if (!bvec.allFinite()) throw std::runtime_error("optimizer_step: non-finite gradient");

  const double lr = state.learning_rate;
  const double wd = state.weight_decay;
  state.step_count += 1;

  if (state.kind == OptimizerState::Kind::sgd) {
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
      params.weights[l] -= lr * (grads.weights[l] + wd * params.weights[l]);
      params.biases[l] -= lr * (grads.biases[l] + wd * params.biases[l]);
    }
    return;
  }

  if (state.m_w.empty()) {
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
      state.m_w.emplace_back(Matrix::Zero(params.weights[l].rows(), params.weights[l].cols()));
      state.v_w.emplace_back(Matrix::Zero(params.weights[l].rows(), params.weights[l].cols()));
      state.m_b.emplace_back(RowVector::Zero(params.biases[l].size()));
      state.v_b.emplace_back(RowVector::Zero(params.biases[l].size()));
    }
  }
  const double b1 = state.adam_beta1;
  const double b2 = state.adam_beta2;
  const double t = static_cast<double>(state.step_count);
  const double corr1 = 1.0 - std::pow(b1, t);
  const double corr2 = 1.0 - std::pow(b2, t);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    Matrix gw = grads.weights[l] + wd * params.weights[l];
    state.m_w[l] = b1 * state.m_w[l] + (1.0 - b1) * gw;
    state.v_w[l] = b2 * state.v_w[l] + (1.0 - b2) * gw.cwiseProduct(gw);
    params.weights[l].array() -=
        lr * (state.m_w[l].array() / corr1) / ((state.v_w[l].array() / corr2).sqrt() + state.adam_eps);

    RowVector gb = grads.biases[l] + wd * params.biases[l];
    state.m_b[l] = b1 * state.m_b[l] + (1.0 - b1) * gb;
    state.v_b[l] = b2 * state.v_b[l] + (1.0 - b2) * gb.cwiseProduct(gb);
    params.biases[l].array() -=
        lr * (state.m_b[l].array() / corr1) / ((state.v_b[l].array() / corr2).sqrt() + state.adam_eps);
  }
}

}  // namespace fedsim::nn
