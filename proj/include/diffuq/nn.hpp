#pragma once

#include "diffuq/autodiff.hpp"
#include "diffuq/errors.hpp"
#include "diffuq/random.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace diffuq::nn {

inline constexpr double kLayerNormEps = 1e-5;

// Exact GELU: x * Phi(x).
template <typename Scalar>
Scalar gelu(Scalar x) {
  using std::erfc;
  return x * Scalar(0.5) * erfc(-x / Scalar(std::numbers::sqrt2));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  using std::erfc;
  using std::exp;
  const Scalar cdf = Scalar(0.5) * erfc(-x / Scalar(std::numbers::sqrt2));
  const Scalar pdf = exp(Scalar(-0.5) * x * x) * Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

// (x - mean) / sqrt(var + eps) with the population variance, no affine terms.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> layer_norm(const Eigen::MatrixBase<Derived>& x,
                                                                      double eps = kLayerNormEps) {
  using Scalar = typename Derived::Scalar;
  const auto n = static_cast<Scalar>(x.size());
  const Scalar mu = x.sum() / n;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> centered = x.derived().reshaped().array() - mu;
  const Scalar var = centered.squaredNorm() / n;
  using std::sqrt;
  return centered / sqrt(var + Scalar(eps));
}

enum class Activation { gelu, identity };

// Dense stack description. The flat parameter vector stores, per layer, the
// weight matrix as an (in x out) column-major block followed by `out` biases;
// hidden layers with an affine layer norm append `out` gains and `out` shifts.
struct NetLayout {
  Eigen::Index input_dim = 1;
  Eigen::Index output_dim = 1;
  std::vector<Eigen::Index> hidden_widths;
  Activation activation = Activation::gelu;
  bool layer_norm = false;
  bool layernorm_affine = false;

  Eigen::Index num_layers() const { return static_cast<Eigen::Index>(hidden_widths.size()) + 1; }
  Eigen::Index layer_input(Eigen::Index layer) const {
    return layer == 0 ? input_dim : hidden_widths[static_cast<std::size_t>(layer - 1)];
  }
  Eigen::Index layer_output(Eigen::Index layer) const {
    return layer + 1 == num_layers() ? output_dim : hidden_widths[static_cast<std::size_t>(layer)];
  }
  bool has_affine(Eigen::Index layer) const { return layer_norm && layernorm_affine && layer + 1 < num_layers(); }
  // Offset of layer `layer`'s weight block in the flat parameter vector.
  Eigen::Index layer_offset(Eigen::Index layer) const;
  Eigen::Index param_count() const { return layer_offset(num_layers()); }
  void validate() const;

  bool operator==(const NetLayout&) const = default;
};

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Weights ~ N(0, 1/fan_in), biases 0, layer-norm gains 1 and shifts 0.
Eigen::VectorXd init_params(const NetLayout& layout, RandomStream& rng);

namespace detail {
inline void check_shapes(const NetLayout& layout, Eigen::Index n_params, Eigen::Index input_cols) {
  if (n_params != layout.param_count()) {
    std::ostringstream os;
    os << "parameter vector has " << n_params << " entries, layout requires " << layout.param_count();
    throw DimensionError(os.str());
  }
  if (input_cols != layout.input_dim) {
    std::ostringstream os;
    os << "layer 0: expected input width " << layout.input_dim << ", got " << input_cols;
    throw DimensionError(os.str());
  }
}
}  // namespace detail

// Batched forward pass: one input per row, returns one output per row.
template <typename Scalar, typename ParamDerived, typename InputDerived>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> mlp_forward_batch(
    const NetLayout& layout, const Eigen::MatrixBase<ParamDerived>& params,
    const Eigen::MatrixBase<InputDerived>& inputs) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  detail::check_shapes(layout, params.size(), inputs.cols());
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> p = params.derived().reshaped();
  Mat h = inputs;
  for (Eigen::Index l = 0; l < layout.num_layers(); ++l) {
    const Eigen::Index in = layout.layer_input(l), out = layout.layer_output(l);
    Eigen::Index off = layout.layer_offset(l);
    const Eigen::Map<const Mat> w(p.data() + off, in, out);
    off += in * out;
    const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(p.data() + off, out);
    off += out;
    Mat z = h * w;
    z.rowwise() += b;
    if (l + 1 == layout.num_layers()) return z;
    if (layout.layer_norm) {
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mu = z.rowwise().sum() / Scalar(out);
      z.colwise() -= mu;
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
          ((z.array().square().rowwise().sum() / Scalar(out)) + Scalar(kLayerNormEps)).rsqrt().matrix();
      z = (z.array().colwise() * inv_std.array()).matrix();
      if (layout.has_affine(l)) {
        const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gain(p.data() + off, out);
        const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> shift(p.data() + off + out, out);
        z = (z.array().rowwise() * gain.array()).matrix();
        z.rowwise() += shift;
      }
    }
    if (layout.activation == Activation::gelu) z = z.unaryExpr([](Scalar v) { return gelu(v); });
    h = std::move(z);
  }
  return h;
}

template <typename Scalar, typename ParamDerived, typename InputDerived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mlp_forward(const NetLayout& layout, const Eigen::MatrixBase<ParamDerived>& params,
                                                     const Eigen::MatrixBase<InputDerived>& input) {
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row = input.derived().reshaped().transpose();
  return mlp_forward_batch<Scalar>(layout, params, row).row(0).transpose();
}

inline Eigen::VectorXd mlp_forward(const NetLayout& layout, const Eigen::VectorXd& params, const Eigen::VectorXd& input) {
  return mlp_forward<double>(layout, params, input);
}

// A network whose weights are bound to slices of a parameter node on a tape,
// so repeated forward passes (e.g. one per SDE step) share weight nodes.
class TapedMlp {
 public:
  // Weights are read from entries [offset, offset + param_count) of params.
  TapedMlp(const NetLayout& layout, const ad::Var& params, Eigen::Index offset = 0);

  // inputs: n x input_dim node; returns n x output_dim node.
  ad::Var forward(const ad::Var& inputs) const;
  const NetLayout& layout() const { return layout_; }

 private:
  NetLayout layout_;
  std::vector<ad::Var> weights_, biases_, gains_, shifts_;
};

}  // namespace diffuq::nn
