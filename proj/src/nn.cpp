#include "diffuq/nn.hpp"

#include <cmath>

namespace diffuq::nn {

Eigen::Index NetLayout::layer_offset(Eigen::Index layer) const {
  Eigen::Index off = 0;
  for (Eigen::Index l = 0; l < layer; ++l) {
    const Eigen::Index in = layer_input(l), out = layer_output(l);
    off += in * out + out;
    if (has_affine(l)) off += 2 * out;
  }
  return off;
}

void NetLayout::validate() const {
  if (input_dim < 1 || output_dim < 1) throw DimensionError("layout: input and output dims must be positive");
  for (std::size_t i = 0; i < hidden_widths.size(); ++i) {
    if (hidden_widths[i] < 1) {
      std::ostringstream os;
      os << "layout: hidden layer " << i << " has non-positive width";
      throw DimensionError(os.str());
    }
  }
  if (layernorm_affine && !layer_norm) throw ConfigError("layout: layernorm_affine requires layer_norm");
}

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

Eigen::VectorXd init_params(const NetLayout& layout, RandomStream& rng) {
  layout.validate();
  Eigen::VectorXd p = Eigen::VectorXd::Zero(layout.param_count());
  for (Eigen::Index l = 0; l < layout.num_layers(); ++l) {
    const Eigen::Index in = layout.layer_input(l), out = layout.layer_output(l);
    const Eigen::Index off = layout.layer_offset(l);
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < in * out; ++i) p[off + i] = sd * rng.normal();
    if (layout.has_affine(l)) p.segment(off + in * out + out, out).setOnes();
  }
  return p;
}

TapedMlp::TapedMlp(const NetLayout& layout, const ad::Var& params, Eigen::Index offset) : layout_(layout) {
  layout_.validate();
  if (params.rows() * params.cols() < offset + layout_.param_count()) {
    std::ostringstream os;
    os << "parameter vector has " << params.rows() * params.cols() << " entries, layout requires "
       << offset + layout_.param_count();
    throw DimensionError(os.str());
  }
  for (Eigen::Index l = 0; l < layout_.num_layers(); ++l) {
    const Eigen::Index in = layout_.layer_input(l), out = layout_.layer_output(l);
    Eigen::Index off = offset + layout_.layer_offset(l);
    weights_.push_back(ad::reshape_slice(params, off, in, out));
    off += in * out;
    biases_.push_back(ad::reshape_slice(params, off, 1, out));
    off += out;
    if (layout_.has_affine(l)) {
      gains_.push_back(ad::reshape_slice(params, off, 1, out));
      shifts_.push_back(ad::reshape_slice(params, off + out, 1, out));
    } else {
      gains_.emplace_back();
      shifts_.emplace_back();
    }
  }
}

ad::Var TapedMlp::forward(const ad::Var& inputs) const {
  if (inputs.cols() != layout_.input_dim) {
    std::ostringstream os;
    os << "layer 0: expected input width " << layout_.input_dim << ", got " << inputs.cols();
    throw DimensionError(os.str());
  }
  ad::Var h = inputs;
  for (Eigen::Index l = 0; l < layout_.num_layers(); ++l) {
    const auto i = static_cast<std::size_t>(l);
    ad::Var z = ad::affine(h, weights_[i], biases_[i]);
    if (l + 1 == layout_.num_layers()) return z;
    if (layout_.layer_norm && !layout_.has_affine(l) && layout_.activation == Activation::gelu) {
      h = ad::layer_norm_gelu(z, kLayerNormEps);
      continue;
    }
    if (layout_.layer_norm) {
      z = ad::layer_norm_rows(z, kLayerNormEps);
      if (layout_.has_affine(l)) z = ad::add_row(ad::mul_row(z, gains_[i]), shifts_[i]);
    }
    if (layout_.activation == Activation::gelu) z = ad::gelu(z);
    h = z;
  }
  return h;
}

}  // namespace diffuq::nn
