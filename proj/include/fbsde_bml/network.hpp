#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fbsde_bml/autodiff.hpp"
#include "fbsde_bml/errors.hpp"
#include "fbsde_bml/random.hpp"

namespace fbsde {

enum class Activation { tanh };

/// Shape of the two trial networks v (for y) and u (for z). Both take [t, x]
/// and share hidden-layer hyperparameters; they do not share weights.
struct NetworkArch {
  std::size_t input_dim = 0;      // n + 1
  std::size_t hidden_layers = 0;
  std::size_t hidden_width = 0;
  std::size_t output_dim_v = 0;   // m
  std::size_t output_dim_u = 0;   // m * d
  Activation activation = Activation::tanh;

  static NetworkArch for_problem(std::size_t n, std::size_t m, std::size_t d, std::size_t layers,
                                 std::size_t width) {
    return NetworkArch{n + 1, layers, width, m, m * d, Activation::tanh};
  }

  void validate() const {
    if (input_dim == 0 || hidden_layers == 0 || hidden_width == 0 || output_dim_v == 0 || output_dim_u == 0) {
      throw std::invalid_argument("NetworkArch: all dimensions must be positive");
    }
    if (output_dim_u % output_dim_v != 0) {
      throw std::invalid_argument("NetworkArch: u output must be a multiple of v output (m*d)");
    }
  }

  friend bool operator==(const NetworkArch&, const NetworkArch&) = default;
};

enum class Net { v = 0, u = 1 };

/// Location of one dense layer inside the flat parameter vector. The weight
/// block is fan_in x fan_out in column-major order, followed by fan_out biases.
struct LayerSlot {
  Net net;
  std::size_t fan_in;
  std::size_t fan_out;
  std::size_t weight_offset;
  std::size_t bias_offset;
  bool hidden;
};

/// Layer order: all of v (input to output), then all of u.
inline std::vector<LayerSlot> layer_layout(const NetworkArch& arch) {
  std::vector<LayerSlot> slots;
  std::size_t offset = 0;
  for (Net net : {Net::v, Net::u}) {
    const std::size_t out_dim = net == Net::v ? arch.output_dim_v : arch.output_dim_u;
    std::size_t fan_in = arch.input_dim;
    for (std::size_t l = 0; l <= arch.hidden_layers; ++l) {
      const bool hidden = l < arch.hidden_layers;
      const std::size_t fan_out = hidden ? arch.hidden_width : out_dim;
      slots.push_back(LayerSlot{net, fan_in, fan_out, offset, offset + fan_in * fan_out, hidden});
      offset += (fan_in + 1) * fan_out;
      fan_in = fan_out;
    }
  }
  return slots;
}

inline std::size_t parameter_count(const NetworkArch& arch) {
  std::size_t total = 0;
  for (const LayerSlot& s : layer_layout(arch)) total += (s.fan_in + 1) * s.fan_out;
  return total;
}

struct NetworkParams {
  NetworkArch arch;
  std::vector<double> theta;

  std::size_t param_count() const noexcept { return theta.size(); }
};

/// Weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
inline NetworkParams init_network(const NetworkArch& arch, std::uint64_t seed) {
  arch.validate();
  NetworkParams params{arch, std::vector<double>(parameter_count(arch), 0.0)};
  SplitMix64 bits(derive_seed(seed, 0x696e6974ULL));
  for (const LayerSlot& s : layer_layout(arch)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    for (std::size_t k = 0; k < s.fan_in * s.fan_out; ++k) {
      params.theta[s.weight_offset + k] = bound * (2.0 * bits.uniform() - 1.0);
    }
  }
  return params;
}

/// Network parameters registered as tape leaves.
class BoundNetworks {
 public:
  BoundNetworks(ad::Tape& tape, const NetworkParams& params) : arch_(params.arch), layout_(layer_layout(params.arch)) {
    if (params.theta.size() != parameter_count(arch_)) throw ShapeError("BoundNetworks: parameter count mismatch");
    for (const LayerSlot& s : layout_) {
      const auto rows = static_cast<ad::Index>(s.fan_in);
      const auto cols = static_cast<ad::Index>(s.fan_out);
      weights_.push_back(tape.parameter(Eigen::Map<const ad::Matrix>(params.theta.data() + s.weight_offset, rows, cols)));
      biases_.push_back(tape.parameter(Eigen::Map<const ad::Matrix>(params.theta.data() + s.bias_offset, 1, cols)));
    }
  }

  const NetworkArch& arch() const noexcept { return arch_; }

  /// v(t, x) for a batch x (B x n); returns B x m.
  ad::Var v(double t, ad::Var x) const { return evaluate(Net::v, t, x); }
  /// u(t, x) for a batch x (B x n); returns B x (m*d), each row a row-major m x d matrix.
  ad::Var u(double t, ad::Var x) const { return evaluate(Net::u, t, x); }

  /// Collects d(root)/d(theta) after tape.backward(root), in the flat layout.
  std::vector<double> gradient(const ad::Tape& tape) const {
    std::vector<double> g(parameter_count(arch_), 0.0);
    for (std::size_t l = 0; l < layout_.size(); ++l) {
      const ad::Matrix gw = tape.grad(weights_[l]);
      const ad::Matrix gb = tape.grad(biases_[l]);
      std::copy(gw.data(), gw.data() + gw.size(), g.begin() + static_cast<std::ptrdiff_t>(layout_[l].weight_offset));
      std::copy(gb.data(), gb.data() + gb.size(), g.begin() + static_cast<std::ptrdiff_t>(layout_[l].bias_offset));
    }
    return g;
  }

 private:
  ad::Var evaluate(Net net, double t, ad::Var x) const {
    if (static_cast<std::size_t>(x.cols()) + 1 != arch_.input_dim) {
      throw ShapeError("network input has " + std::to_string(x.cols()) + " state components, expected " +
                       std::to_string(arch_.input_dim - 1));
    }
    ad::Var h = ad::concat_cols({ad::filled(x, x.rows(), 1, t), x});
    for (std::size_t l = 0; l < layout_.size(); ++l) {
      if (layout_[l].net != net) continue;
      h = ad::affine(h, weights_[l], biases_[l]);
      if (layout_[l].hidden) h = ad::tanh(h);
    }
    return h;
  }

  NetworkArch arch_;
  std::vector<LayerSlot> layout_;
  std::vector<ad::Var> weights_;
  std::vector<ad::Var> biases_;
};

inline Eigen::VectorXd forward_v(const NetworkParams& params, double t, const Eigen::VectorXd& x) {
  ad::Tape tape;
  const BoundNetworks nets(tape, params);
  const ad::Var out = nets.v(t, tape.constant(x.transpose()));
  return out.value().row(0).transpose();
}

/// u(t, x) reshaped row-major to m x d.
inline Eigen::MatrixXd forward_u(const NetworkParams& params, double t, const Eigen::VectorXd& x) {
  ad::Tape tape;
  const BoundNetworks nets(tape, params);
  const ad::Var out = nets.u(t, tape.constant(x.transpose()));
  const auto m = static_cast<Eigen::Index>(params.arch.output_dim_v);
  const auto d = static_cast<Eigen::Index>(params.arch.output_dim_u / params.arch.output_dim_v);
  Eigen::MatrixXd z(m, d);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = 0; k < d; ++k) z(i, k) = out.value()(0, i * d + k);
  return z;
}

// Checkpoint text format:
//   fbsde-bml-checkpoint 1
//   arch <input_dim> <hidden_layers> <hidden_width> <output_dim_v> <output_dim_u> tanh
//   seed <seed>
//   step <step>
//   params <count>
//   <one value per line, 17 significant digits, in layer_layout order>

struct Checkpoint {
  NetworkParams params;
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  const NetworkArch& a = ckpt.params.arch;
  out << "fbsde-bml-checkpoint 1\n"
      << "arch " << a.input_dim << ' ' << a.hidden_layers << ' ' << a.hidden_width << ' ' << a.output_dim_v << ' '
      << a.output_dim_u << " tanh\n"
      << "seed " << ckpt.seed << "\n"
      << "step " << ckpt.step << "\n"
      << "params " << ckpt.params.theta.size() << "\n"
      << std::setprecision(17);
  for (double w : ckpt.params.theta) out << w << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  auto expect = [&](const std::string& word) {
    std::string got;
    if (!(in >> got) || got != word) throw std::runtime_error("malformed checkpoint: expected '" + word + "'");
  };
  int version = 0;
  expect("fbsde-bml-checkpoint");
  in >> version;
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ckpt;
  NetworkArch& a = ckpt.params.arch;
  std::string activation;
  expect("arch");
  in >> a.input_dim >> a.hidden_layers >> a.hidden_width >> a.output_dim_v >> a.output_dim_u >> activation;
  if (activation != "tanh") throw std::runtime_error("unsupported activation in checkpoint: " + activation);
  expect("seed");
  in >> ckpt.seed;
  expect("step");
  in >> ckpt.step;
  std::size_t count = 0;
  expect("params");
  in >> count;
  a.validate();
  if (count != parameter_count(a)) throw std::runtime_error("checkpoint parameter count does not match arch");
  ckpt.params.theta.resize(count);
  for (double& w : ckpt.params.theta) {
    if (!(in >> w)) throw std::runtime_error("checkpoint truncated");
  }
  return ckpt;
}

}  // namespace fbsde
