#pragma once

// Fixed-depth multilayer perceptrons with hand-written reverse-mode gradients.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dflab/tensor.hpp"

namespace dflab {

enum class Activation { kTanh, kIdentity };

std::string to_string(Activation act);
Activation activation_from_string(const std::string& name);

struct Layer {
  DenseMatrix weight;  // out x in
  DenseVector bias;    // out
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<Layer> layers);

  // Glorot-uniform weights, zero biases. `dims` has one more entry than
  // `activations`.
  static Mlp create(std::span<const std::size_t> dims, std::span<const Activation> activations,
                    std::uint64_t seed);

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  std::size_t parameter_count() const;

  // Flat row-major view of parameter i (weights of layer 0, bias of layer 0,
  // weights of layer 1, ...).
  double& parameter(std::size_t i);
  double parameter(std::size_t i) const;

  bool all_finite() const;
  bool operator==(const Mlp&) const;

 private:
  std::vector<Layer> layers_;
};

// Per-layer accumulators shaped like an Mlp's parameters.
class GradientTape {
 public:
  struct LayerGrad {
    DenseMatrix weight;
    DenseVector bias;
  };

  GradientTape() = default;
  explicit GradientTape(const Mlp& net);

  std::vector<LayerGrad>& layers() noexcept { return layers_; }
  const std::vector<LayerGrad>& layers() const noexcept { return layers_; }

  std::size_t parameter_count() const;
  double parameter(std::size_t i) const;

  void zero();
  // this += scale * other
  void accumulate(const GradientTape& other, double scale = 1.0);
  double norm() const;
  bool all_finite() const;
  bool shape_matches(const Mlp& net) const;
  bool operator==(const GradientTape&) const;

 private:
  std::vector<LayerGrad> layers_;
};

// Activations kept from a forward pass for the matching backward pass.
struct ForwardTrace {
  std::vector<DenseVector> inputs;   // input to each layer
  std::vector<DenseVector> outputs;  // post-activation output of each layer
  const DenseVector& output() const { return outputs.back(); }
  bool empty() const { return outputs.empty(); }
};

struct BackwardResult {
  GradientTape tape;
  DenseVector input_grad;
};

DenseVector mlp_forward(const Mlp& net, std::span<const double> input);
ForwardTrace mlp_forward_traced(const Mlp& net, std::span<const double> input);

// Reverse-mode gradient of <output, output_grad> with respect to parameters
// and input.
BackwardResult mlp_backward(const Mlp& net, const ForwardTrace& trace,
                            std::span<const double> output_grad);

// Max over parameters of |analytic - numeric| / max(|numeric|, 1e-8) for the
// scalar <mlp(input), output_grad>. An empty output_grad means all ones.
double finite_difference_check(const Mlp& net, std::span<const double> input, double step,
                               std::span<const double> output_grad = {});

// net -= learning_rate * tape
void sgd_step(Mlp& net, const GradientTape& tape, double learning_rate);

struct AdamState {
  GradientTape first_moment;
  GradientTape second_moment;
  std::uint64_t steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(const Mlp& net) : first_moment(net), second_moment(net) {}
};

void adam_step(Mlp& net, AdamState& state, const GradientTape& tape, double learning_rate);

// Versioned text snapshot; values are written as hex floats so a load
// reproduces every parameter bit for bit.
void save_snapshot(const Mlp& net, std::ostream& out);
Mlp load_snapshot(std::istream& in);

}  // namespace dflab
