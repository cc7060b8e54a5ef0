#include "dflab/smallgrad.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "dflab/errors.hpp"

namespace dflab {

std::string to_string(Activation act) {
  return act == Activation::kTanh ? "tanh" : "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw StructuralError("unknown activation '" + name + "'");
}

Mlp::Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    if (l.bias.size() != l.weight.rows())
      throw StructuralError("layer " + std::to_string(i) + ": bias size does not match rows");
    if (i > 0 && layers_[i - 1].out_dim() != l.in_dim())
      throw StructuralError("layer " + std::to_string(i) + ": input dimension " +
                            std::to_string(l.in_dim()) + " does not follow " +
                            std::to_string(layers_[i - 1].out_dim()));
  }
}

Mlp Mlp::create(std::span<const std::size_t> dims, std::span<const Activation> activations,
                std::uint64_t seed) {
  if (dims.size() != activations.size() + 1)
    throw StructuralError("need one more dimension than activations");
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  layers.reserve(activations.size());
  for (std::size_t i = 0; i < activations.size(); ++i) {
    const std::size_t fan_in = dims[i];
    const std::size_t fan_out = dims[i + 1];
    Layer layer{DenseMatrix(fan_out, fan_in), DenseVector(fan_out, 0.0), activations[i]};
    const double bound =
        fan_in + fan_out > 0 ? std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)) : 0.0;
    std::uniform_real_distribution<double> uniform(-bound, bound);
    for (double& w : layer.weight.values()) w = uniform(rng);
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

std::size_t Mlp::in_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
std::size_t Mlp::out_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

double& Mlp::parameter(std::size_t i) {
  for (Layer& l : layers_) {
    if (i < l.weight.size()) return l.weight.values()[i];
    i -= l.weight.size();
    if (i < l.bias.size()) return l.bias[i];
    i -= l.bias.size();
  }
  throw StructuralError("parameter index out of range");
}

double Mlp::parameter(std::size_t i) const { return const_cast<Mlp&>(*this).parameter(i); }

bool Mlp::all_finite() const {
  for (const Layer& l : layers_)
    if (!dflab::all_finite(l.weight.values()) || !dflab::all_finite(l.bias)) return false;
  return true;
}

bool Mlp::operator==(const Mlp& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& a = layers_[i];
    const Layer& b = other.layers_[i];
    if (a.activation != b.activation || !(a.weight == b.weight) || a.bias != b.bias) return false;
  }
  return true;
}

GradientTape::GradientTape(const Mlp& net) {
  layers_.reserve(net.layers().size());
  for (const Layer& l : net.layers())
    layers_.push_back({DenseMatrix(l.weight.rows(), l.weight.cols()), DenseVector(l.bias.size())});
}

std::size_t GradientTape::parameter_count() const {
  std::size_t n = 0;
  for (const LayerGrad& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

double GradientTape::parameter(std::size_t i) const {
  for (const LayerGrad& l : layers_) {
    if (i < l.weight.size()) return l.weight.values()[i];
    i -= l.weight.size();
    if (i < l.bias.size()) return l.bias[i];
    i -= l.bias.size();
  }
  throw StructuralError("gradient index out of range");
}

void GradientTape::zero() {
  for (LayerGrad& l : layers_) {
    std::ranges::fill(l.weight.values(), 0.0);
    std::ranges::fill(l.bias, 0.0);
  }
}

void GradientTape::accumulate(const GradientTape& other, double scale) {
  if (other.layers_.size() != layers_.size())
    throw StructuralError("gradient tapes have different depth");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto dst = layers_[i].weight.values();
    auto src = other.layers_[i].weight.values();
    if (dst.size() != src.size() || layers_[i].bias.size() != other.layers_[i].bias.size())
      throw StructuralError("gradient tapes have different shapes");
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
    for (std::size_t j = 0; j < layers_[i].bias.size(); ++j)
      layers_[i].bias[j] += scale * other.layers_[i].bias[j];
  }
}

double GradientTape::norm() const {
  double acc = 0.0;
  for (const LayerGrad& l : layers_) acc += squared_norm(l.weight.values()) + squared_norm(l.bias);
  return std::sqrt(acc);
}

bool GradientTape::all_finite() const {
  for (const LayerGrad& l : layers_)
    if (!dflab::all_finite(l.weight.values()) || !dflab::all_finite(l.bias)) return false;
  return true;
}

bool GradientTape::shape_matches(const Mlp& net) const {
  if (layers_.size() != net.layers().size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = net.layers()[i];
    if (layers_[i].weight.rows() != l.weight.rows() || layers_[i].weight.cols() != l.weight.cols() ||
        layers_[i].bias.size() != l.bias.size())
      return false;
  }
  return true;
}

bool GradientTape::operator==(const GradientTape& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (!(layers_[i].weight == other.layers_[i].weight) || layers_[i].bias != other.layers_[i].bias)
      return false;
  return true;
}

namespace {

void layer_forward(const Layer& layer, std::span<const double> in, DenseVector& out) {
  const std::size_t rows = layer.weight.rows();
  const std::size_t cols = layer.weight.cols();
  out.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = layer.bias[r];
    for (std::size_t c = 0; c < cols; ++c) acc += layer.weight(r, c) * in[c];
    out[r] = layer.activation == Activation::kTanh ? std::tanh(acc) : acc;
  }
}

void check_input(const Mlp& net, std::span<const double> input) {
  if (input.size() != net.in_dim())
    throw StructuralError("input dimension " + std::to_string(input.size()) + " != " +
                          std::to_string(net.in_dim()));
}

}  // namespace

DenseVector mlp_forward(const Mlp& net, std::span<const double> input) {
  if (net.layers().empty()) return DenseVector(input.begin(), input.end());
  check_input(net, input);
  DenseVector current(input.begin(), input.end());
  DenseVector next;
  for (const Layer& layer : net.layers()) {
    layer_forward(layer, current, next);
    current.swap(next);
  }
  return current;
}

ForwardTrace mlp_forward_traced(const Mlp& net, std::span<const double> input) {
  ForwardTrace trace;
  if (net.layers().empty()) {
    trace.inputs.emplace_back(input.begin(), input.end());
    trace.outputs.emplace_back(input.begin(), input.end());
    return trace;
  }
  check_input(net, input);
  trace.inputs.reserve(net.layers().size());
  trace.outputs.reserve(net.layers().size());
  DenseVector current(input.begin(), input.end());
  for (const Layer& layer : net.layers()) {
    DenseVector out;
    layer_forward(layer, current, out);
    trace.inputs.push_back(std::move(current));
    current = out;
    trace.outputs.push_back(std::move(out));
  }
  return trace;
}

BackwardResult mlp_backward(const Mlp& net, const ForwardTrace& trace,
                            std::span<const double> output_grad) {
  if (trace.empty()) throw UsageError("backward pass requires a forward trace");
  BackwardResult result{GradientTape(net), {}};
  if (net.layers().empty()) {
    result.input_grad.assign(output_grad.begin(), output_grad.end());
    return result;
  }
  if (trace.outputs.size() != net.layers().size())
    throw UsageError("forward trace does not belong to this network");
  if (output_grad.size() != net.out_dim())
    throw StructuralError("output gradient dimension " + std::to_string(output_grad.size()) +
                          " != " + std::to_string(net.out_dim()));

  DenseVector upstream(output_grad.begin(), output_grad.end());
  for (std::size_t li = net.layers().size(); li-- > 0;) {
    const Layer& layer = net.layers()[li];
    const DenseVector& in = trace.inputs[li];
    const DenseVector& out = trace.outputs[li];
    GradientTape::LayerGrad& grad = result.tape.layers()[li];
    const std::size_t rows = layer.weight.rows();
    const std::size_t cols = layer.weight.cols();

    DenseVector pre_grad(rows);
    for (std::size_t r = 0; r < rows; ++r)
      pre_grad[r] = layer.activation == Activation::kTanh ? upstream[r] * (1.0 - out[r] * out[r])
                                                          : upstream[r];

    DenseVector down(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = pre_grad[r];
      grad.bias[r] = g;
      for (std::size_t c = 0; c < cols; ++c) {
        grad.weight(r, c) = g * in[c];
        down[c] += layer.weight(r, c) * g;
      }
    }
    upstream.swap(down);
  }
  result.input_grad = std::move(upstream);
  return result;
}

namespace {

using Wide = long double;

Wide activate(Activation act, Wide v) { return act == Activation::kTanh ? std::tanh(v) : v; }

// <net(input), weights> from layer `from` onward, given that layer's output.
Wide forward_from(const Mlp& net, std::size_t from, std::vector<Wide> h,
                  std::span<const double> weights) {
  for (std::size_t li = from + 1; li < net.layers().size(); ++li) {
    const Layer& l = net.layers()[li];
    std::vector<Wide> next(l.out_dim());
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      Wide acc = l.bias[r];
      for (std::size_t c = 0; c < l.in_dim(); ++c) acc += static_cast<Wide>(l.weight(r, c)) * h[c];
      next[r] = activate(l.activation, acc);
    }
    h = std::move(next);
  }
  Wide out = 0;
  for (std::size_t r = 0; r < h.size(); ++r) out += h[r] * weights[r];
  return out;
}

}  // namespace

// The numeric side is evaluated in extended precision and only from the
// perturbed unit onward, which keeps it both cheap and well below the
// tolerance it is checked against.
double finite_difference_check(const Mlp& net, std::span<const double> input, double step,
                               std::span<const double> output_grad) {
  if (!(step > 0.0)) throw UsageError("finite-difference step must be positive");
  DenseVector weights(output_grad.begin(), output_grad.end());
  if (weights.empty()) weights.assign(net.out_dim(), 1.0);

  const ForwardTrace trace = mlp_forward_traced(net, input);
  const BackwardResult analytic = mlp_backward(net, trace, weights);

  // Wide pre-activations and outputs of every layer.
  std::vector<std::vector<Wide>> pre, post;
  std::vector<Wide> h(input.begin(), input.end());
  for (const Layer& l : net.layers()) {
    std::vector<Wide> z(l.out_dim()), a(l.out_dim());
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      Wide acc = l.bias[r];
      for (std::size_t c = 0; c < l.in_dim(); ++c) acc += static_cast<Wide>(l.weight(r, c)) * h[c];
      z[r] = acc;
      a[r] = activate(l.activation, acc);
    }
    pre.push_back(z);
    post.push_back(a);
    h = a;
  }

  double worst = 0.0;
  std::size_t index = 0;
  auto probe = [&](std::size_t li, std::size_t row, Wide dz) {
    const Layer& l = net.layers()[li];
    std::vector<Wide> out = post[li];
    out[row] = activate(l.activation, pre[li][row] + dz);
    const Wide plus = forward_from(net, li, out, weights);
    out[row] = activate(l.activation, pre[li][row] - dz);
    const Wide minus = forward_from(net, li, std::move(out), weights);
    const double numeric = static_cast<double>((plus - minus) / (2 * static_cast<Wide>(step)));
    const double err =
        std::abs(analytic.tape.parameter(index) - numeric) / std::max(std::abs(numeric), 1e-8);
    worst = std::max(worst, err);
    ++index;
  };
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const Layer& l = net.layers()[li];
    const std::vector<Wide>& in = li == 0 ? std::vector<Wide>(input.begin(), input.end()) : post[li - 1];
    for (std::size_t r = 0; r < l.out_dim(); ++r)
      for (std::size_t c = 0; c < l.in_dim(); ++c) probe(li, r, static_cast<Wide>(step) * in[c]);
    for (std::size_t r = 0; r < l.out_dim(); ++r) probe(li, r, static_cast<Wide>(step));
  }
  return worst;
}

void sgd_step(Mlp& net, const GradientTape& tape, double learning_rate) {
  if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  if (!tape.shape_matches(net)) throw StructuralError("gradient tape does not match network");
  if (!tape.all_finite()) throw TrainingError("non-finite gradient in SGD step");
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    Layer& layer = net.layers()[li];
    const auto& grad = tape.layers()[li];
    auto w = layer.weight.values();
    auto gw = grad.weight.values();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= learning_rate * gw[j];
    for (std::size_t j = 0; j < layer.bias.size(); ++j) layer.bias[j] -= learning_rate * grad.bias[j];
  }
}

void adam_step(Mlp& net, AdamState& state, const GradientTape& tape, double learning_rate) {
  if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  if (!tape.shape_matches(net)) throw StructuralError("gradient tape does not match network");
  if (!tape.all_finite()) throw TrainingError("non-finite gradient in Adam step");
  if (!state.first_moment.shape_matches(net)) state = AdamState(net);
  ++state.steps;
  const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.steps));
  const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.steps));

  auto update = [&](std::span<double> param, std::span<const double> grad, std::span<double> m,
                    std::span<double> v) {
    for (std::size_t j = 0; j < param.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      param[j] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  };
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    Layer& layer = net.layers()[li];
    update(layer.weight.values(), tape.layers()[li].weight.values(),
           state.first_moment.layers()[li].weight.values(),
           state.second_moment.layers()[li].weight.values());
    update(layer.bias, tape.layers()[li].bias, state.first_moment.layers()[li].bias,
           state.second_moment.layers()[li].bias);
  }
}

namespace {

constexpr const char* kSnapshotHeader = "dflab-mlp v1";

void write_values(std::ostream& out, std::span<const double> values) {
  char buf[64];
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%a", values[i]);
    out << (i == 0 ? "" : " ") << buf;
  }
  out << '\n';
}

void read_values(std::istream& in, std::span<double> values) {
  std::string token;
  for (double& v : values) {
    if (!(in >> token)) throw StructuralError("snapshot truncated");
    char* end = nullptr;
    v = std::strtod(token.c_str(), &end);
    if (end == token.c_str() || *end != '\0')
      throw StructuralError("snapshot value '" + token + "' is not a number");
  }
}

}  // namespace

void save_snapshot(const Mlp& net, std::ostream& out) {
  out << kSnapshotHeader << '\n' << "layers " << net.layers().size() << '\n';
  for (const Layer& l : net.layers()) {
    out << "layer " << l.weight.rows() << ' ' << l.weight.cols() << ' ' << to_string(l.activation)
        << '\n';
    write_values(out, l.weight.values());
    write_values(out, l.bias);
  }
}

Mlp load_snapshot(std::istream& in) {
  std::string header;
  std::getline(in, header);
  if (header != kSnapshotHeader)
    throw StructuralError("unsupported snapshot header '" + header + "'");
  std::string keyword;
  std::size_t count = 0;
  if (!(in >> keyword >> count) || keyword != "layers")
    throw StructuralError("snapshot missing layer count");
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t rows = 0, cols = 0;
    std::string act;
    if (!(in >> keyword >> rows >> cols >> act) || keyword != "layer")
      throw StructuralError("snapshot layer header malformed");
    Layer layer{DenseMatrix(rows, cols), DenseVector(rows), activation_from_string(act)};
    read_values(in, layer.weight.values());
    read_values(in, layer.bias);
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

}  // namespace dflab
