#pragma once

#include <array>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sida/tensor.hpp"

namespace sida {

// Reverse-mode gradient tape over dense tensors.
//
// A tape records one forward evaluation; backward() accumulates d(loss)/d(node)
// for every node that transitively feeds the loss from a grad-enabled leaf.
// Evaluation is single-threaded with fixed reduction order, so identical inputs
// produce bit-identical values and gradients.  Every operation checks its
// output for non-finite entries and raises NumericError naming itself, which
// makes the first non-finite intermediate of a failing loss directly visible.

struct Value {
  int i = -1;
  bool valid() const { return i >= 0; }
};

struct ConvSpec {
  std::size_t n, ic, ih, iw;   // input
  std::size_t oc, kh, kw;      // kernel
  std::size_t oh, ow;          // output
  std::size_t stride, pad;
  bool transposed = false;
};

class Tape {
 public:
  enum class Op : uint8_t {
    leaf, add, sub, mul, mul_scalar, add_scalar, mul_colvec, add_rowvec,
    matmul_nt, row_sum, row_mean, row_dot, dot, sum_all,
    silu, sigmoid, softplus, exp_fn, log_fn, sqrt_fn, recip, bcast,
    mean_group, reshape, conv2d, channel_mean, add_chanvec, custom
  };

  struct Node {
    Op op;
    const char* name;
    std::array<int, 2> in{-1, -1};
    Tensor value;
    double c = 0.0;        // scalar operand / group size
    int meta = -1;         // index into conv_ or custom_
    bool needs_grad = false;
  };

  // Custom op: forward value已 computed by caller; backward receives the
  // upstream cotangent and must add its vector-Jacobian product into grad_in.
  using CustomBackward = std::function<void(const Tensor& upstream, Tensor& grad_in)>;

  explicit Tape(bool round_f32 = false) : round_f32_(round_f32) { nodes_.reserve(256); }

  void clear() {
    nodes_.clear();
    grads_.clear();
    conv_.clear();
    custom_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

  const Tensor& val(Value v) const { return nodes_[check(v)].value; }

  Value leaf(Tensor t, bool requires_grad = false) {
    Node n;
    n.op = Op::leaf;
    n.name = "leaf";
    n.value = std::move(t);
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }

  Value constant(Tensor t) { return leaf(std::move(t), false); }
  Value constant(double x) { return leaf(Tensor::scalar(x), false); }

  // Value-identical tensor through which no gradient flows.
  Value detach(Value v) { return leaf(nodes_[check(v)].value, false); }

  Value add(Value a, Value b) { return binary_elementwise(Op::add, "add", a, b); }
  Value sub(Value a, Value b) { return binary_elementwise(Op::sub, "sub", a, b); }
  Value mul(Value a, Value b) { return binary_elementwise(Op::mul, "mul", a, b); }

  Value mul_scalar(Value a, double c) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] * c;
    return push_unary(Op::mul_scalar, "mul_scalar", a, std::move(out), c);
  }

  Value add_scalar(Value a, double c) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] + c;
    return push_unary(Op::add_scalar, "add_scalar", a, std::move(out), c);
  }

  Value neg(Value a) { return mul_scalar(a, -1.0); }

  // x{n,d} * s{n} -> rows of x scaled by s.
  Value mul_colvec(Value a, Value s) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& sv = nodes_[check(s)].value;
    std::size_t n = x.rows(), d = x.cols();
    if (sv.size() != n)
      throw ConfigError("mul_colvec: scale size " + std::to_string(sv.size()) +
                        " != rows " + std::to_string(n));
    Tensor out(x.shape);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) out.v[i * d + j] = x.v[i * d + j] * sv.v[i];
    return push_binary(Op::mul_colvec, "mul_colvec", a, s, std::move(out));
  }

  // x{n,d} + v{d} broadcast over rows.
  Value add_rowvec(Value a, Value b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& r = nodes_[check(b)].value;
    std::size_t n = x.rows(), d = x.cols();
    if (r.size() != d)
      throw ConfigError("add_rowvec: vector size " + std::to_string(r.size()) +
                        " != cols " + std::to_string(d));
    Tensor out(x.shape);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) out.v[i * d + j] = x.v[i * d + j] + r.v[j];
    return push_binary(Op::add_rowvec, "add_rowvec", a, b, std::move(out));
  }

  // x{n,k} . W{m,k}^T -> {n,m}.  Weights are stored [out,in].
  Value matmul_nt(Value a, Value w) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& W = nodes_[check(w)].value;
    std::size_t n = x.rows(), k = x.cols();
    std::size_t m = W.rows(), k2 = W.cols();
    if (k != k2)
      throw ConfigError("matmul_nt: inner dims " + std::to_string(k) + " vs " + std::to_string(k2));
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
      const double* xi = x.data() + i * k;
      double* oi = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) {
        const double* wj = W.data() + j * k;
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += xi[t] * wj[t];
        oi[j] = acc;
      }
    }
    return push_binary(Op::matmul_nt, "matmul_nt", a, w, std::move(out));
  }

  Value row_sum(Value a) { return row_reduce(a, false); }
  Value row_mean(Value a) { return row_reduce(a, true); }

  // sum_j a_ij * b_ij per row -> {n}.
  Value row_dot(Value a, Value b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& y = nodes_[check(b)].value;
    if (!x.same_shape(y)) throw ConfigError("row_dot: shape mismatch");
    std::size_t n = x.rows(), d = x.cols();
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += x.v[i * d + j] * y.v[i * d + j];
      out.v[i] = acc;
    }
    return push_binary(Op::row_dot, "row_dot", a, b, std::move(out));
  }

  Value dot(Value a, Value b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& y = nodes_[check(b)].value;
    if (x.size() != y.size()) throw ConfigError("dot: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.v[i] * y.v[i];
    return push_binary(Op::dot, "dot", a, b, Tensor::scalar(acc));
  }

  Value sum_all(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    double acc = 0.0;
    for (double e : x.v) acc += e;
    return push_unary(Op::sum_all, "sum_all", a, Tensor::scalar(acc));
  }

  Value mean_all(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    return mul_scalar(sum_all(a), 1.0 / double(x.size()));
  }

  Value silu(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] * sigmoid_scalar(x.v[i]);
    return push_unary(Op::silu, "silu", a, std::move(out));
  }

  Value sigmoid(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = sigmoid_scalar(x.v[i]);
    return push_unary(Op::sigmoid, "sigmoid", a, std::move(out));
  }

  // log(1 + e^x), overflow-safe.  -softplus(-x) == log(sigmoid(x)).
  Value softplus(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = softplus_scalar(x.v[i]);
    return push_unary(Op::softplus, "softplus", a, std::move(out));
  }

  Value exp(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = std::exp(x.v[i]);
    return push_unary(Op::exp_fn, "exp", a, std::move(out));
  }

  Value log(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = std::log(x.v[i]);
    return push_unary(Op::log_fn, "log", a, std::move(out));
  }

  Value sqrt(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = std::sqrt(x.v[i]);
    return push_unary(Op::sqrt_fn, "sqrt", a, std::move(out));
  }

  Value recip(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = 1.0 / x.v[i];
    return push_unary(Op::recip, "recip", a, std::move(out));
  }

  // scalar -> {n} constant-filled broadcast; gradient sums back.
  Value broadcast(Value a, std::size_t n) {
    const Tensor& x = nodes_[check(a)].value;
    if (x.size() != 1) throw ConfigError("broadcast: input must be scalar");
    Tensor out({n}, x.v[0]);
    return push_unary(Op::bcast, "broadcast", a, std::move(out));
  }

  // x{n,c,h,w} + v{c} broadcast over batch and spatial positions.
  Value add_chanvec(Value a, Value b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& r = nodes_[check(b)].value;
    if (x.shape.size() != 4 || r.size() != x.shape[1])
      throw ConfigError("add_chanvec: need {n,c,h,w} and {c}");
    std::size_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
    Tensor out(x.shape);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
          out.v[(i * c + ch) * hw + p] = x.v[(i * c + ch) * hw + p] + r.v[ch];
    return push_binary(Op::add_chanvec, "add_chanvec", a, b, std::move(out));
  }

  // x{n} -> {n}: each entry replaced by the mean over its contiguous group of
  // `group` entries.  Gradient spreads equally over the group, so every group
  // member keeps a live gradient path.
  Value mean_group(Value a, std::size_t group) {
    const Tensor& x = nodes_[check(a)].value;
    std::size_t n = x.size();
    if (group == 0 || n % group != 0)
      throw ConfigError("mean_group: size " + std::to_string(n) +
                        " not divisible by group " + std::to_string(group));
    Tensor out({n});
    for (std::size_t g = 0; g < n / group; ++g) {
      double acc = 0.0;
      for (std::size_t j = 0; j < group; ++j) acc += x.v[g * group + j];
      acc /= double(group);
      for (std::size_t j = 0; j < group; ++j) out.v[g * group + j] = acc;
    }
    Value v = push_unary(Op::mean_group, "mean_group", a, std::move(out));
    nodes_[v.i].c = double(group);
    return v;
  }

  Value reshape(Value a, Shape s) {
    const Tensor& x = nodes_[check(a)].value;
    if (shape_size(s) != x.size()) throw ConfigError("reshape: size mismatch " + shape_str(s));
    Tensor out(std::move(s), x.v);
    return push_unary(Op::reshape, "reshape", a, std::move(out));
  }

  // conv2d with square padding; weights {oc, ic, kh, kw}.  transposed=true
  // computes the adjoint (fractionally strided) convolution used by decoders.
  Value conv2d(Value a, Value w, std::size_t stride, std::size_t pad, bool transposed = false) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& W = nodes_[check(w)].value;
    if (x.shape.size() != 4 || W.shape.size() != 4)
      throw ConfigError("conv2d: need 4-d input and kernel");
    ConvSpec cs;
    cs.n = x.shape[0];
    cs.ic = x.shape[1];
    cs.ih = x.shape[2];
    cs.iw = x.shape[3];
    cs.oc = W.shape[0];
    cs.kh = W.shape[2];
    cs.kw = W.shape[3];
    cs.stride = stride;
    cs.pad = pad;
    cs.transposed = transposed;
    if (W.shape[1] != cs.ic) throw ConfigError("conv2d: channel mismatch");
    if (!transposed) {
      cs.oh = (cs.ih + 2 * pad - cs.kh) / stride + 1;
      cs.ow = (cs.iw + 2 * pad - cs.kw) / stride + 1;
    } else {
      cs.oh = (cs.ih - 1) * stride + cs.kh - 2 * pad;
      cs.ow = (cs.iw - 1) * stride + cs.kw - 2 * pad;
    }
    Tensor out({cs.n, cs.oc, cs.oh, cs.ow});
    if (!transposed)
      conv_forward(x, W, out, cs);
    else
      convt_forward(x, W, out, cs);
    Value v = push_binary(Op::conv2d, transposed ? "conv2d_t" : "conv2d", a, w, std::move(out));
    nodes_[v.i].meta = int(conv_.size());
    conv_.push_back(cs);
    return v;
  }

  // {n,c,h,w} -> {n,h,w}: mean over channels (the parameterless pooling that
  // turns the encoder latent into a discriminator logit map).
  Value channel_mean(Value a) {
    const Tensor& x = nodes_[check(a)].value;
    if (x.shape.size() != 4) throw ConfigError("channel_mean: need 4-d input");
    std::size_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
    Tensor out({n, x.shape[2], x.shape[3]});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += x.v[(i * c + ch) * hw + p];
        out.v[i * hw + p] = acc / double(c);
      }
    return push_unary(Op::channel_mean, "channel_mean", a, std::move(out));
  }

  // Caller supplies the forward value and a VJP closure.
  Value custom(Value a, Tensor forward_value, const char* name, CustomBackward backward) {
    check(a);
    Node n;
    n.op = Op::custom;
    n.name = name;
    n.in[0] = a.i;
    n.value = std::move(forward_value);
    n.needs_grad = nodes_[a.i].needs_grad;
    n.meta = int(custom_.size());
    custom_.push_back(std::move(backward));
    return push(std::move(n));
  }

  // Accumulates gradients of a scalar loss into every grad-enabled ancestor.
  // Can be called repeatedly; each call recomputes gradients from scratch.
  void backward(Value loss) {
    int li = check(loss);
    if (nodes_[li].value.size() != 1) throw ConfigError("backward: loss must be scalar");
    if (!std::isfinite(nodes_[li].value.v[0])) report_first_nonfinite();
    grads_.assign(nodes_.size(), Tensor());
    grad_ref(li) = Tensor::scalar(1.0);
    for (int i = li; i >= 0; --i) {
      Node& nd = nodes_[i];
      if (!nd.needs_grad || grads_[i].v.empty()) continue;
      accumulate(i, nd);
    }
  }

  // Gradient of the last backward() w.r.t. node v (zeros if untouched).
  const Tensor& grad(Value v) {
    int i = check(v);
    if (grads_.size() != nodes_.size()) grads_.assign(nodes_.size(), Tensor());
    if (grads_[i].v.empty()) grads_[i] = Tensor::zeros(nodes_[i].value.shape);
    return grads_[i];
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<ConvSpec> conv_;
  std::vector<CustomBackward> custom_;
  bool round_f32_;

  static double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double softplus_scalar(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
  }

  int check(Value v) const {
    if (!v.valid() || v.i >= int(nodes_.size())) throw ConfigError("tape: invalid value handle");
    return v.i;
  }

  Value push(Node&& n) {
    if (round_f32_)
      for (double& x : n.value.v) x = double(float(x));
    for (double x : n.value.v)
      if (!std::isfinite(x))
        throw NumericError(std::string("non-finite value produced by op '") + n.name +
                           "' at node " + std::to_string(nodes_.size()));
    nodes_.push_back(std::move(n));
    return Value{int(nodes_.size()) - 1};
  }

  Value push_unary(Op op, const char* name, Value a, Tensor out, double c = 0.0) {
    Node n;
    n.op = op;
    n.name = name;
    n.in[0] = a.i;
    n.value = std::move(out);
    n.c = c;
    n.needs_grad = nodes_[a.i].needs_grad;
    return push(std::move(n));
  }

  Value push_binary(Op op, const char* name, Value a, Value b, Tensor out) {
    Node n;
    n.op = op;
    n.name = name;
    n.in[0] = a.i;
    n.in[1] = b.i;
    n.value = std::move(out);
    n.needs_grad = nodes_[a.i].needs_grad || nodes_[b.i].needs_grad;
    return push(std::move(n));
  }

  Value binary_elementwise(Op op, const char* name, Value a, Value b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& y = nodes_[check(b)].value;
    if (!x.same_shape(y))
      throw ConfigError(std::string(name) + ": shape mismatch " + shape_str(x.shape) + " vs " +
                        shape_str(y.shape));
    Tensor out(x.shape);
    switch (op) {
      case Op::add:
        for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] + y.v[i];
        break;
      case Op::sub:
        for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] - y.v[i];
        break;
      case Op::mul:
        for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] * y.v[i];
        break;
      default:
        throw ConfigError("binary_elementwise: bad op");
    }
    return push_binary(op, name, a, b, std::move(out));
  }

  Value row_reduce(Value a, bool mean) {
    const Tensor& x = nodes_[check(a)].value;
    std::size_t n = x.rows(), d = x.cols();
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += x.v[i * d + j];
      out.v[i] = mean ? acc / double(d) : acc;
    }
    return push_unary(mean ? Op::row_mean : Op::row_sum, mean ? "row_mean" : "row_sum", a,
                      std::move(out), double(d));
  }

  Tensor& grad_ref(int i) {
    if (grads_[i].v.empty()) grads_[i] = Tensor::zeros(nodes_[i].value.shape);
    return grads_[i];
  }

  void add_into(int i, const Tensor& g) {
    if (i < 0 || !nodes_[i].needs_grad) return;
    Tensor& dst = grad_ref(i);
    for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += g.v[k];
  }

  void report_first_nonfinite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (double x : nodes_[i].value.v)
        if (!std::isfinite(x))
          throw NumericError(std::string("non-finite loss; first non-finite intermediate is op '") +
                             nodes_[i].name + "' at node " + std::to_string(i));
    throw NumericError("non-finite loss with no non-finite intermediate recorded");
  }

  void accumulate(int i, Node& nd) {
    const Tensor& up = grads_[i];
    const int ia = nd.in[0], ib = nd.in[1];
    switch (nd.op) {
      case Op::leaf:
        break;
      case Op::add: {
        add_into(ia, up);
        add_into(ib, up);
        break;
      }
      case Op::sub: {
        add_into(ia, up);
        if (ib >= 0 && nodes_[ib].needs_grad) {
          Tensor& dst = grad_ref(ib);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] -= up.v[k];
        }
        break;
      }
      case Op::mul: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[k] * y.v[k];
        }
        if (nodes_[ib].needs_grad) {
          Tensor& dst = grad_ref(ib);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[k] * x.v[k];
        }
        break;
      }
      case Op::mul_scalar: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[k] * nd.c;
        }
        break;
      }
      case Op::add_scalar:
        add_into(ia, up);
        break;
      case Op::mul_colvec: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& s = nodes_[ib].value;
        std::size_t n = x.rows(), d = x.cols();
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) dst.v[r * d + j] += up.v[r * d + j] * s.v[r];
        }
        if (nodes_[ib].needs_grad) {
          Tensor& dst = grad_ref(ib);
          for (std::size_t r = 0; r < n; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += up.v[r * d + j] * x.v[r * d + j];
            dst.v[r] += acc;
          }
        }
        break;
      }
      case Op::add_rowvec: {
        add_into(ia, up);
        if (nodes_[ib].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          std::size_t n = x.rows(), d = x.cols();
          Tensor& dst = grad_ref(ib);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) dst.v[j] += up.v[r * d + j];
        }
        break;
      }
      case Op::matmul_nt: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& W = nodes_[ib].value;
        std::size_t n = x.rows(), k = x.cols(), m = W.rows();
        if (nodes_[ia].needs_grad) {
          Tensor& dx = grad_ref(ia);
          for (std::size_t r = 0; r < n; ++r) {
            double* dxr = dx.data() + r * k;
            const double* ur = up.data() + r * m;
            for (std::size_t j = 0; j < m; ++j) {
              const double u = ur[j];
              if (u == 0.0) continue;
              const double* wj = W.data() + j * k;
              for (std::size_t t = 0; t < k; ++t) dxr[t] += u * wj[t];
            }
          }
        }
        if (nodes_[ib].needs_grad) {
          Tensor& dW = grad_ref(ib);
          for (std::size_t r = 0; r < n; ++r) {
            const double* xr = x.data() + r * k;
            const double* ur = up.data() + r * m;
            for (std::size_t j = 0; j < m; ++j) {
              const double u = ur[j];
              if (u == 0.0) continue;
              double* wj = dW.data() + j * k;
              for (std::size_t t = 0; t < k; ++t) wj[t] += u * xr[t];
            }
          }
        }
        break;
      }
      case Op::row_sum:
      case Op::row_mean: {
        if (nodes_[ia].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          std::size_t n = x.rows(), d = x.cols();
          double scale = nd.op == Op::row_mean ? 1.0 / nd.c : 1.0;
          Tensor& dst = grad_ref(ia);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) dst.v[r * d + j] += up.v[r] * scale;
        }
        break;
      }
      case Op::row_dot: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        std::size_t n = x.rows(), d = x.cols();
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) dst.v[r * d + j] += up.v[r] * y.v[r * d + j];
        }
        if (nodes_[ib].needs_grad) {
          Tensor& dst = grad_ref(ib);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) dst.v[r * d + j] += up.v[r] * x.v[r * d + j];
        }
        break;
      }
      case Op::dot: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        double u = up.v[0];
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += u * y.v[k];
        }
        if (nodes_[ib].needs_grad) {
          Tensor& dst = grad_ref(ib);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += u * x.v[k];
        }
        break;
      }
      case Op::sum_all: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[0];
        }
        break;
      }
      case Op::silu: {
        if (nodes_[ia].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) {
            double s = sigmoid_scalar(x.v[k]);
            dst.v[k] += up.v[k] * s * (1.0 + x.v[k] * (1.0 - s));
          }
        }
        break;
      }
      case Op::sigmoid: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          const Tensor& s = nd.value;
          for (std::size_t k = 0; k < dst.size(); ++k)
            dst.v[k] += up.v[k] * s.v[k] * (1.0 - s.v[k]);
        }
        break;
      }
      case Op::softplus: {
        if (nodes_[ia].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k)
            dst.v[k] += up.v[k] * sigmoid_scalar(x.v[k]);
        }
        break;
      }
      case Op::exp_fn: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[k] * nd.value.v[k];
        }
        break;
      }
      case Op::log_fn: {
        if (nodes_[ia].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[k] / x.v[k];
        }
        break;
      }
      case Op::sqrt_fn: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k)
            dst.v[k] += up.v[k] * 0.5 / nd.value.v[k];
        }
        break;
      }
      case Op::recip: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k)
            dst.v[k] -= up.v[k] * nd.value.v[k] * nd.value.v[k];
        }
        break;
      }
      case Op::bcast: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < up.size(); ++k) dst.v[0] += up.v[k];
        }
        break;
      }
      case Op::add_chanvec: {
        add_into(ia, up);
        if (ib >= 0 && nodes_[ib].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          std::size_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
          Tensor& dst = grad_ref(ib);
          for (std::size_t i2 = 0; i2 < n; ++i2)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < hw; ++p) dst.v[ch] += up.v[(i2 * c + ch) * hw + p];
        }
        break;
      }
      case Op::mean_group: {
        if (nodes_[ia].needs_grad) {
          std::size_t group = std::size_t(nd.c);
          std::size_t n = nd.value.size();
          Tensor& dst = grad_ref(ia);
          for (std::size_t g = 0; g < n / group; ++g) {
            double acc = 0.0;
            for (std::size_t j = 0; j < group; ++j) acc += up.v[g * group + j];
            acc /= double(group);
            for (std::size_t j = 0; j < group; ++j) dst.v[g * group + j] += acc;
          }
        }
        break;
      }
      case Op::reshape: {
        if (nodes_[ia].needs_grad) {
          Tensor& dst = grad_ref(ia);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.v[k] += up.v[k];
        }
        break;
      }
      case Op::conv2d: {
        const ConvSpec& cs = conv_[nd.meta];
        const Tensor& x = nodes_[ia].value;
        const Tensor& W = nodes_[ib].value;
        if (!cs.transposed) {
          if (nodes_[ia].needs_grad) conv_backward_input(up, W, grad_ref(ia), cs);
          if (nodes_[ib].needs_grad) conv_backward_kernel(up, x, grad_ref(ib), cs);
        } else {
          if (nodes_[ia].needs_grad) convt_backward_input(up, W, grad_ref(ia), cs);
          if (nodes_[ib].needs_grad) convt_backward_kernel(up, x, grad_ref(ib), cs);
        }
        break;
      }
      case Op::channel_mean: {
        if (nodes_[ia].needs_grad) {
          const Tensor& x = nodes_[ia].value;
          std::size_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
          Tensor& dst = grad_ref(ia);
          for (std::size_t i2 = 0; i2 < n; ++i2)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < hw; ++p)
                dst.v[(i2 * c + ch) * hw + p] += up.v[i2 * hw + p] / double(c);
        }
        break;
      }
      case Op::custom: {
        if (nodes_[ia].needs_grad) custom_[nd.meta](up, grad_ref(ia));
        break;
      }
    }
  }

  // out[n,oc,oh,ow] += sum_{ic,kh,kw} x[n,ic,ih,iw] * W[oc,ic,kh,kw]
  static void conv_forward(const Tensor& x, const Tensor& W, Tensor& out, const ConvSpec& c) {
    for (std::size_t n = 0; n < c.n; ++n)
      for (std::size_t oc = 0; oc < c.oc; ++oc)
        for (std::size_t oy = 0; oy < c.oh; ++oy)
          for (std::size_t ox = 0; ox < c.ow; ++ox) {
            double acc = 0.0;
            for (std::size_t ic = 0; ic < c.ic; ++ic)
              for (std::size_t ky = 0; ky < c.kh; ++ky)
                for (std::size_t kx = 0; kx < c.kw; ++kx) {
                  std::ptrdiff_t iy = std::ptrdiff_t(oy * c.stride + ky) - std::ptrdiff_t(c.pad);
                  std::ptrdiff_t ix = std::ptrdiff_t(ox * c.stride + kx) - std::ptrdiff_t(c.pad);
                  if (iy < 0 || ix < 0 || iy >= std::ptrdiff_t(c.ih) || ix >= std::ptrdiff_t(c.iw))
                    continue;
                  acc += x.v[((n * c.ic + ic) * c.ih + iy) * c.iw + ix] *
                         W.v[((oc * c.ic + ic) * c.kh + ky) * c.kw + kx];
                }
            out.v[((n * c.oc + oc) * c.oh + oy) * c.ow + ox] = acc;
          }
  }

  static void conv_backward_input(const Tensor& up, const Tensor& W, Tensor& dx, const ConvSpec& c) {
    for (std::size_t n = 0; n < c.n; ++n)
      for (std::size_t oc = 0; oc < c.oc; ++oc)
        for (std::size_t oy = 0; oy < c.oh; ++oy)
          for (std::size_t ox = 0; ox < c.ow; ++ox) {
            double u = up.v[((n * c.oc + oc) * c.oh + oy) * c.ow + ox];
            if (u == 0.0) continue;
            for (std::size_t ic = 0; ic < c.ic; ++ic)
              for (std::size_t ky = 0; ky < c.kh; ++ky)
                for (std::size_t kx = 0; kx < c.kw; ++kx) {
                  std::ptrdiff_t iy = std::ptrdiff_t(oy * c.stride + ky) - std::ptrdiff_t(c.pad);
                  std::ptrdiff_t ix = std::ptrdiff_t(ox * c.stride + kx) - std::ptrdiff_t(c.pad);
                  if (iy < 0 || ix < 0 || iy >= std::ptrdiff_t(c.ih) || ix >= std::ptrdiff_t(c.iw))
                    continue;
                  dx.v[((n * c.ic + ic) * c.ih + iy) * c.iw + ix] +=
                      u * W.v[((oc * c.ic + ic) * c.kh + ky) * c.kw + kx];
                }
          }
  }

  static void conv_backward_kernel(const Tensor& up, const Tensor& x, Tensor& dW, const ConvSpec& c) {
    for (std::size_t n = 0; n < c.n; ++n)
      for (std::size_t oc = 0; oc < c.oc; ++oc)
        for (std::size_t oy = 0; oy < c.oh; ++oy)
          for (std::size_t ox = 0; ox < c.ow; ++ox) {
            double u = up.v[((n * c.oc + oc) * c.oh + oy) * c.ow + ox];
            if (u == 0.0) continue;
            for (std::size_t ic = 0; ic < c.ic; ++ic)
              for (std::size_t ky = 0; ky < c.kh; ++ky)
                for (std::size_t kx = 0; kx < c.kw; ++kx) {
                  std::ptrdiff_t iy = std::ptrdiff_t(oy * c.stride + ky) - std::ptrdiff_t(c.pad);
                  std::ptrdiff_t ix = std::ptrdiff_t(ox * c.stride + kx) - std::ptrdiff_t(c.pad);
                  if (iy < 0 || ix < 0 || iy >= std::ptrdiff_t(c.ih) || ix >= std::ptrdiff_t(c.iw))
                    continue;
                  dW.v[((oc * c.ic + ic) * c.kh + ky) * c.kw + kx] +=
                      u * x.v[((n * c.ic + ic) * c.ih + iy) * c.iw + ix];
                }
          }
  }

  // Transposed conv forward: scatter each input pixel through the kernel.
  static void convt_forward(const Tensor& x, const Tensor& W, Tensor& out, const ConvSpec& c) {
    for (std::size_t n = 0; n < c.n; ++n)
      for (std::size_t ic = 0; ic < c.ic; ++ic)
        for (std::size_t iy = 0; iy < c.ih; ++iy)
          for (std::size_t ix = 0; ix < c.iw; ++ix) {
            double xv = x.v[((n * c.ic + ic) * c.ih + iy) * c.iw + ix];
            if (xv == 0.0) continue;
            for (std::size_t oc = 0; oc < c.oc; ++oc)
              for (std::size_t ky = 0; ky < c.kh; ++ky)
                for (std::size_t kx = 0; kx < c.kw; ++kx) {
                  std::ptrdiff_t oy = std::ptrdiff_t(iy * c.stride + ky) - std::ptrdiff_t(c.pad);
                  std::ptrdiff_t ox = std::ptrdiff_t(ix * c.stride + kx) - std::ptrdiff_t(c.pad);
                  if (oy < 0 || ox < 0 || oy >= std::ptrdiff_t(c.oh) || ox >= std::ptrdiff_t(c.ow))
                    continue;
                  out.v[((n * c.oc + oc) * c.oh + oy) * c.ow + ox] +=
                      xv * W.v[((oc * c.ic + ic) * c.kh + ky) * c.kw + kx];
                }
          }
  }

  static void convt_backward_input(const Tensor& up, const Tensor& W, Tensor& dx, const ConvSpec& c) {
    for (std::size_t n = 0; n < c.n; ++n)
      for (std::size_t ic = 0; ic < c.ic; ++ic)
        for (std::size_t iy = 0; iy < c.ih; ++iy)
          for (std::size_t ix = 0; ix < c.iw; ++ix) {
            double acc = 0.0;
            for (std::size_t oc = 0; oc < c.oc; ++oc)
              for (std::size_t ky = 0; ky < c.kh; ++ky)
                for (std::size_t kx = 0; kx < c.kw; ++kx) {
                  std::ptrdiff_t oy = std::ptrdiff_t(iy * c.stride + ky) - std::ptrdiff_t(c.pad);
                  std::ptrdiff_t ox = std::ptrdiff_t(ix * c.stride + kx) - std::ptrdiff_t(c.pad);
                  if (oy < 0 || ox < 0 || oy >= std::ptrdiff_t(c.oh) || ox >= std::ptrdiff_t(c.ow))
                    continue;
                  acc += up.v[((n * c.oc + oc) * c.oh + oy) * c.ow + ox] *
                         W.v[((oc * c.ic + ic) * c.kh + ky) * c.kw + kx];
                }
            dx.v[((n * c.ic + ic) * c.ih + iy) * c.iw + ix] += acc;
          }
  }

  static void convt_backward_kernel(const Tensor& up, const Tensor& x, Tensor& dW, const ConvSpec& c) {
    for (std::size_t n = 0; n < c.n; ++n)
      for (std::size_t ic = 0; ic < c.ic; ++ic)
        for (std::size_t iy = 0; iy < c.ih; ++iy)
          for (std::size_t ix = 0; ix < c.iw; ++ix) {
            double xv = x.v[((n * c.ic + ic) * c.ih + iy) * c.iw + ix];
            if (xv == 0.0) continue;
            for (std::size_t oc = 0; oc < c.oc; ++oc)
              for (std::size_t ky = 0; ky < c.kh; ++ky)
                for (std::size_t kx = 0; kx < c.kw; ++kx) {
                  std::ptrdiff_t oy = std::ptrdiff_t(iy * c.stride + ky) - std::ptrdiff_t(c.pad);
                  std::ptrdiff_t ox = std::ptrdiff_t(ix * c.stride + kx) - std::ptrdiff_t(c.pad);
                  if (oy < 0 || ox < 0 || oy >= std::ptrdiff_t(c.oh) || ox >= std::ptrdiff_t(c.ow))
                    continue;
                  dW.v[((oc * c.ic + ic) * c.kh + ky) * c.kw + kx] +=
                      xv * up.v[((n * c.oc + oc) * c.oh + oy) * c.ow + ox];
                }
          }
  }
};

// Named, ordered parameter collection.  Order is insertion order and defines
// the (deterministic) layout used by optimizers and checkpoints.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t) {
    for (auto& [k, v] : items)
      if (k == name) throw ConfigError("duplicate parameter name: " + name);
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  Tensor& at(const std::string& name) {
    for (auto& [k, v] : items)
      if (k == name) return v;
    throw ConfigError("unknown parameter: " + name);
  }

  const Tensor& at(const std::string& name) const {
    for (auto& [k, v] : items)
      if (k == name) return v;
    throw ConfigError("unknown parameter: " + name);
  }

  bool has(const std::string& name) const {
    for (auto& [k, v] : items)
      if (k == name) return true;
    return false;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (auto& [k, v] : items) n += v.size();
    return n;
  }
};

// Bound view of a ParamSet on a tape: one grad-enabled leaf per parameter
// (or constant leaves when frozen, which is how "parameters detached" network
// evaluations are built).
struct BoundParams {
  std::vector<std::pair<std::string, Value>> items;

  Value at(const std::string& name) const {
    for (auto& [k, v] : items)
      if (k == name) return v;
    throw ConfigError("unbound parameter: " + name);
  }

  bool has(const std::string& name) const {
    for (auto& [k, v] : items)
      if (k == name) return true;
    return false;
  }
};

inline BoundParams bind(Tape& tape, const ParamSet& params, bool requires_grad) {
  BoundParams b;
  b.items.reserve(params.items.size());
  for (auto& [name, t] : params.items) b.items.emplace_back(name, tape.leaf(t, requires_grad));
  return b;
}

// Gradient of a scalar-valued builder with respect to every parameter.
// Realizes the module-level `grad` operation used throughout the tests.
inline std::vector<std::pair<std::string, Tensor>> grad(
    const std::function<Value(Tape&, const BoundParams&)>& loss_evaluator, const ParamSet& params) {
  Tape tape;
  BoundParams bound = bind(tape, params, true);
  Value loss = loss_evaluator(tape, bound);
  tape.backward(loss);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(bound.items.size());
  for (auto& [name, v] : bound.items) out.emplace_back(name, tape.grad(v));
  return out;
}

}  // namespace sida
