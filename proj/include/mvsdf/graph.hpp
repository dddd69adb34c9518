#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvsdf/encodings.hpp"
#include "mvsdf/params.hpp"
#include "mvsdf/tensor.hpp"

namespace mvsdf {

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Reverse-mode autodiff over batched 2D tensors. Values are computed eagerly
// as nodes are appended; backward walks the tape once in reverse creation
// order. Graphs are rebuilt per training step and must not outlive mutations
// of the ParameterStore they bind (param nodes view the store's memory).
//
// Binary elementwise ops broadcast the right operand only: the rhs may be the
// same shape as lhs, a [1,1] scalar, a [1,C] row, or a [R,1] column.
template <typename T>
class Graph {
 public:
  enum class Op : uint8_t {
    kConst, kInput, kParam,
    kAdd, kSub, kMul, kDiv,
    kMatmul,
    kAffine, kExp, kLog, kSqrt, kSquare, kAbs, kTanh, kSigmoid, kRelu, kSoftplus, kClamp,
    kSumAll, kMeanAll, kRowSum,
    kL2NormRows,
    kConcatCols, kSliceCols, kBroadcastRows, kGatherRow, kReshape,
    kSegSum, kSegShiftUp, kSegCumprodExcl,
    kFreqEncode, kHashEncode,
  };

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t num_nodes() const { return nodes_.size(); }

  const Tensor<T>& value(int id) const {
    const Node& n = node(id);
    return n.bound ? *n.bound : n.val;
  }

  // Gradient of the last backward() w.r.t. node id (tests, pixel-grad export).
  const Tensor<T>& gradient(int id) const {
    const Node& n = node(id);
    if (n.grad.size() == 0) throw std::runtime_error("graph: node has no gradient");
    return n.grad;
  }

  bool requires_grad(int id) const { return node(id).req; }

  // ---- leaves ----

  int constant(Tensor<T> t) { return push_leaf(Op::kConst, std::move(t), false); }

  // Differentiable non-parameter leaf (e.g. rendered pixels fed to a feature
  // extractor whose pixel gradients seed a second pass).
  int input(Tensor<T> t) { return push_leaf(Op::kInput, std::move(t), grad_enabled_); }

  int param(ParameterStore<T>& store, const std::string& name) {
    if (store_ && store_ != &store)
      throw std::runtime_error("graph: all params must come from one store");
    store_ = &store;
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return it->second;
    ParamEntry<T>& e = store.entry(name);
    Node n;
    n.op = Op::kParam;
    n.bound = &e.value;
    n.req = grad_enabled_ && e.trainable;
    n.pname = name;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    param_ids_[name] = id;
    return id;
  }

  // ---- elementwise binary ----

  int add(int a, int b) { return push_binary(Op::kAdd, a, b); }
  int sub(int a, int b) { return push_binary(Op::kSub, a, b); }
  int mul(int a, int b) { return push_binary(Op::kMul, a, b); }
  int div(int a, int b) { return push_binary(Op::kDiv, a, b); }

  // ---- elementwise unary ----

  // scale * x + offset
  int affine(int a, T scale, T offset) {
    Node n = unary_node(Op::kAffine, a);
    n.x0 = scale;
    n.x1 = offset;
    n.val.arr() = value(a).arr() * scale + offset;
    return push(std::move(n));
  }

  int exp(int a) {
    Node n = unary_node(Op::kExp, a);
    n.val.arr() = value(a).arr().exp();
    return push(std::move(n));
  }

  // domain: x > 0
  int log(int a) {
    Node n = unary_node(Op::kLog, a);
    n.val.arr() = value(a).arr().log();
    return push(std::move(n));
  }

  // domain: x >= 0; forward clamps negatives to 0, gradient 0 at the boundary
  int sqrt(int a) {
    Node n = unary_node(Op::kSqrt, a);
    n.val.arr() = value(a).arr().max(T(0)).sqrt();
    return push(std::move(n));
  }

  int square(int a) {
    Node n = unary_node(Op::kSquare, a);
    n.val.arr() = value(a).arr().square();
    return push(std::move(n));
  }

  int abs(int a) {
    Node n = unary_node(Op::kAbs, a);
    n.val.arr() = value(a).arr().abs();
    return push(std::move(n));
  }

  int tanh(int a) {
    Node n = unary_node(Op::kTanh, a);
    n.val.arr() = value(a).arr().tanh();
    return push(std::move(n));
  }

  int sigmoid(int a) {
    Node n = unary_node(Op::kSigmoid, a);
    n.val.arr() = T(1) / (T(1) + (-value(a).arr()).exp());
    return push(std::move(n));
  }

  int relu(int a) {
    Node n = unary_node(Op::kRelu, a);
    n.val.arr() = value(a).arr().max(T(0));
    return push(std::move(n));
  }

  // ln(1 + e^(beta x)) / beta, overflow-safe
  int softplus(int a, T beta) {
    Node n = unary_node(Op::kSoftplus, a);
    n.x0 = beta;
    const auto& x = value(a);
    for (long i = 0; i < x.size(); ++i) {
      T bx = beta * x.v[i];
      n.val.v[i] = bx > 0 ? x.v[i] + std::log1p(std::exp(-bx)) / beta
                          : std::log1p(std::exp(bx)) / beta;
    }
    return push(std::move(n));
  }

  int clamp(int a, T lo, T hi) {
    Node n = unary_node(Op::kClamp, a);
    n.x0 = lo;
    n.x1 = hi;
    n.val.arr() = value(a).arr().max(lo).min(hi);
    return push(std::move(n));
  }

  // ---- reductions ----

  int sum_all(int a) {
    Node n = make_node(Op::kSumAll, a, -1, 1, 1);
    n.val.v[0] = value(a).arr().sum();
    return push(std::move(n));
  }

  int mean_all(int a) {
    Node n = make_node(Op::kMeanAll, a, -1, 1, 1);
    n.val.v[0] = value(a).arr().sum() / static_cast<T>(value(a).size());
    return push(std::move(n));
  }

  int row_sum(int a) {
    const auto& x = value(a);
    Node n = make_node(Op::kRowSum, a, -1, x.rows, 1);
    n.val.mat().col(0) = x.mat().rowwise().sum();
    return push(std::move(n));
  }

  // ---- normalization ----

  int l2_normalize_rows(int a) {
    const auto& x = value(a);
    Node n = make_node(Op::kL2NormRows, a, -1, x.rows, x.cols);
    for (long i = 0; i < x.rows; ++i) {
      T r = std::max(x.mat().row(i).norm(), T(1e-12));
      n.val.mat().row(i) = x.mat().row(i) / r;
    }
    return push(std::move(n));
  }

  // ---- shape / movement ----

  int concat_cols(int a, int b) {
    const auto& xa = value(a);
    const auto& xb = value(b);
    if (xa.rows != xb.rows)
      throw std::runtime_error("concat_cols: row mismatch " + xa.shape_str() + " vs " +
                               xb.shape_str());
    Node n = make_node(Op::kConcatCols, a, b, xa.rows, xa.cols + xb.cols);
    n.i0 = xa.cols;
    n.val.mat().leftCols(xa.cols) = xa.mat();
    n.val.mat().rightCols(xb.cols) = xb.mat();
    return push(std::move(n));
  }

  int concat_cols(const std::vector<int>& ids) {
    if (ids.empty()) throw std::runtime_error("concat_cols: empty list");
    int out = ids[0];
    for (size_t i = 1; i < ids.size(); ++i) out = concat_cols(out, ids[i]);
    return out;
  }

  int slice_cols(int a, long c0, long c1) {
    const auto& x = value(a);
    if (c0 < 0 || c1 > x.cols || c0 >= c1)
      throw std::runtime_error("slice_cols: bad range on " + x.shape_str());
    Node n = make_node(Op::kSliceCols, a, -1, x.rows, c1 - c0);
    n.i0 = c0;
    n.val.mat() = x.mat().middleCols(c0, c1 - c0);
    return push(std::move(n));
  }

  int broadcast_rows(int a, long rows) {
    const auto& x = value(a);
    if (x.rows != 1) throw std::runtime_error("broadcast_rows: input must be [1,C], got " +
                                              x.shape_str());
    Node n = make_node(Op::kBroadcastRows, a, -1, rows, x.cols);
    n.val.mat().rowwise() = x.mat().row(0);
    return push(std::move(n));
  }

  int gather_row(int a, long row) {
    const auto& x = value(a);
    if (row < 0 || row >= x.rows)
      throw std::runtime_error("gather_row: index " + std::to_string(row) +
                               " out of range for " + x.shape_str());
    Node n = make_node(Op::kGatherRow, a, -1, 1, x.cols);
    n.i0 = row;
    n.val.mat().row(0) = x.mat().row(row);
    return push(std::move(n));
  }

  int reshape(int a, long rows, long cols) {
    const auto& x = value(a);
    if (rows * cols != x.size())
      throw std::runtime_error("reshape: size mismatch " + x.shape_str() + " -> [" +
                               std::to_string(rows) + "," + std::to_string(cols) + "]");
    Node n = make_node(Op::kReshape, a, -1, rows, cols);
    n.val.v = x.v;
    return push(std::move(n));
  }

  // ---- segment ops (contiguous segments of `seg` rows, e.g. samples per ray) ----

  int segment_sum(int a, long seg) {
    const auto& x = value(a);
    check_seg(x, seg, "segment_sum");
    long nseg = x.rows / seg;
    Node n = make_node(Op::kSegSum, a, -1, nseg, x.cols);
    n.i0 = seg;
    for (long s = 0; s < nseg; ++s)
      n.val.mat().row(s) = x.mat().middleRows(s * seg, seg).colwise().sum();
    return push(std::move(n));
  }

  // out_i = in_{i+1} within each segment; the last row replicates itself.
  int segment_shift_up(int a, long seg) {
    const auto& x = value(a);
    check_seg(x, seg, "segment_shift_up");
    Node n = make_node(Op::kSegShiftUp, a, -1, x.rows, x.cols);
    n.i0 = seg;
    for (long s = 0; s < x.rows / seg; ++s) {
      long base = s * seg;
      if (seg > 1)
        n.val.mat().middleRows(base, seg - 1) = x.mat().middleRows(base + 1, seg - 1);
      n.val.mat().row(base + seg - 1) = x.mat().row(base + seg - 1);
    }
    return push(std::move(n));
  }

  // y_0 = 1, y_k = prod_{j<k} x_j within each segment (transmittance from 1-alpha).
  int segment_cumprod_excl(int a, long seg) {
    const auto& x = value(a);
    check_seg(x, seg, "segment_cumprod_excl");
    if (x.cols != 1)
      throw std::runtime_error("segment_cumprod_excl: expects [N,1], got " + x.shape_str());
    Node n = make_node(Op::kSegCumprodExcl, a, -1, x.rows, 1);
    n.i0 = seg;
    for (long s = 0; s < x.rows / seg; ++s) {
      long base = s * seg;
      T acc = 1;
      for (long k = 0; k < seg; ++k) {
        n.val.v[base + k] = acc;
        acc *= x.v[base + k];
      }
    }
    return push(std::move(n));
  }

  // ---- encodings ----

  // Per input dim d: [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{K-1} pi x),
  // cos(...)], all dims concatenated, raw input appended last if configured.
  int freq_encode(int a, const FrequencyEncodingConfig& cfg) {
    const auto& x = value(a);
    int K = cfg.octaves;
    Node n = make_node(Op::kFreqEncode, a, -1, x.rows, cfg.output_dim(x.cols));
    n.i0 = K;
    n.i1 = cfg.include_identity ? 1 : 0;
    typename Tensor<T>::FlatArr xd(x.rows), sc(x.rows);
    for (long d = 0; d < x.cols; ++d) {
      xd = x.mat().col(d);
      for (int k = 0; k < K; ++k) {
        T f = static_cast<T>(3.14159265358979323846 * std::pow(2.0, k));
        long c = d * 2 * K + 2 * k;
        sc = (xd * f).sin();
        for (long p = 0; p < x.rows; ++p) n.val.at(p, c) = sc[p];
        sc = (xd * f).cos();
        for (long p = 0; p < x.rows; ++p) n.val.at(p, c + 1) = sc[p];
      }
      if (cfg.include_identity)
        for (long p = 0; p < x.rows; ++p) n.val.at(p, x.cols * 2 * K + d) = x.at(p, d);
    }
    return push(std::move(n));
  }

  // Trilinear multiresolution hash lookup of [P,3] points in [-1,1]^3 against
  // a [table_size, levels*features] table. Differentiable w.r.t. both the
  // table and the points; out-of-bounds points clamp and get zero point grads.
  int hash_encode(int points, int table, const HashGridState* grid) {
    const auto& p = value(points);
    const auto& t = value(table);
    if (p.cols != 3)
      throw std::runtime_error("hash_encode: points must be [P,3], got " + p.shape_str());
    if (t.rows != grid->cfg.table_size || t.cols != grid->cfg.output_dim())
      throw std::runtime_error("hash_encode: table shape " + t.shape_str() + " does not match config");
    Node n = make_node(Op::kHashEncode, points, table, p.rows, grid->cfg.output_dim());
    n.grid = grid;
    hash_forward(p, t, *grid, n.val);
    return push(std::move(n));
  }

  // ---- backward ----

  // Gradients of a scalar loss for every trainable parameter of the bound
  // store; parameters the loss never touches get zero tensors.
  GradMap<T> backward(int loss) {
    const Tensor<T>& lv = value(loss);
    if (lv.rows != 1 || lv.cols != 1)
      throw std::runtime_error("backward: loss must be scalar, got " + lv.shape_str());
    return backward_seeded(loss, Tensor<T>::scalar(1));
  }

  // Seeded variant for vector-Jacobian products (e.g. pixel gradients from a
  // feature extractor seeding a re-rendered chunk).
  GradMap<T> backward_seeded(int root, const Tensor<T>& seed) {
    if (!grad_enabled_) throw std::runtime_error("backward: graph built with grad disabled");
    if (!value(root).same_shape(seed))
      throw std::runtime_error("backward: seed shape " + seed.shape_str() +
                               " != node shape " + value(root).shape_str());
    if (node(root).req) {
      ensure_grad(root).arr() += seed.arr();
      for (int i = root; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.req || n.grad.size() == 0) continue;
        push_local(i);
      }
    }
    GradMap<T> out;
    if (store_) {
      for (const auto& [name, e] : *store_) {
        if (!e.trainable) continue;
        auto it = param_ids_.find(name);
        if (it != param_ids_.end() && nodes_[it->second].grad.size() != 0)
          out.emplace(name, nodes_[it->second].grad);
        else
          out.emplace(name, Tensor<T>::zeros(e.value.rows, e.value.cols));
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    Op op = Op::kConst;
    int a = -1, b = -1;
    long i0 = 0, i1 = 0;
    T x0 = 0, x1 = 0;
    bool req = false;
    const Tensor<T>* bound = nullptr;
    const HashGridState* grid = nullptr;
    std::string pname;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;  // deque: value()/gradient() references stay valid as nodes append
  std::map<std::string, int> param_ids_;
  ParameterStore<T>* store_ = nullptr;

  const Node& node(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::runtime_error("graph: bad node id " + std::to_string(id));
    return nodes_[id];
  }

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int push_leaf(Op op, Tensor<T> t, bool req) {
    Node n;
    n.op = op;
    n.val = std::move(t);
    n.req = req;
    return push(std::move(n));
  }

  Node make_node(Op op, int a, int b, long rows, long cols) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.req = grad_enabled_ && ((a >= 0 && nodes_[a].req) || (b >= 0 && nodes_[b].req));
    n.val = Tensor<T>(rows, cols);
    return n;
  }

  Node unary_node(Op op, int a) {
    const auto& x = value(a);
    return make_node(op, a, -1, x.rows, x.cols);
  }

  enum BcastMode : long { kSame = 0, kScalar = 1, kRow = 2, kCol = 3 };

  int push_binary(Op op, int a, int b) {
    const auto& xa = value(a);
    const auto& xb = value(b);
    long mode;
    if (xa.same_shape(xb)) mode = kSame;
    else if (xb.rows == 1 && xb.cols == 1) mode = kScalar;
    else if (xb.rows == 1 && xb.cols == xa.cols) mode = kRow;
    else if (xb.cols == 1 && xb.rows == xa.rows) mode = kCol;
    else
      throw std::runtime_error(op_name(op) + std::string(": incompatible shapes ") +
                               xa.shape_str() + " vs " + xb.shape_str());
    Node n = make_node(op, a, b, xa.rows, xa.cols);
    n.i0 = mode;
    auto am = xa.mat();
    auto bm = xb.mat();
    auto om = n.val.mat();
    switch (op) {
      case Op::kAdd:
        if (mode == kSame) om = am + bm;
        else if (mode == kScalar) om.array() = am.array() + xb.v[0];
        else if (mode == kRow) om = am.rowwise() + bm.row(0);
        else om = am.colwise() + bm.col(0);
        break;
      case Op::kSub:
        if (mode == kSame) om = am - bm;
        else if (mode == kScalar) om.array() = am.array() - xb.v[0];
        else if (mode == kRow) om = am.rowwise() - bm.row(0);
        else om = am.colwise() - bm.col(0);
        break;
      case Op::kMul:
        if (mode == kSame) om.array() = am.array() * bm.array();
        else if (mode == kScalar) om.array() = am.array() * xb.v[0];
        else if (mode == kRow) om.array() = am.array().rowwise() * bm.row(0).array();
        else om.array() = am.array().colwise() * bm.col(0).array();
        break;
      case Op::kDiv:
        if (mode == kSame) om.array() = am.array() / bm.array();
        else if (mode == kScalar) om.array() = am.array() / xb.v[0];
        else if (mode == kRow) om.array() = am.array().rowwise() / bm.row(0).array();
        else om.array() = am.array().colwise() / bm.col(0).array();
        break;
      default:
        throw std::runtime_error("push_binary: not a binary op");
    }
    return push(std::move(n));
  }

 public:
  int matmul(int a, int b) {
    const auto& xa = value(a);
    const auto& xb = value(b);
    if (xa.cols != xb.rows)
      throw std::runtime_error("matmul: inner dims differ, " + xa.shape_str() + " vs " +
                               xb.shape_str());
    Node n = make_node(Op::kMatmul, a, b, xa.rows, xb.cols);
    n.val.mat().noalias() = xa.mat() * xb.mat();
    return push(std::move(n));
  }

 private:
  Tensor<T>& ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Tensor<T>& v = value(id);
      n.grad = Tensor<T>::zeros(v.rows, v.cols);
    }
    return n.grad;
  }

  // dst (operand-shaped) += reduce of g (output-shaped) per broadcast mode
  void add_reduced(Tensor<T>& dst, const Tensor<T>& g, long mode) {
    switch (mode) {
      case kSame: dst.arr() += g.arr(); break;
      case kScalar: dst.v[0] += g.arr().sum(); break;
      case kRow: dst.mat().row(0) += g.mat().colwise().sum(); break;
      case kCol: dst.mat().col(0) += g.mat().rowwise().sum(); break;
    }
  }

  // apply rhs operand (with broadcast) multiplicatively onto t (output-shaped)
  void mul_bcast(Tensor<T>& t, const Tensor<T>& b, long mode) {
    switch (mode) {
      case kSame: t.arr() *= b.arr(); break;
      case kScalar: t.arr() *= b.v[0]; break;
      case kRow: t.mat().array().rowwise() *= b.mat().row(0).array(); break;
      case kCol: t.mat().array().colwise() *= b.mat().col(0).array(); break;
    }
  }

  void div_bcast(Tensor<T>& t, const Tensor<T>& b, long mode) {
    switch (mode) {
      case kSame: t.arr() /= b.arr(); break;
      case kScalar: t.arr() /= b.v[0]; break;
      case kRow: t.mat().array().rowwise() /= b.mat().row(0).array(); break;
      case kCol: t.mat().array().colwise() /= b.mat().col(0).array(); break;
    }
  }

  bool wants(int id) const { return id >= 0 && nodes_[id].req; }

  void push_local(int id) {
    Node& n = nodes_[id];
    const Tensor<T>& g = n.grad;
    switch (n.op) {
      case Op::kConst:
      case Op::kInput:
      case Op::kParam:
        break;

      case Op::kAdd: {
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr();
        if (wants(n.b)) add_reduced(ensure_grad(n.b), g, n.i0);
        break;
      }
      case Op::kSub: {
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr();
        if (wants(n.b)) {
          Tensor<T> t = g;
          t.arr() = -t.arr();
          add_reduced(ensure_grad(n.b), t, n.i0);
        }
        break;
      }
      case Op::kMul: {
        if (wants(n.a)) {
          Tensor<T> t = g;
          mul_bcast(t, value(n.b), n.i0);
          ensure_grad(n.a).arr() += t.arr();
        }
        if (wants(n.b)) {
          Tensor<T> t = g;
          t.arr() *= value(n.a).arr();
          add_reduced(ensure_grad(n.b), t, n.i0);
        }
        break;
      }
      case Op::kDiv: {
        if (wants(n.a)) {
          Tensor<T> t = g;
          div_bcast(t, value(n.b), n.i0);
          ensure_grad(n.a).arr() += t.arr();
        }
        if (wants(n.b)) {
          // d/db (a/b) = -out/b
          Tensor<T> t = g;
          t.arr() *= n.val.arr();
          t.arr() = -t.arr();
          div_bcast(t, value(n.b), n.i0);
          add_reduced(ensure_grad(n.b), t, n.i0);
        }
        break;
      }
      case Op::kMatmul: {
        if (wants(n.a))
          ensure_grad(n.a).mat().noalias() += g.mat() * value(n.b).mat().transpose();
        if (wants(n.b))
          ensure_grad(n.b).mat().noalias() += value(n.a).mat().transpose() * g.mat();
        break;
      }

      case Op::kAffine:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr() * n.x0;
        break;
      case Op::kExp:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr() * n.val.arr();
        break;
      case Op::kLog:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr() / value(n.a).arr();
        break;
      case Op::kSqrt:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          for (long i = 0; i < g.size(); ++i)
            if (n.val.v[i] > 0) da.v[i] += g.v[i] / (2 * n.val.v[i]);
        }
        break;
      case Op::kSquare:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr() * value(n.a).arr() * T(2);
        break;
      case Op::kAbs:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          for (long i = 0; i < g.size(); ++i)
            da.v[i] += x.v[i] > 0 ? g.v[i] : (x.v[i] < 0 ? -g.v[i] : T(0));
        }
        break;
      case Op::kTanh:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr() * (T(1) - n.val.arr().square());
        break;
      case Op::kSigmoid:
        if (wants(n.a))
          ensure_grad(n.a).arr() += g.arr() * n.val.arr() * (T(1) - n.val.arr());
        break;
      case Op::kRelu:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          for (long i = 0; i < g.size(); ++i)
            if (x.v[i] > 0) da.v[i] += g.v[i];
        }
        break;
      case Op::kSoftplus:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          for (long i = 0; i < g.size(); ++i) {
            T bx = n.x0 * x.v[i];
            T s = bx > 0 ? T(1) / (T(1) + std::exp(-bx)) : std::exp(bx) / (T(1) + std::exp(bx));
            da.v[i] += g.v[i] * s;
          }
        }
        break;
      case Op::kClamp:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          for (long i = 0; i < g.size(); ++i)
            if (x.v[i] > n.x0 && x.v[i] < n.x1) da.v[i] += g.v[i];
        }
        break;

      case Op::kSumAll:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.v[0];
        break;
      case Op::kMeanAll:
        if (wants(n.a))
          ensure_grad(n.a).arr() += g.v[0] / static_cast<T>(value(n.a).size());
        break;
      case Op::kRowSum:
        if (wants(n.a)) ensure_grad(n.a).mat().colwise() += g.mat().col(0);
        break;

      case Op::kL2NormRows:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          for (long i = 0; i < x.rows; ++i) {
            T r = std::max(x.mat().row(i).norm(), T(1e-12));
            T dot = n.val.mat().row(i).dot(g.mat().row(i));
            da.mat().row(i) += (g.mat().row(i) - n.val.mat().row(i) * dot) / r;
          }
        }
        break;

      case Op::kConcatCols: {
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          da.mat() += g.mat().leftCols(n.i0);
        }
        if (wants(n.b)) {
          Tensor<T>& db = ensure_grad(n.b);
          db.mat() += g.mat().rightCols(g.cols - n.i0);
        }
        break;
      }
      case Op::kSliceCols:
        if (wants(n.a)) ensure_grad(n.a).mat().middleCols(n.i0, g.cols) += g.mat();
        break;
      case Op::kBroadcastRows:
        if (wants(n.a)) ensure_grad(n.a).mat().row(0) += g.mat().colwise().sum();
        break;
      case Op::kGatherRow:
        if (wants(n.a)) ensure_grad(n.a).mat().row(n.i0) += g.mat().row(0);
        break;
      case Op::kReshape:
        if (wants(n.a)) ensure_grad(n.a).arr() += g.arr();
        break;

      case Op::kSegSum:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          long seg = n.i0;
          for (long s = 0; s < g.rows; ++s)
            da.mat().middleRows(s * seg, seg).rowwise() += g.mat().row(s);
        }
        break;
      case Op::kSegShiftUp:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          long seg = n.i0;
          for (long s = 0; s < g.rows / seg; ++s) {
            long base = s * seg;
            if (seg > 1)
              da.mat().middleRows(base + 1, seg - 1) += g.mat().middleRows(base, seg - 1);
            da.mat().row(base + seg - 1) += g.mat().row(base + seg - 1);
          }
        }
        break;
      case Op::kSegCumprodExcl:
        if (wants(n.a)) {
          // dx_j = y_j * D_j with D_j = g_{j+1} + x_{j+1} D_{j+1}: no division,
          // safe when some x are exactly 0 (fully opaque samples).
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          long seg = n.i0;
          for (long s = 0; s < x.rows / seg; ++s) {
            long base = s * seg;
            T d = 0;
            for (long j = seg - 1; j >= 0; --j) {
              if (j < seg - 1) d = g.v[base + j + 1] + x.v[base + j + 1] * d;
              da.v[base + j] += n.val.v[base + j] * d;
            }
          }
        }
        break;

      case Op::kFreqEncode:
        if (wants(n.a)) {
          Tensor<T>& da = ensure_grad(n.a);
          const Tensor<T>& x = value(n.a);
          long K = n.i0;
          for (long p = 0; p < x.rows; ++p) {
            for (long d = 0; d < x.cols; ++d) {
              T acc = 0;
              for (long k = 0; k < K; ++k) {
                T f = static_cast<T>(3.14159265358979323846 * std::pow(2.0, static_cast<int>(k)));
                long c = d * 2 * K + 2 * k;
                T a = f * x.at(p, d);
                acc += f * (std::cos(a) * g.at(p, c) - std::sin(a) * g.at(p, c + 1));
              }
              if (n.i1) acc += g.at(p, x.cols * 2 * K + d);
              da.at(p, d) += acc;
            }
          }
        }
        break;

      case Op::kHashEncode:
        if (wants(n.b)) hash_backward_table(value(n.a), *n.grid, g, ensure_grad(n.b));
        if (wants(n.a))
          hash_backward_points(value(n.a), value(n.b), *n.grid, g, ensure_grad(n.a));
        break;
    }
  }

  static void check_seg(const Tensor<T>& x, long seg, const char* who) {
    if (seg < 1 || x.rows % seg != 0)
      throw std::runtime_error(std::string(who) + ": rows " + std::to_string(x.rows) +
                               " not divisible by segment " + std::to_string(seg));
  }

  static const char* op_name(Op op) {
    switch (op) {
      case Op::kAdd: return "add";
      case Op::kSub: return "sub";
      case Op::kMul: return "mul";
      case Op::kDiv: return "div";
      default: return "op";
    }
  }

  // Shared corner enumeration for the hash grid forward/backward. With
  // partials the callback also receives dw/dp per axis (zero where the point
  // clamped against the domain).
  template <bool WithPartials, typename Fn>
  static void hash_visit(const Tensor<T>& pts, const HashGridState& grid, Fn&& fn) {
    const auto& cfg = grid.cfg;
    const bool pow2 = (cfg.table_size & (cfg.table_size - 1)) == 0;
    const uint32_t mask = static_cast<uint32_t>(cfg.table_size - 1);
    for (long i = 0; i < pts.rows; ++i) {
      const T rx = pts.at(i, 0), ry = pts.at(i, 1), rz = pts.at(i, 2);
      T px = std::clamp(rx, T(-1), T(1));
      T py = std::clamp(ry, T(-1), T(1));
      T pz = std::clamp(rz, T(-1), T(1));
      for (int l = 0; l < cfg.levels; ++l) {
        const T r = static_cast<T>(grid.res[l]);
        T ux = (px + 1) * T(0.5) * r;
        T uy = (py + 1) * T(0.5) * r;
        T uz = (pz + 1) * T(0.5) * r;
        long cx = std::min(static_cast<long>(ux), grid.res[l] - 1L);
        long cy = std::min(static_cast<long>(uy), grid.res[l] - 1L);
        long cz = std::min(static_cast<long>(uz), grid.res[l] - 1L);
        T fx = ux - cx, fy = uy - cy, fz = uz - cz;
        const T sx = (rx > -1 && rx < 1) ? r * T(0.5) : T(0);
        const T sy = (ry > -1 && ry < 1) ? r * T(0.5) : T(0);
        const T sz = (rz > -1 && rz < 1) ? r * T(0.5) : T(0);
        for (int corner = 0; corner < 8; ++corner) {
          int dx = corner & 1, dy = (corner >> 1) & 1, dz = corner >> 2;
          T wx = dx ? fx : 1 - fx, wy = dy ? fy : 1 - fy, wz = dz ? fz : 1 - fz;
          uint32_t h = (static_cast<uint32_t>(cx + dx) * 1u) ^
                       (static_cast<uint32_t>(cy + dy) * 2654435761u) ^
                       (static_cast<uint32_t>(cz + dz) * 805459861u);
          uint32_t idx = pow2 ? (h & mask) : (h % static_cast<uint32_t>(cfg.table_size));
          if constexpr (WithPartials) {
            fn(i, l, idx, wx * wy * wz, (dx ? sx : -sx) * wy * wz,
               (dy ? sy : -sy) * wx * wz, (dz ? sz : -sz) * wx * wy);
          } else {
            fn(i, l, idx, wx * wy * wz);
          }
        }
      }
    }
  }

  static void hash_forward(const Tensor<T>& pts, const Tensor<T>& table,
                           const HashGridState& grid, Tensor<T>& out) {
    const int F = grid.cfg.features;
    std::fill(out.v.begin(), out.v.end(), T(0));
    hash_visit<false>(pts, grid, [&](long i, int l, uint32_t idx, T w) {
      const T* trow = &table.v[static_cast<size_t>(idx) * table.cols + l * F];
      T* orow = &out.v[static_cast<size_t>(i) * out.cols + l * F];
      for (int f = 0; f < F; ++f) orow[f] += w * trow[f];
    });
  }

  static void hash_backward_table(const Tensor<T>& pts, const HashGridState& grid,
                                  const Tensor<T>& g, Tensor<T>& dtable) {
    const int F = grid.cfg.features;
    hash_visit<false>(pts, grid, [&](long i, int l, uint32_t idx, T w) {
      T* trow = &dtable.v[static_cast<size_t>(idx) * dtable.cols + l * F];
      const T* grow = &g.v[static_cast<size_t>(i) * g.cols + l * F];
      for (int f = 0; f < F; ++f) trow[f] += w * grow[f];
    });
  }

  static void hash_backward_points(const Tensor<T>& pts, const Tensor<T>& table,
                                   const HashGridState& grid, const Tensor<T>& g,
                                   Tensor<T>& dpts) {
    const int F = grid.cfg.features;
    hash_visit<true>(pts, grid, [&](long i, int l, uint32_t idx, T, T gx, T gy, T gz) {
      const T* trow = &table.v[static_cast<size_t>(idx) * table.cols + l * F];
      const T* grow = &g.v[static_cast<size_t>(i) * g.cols + l * F];
      T dot = 0;
      for (int f = 0; f < F; ++f) dot += grow[f] * trow[f];
      dpts.at(i, 0) += dot * gx;
      dpts.at(i, 1) += dot * gy;
      dpts.at(i, 2) += dot * gz;
    });
  }
};

}  // namespace mvsdf
