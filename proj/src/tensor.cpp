#include "retovla/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace retovla {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::atomic<std::uint64_t> next_node_id{1};

std::shared_ptr<TensorNode> make_node(Shape shape, Buffer data, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Creates the output node and records it when any input requires grad.
Tensor emit(Shape shape, Buffer data, std::initializer_list<const Tensor*> inputs,
            ComputationGraph::BackwardFn fn) {
  ComputationGraph& graph = current_graph();
  const bool track = graph.recording() && any_requires_grad(inputs);
  auto out = make_node(std::move(shape), std::move(data), track);
  if (track) {
    std::vector<std::shared_ptr<TensorNode>> in;
    in.reserve(inputs.size());
    for (const Tensor* t : inputs) in.push_back(t->node());
    graph.record(std::move(in), out, std::move(fn));
  }
  return Tensor(out);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

// True when `suffix` equals the trailing dimensions of `full`.
bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

std::size_t check_suffix_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  return b.numel();
}

Shape drop_last2(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

// Visits output elements in row-major order with the matching source offset
// under per-axis source strides.
template <typename F>
void permuted_walk(const Shape& shape, const std::vector<std::size_t>& stride, F&& fn) {
  const std::size_t r = shape.size();
  const std::size_t total = shape_numel(shape);
  if (total == 0) return;
  if (r == 0) {
    fn(0, 0);
    return;
  }
  const std::size_t inner = shape[r - 1], inner_stride = stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t base = 0;
  for (std::size_t flat = 0; flat < total; flat += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(flat + j, base + j * inner_stride);
    for (std::size_t i = r - 1; i-- > 0;) {
      base += stride[i];
      if (++idx[i] < shape[i]) break;
      base -= idx[i] * stride[i];
      idx[i] = 0;
    }
  }
}

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;

// In-place, max-subtracted softmax over each length-w row.
void softmax_rows(double* data, std::size_t rows, std::size_t w, const char* op) {
  if (!ArrayMap(data, static_cast<Eigen::Index>(rows * w)).allFinite()) {
    throw NumericError(std::string(op) + ": non-finite input");
  }
  // Whole-block exp keeps the vector lanes full when w is not a multiple of the SIMD width.
  Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
      data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(w));
  const Eigen::ArrayXd top = a.rowwise().maxCoeff();
  a.colwise() -= top;
  a = a.exp();
  const Eigen::ArrayXd inv = a.rowwise().sum().inverse();
  a.colwise() *= inv;
}

// Writes a full-size contribution into n's gradient: overwrite on first
// touch, accumulate afterwards.
template <typename F>
void write_grad(TensorNode& n, F&& value_at) {
  bool fresh = false;
  double* g = n.grad_target(fresh);
  const std::size_t size = n.data.size();
  if (fresh) {
    for (std::size_t i = 0; i < size; ++i) g[i] = value_at(i);
  } else {
    for (std::size_t i = 0; i < size; ++i) g[i] += value_at(i);
  }
}

// Whole-gradient matrix contribution: = on first touch, += afterwards.
template <typename Expr>
void write_grad_mat(TensorNode& n, Eigen::Index rows, Eigen::Index cols, const Expr& expr) {
  bool fresh = false;
  double* g = n.grad_target(fresh);
  MapMat dst(g, rows, cols);
  if (fresh) {
    dst.noalias() = expr;
  } else {
    dst.noalias() += expr;
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

double* TensorNode::grad_target(bool& fresh) {
  fresh = !has_grad;
  if (fresh) {
    grad.resize(data.size());
    has_grad = true;
  }
  return grad.data();
}

Buffer& TensorNode::grad_buffer() {
  if (!has_grad) {
    grad.assign(data.size(), 0.0);
    has_grad = true;
  }
  return grad;
}

void TensorNode::accumulate_grad(const double* src, std::size_t n) {
  if (!has_grad) {
    grad.assign(src, src + n);
    has_grad = true;
    return;
  }
  for (std::size_t i = 0; i < n; ++i) grad[i] += src[i];
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  node_ = make_node(std::move(shape), Buffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data), true);
  t.node_->is_parameter = true;
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "data");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return node_->data[offset];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }
bool Tensor::is_parameter() const { return defined() && node_->is_parameter; }
bool Tensor::has_grad() const { return defined() && node_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw GraphError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "grad");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  node_->grad.assign(node_->data.size(), 0.0);
  node_->has_grad = true;
}

void Tensor::clear_grad() {
  if (!defined()) return;
  node_->grad.clear();
  node_->has_grad = false;
}

std::uint64_t Tensor::node_id() const { return defined() ? node_->id : 0; }

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(make_node(shape(), node_->data, requires_grad));
}

// ---- graph ----------------------------------------------------------------

void ComputationGraph::record(std::vector<std::shared_ptr<TensorNode>> inputs,
                              std::shared_ptr<TensorNode> output, BackwardFn backward) {
  if (consumed_) {
    records_.clear();
    consumed_ = false;
  }
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
}

void ComputationGraph::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw GraphError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (records_.empty()) {
    throw GraphError(consumed_ ? "backward: graph already consumed" : "backward: graph is empty");
  }
  if (!loss.requires_grad()) throw GraphError("backward: loss does not depend on any tracked tensor");
  auto& seed = loss.node()->grad_buffer();
  seed[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->has_grad) it->backward(*it->output);
  }
  records_.clear();
  consumed_ = true;
}

void ComputationGraph::reset() {
  records_.clear();
  consumed_ = false;
}

ComputationGraph& current_graph() {
  thread_local ComputationGraph graph;
  return graph;
}

NoGradGuard::NoGradGuard() : previous_(current_graph().recording()) { current_graph().set_recording(false); }
NoGradGuard::~NoGradGuard() { current_graph().set_recording(previous_); }

void backward(const Tensor& loss) { current_graph().backward(loss); }
void reset_graph() { current_graph().reset(); }

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();

  // Right-aligned broadcast of leading batch dimensions.
  const Shape la = drop_last2(sa);
  const Shape lb = drop_last2(sb);
  const std::size_t lead = std::max(la.size(), lb.size());
  Shape batch(lead);
  for (std::size_t i = 0; i < lead; ++i) {
    const std::size_t da = i + la.size() >= lead ? la[i + la.size() - lead] : 1;
    const std::size_t db = i + lb.size() >= lead ? lb[i + lb.size() - lead] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("matmul: batch dimensions not broadcastable " + shape_str(sa) + " and " + shape_str(sb));
    }
    batch[i] = std::max(da, db);
  }
  const std::size_t nbatch = shape_numel(batch);

  // Per output batch index, the matrix index into a and b.
  std::vector<std::size_t> ia(nbatch), ib(nbatch);
  for (std::size_t flat = 0; flat < nbatch; ++flat) {
    std::size_t rem = flat, offa = 0, offb = 0, stra = 1, strb = 1;
    for (std::size_t i = lead; i-- > 0;) {
      const std::size_t idx = rem % batch[i];
      rem /= batch[i];
      if (i + la.size() >= lead) {
        const std::size_t d = la[i + la.size() - lead];
        offa += (d == 1 ? 0 : idx) * stra;
        stra *= d;
      }
      if (i + lb.size() >= lead) {
        const std::size_t d = lb[i + lb.size() - lead];
        offb += (d == 1 ? 0 : idx) * strb;
        strb *= d;
      }
    }
    ia[flat] = offa;
    ib[flat] = offb;
  }

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer out(nbatch * m * n);

  // b shared by every batch entry: fold a's batch into rows.
  const bool fold = lb.empty() || shape_numel(lb) == 1;
  const bool a_full = shape_numel(la) == nbatch;
  if (fold && a_full) {
    ConstMapMat A(a.data().data(), static_cast<Eigen::Index>(nbatch * m), static_cast<Eigen::Index>(k));
    ConstMapMat B(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MapMat C(out.data(), static_cast<Eigen::Index>(nbatch * m), static_cast<Eigen::Index>(n));
    C.noalias() = A * B;
  } else {
    for (std::size_t i = 0; i < nbatch; ++i) {
      ConstMapMat A(a.data().data() + ia[i] * m * k, m, k);
      ConstMapMat B(b.data().data() + ib[i] * k * n, k, n);
      MapMat C(out.data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
  }

  auto an = a.node();
  auto bn = b.node();
  return emit(std::move(out_shape), std::move(out), {&a, &b},
              [an, bn, ia, ib, m, k, n, nbatch, fold, a_full](TensorNode& o) {
                if (fold && a_full) {
                  ConstMapMat G(o.grad.data(), nbatch * m, n);
                  if (an->requires_grad) {
                    write_grad_mat(*an, nbatch * m, k, G * ConstMapMat(bn->data.data(), k, n).transpose());
                  }
                  if (bn->requires_grad) {
                    write_grad_mat(*bn, k, n, ConstMapMat(an->data.data(), nbatch * m, k).transpose() * G);
                  }
                  return;
                }
                for (std::size_t i = 0; i < nbatch; ++i) {
                  ConstMapMat G(o.grad.data() + i * m * n, m, n);
                  if (an->requires_grad) {
                    MapMat dA(an->grad_buffer().data() + ia[i] * m * k, m, k);
                    dA.noalias() += G * ConstMapMat(bn->data.data() + ib[i] * k * n, k, n).transpose();
                  }
                  if (bn->requires_grad) {
                    MapMat dB(bn->grad_buffer().data() + ib[i] * k * n, k, n);
                    dB.noalias() += ConstMapMat(an->data.data() + ia[i] * m * k, m, k).transpose() * G;
                  }
                }
              });
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "affine");
  require_defined(weight, "affine");
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0]) {
    throw ShapeError("affine: incompatible shapes " + shape_str(sx) + " and " + shape_str(sw));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{sw[1]}) {
    throw ShapeError("affine: bias " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(sw[1]));
  }
  const std::size_t k = sw[0], n = sw[1];
  const std::size_t rows = k == 0 ? 0 : x.numel() / k;
  Shape out_shape = sx;
  out_shape.back() = n;
  Buffer out(rows * n);
  MapMat Y(out.data(), rows, n);
  Y.noalias() = ConstMapMat(x.data().data(), rows, k) * ConstMapMat(weight.data().data(), k, n);
  if (has_bias) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), n);

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = has_bias ? bias.node() : nullptr;
  auto fn = [xn, wn, bn, rows, k, n](TensorNode& o) {
    ConstMapMat G(o.grad.data(), rows, n);
    if (xn->requires_grad) write_grad_mat(*xn, rows, k, G * ConstMapMat(wn->data.data(), k, n).transpose());
    if (wn->requires_grad) write_grad_mat(*wn, k, n, ConstMapMat(xn->data.data(), rows, k).transpose() * G);
    if (bn && bn->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(bn->grad_buffer().data(), n) += G.colwise().sum();
    }
  };
  if (has_bias) return emit(std::move(out_shape), std::move(out), {&x, &weight, &bias}, std::move(fn));
  return emit(std::move(out_shape), std::move(out), {&x, &weight}, std::move(fn));
}

// ---- layout ops -----------------------------------------------------------

namespace {

Tensor permute_view(const Tensor& x, const Shape& s, const std::vector<std::size_t>& perm, const Shape* final_shape) {
  const std::size_t r = s.size();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + shape_str(s));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  if (final_shape != nullptr && shape_numel(*final_shape) != x.numel()) {
    throw ShapeError("permute_reshape: cannot view " + shape_str(out_shape) + " as " + shape_str(*final_shape));
  }

  // Source stride along each output axis.
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) stride[i] = in_stride[perm[i]];
  Buffer out(x.numel());
  const double* xd = x.data().data();
  permuted_walk(out_shape, stride, [&](std::size_t i, std::size_t off) { out[i] = xd[off]; });

  auto xn = x.node();
  Shape result = final_shape != nullptr ? *final_shape : out_shape;
  return emit(std::move(result), std::move(out), {&x}, [xn, out_shape, stride](TensorNode& o) {
    bool fresh = false;
    double* g = xn->grad_target(fresh);
    if (fresh) {
      permuted_walk(out_shape, stride, [&](std::size_t i, std::size_t off) { g[off] = o.grad[i]; });
    } else {
      permuted_walk(out_shape, stride, [&](std::size_t i, std::size_t off) { g[off] += o.grad[i]; });
    }
  });
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  require_defined(x, "permute");
  return permute_view(x, x.shape(), perm, nullptr);
}

Tensor reshape_permute(const Tensor& x, const Shape& view, const std::vector<std::size_t>& perm) {
  require_defined(x, "reshape_permute");
  if (shape_numel(view) != x.numel()) {
    throw ShapeError("reshape_permute: cannot view " + shape_str(x.shape()) + " as " + shape_str(view));
  }
  return permute_view(x, view, perm, nullptr);
}

Tensor permute_reshape(const Tensor& x, const std::vector<std::size_t>& perm, Shape shape) {
  require_defined(x, "permute_reshape");
  return permute_view(x, x.shape(), perm, &shape);
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw ShapeError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xn = x.node();
  return emit(std::move(shape), xn->data, {&x}, [xn](TensorNode& o) {
    xn->accumulate_grad(o.grad.data(), o.grad.size());
  });
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sa.size() == sb.size() && axis < sa.size();
  for (std::size_t i = 0; ok && i < sa.size(); ++i) ok = (i == axis) || sa[i] == sb[i];
  if (!ok) {
    throw ShapeError("concat: shapes " + shape_str(sa) + " and " + shape_str(sb) + " disagree off axis " +
                     std::to_string(axis));
  }
  if (sb[axis] == 0) return a;
  if (sa[axis] == 0) return b;

  const std::size_t outer = shape_numel(Shape(sa.begin(), sa.begin() + axis));
  const std::size_t inner = shape_numel(Shape(sa.begin() + axis + 1, sa.end()));
  const std::size_t ca = sa[axis] * inner;
  const std::size_t cb = sb[axis] * inner;
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  Buffer out(outer * (ca + cb));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.data() + o * ca, ca, out.data() + o * (ca + cb));
    std::copy_n(bd.data() + o * cb, cb, out.data() + o * (ca + cb) + ca);
  }
  auto an = a.node();
  auto bn = b.node();
  return emit(std::move(out_shape), std::move(out), {&a, &b}, [an, bn, outer, ca, cb](TensorNode& o) {
    if (an->requires_grad) {
      write_grad(*an, [&](std::size_t i) { return o.grad[(i / ca) * (ca + cb) + i % ca]; });
    }
    if (bn->requires_grad) {
      write_grad(*bn, [&](std::size_t i) { return o.grad[(i / cb) * (ca + cb) + ca + i % cb]; });
    }
  });
}

Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
  require_defined(x, "broadcast_batch");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin(), batch);
  const std::size_t n = x.numel();
  Buffer out(batch * n);
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) std::copy(xd.begin(), xd.end(), out.begin() + b * n);
  auto xn = x.node();
  return emit(std::move(out_shape), std::move(out), {&x}, [xn, batch, n](TensorNode& o) {
    auto& g = xn->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[b * n + i];
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, const Shape& index_shape) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (shape_numel(index_shape) != ids.size()) throw ShapeError("embedding: index shape does not match id count");
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  Buffer out(ids.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " exceeds vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(td.data() + ids[i] * width, width, out.data() + i * width);
  }
  Shape out_shape = index_shape;
  out_shape.push_back(width);
  auto tn = table.node();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return emit(std::move(out_shape), std::move(out), {&table}, [tn, idv = std::move(idv), width](TensorNode& o) {
    auto& g = tn->grad_buffer();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) g[idv[i] * width + j] += o.grad[i * width + j];
  });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const std::size_t nb = check_suffix_broadcast(a, b, "add");
  const std::size_t n = a.numel();
  Buffer out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; nb > 0 && r < n; r += nb)
    for (std::size_t j = 0; j < nb; ++j) out[r + j] += bd[j];
  auto an = a.node();
  auto bn = b.node();
  return emit(a.shape(), std::move(out), {&a, &b}, [an, bn, nb](TensorNode& o) {
    if (an->requires_grad) an->accumulate_grad(o.grad.data(), o.grad.size());
    if (bn->requires_grad && nb == o.grad.size()) {
      bn->accumulate_grad(o.grad.data(), nb);
    } else if (bn->requires_grad && nb > 0) {
      auto& g = bn->grad_buffer();
      for (std::size_t r = 0; r < o.grad.size(); r += nb)
        for (std::size_t j = 0; j < nb; ++j) g[j] += o.grad[r + j];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  const std::size_t nb = check_suffix_broadcast(a, b, "sub");
  const std::size_t n = a.numel();
  Buffer out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; nb > 0 && r < n; r += nb)
    for (std::size_t j = 0; j < nb; ++j) out[r + j] -= bd[j];
  auto an = a.node();
  auto bn = b.node();
  return emit(a.shape(), std::move(out), {&a, &b}, [an, bn, nb](TensorNode& o) {
    if (an->requires_grad) an->accumulate_grad(o.grad.data(), o.grad.size());
    if (bn->requires_grad && nb > 0) {
      auto& g = bn->grad_buffer();
      for (std::size_t r = 0; r < o.grad.size(); r += nb)
        for (std::size_t j = 0; j < nb; ++j) g[j] -= o.grad[r + j];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  const std::size_t nb = check_suffix_broadcast(a, b, "mul");
  const std::size_t n = a.numel();
  Buffer out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; nb > 0 && r < n; r += nb)
    for (std::size_t j = 0; j < nb; ++j) out[r + j] = ad[r + j] * bd[j];
  auto an = a.node();
  auto bn = b.node();
  return emit(a.shape(), std::move(out), {&a, &b}, [an, bn, nb](TensorNode& o) {
    if (an->requires_grad && nb == o.grad.size()) {
      write_grad(*an, [&](std::size_t i) { return o.grad[i] * bn->data[i]; });
    } else if (an->requires_grad && nb > 0) {
      auto& g = an->grad_buffer();
      for (std::size_t r = 0; r < g.size(); r += nb)
        for (std::size_t j = 0; j < nb; ++j) g[r + j] += o.grad[r + j] * bn->data[j];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t r = 0; nb > 0 && r < o.grad.size(); r += nb)
        for (std::size_t j = 0; j < nb; ++j) g[j] += o.grad[r + j] * an->data[r + j];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  Buffer out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  auto xn = x.node();
  return emit(x.shape(), std::move(out), {&x}, [xn, factor](TensorNode& o) {
    write_grad(*xn, [&](std::size_t i) { return factor * o.grad[i]; });
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  require_defined(x, "scale_by");
  require_defined(s, "scale_by");
  if (s.numel() != 1) throw ShapeError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const double f = s.item();
  Buffer out(x.data().begin(), x.data().end());
  for (double& v : out) v *= f;
  auto xn = x.node();
  auto sn = s.node();
  return emit(x.shape(), std::move(out), {&x, &s}, [xn, sn](TensorNode& o) {
    if (xn->requires_grad) {
      const double f = sn->data[0];
      write_grad(*xn, [&](std::size_t i) { return f * o.grad[i]; });
    }
    if (sn->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * xn->data[i];
      sn->grad_buffer()[0] += acc;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined(x, "sigmoid");
  Buffer out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xd[i]));
  auto xn = x.node();
  return emit(x.shape(), std::move(out), {&x}, [xn](TensorNode& o) {
    write_grad(*xn, [&](std::size_t i) { return o.grad[i] * o.data[i] * (1.0 - o.data[i]); });
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

// Tanh approximation.
Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  const std::size_t n = x.numel();
  Buffer out(n);
  Buffer th(n);
  Eigen::Map<const Eigen::ArrayXd> v(x.data().data(), static_cast<Eigen::Index>(n));
  ArrayMap t(th.data(), static_cast<Eigen::Index>(n));
  // tanh(u) = 1 - 2 / (exp(2u) + 1), saturating cleanly at +-1.
  t = 1.0 - 2.0 / ((2.0 * kGeluC * (v + kGeluA * v * v * v)).exp() + 1.0);
  ArrayMap(out.data(), static_cast<Eigen::Index>(n)) = 0.5 * v * (1.0 + t);
  auto xn = x.node();
  return emit(x.shape(), std::move(out), {&x}, [xn, th = std::move(th)](TensorNode& o) {
    write_grad(*xn, [&](std::size_t i) {
      const double v = xn->data[i];
      const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      return o.grad[i] * (0.5 * (1.0 + th[i]) + 0.5 * v * (1.0 - th[i] * th[i]) * dinner);
    });
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  require_defined(x, "softmax_lastdim");
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax_lastdim: empty last dimension");
  const std::size_t w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  Buffer out(x.data().begin(), x.data().end());
  softmax_rows(out.data(), rows, w, "softmax_lastdim");
  auto xn = x.node();
  return emit(x.shape(), std::move(out), {&x}, [xn, w, rows](TensorNode& o) {
    bool fresh = false;
    double* g = xn->grad_target(fresh);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * w;
      const double* dy = o.grad.data() + r * w;
      double dot = 0.0;
      for (std::size_t j = 0; j < w; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < w; ++j) {
        const double v = y[j] * (dy[j] - dot);
        g[r * w + j] = fresh ? v : g[r * w + j] + v;
      }
    }
  });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale, Tensor* weights_out) {
  require_defined(q, "scaled_dot_attention");
  require_defined(k, "scaled_dot_attention");
  require_defined(v, "scaled_dot_attention");
  const Shape& sq = q.shape();
  const Shape& sk = k.shape();
  if (sq.size() < 2 || sk.size() != sq.size() || v.shape() != sk || sq.back() != sk.back() ||
      !std::equal(sq.begin(), sq.end() - 2, sk.begin())) {
    throw ShapeError("scaled_dot_attention: incompatible q " + shape_str(sq) + ", k " + shape_str(sk) + ", v " +
                     shape_str(v.shape()));
  }
  const std::size_t m = sq[sq.size() - 2], d = sq.back(), n = sk[sk.size() - 2];
  if (n == 0) throw ShapeError("scaled_dot_attention: empty key sequence");
  const std::size_t nbatch = shape_numel(drop_last2(sq));
  Buffer probs(nbatch * m * n);
  Buffer out(nbatch * m * d);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t i = 0; i < nbatch; ++i) {
    MapMat P(probs.data() + i * m * n, m, n);
    P.noalias() = scale * (ConstMapMat(qd + i * m * d, m, d) * ConstMapMat(kd + i * n * d, n, d).transpose());
    softmax_rows(P.data(), m, n, "scaled_dot_attention");
    MapMat(out.data() + i * m * d, m, d).noalias() = P * ConstMapMat(vd + i * n * d, n, d);
  }
  if (weights_out != nullptr) {
    Shape ws = sq;
    ws.back() = n;
    *weights_out = Tensor(make_node(std::move(ws), probs, false));
  }

  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  return emit(sq, std::move(out), {&q, &k, &v},
              [qn, kn, vn, probs = std::move(probs), nbatch, m, n, d, scale](TensorNode& o) {
                RowMat dP(m, n);
                bool fq = false, fk = false, fv = false;
                double* gq = qn->requires_grad ? qn->grad_target(fq) : nullptr;
                double* gk = kn->requires_grad ? kn->grad_target(fk) : nullptr;
                double* gv = vn->requires_grad ? vn->grad_target(fv) : nullptr;
                auto put = [](double* dst, bool fresh, const auto& expr) {
                  MapMat out(dst, expr.rows(), expr.cols());
                  if (fresh) {
                    out.noalias() = expr;
                  } else {
                    out.noalias() += expr;
                  }
                };
                for (std::size_t i = 0; i < nbatch; ++i) {
                  ConstMapMat P(probs.data() + i * m * n, m, n);
                  ConstMapMat G(o.grad.data() + i * m * d, m, d);
                  ConstMapMat V(vn->data.data() + i * n * d, n, d);
                  if (gv) put(gv + i * n * d, fv, P.transpose() * G);
                  if (!gq && !gk) continue;
                  dP.noalias() = G * V.transpose();
                  for (std::size_t r = 0; r < m; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += dP(r, j) * P(r, j);
                    for (std::size_t j = 0; j < n; ++j) dP(r, j) = scale * P(r, j) * (dP(r, j) - dot);
                  }
                  if (gq) put(gq + i * m * d, fq, dP * ConstMapMat(kn->data.data() + i * n * d, n, d));
                  if (gk) put(gk + i * n * d, fk, dP.transpose() * ConstMapMat(qn->data.data() + i * m * d, m, d));
                }
              });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layernorm");
  if (x.rank() == 0) throw ShapeError("layernorm: scalar input");
  const std::size_t w = x.shape().back();
  if (gain.shape() != Shape{w} || bias.shape() != Shape{w}) {
    throw ShapeError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match last dimension of " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw std::invalid_argument("layernorm: eps must be positive");
  const std::size_t rows = w == 0 ? 0 : x.numel() / w;
  Buffer out(x.numel());
  Buffer xhat(x.numel());
  Buffer rstd(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * w;
    double mu = 0.0;
    for (std::size_t j = 0; j < w; ++j) mu += in[j];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t j = 0; j < w; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(w);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < w; ++j) {
      const double h = (in[j] - mu) * rstd[r];
      xhat[r * w + j] = h;
      out[r * w + j] = h * gd[j] + bd[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return emit(x.shape(), std::move(out), {&x, &gain, &bias},
              [xn, gn, bn, w, rows, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode& o) {
                if (gn->requires_grad) {
                  auto& g = gn->grad_buffer();
                  for (std::size_t r = 0; r < o.grad.size(); r += w)
                    for (std::size_t j = 0; j < w; ++j) g[j] += o.grad[r + j] * xhat[r + j];
                }
                if (bn->requires_grad) {
                  auto& g = bn->grad_buffer();
                  for (std::size_t r = 0; r < o.grad.size(); r += w)
                    for (std::size_t j = 0; j < w; ++j) g[j] += o.grad[r + j];
                }
                if (!xn->requires_grad) return;
                bool fresh = false;
                double* g = xn->grad_target(fresh);
                const double inv_w = 1.0 / static_cast<double>(w);
                for (std::size_t r = 0; r < rows; ++r) {
                  double m1 = 0.0, m2 = 0.0;
                  for (std::size_t j = 0; j < w; ++j) {
                    const double dh = o.grad[r * w + j] * gn->data[j];
                    m1 += dh;
                    m2 += dh * xhat[r * w + j];
                  }
                  m1 *= inv_w;
                  m2 *= inv_w;
                  for (std::size_t j = 0; j < w; ++j) {
                    const double dh = o.grad[r * w + j] * gn->data[j];
                    const double v = rstd[r] * (dh - m1 - xhat[r * w + j] * m2);
                    g[r * w + j] = fresh ? v : g[r * w + j] + v;
                  }
                }
              });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return emit(Shape{1}, {acc}, {&x}, [xn](TensorNode& o) {
    auto& g = xn->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return emit(Shape{1}, {acc * inv}, {&x}, [xn, inv](TensorNode& o) {
    auto& g = xn->grad_buffer();
    for (double& v : g) v += o.grad[0] * inv;
  });
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  require_defined(prediction, "mse_loss");
  require_defined(target, "mse_loss");
  if (prediction.shape() != target.shape()) {
    throw ShapeError("mse_loss: shapes " + shape_str(prediction.shape()) + " and " + shape_str(target.shape()) +
                     " differ");
  }
  const std::size_t n = prediction.numel();
  if (n == 0) throw ShapeError("mse_loss: empty tensor");
  const double inv = 1.0 / static_cast<double>(n);
  const auto pd = prediction.data();
  const auto td = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += (pd[i] - td[i]) * (pd[i] - td[i]);
  auto pn = prediction.node();
  auto tn = target.node();
  return emit(Shape{1}, {acc * inv}, {&prediction, &target}, [pn, tn, inv](TensorNode& o) {
    const double s = 2.0 * inv * o.grad[0];
    if (pn->requires_grad) write_grad(*pn, [&](std::size_t i) { return s * (pn->data[i] - tn->data[i]); });
    if (tn->requires_grad) {
      auto& g = tn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s * (pn->data[i] - tn->data[i]);
    }
  });
}

}  // namespace retovla
