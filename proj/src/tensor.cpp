#include "bevref/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "bevref/kernels.hpp"

namespace bevref {

namespace detail {

struct TensorNode {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  std::size_t size = 0;
};

}  // namespace detail

using detail::TensorNode;

namespace {

std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const std::vector<int>& a, const std::vector<int>& b) {
  throw shape_error(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

std::vector<double>& ensure_grad(TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(n.size, 0.0);
  return n.grad;
}

void accum(TensorNode& n, const double* g) {
  auto& gr = ensure_grad(n);
  kernels::add(gr.data(), g, gr.data(), n.size);
}

Tensor make(std::vector<int> shape, std::vector<double> data, std::vector<Tensor> parents,
            std::function<void(TensorNode&)> bwd) {
  auto node = std::make_shared<TensorNode>();
  node->size = numel(shape);
  if (node->size != data.size()) throw shape_error("internal: data size mismatch");
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<double>>(std::move(data));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(bwd);
  }
  return Tensor(std::move(node));
}

void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw shape_error(std::string(op) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tensor::Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw shape_error("from_data: shape " + shape_str(shape) + " does not match data length " +
                      std::to_string(data.size()));
  auto node = std::make_shared<TensorNode>();
  node->size = data.size();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<double>>(std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  std::vector<double> d(numel(shape), 0.0);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  std::vector<double> d(numel(shape), value);
  return from_data(std::move(shape), std::move(d), false);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}, false); }

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
int Tensor::dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
std::size_t Tensor::size() const { return node_->size; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::data() const { return {node_->data->data(), node_->size}; }
std::span<double> Tensor::mutable_data() { return {node_->data->data(), node_->size}; }

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) return {};
  return {node_->grad.data(), node_->size};
}

void Tensor::clear_grad() { node_->grad.clear(); }

double Tensor::value() const {
  if (node_->size != 1) throw shape_error("value(): tensor has " + std::to_string(node_->size) + " elements");
  return (*node_->data)[0];
}

double Tensor::at(int i) const { return node_->data->at(static_cast<std::size_t>(i)); }

Tensor Tensor::leaf_view() const {
  auto node = std::make_shared<TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;  // shared storage
  node->size = node_->size;
  node->requires_grad = true;
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) shape_fail("matmul", a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      // dA += dC * B^T; materialize B^T once, then reuse the nn kernel
      std::vector<double> bt(static_cast<std::size_t>(n) * k);
      const double* bd = pb.data->data();
      for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j) bt[static_cast<std::size_t>(j) * k + p] = bd[static_cast<std::size_t>(p) * n + j];
      kernels::matmul_nn(g, bt.data(), ensure_grad(pa).data(), m, n, k);
    }
    if (pb.requires_grad) {
      kernels::matmul_tn(pa.data->data(), g, ensure_grad(pb).data(), m, k, n);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  std::vector<double> out(a.size());
  kernels::add(a.data().data(), b.data().data(), out.data(), a.size());
  return make(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) accum(*p, self.grad.data());
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || x.ndim() < 1 || x.shape().back() != bias.dim(0))
    shape_fail("add_bias", x.shape(), bias.shape());
  const std::size_t d = static_cast<std::size_t>(bias.dim(0));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    kernels::add(x.data().data() + r * d, bias.data().data(), out.data() + r * d, d);
  return make(x.shape(), std::move(out), {x, bias}, [d, rows](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) accum(px, self.grad.data());
    if (pb.requires_grad) {
      auto& gb = ensure_grad(pb);
      for (std::size_t r = 0; r < rows; ++r)
        kernels::add(gb.data(), self.grad.data() + r * d, gb.data(), d);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  std::vector<double> out(a.size());
  kernels::sub(a.data().data(), b.data().data(), out.data(), a.size());
  return make(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) accum(pa, self.grad.data());
    if (pb.requires_grad) {
      auto& gb = ensure_grad(pb);
      kernels::axpy(-1.0, self.grad.data(), gb.data(), self.size);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  std::vector<double> out(a.size());
  kernels::mul(a.data().data(), b.data().data(), out.data(), a.size());
  return make(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    std::vector<double> tmp(self.size);
    if (pa.requires_grad) {
      kernels::mul(self.grad.data(), pb.data->data(), tmp.data(), self.size);
      accum(pa, tmp.data());
    }
    if (pb.requires_grad) {
      kernels::mul(self.grad.data(), pa.data->data(), tmp.data(), self.size);
      accum(pb, tmp.data());
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.size());
  kernels::scale(x.data().data(), s, out.data(), x.size());
  return make(x.shape(), std::move(out), {x}, [s](TensorNode& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) kernels::axpy(s, self.grad.data(), ensure_grad(p).data(), self.size);
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += c;
  return make(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) accum(p, self.grad.data());
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  kernels::relu(x.data().data(), out.data(), x.size());
  return make(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad)
      kernels::relu_bwd(p.data->data(), self.grad.data(), ensure_grad(p).data(), self.size);
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* y = self.data->data();
    for (std::size_t i = 0; i < self.size; ++i) gp[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xd[i]);
  return make(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* xv = p.data->data();
    for (std::size_t i = 0; i < self.size; ++i) gp[i] += self.grad[i] / xv[i];
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
  return make(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* y = self.data->data();
    for (std::size_t i = 0; i < self.size; ++i) gp[i] += self.grad[i] * y[i];
  });
}

Tensor abs(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(xd[i]);
  return make(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* xv = p.data->data();
    for (std::size_t i = 0; i < self.size; ++i) {
      if (xv[i] > 0.0)
        gp[i] += self.grad[i];
      else if (xv[i] < 0.0)
        gp[i] -= self.grad[i];
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, xd[i]));
  return make(x.shape(), std::move(out), {x}, [lo, hi](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* xv = p.data->data();
    for (std::size_t i = 0; i < self.size; ++i)
      if (xv[i] > lo && xv[i] < hi) gp[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  check_2d(x, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j) * r + i] = xd[static_cast<std::size_t>(i) * c + j];
  return make({c, r}, std::move(out), {x}, [r, c](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i)
        gp[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
  });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = x.node()->data;  // same storage, no copy
  node->size = x.size();
  node->requires_grad = x.requires_grad();
  if (node->requires_grad) {
    node->parents.push_back(x.node());
    node->backward_fn = [](TensorNode& self) { accum(*self.parents[0], self.grad.data()); };
  }
  return Tensor(std::move(node));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat_rows: no parts");
  const int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.dim(1) != cols) shape_fail("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows) * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make({rows, cols}, std::move(out), parents, [](TensorNode& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& gp = ensure_grad(*p);
        kernels::add(gp.data(), self.grad.data() + off, gp.data(), p->size);
      }
      off += p->size;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat_cols: no parts");
  const int rows = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    if (p.dim(0) != rows) shape_fail("concat_cols", parts[0].shape(), p.shape());
    cols += p.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t pc = static_cast<std::size_t>(p.dim(1));
    for (int r = 0; r < rows; ++r)
      std::memcpy(out.data() + static_cast<std::size_t>(r) * cols + coff,
                  p.data().data() + static_cast<std::size_t>(r) * pc, pc * sizeof(double));
    coff += pc;
  }
  return make({rows, cols}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
              [rows, cols](TensorNode& self) {
                std::size_t coff = 0;
                for (auto& p : self.parents) {
                  const std::size_t pc = static_cast<std::size_t>(p->shape[1]);
                  if (p->requires_grad) {
                    auto& gp = ensure_grad(*p);
                    for (int r = 0; r < rows; ++r)
                      kernels::add(gp.data() + static_cast<std::size_t>(r) * pc,
                                   self.grad.data() + static_cast<std::size_t>(r) * cols + coff,
                                   gp.data() + static_cast<std::size_t>(r) * pc, pc);
                  }
                  coff += pc;
                }
              });
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
  check_2d(x, "slice_rows");
  if (begin < 0 || end > x.dim(0) || begin >= end)
    throw shape_error("slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") for " + shape_str(x.shape()));
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  std::vector<double> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  return make({end - begin, x.dim(1)}, std::move(out), {x}, [begin, cols](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    kernels::add(gp.data() + begin * cols, self.grad.data(), gp.data() + begin * cols, self.size);
  });
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
  check_2d(x, "slice_cols");
  if (begin < 0 || end > x.dim(1) || begin >= end)
    throw shape_error("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") for " + shape_str(x.shape()));
  const int rows = x.dim(0);
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  const std::size_t width = static_cast<std::size_t>(end - begin);
  std::vector<double> out(static_cast<std::size_t>(rows) * width);
  for (int r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * width, x.data().data() + r * cols + begin, width * sizeof(double));
  return make({rows, end - begin}, std::move(out), {x}, [begin, rows, cols, width](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    for (int r = 0; r < rows; ++r)
      kernels::add(gp.data() + r * cols + begin, self.grad.data() + r * width,
                   gp.data() + r * cols + begin, width);
  });
}

Tensor gather_rows(const Tensor& x, std::vector<int> rows) {
  check_2d(x, "gather_rows");
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  std::vector<double> out(rows.size() * cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int idx = rows[r];
    if (idx < 0 || idx >= x.dim(0))
      throw shape_error("gather_rows: index " + std::to_string(idx) + " out of range for " +
                        shape_str(x.shape()));
    std::memcpy(out.data() + r * cols, x.data().data() + static_cast<std::size_t>(idx) * cols,
                cols * sizeof(double));
  }
  const int nrows = static_cast<int>(rows.size());
  return make({nrows, x.dim(1)}, std::move(out), {x},
              [rows = std::move(rows), cols](TensorNode& self) {
                auto& p = *self.parents[0];
                if (!p.requires_grad) return;
                auto& gp = ensure_grad(p);
                for (std::size_t r = 0; r < rows.size(); ++r) {
                  double* dst = gp.data() + static_cast<std::size_t>(rows[r]) * cols;
                  kernels::add(dst, self.grad.data() + r * cols, dst, cols);
                }
              });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make({1}, {s}, {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double g = self.grad[0];
    for (std::size_t i = 0; i < p.size; ++i) gp[i] += g;
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  return make({1}, {s * inv}, {x}, [inv](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < p.size; ++i) gp[i] += g;
  });
}

namespace {

struct AxisSpec {
  std::size_t outer, len, inner;
};

AxisSpec axis_spec(const std::vector<int>& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw shape_error("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  AxisSpec s{1, static_cast<std::size_t>(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= static_cast<std::size_t>(shape[i]);
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const auto spec = axis_spec(x.shape(), axis);
  const auto xd = x.data();
  for (double v : xd)
    if (!std::isfinite(v)) throw numeric_error("softmax: non-finite input");
  std::vector<double> out(x.size());
  std::vector<double> line(spec.len);
  for (std::size_t o = 0; o < spec.outer; ++o) {
    for (std::size_t in = 0; in < spec.inner; ++in) {
      const std::size_t base = o * spec.len * spec.inner + in;
      for (std::size_t l = 0; l < spec.len; ++l) line[l] = xd[base + l * spec.inner];
      const double mx = kernels::max_value(line.data(), spec.len);
      double s = 0.0;
      for (std::size_t l = 0; l < spec.len; ++l) {
        line[l] = std::exp(line[l] - mx);
        s += line[l];
      }
      const double inv = 1.0 / s;
      for (std::size_t l = 0; l < spec.len; ++l) out[base + l * spec.inner] = line[l] * inv;
    }
  }
  return make(x.shape(), std::move(out), {x}, [spec](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* y = self.data->data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < spec.outer; ++o) {
      for (std::size_t in = 0; in < spec.inner; ++in) {
        const std::size_t base = o * spec.len * spec.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < spec.len; ++l) {
          const std::size_t idx = base + l * spec.inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t l = 0; l < spec.len; ++l) {
          const std::size_t idx = base + l * spec.inner;
          gp[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor softmax_masked(const Tensor& x, const std::vector<std::uint8_t>& key_valid) {
  check_2d(x, "softmax_masked");
  const std::size_t rows = static_cast<std::size_t>(x.dim(0));
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  if (key_valid.size() != cols)
    throw shape_error("softmax_masked: mask length " + std::to_string(key_valid.size()) +
                      " vs columns " + std::to_string(cols));
  const auto xd = x.data();
  for (std::size_t j = 0; j < cols; ++j)
    if (key_valid[j])
      for (std::size_t r = 0; r < rows; ++r)
        if (!std::isfinite(xd[r * cols + j])) throw numeric_error("softmax_masked: non-finite input");
  std::vector<double> out(x.size(), 0.0);
  bool any_valid = false;
  for (auto m : key_valid) any_valid = any_valid || m;
  if (any_valid) {
    for (std::size_t r = 0; r < rows; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < cols; ++j)
        if (key_valid[j] && xd[r * cols + j] > mx) mx = xd[r * cols + j];
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j)
        if (key_valid[j]) {
          out[r * cols + j] = std::exp(xd[r * cols + j] - mx);
          s += out[r * cols + j];
        }
      const double inv = 1.0 / s;
      for (std::size_t j = 0; j < cols; ++j)
        if (key_valid[j]) out[r * cols + j] *= inv;
    }
  }
  return make(x.shape(), std::move(out), {x}, [rows, cols, key_valid](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = ensure_grad(p);
    const double* y = self.data->data();
    const double* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j)
        if (key_valid[j]) dot += g[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        if (key_valid[j]) gp[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 1) throw shape_error("layer_norm: scalar input");
  const int d = x.shape().back();
  if (gain.ndim() != 1 || gain.dim(0) != d) shape_fail("layer_norm", x.shape(), gain.shape());
  if (bias.ndim() != 1 || bias.dim(0) != d) shape_fail("layer_norm", x.shape(), bias.shape());
  const std::size_t dd = static_cast<std::size_t>(d);
  const std::size_t rows = x.size() / dd;
  std::vector<double> out(x.size());
  auto stats = std::make_shared<std::vector<double>>(rows * 2);  // mean, rstd per row
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * dd;
    double m = 0.0;
    for (std::size_t i = 0; i < dd; ++i) m += xr[i];
    m /= static_cast<double>(dd);
    double var = 0.0;
    for (std::size_t i = 0; i < dd; ++i) var += (xr[i] - m) * (xr[i] - m);
    var /= static_cast<double>(dd);
    const double rstd = 1.0 / std::sqrt(var + eps);
    (*stats)[r * 2] = m;
    (*stats)[r * 2 + 1] = rstd;
    for (std::size_t i = 0; i < dd; ++i) out[r * dd + i] = (xr[i] - m) * rstd * gd[i] + bd[i];
  }
  return make(x.shape(), std::move(out), {x, gain, bias}, [dd, rows, stats](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const double* xd = px.data->data();
    const double* gd = pg.data->data();
    const double* g = self.grad.data();
    const double nd = static_cast<double>(dd);
    for (std::size_t r = 0; r < rows; ++r) {
      const double m = (*stats)[r * 2];
      const double rstd = (*stats)[r * 2 + 1];
      const double* xr = xd + r * dd;
      const double* gr = g + r * dd;
      if (pg.requires_grad) {
        auto& gg = ensure_grad(pg);
        for (std::size_t i = 0; i < dd; ++i) gg[i] += gr[i] * (xr[i] - m) * rstd;
      }
      if (pb.requires_grad) {
        auto& gb = ensure_grad(pb);
        for (std::size_t i = 0; i < dd; ++i) gb[i] += gr[i];
      }
      if (px.requires_grad) {
        auto& gx = ensure_grad(px);
        double sum_dxhat = 0.0, sum_dxhat_xc = 0.0;
        for (std::size_t i = 0; i < dd; ++i) {
          const double dxhat = gr[i] * gd[i];
          sum_dxhat += dxhat;
          sum_dxhat_xc += dxhat * (xr[i] - m);
        }
        const double dvar = sum_dxhat_xc * (-0.5) * rstd * rstd * rstd;
        double sum_xc = 0.0;
        for (std::size_t i = 0; i < dd; ++i) sum_xc += xr[i] - m;
        const double dmu = -rstd * sum_dxhat + dvar * (-2.0 / nd) * sum_xc;
        for (std::size_t i = 0; i < dd; ++i) {
          const double dxhat = gr[i] * gd[i];
          gx[r * dd + i] += dxhat * rstd + dvar * 2.0 * (xr[i] - m) / nd + dmu / nd;
        }
      }
    }
  });
}

namespace {

// Patch row layout: 9 taps in (di, dj) row-major order, cin channels per tap.
void im2col3x3(const double* x, int h, int w, int cin, double* m) {
  const std::size_t c = static_cast<std::size_t>(cin);
  std::size_t row = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j, ++row) {
      double* dst = m + row * 9 * c;
      for (int di = -1; di <= 1; ++di) {
        const int si = std::clamp(i + di, 0, h - 1);
        for (int dj = -1; dj <= 1; ++dj) {
          const int sj = std::clamp(j + dj, 0, w - 1);
          std::memcpy(dst, x + (static_cast<std::size_t>(si) * w + sj) * c, c * sizeof(double));
          dst += c;
        }
      }
    }
  }
}

}  // namespace

Tensor conv3x3(const Tensor& x, int h, int w, const Tensor& weight, const Tensor& bias) {
  check_2d(x, "conv3x3");
  check_2d(weight, "conv3x3");
  if (x.dim(0) != h * w) throw shape_error("conv3x3: rows != h*w for " + shape_str(x.shape()));
  const int cin = x.dim(1);
  if (weight.dim(0) != 9 * cin) shape_fail("conv3x3", x.shape(), weight.shape());
  const int cout = weight.dim(1);
  if (bias.ndim() != 1 || bias.dim(0) != cout) shape_fail("conv3x3", weight.shape(), bias.shape());
  const std::size_t cells = static_cast<std::size_t>(h) * w;
  std::vector<double> m(cells * 9 * cin);
  im2col3x3(x.data().data(), h, w, cin, m.data());
  std::vector<double> out(cells * cout, 0.0);
  kernels::matmul_nn(m.data(), weight.data().data(), out.data(), cells, 9 * cin, cout);
  for (std::size_t r = 0; r < cells; ++r)
    kernels::add(out.data() + r * cout, bias.data().data(), out.data() + r * cout, cout);
  return make({h * w, cout}, std::move(out), {x, weight, bias}, [h, w, cin, cout](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const std::size_t cells = static_cast<std::size_t>(h) * w;
    const double* g = self.grad.data();
    if (pb.requires_grad) {
      auto& gb = ensure_grad(pb);
      for (std::size_t r = 0; r < cells; ++r)
        kernels::add(gb.data(), g + r * cout, gb.data(), cout);
    }
    if (pw.requires_grad) {
      // dW += M^T * dY, with the patch matrix rebuilt from the saved input
      std::vector<double> m(cells * 9 * cin);
      im2col3x3(px.data->data(), h, w, cin, m.data());
      kernels::matmul_tn(m.data(), g, ensure_grad(pw).data(), cells, 9 * cin, cout);
    }
    if (px.requires_grad) {
      std::vector<double> wt(static_cast<std::size_t>(cout) * 9 * cin);
      const double* wd = pw.data->data();
      for (int p = 0; p < 9 * cin; ++p)
        for (int q = 0; q < cout; ++q)
          wt[static_cast<std::size_t>(q) * 9 * cin + p] = wd[static_cast<std::size_t>(p) * cout + q];
      std::vector<double> dm(cells * 9 * cin, 0.0);
      kernels::matmul_nn(g, wt.data(), dm.data(), cells, cout, 9 * cin);
      auto& gx = ensure_grad(px);
      const std::size_t c = static_cast<std::size_t>(cin);
      std::size_t row = 0;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j, ++row) {
          const double* src = dm.data() + row * 9 * c;
          for (int di = -1; di <= 1; ++di) {
            const int si = std::clamp(i + di, 0, h - 1);
            for (int dj = -1; dj <= 1; ++dj) {
              const int sj = std::clamp(j + dj, 0, w - 1);
              double* dst = gx.data() + (static_cast<std::size_t>(si) * w + sj) * c;
              kernels::add(dst, src, dst, c);
              src += c;
            }
          }
        }
      }
    }
  });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::vector<std::uint8_t>* key_valid) {
  check_2d(q, "scaled_dot_attention");
  check_2d(k, "scaled_dot_attention");
  check_2d(v, "scaled_dot_attention");
  if (q.dim(1) != k.dim(1)) shape_fail("scaled_dot_attention", q.shape(), k.shape());
  if (k.dim(0) != v.dim(0)) shape_fail("scaled_dot_attention", k.shape(), v.shape());
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  Tensor weights = key_valid ? softmax_masked(scores, *key_valid) : softmax(scores, 1);
  return matmul(weights, v);
}

void backward(const Tensor& loss) {
  auto root = loss.node();
  if (!root) throw shape_error("backward: undefined tensor");
  if (root->size != 1) throw shape_error("backward: loss must be scalar, got " + shape_str(root->shape));
  if (!root->requires_grad) return;

  // Post-order DFS over the requires_grad subgraph: inputs appear before
  // consumers, so the reversed order visits every consumer before its inputs.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.assign(n->size, 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step) {
  Tensor xl = x.leaf_view();
  backward(f(xl));
  std::vector<double> analytic(xl.grad().begin(), xl.grad().end());
  if (analytic.empty()) analytic.assign(xl.size(), 0.0);
  auto xd = xl.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double v = xd[i];
    xd[i] = v + step;
    const double fp = f(xl).value();
    xd[i] = v - step;
    const double fm = f(xl).value();
    xd[i] = v;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::fabs(analytic[i] - numeric) /
                       std::max(1e-8, std::fabs(analytic[i]) + std::fabs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& f, std::span<Tensor> params, double step) {
  backward(f());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.grad().empty())
      analytic.emplace_back(p.size(), 0.0);
    else
      analytic.emplace_back(p.grad().begin(), p.grad().end());
  }
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto pd = params[pi].mutable_data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const double v = pd[i];
      pd[i] = v + step;
      const double fp = f().value();
      pd[i] = v - step;
      const double fm = f().value();
      pd[i] = v;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::fabs(analytic[pi][i] - numeric) /
                         std::max(1e-8, std::fabs(analytic[pi][i]) + std::fabs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace bevref
