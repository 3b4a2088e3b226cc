#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Dense f64 tensors with reverse-mode autodiff on a dynamic tape: every
// operation records its inputs and a backward rule; backward() walks the
// recorded graph in reverse topological order once, accumulating gradients
// additively across fan-out. Shapes must match exactly; the only broadcast
// is the bias add over the last dimension.

namespace bevref {

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorNode;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorNode> node);

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int ndim() const;
  int dim(int i) const;
  std::size_t size() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  // Parameter updates between graphs only; never call on a tensor that a live
  // graph has consumed.
  std::span<double> mutable_data();
  std::span<const double> grad() const;  // empty before backward
  // Drops the grad buffer. backward() only zeroes nodes inside the current
  // graph, so leaves shared across graphs must be cleared between passes.
  void clear_grad();
  double value() const;                  // single-element tensors
  double at(int i) const;                // flat index

  // Fresh leaf sharing this tensor's storage. Used so concurrent graphs over
  // shared parameters accumulate into private grad buffers.
  Tensor leaf_view() const;

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor transpose(const Tensor& x);  // 2-d
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);  // 2-d, equal cols
Tensor concat_cols(const std::vector<Tensor>& parts);  // 2-d, equal rows
Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor slice_cols(const Tensor& x, int begin, int end);
// Row gather; also the embedding lookup (gradient scatters into the gathered
// rows, duplicates accumulate).
Tensor gather_rows(const Tensor& x, std::vector<int> rows);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
// 2-d x; softmax over columns restricted to key_valid[j] != 0. Rows with no
// valid key come out all-zero.
Tensor softmax_masked(const Tensor& x, const std::vector<std::uint8_t>& key_valid);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
// x is an h*w-row, cin-col map in row-major cell order; weight [9*cin, cout].
// Border cells clamp to the nearest in-range cell, so a spatially constant
// input stays constant.
Tensor conv3x3(const Tensor& x, int h, int w, const Tensor& weight, const Tensor& bias);
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::vector<std::uint8_t>* key_valid = nullptr);

void backward(const Tensor& loss);

// Max over elements of |analytic - central difference| / max(1e-8, |analytic| + |numeric|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step);
double grad_check_params(const std::function<Tensor()>& f, std::span<Tensor> params, double step);

}  // namespace bevref
