#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Each op allocates a node holding its value and a closure that
// pushes the upstream gradient into its inputs; backward() walks the graph in
// reverse topological order. Rows are samples throughout.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mla {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Rng;

namespace ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  // Zero-sized until something flows into it.
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const { return node_->value(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Matrix m);
Var leaf(Matrix m);

// Seeds d(root)/d(root) = 1; root must be 1x1.
void backward(const Var& root);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var linear(const Var& x, const Var& weight, const Var& bias);  // x * W^T + b, W is (out, in)
Var transpose(const Var& a);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast 1 x n over rows
Var add_constant(const Var& a, const Matrix& c);
Var relu(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);

// Row-wise
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Shape
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& table, std::span<const int> ids);

// Reductions
Var mean_rows(const Var& a);  // 1 x cols
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// Losses and similarities, all returning 1x1
Var cross_entropy(const Var& logits, std::span<const int> labels);
// Mean over rows of KL(target || softmax(logits / T)) scaled by T^2.
Var distill_kl(const Var& logits, const Matrix& target_probs, double temperature);
Var mse(const Var& a, const Matrix& target);
// Cosine similarity of two 1 x n rows; eps keeps the gradient finite at zero.
Var cosine(const Var& a, const Var& b, double eps = 0.0);

// Feature maps: each row is one sample laid out channel-major (c, y, x).
struct MapShape {
  int channels;
  int height;
  int width;
  int size() const { return channels * height * width; }
  int plane() const { return height * width; }
};

// 3x3 convolution, stride 1, zero padding 1. weight is (out, in * 9).
Var conv3x3(const Var& x, const Var& weight, const Var& bias, MapShape in);
Var avg_pool2(const Var& x, MapShape in);
Var upsample2(const Var& x, MapShape in);
// Adds per-sample per-channel values (rows x channels) over every position.
Var add_channel_bias(const Var& x, const Var& bias, MapShape shape);
// Mean over spatial positions: (rows, c*h*w) -> (rows, c).
Var spatial_mean(const Var& x, MapShape shape);

Var dropout(const Var& x, double p, Rng& rng);

}  // namespace ad
}  // namespace mla
