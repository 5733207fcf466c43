#include "mla/autograd.hpp"

#include "mla/error.hpp"
#include "mla/rng.hpp"

#include <cmath>
#include <unordered_set>

namespace mla::ad {

namespace {

using NodePtr = std::shared_ptr<Node>;

Var make(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || (in && in->requires_grad);
  if (any) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(fn);
  }
  return Var(std::move(n));
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": operand shapes differ");
  }
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  return Var(std::move(n));
}

Var leaf(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  n->requires_grad = true;
  return Var(std::move(n));
}

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, ErrorCode::ShapeMismatch,
          "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && child->backward && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    n->backward(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), ErrorCode::ShapeMismatch, "matmul: inner dimensions differ");
  auto an = a.node(), bn = b.node();
  return make(a.value() * b.value(), {an, bn}, [an, bn](Node& self) {
    if (wants(an)) an->accumulate(self.grad * bn->value.transpose());
    if (wants(bn)) bn->accumulate(an->value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), ErrorCode::ShapeMismatch, "matmul_nt: inner dimensions differ");
  auto an = a.node(), bn = b.node();
  return make(a.value() * b.value().transpose(), {an, bn}, [an, bn](Node& self) {
    if (wants(an)) an->accumulate(self.grad * bn->value);
    if (wants(bn)) bn->accumulate(self.grad.transpose() * an->value);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.cols() == weight.cols(), ErrorCode::ShapeMismatch, "linear: input width differs from weight");
  Matrix out = x.value() * weight.value().transpose();
  NodePtr bn;
  if (bias.defined()) {
    require(bias.rows() == 1 && bias.cols() == weight.rows(), ErrorCode::ShapeMismatch,
            "linear: bias shape");
    out.rowwise() += bias.value().row(0);
    bn = bias.node();
  }
  auto xn = x.node(), wn = weight.node();
  return make(std::move(out), {xn, wn, bn}, [xn, wn, bn](Node& self) {
    if (wants(xn)) xn->accumulate(self.grad * wn->value);
    if (wants(wn)) wn->accumulate(self.grad.transpose() * xn->value);
    if (wants(bn)) bn->accumulate(self.grad.colwise().sum());
  });
}

Var transpose(const Var& a) {
  auto an = a.node();
  return make(a.value().transpose(), {an}, [an](Node& self) {
    an->accumulate(self.grad.transpose());
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  return make(a.value() + b.value(), {an, bn}, [an, bn](Node& self) {
    if (wants(an)) an->accumulate(self.grad);
    if (wants(bn)) bn->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  return make(a.value() - b.value(), {an, bn}, [an, bn](Node& self) {
    if (wants(an)) an->accumulate(self.grad);
    if (wants(bn)) bn->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  return make(a.value().cwiseProduct(b.value()), {an, bn}, [an, bn](Node& self) {
    if (wants(an)) an->accumulate(self.grad.cwiseProduct(bn->value));
    if (wants(bn)) bn->accumulate(self.grad.cwiseProduct(an->value));
  });
}

Var scale(const Var& a, double s) {
  auto an = a.node();
  return make(a.value() * s, {an}, [an, s](Node& self) { an->accumulate(self.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::ShapeMismatch, "add_row: row shape");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  auto an = a.node(), rn = row.node();
  return make(std::move(out), {an, rn}, [an, rn](Node& self) {
    if (wants(an)) an->accumulate(self.grad);
    if (wants(rn)) rn->accumulate(self.grad.colwise().sum());
  });
}

Var add_constant(const Var& a, const Matrix& c) {
  require(c.rows() == a.rows() && c.cols() == a.cols(), ErrorCode::ShapeMismatch, "add_constant");
  auto an = a.node();
  return make(a.value() + c, {an}, [an](Node& self) { an->accumulate(self.grad); });
}

Var relu(const Var& a) {
  auto an = a.node();
  return make(a.value().cwiseMax(0.0), {an}, [an](Node& self) {
    an->accumulate((an->value.array() > 0.0).select(self.grad, 0.0));
  });
}

Var tanh(const Var& a) {
  auto an = a.node();
  Matrix y = a.value().array().tanh().matrix();
  return make(std::move(y), {an}, [an](Node& self) {
    an->accumulate((self.grad.array() * (1.0 - self.value.array().square())).matrix());
  });
}

Var square(const Var& a) {
  auto an = a.node();
  return make(a.value().array().square().matrix(), {an}, [an](Node& self) {
    an->accumulate((2.0 * self.grad.array() * an->value.array()).matrix());
  });
}

namespace {

Matrix softmax_of(const Matrix& a) {
  Matrix y = a;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mx = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(const Var& a) {
  auto an = a.node();
  return make(softmax_of(a.value()), {an}, [an](Node& self) {
    const Matrix& y = self.value;
    Eigen::VectorXd dots = (self.grad.cwiseProduct(y)).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dots;
    an->accumulate(g.cwiseProduct(y));
  });
}

Var log_softmax_rows(const Var& a) {
  auto an = a.node();
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mx = y.row(r).maxCoeff();
    const double lse = mx + std::log((y.row(r).array() - mx).exp().sum());
    y.row(r).array() -= lse;
  }
  return make(std::move(y), {an}, [an](Node& self) {
    Matrix p = self.value.array().exp().matrix();
    Eigen::VectorXd sums = self.grad.rowwise().sum();
    Matrix g = self.grad;
    for (Eigen::Index r = 0; r < g.rows(); ++r) g.row(r) -= sums(r) * p.row(r);
    an->accumulate(g);
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
          ErrorCode::ShapeMismatch, "layer_norm_rows: affine shape");
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix y = xhat;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    y.row(r) = y.row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make(std::move(y), {xn, gn, bn},
              [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                const Matrix& g = self.grad;
                if (wants(gn)) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
                if (wants(bn)) bn->accumulate(g.colwise().sum());
                if (wants(xn)) {
                  Matrix gx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    Eigen::RowVectorXd gh = g.row(r).cwiseProduct(gn->value.row(0));
                    const double m1 = gh.mean();
                    const double m2 = gh.cwiseProduct(xhat.row(r)).mean();
                    gx.row(r) = inv_std(r) * (gh.array() - m1 - xhat.row(r).array() * m2);
                  }
                  xn->accumulate(gx);
                }
              });
}

Var concat_cols(const Var& a, const Var& b) {
  require(a.rows() == b.rows(), ErrorCode::ShapeMismatch, "concat_cols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  auto an = a.node(), bn = b.node();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return make(std::move(out), {an, bn}, [an, bn, ca, cb](Node& self) {
    if (wants(an)) an->accumulate(self.grad.leftCols(ca));
    if (wants(bn)) bn->accumulate(self.grad.rightCols(cb));
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<NodePtr> inputs;
  std::vector<Eigen::Index> sizes;
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorCode::ShapeMismatch, "concat_rows: column counts differ");
    rows += p.rows();
    inputs.push_back(p.node());
    sizes.push_back(p.rows());
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  auto captured = inputs;
  return make(std::move(out), std::move(inputs), [captured, sizes](Node& self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < captured.size(); ++i) {
      if (wants(captured[i])) captured[i]->accumulate(self.grad.middleRows(off, sizes[i]));
      off += sizes[i];
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorCode::ShapeMismatch,
          "slice_rows: out of range");
  auto an = a.node();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return make(a.value().middleRows(start, count), {an}, [an, start, count, rows, cols](Node& self) {
    Matrix g = Matrix::Zero(rows, cols);
    g.middleRows(start, count) = self.grad;
    an->accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::ShapeMismatch,
          "slice_cols: out of range");
  auto an = a.node();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return make(a.value().middleCols(start, count), {an}, [an, start, count, rows, cols](Node& self) {
    Matrix g = Matrix::Zero(rows, cols);
    g.middleCols(start, count) = self.grad;
    an->accumulate(g);
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(), ErrorCode::ShapeMismatch, "gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make(std::move(out), {tn}, [tn, idv = std::move(idv)](Node& self) {
    Matrix g = Matrix::Zero(tn->value.rows(), tn->value.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    tn->accumulate(g);
  });
}

Var mean_rows(const Var& a) {
  auto an = a.node();
  const Eigen::Index rows = a.rows();
  return make(a.value().colwise().mean(), {an}, [an, rows](Node& self) {
    Matrix g = self.grad.replicate(rows, 1) / static_cast<double>(rows);
    an->accumulate(g);
  });
}

Var sum_all(const Var& a) {
  auto an = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {an}, [an](Node& self) {
    an->accumulate(Matrix::Constant(an->value.rows(), an->value.cols(), self.grad(0, 0)));
  });
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), ErrorCode::ShapeMismatch,
          "cross_entropy: label count differs from batch");
  Matrix p = softmax_of(logits.value());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < p.cols(), ErrorCode::ShapeMismatch, "cross_entropy: label out of range");
    loss -= std::log(std::max(p(r, y), 1e-300));
  }
  const double n = static_cast<double>(p.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  auto ln = logits.node();
  std::vector<int> lv(labels.begin(), labels.end());
  return make(std::move(out), {ln}, [ln, p = std::move(p), lv = std::move(lv), n](Node& self) {
    Matrix g = p;
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, lv[static_cast<std::size_t>(r)]) -= 1.0;
    ln->accumulate(g * (self.grad(0, 0) / n));
  });
}

Var distill_kl(const Var& logits, const Matrix& target_probs, double temperature) {
  require(target_probs.rows() == logits.rows() && target_probs.cols() == logits.cols(),
          ErrorCode::ShapeMismatch, "distill_kl: target shape");
  Matrix p = softmax_of(logits.value() / temperature);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double t = target_probs(r, c);
      if (t > 0.0) loss += t * (std::log(t) - std::log(std::max(p(r, c), 1e-300)));
    }
  }
  const double n = static_cast<double>(p.rows());
  const double t2 = temperature * temperature;
  Matrix out(1, 1);
  out(0, 0) = t2 * loss / n;
  auto ln = logits.node();
  return make(std::move(out), {ln}, [ln, p = std::move(p), target_probs, n, temperature](Node& self) {
    ln->accumulate((p - target_probs) * (self.grad(0, 0) * temperature / n));
  });
}

Var mse(const Var& a, const Matrix& target) {
  require(target.rows() == a.rows() && target.cols() == a.cols(), ErrorCode::ShapeMismatch, "mse: target shape");
  Matrix diff = a.value() - target;
  const double n = static_cast<double>(diff.size());
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  auto an = a.node();
  return make(std::move(out), {an}, [an, diff = std::move(diff), n](Node& self) {
    an->accumulate(diff * (2.0 * self.grad(0, 0) / n));
  });
}

Var cosine(const Var& a, const Var& b, double eps) {
  require(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), ErrorCode::DimMismatch,
          "cosine: operands must be equal-length rows");
  const double dot = a.value().row(0).dot(b.value().row(0));
  const double na = std::sqrt(a.value().squaredNorm() + eps);
  const double nb = std::sqrt(b.value().squaredNorm() + eps);
  const double s = dot / (na * nb);
  Matrix out(1, 1);
  out(0, 0) = s;
  auto an = a.node(), bn = b.node();
  return make(std::move(out), {an, bn}, [an, bn, na, nb, s](Node& self) {
    const double g = self.grad(0, 0);
    if (wants(an)) an->accumulate(g * (bn->value / (na * nb) - s * an->value / (na * na)));
    if (wants(bn)) bn->accumulate(g * (an->value / (na * nb) - s * bn->value / (nb * nb)));
  });
}

namespace {

// Column matrix (in*9, h*w) of 3x3 neighbourhoods for one sample.
void im2col(const double* x, MapShape s, Matrix& col, Eigen::Index col_offset) {
  const int hw = s.plane();
  for (int c = 0; c < s.channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = (c * 3 + ky) * 3 + kx;
        for (int y = 0; y < s.height; ++y) {
          const int iy = y + ky - 1;
          for (int xx = 0; xx < s.width; ++xx) {
            const int ix = xx + kx - 1;
            double v = 0.0;
            if (iy >= 0 && iy < s.height && ix >= 0 && ix < s.width) v = x[c * hw + iy * s.width + ix];
            col(row, col_offset + y * s.width + xx) = v;
          }
        }
      }
    }
  }
}

void col2im(const Matrix& col, Eigen::Index col_offset, MapShape s, double* gx) {
  const int hw = s.plane();
  for (int c = 0; c < s.channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = (c * 3 + ky) * 3 + kx;
        for (int y = 0; y < s.height; ++y) {
          const int iy = y + ky - 1;
          if (iy < 0 || iy >= s.height) continue;
          for (int xx = 0; xx < s.width; ++xx) {
            const int ix = xx + kx - 1;
            if (ix < 0 || ix >= s.width) continue;
            gx[c * hw + iy * s.width + ix] += col(row, col_offset + y * s.width + xx);
          }
        }
      }
    }
  }
}

}  // namespace

Var conv3x3(const Var& x, const Var& weight, const Var& bias, MapShape in) {
  require(x.cols() == in.size(), ErrorCode::ShapeMismatch, "conv3x3: input width differs from map shape");
  require(weight.cols() == in.channels * 9, ErrorCode::ShapeMismatch, "conv3x3: weight shape");
  const Eigen::Index batch = x.rows();
  const Eigen::Index cout = weight.rows();
  const int hw = in.plane();
  Matrix col(in.channels * 9, batch * hw);
  for (Eigen::Index b = 0; b < batch; ++b) im2col(x.value().row(b).data(), in, col, b * hw);
  Matrix prod = weight.value() * col;  // (cout, batch*hw)
  if (bias.defined()) {
    require(bias.rows() == 1 && bias.cols() == cout, ErrorCode::ShapeMismatch, "conv3x3: bias shape");
    prod.colwise() += bias.value().row(0).transpose();
  }
  Matrix out(batch, cout * hw);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index o = 0; o < cout; ++o) {
      out.block(b, o * hw, 1, hw) = prod.block(o, b * hw, 1, hw);
    }
  }
  auto xn = x.node(), wn = weight.node();
  NodePtr bn = bias.defined() ? bias.node() : nullptr;
  return make(std::move(out), {xn, wn, bn}, [xn, wn, bn, col = std::move(col), in, batch, cout, hw](Node& self) {
    Matrix g(cout, batch * hw);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index o = 0; o < cout; ++o) g.block(o, b * hw, 1, hw) = self.grad.block(b, o * hw, 1, hw);
    }
    if (wants(wn)) wn->accumulate(g * col.transpose());
    if (wants(bn)) bn->accumulate(g.rowwise().sum().transpose());
    if (wants(xn)) {
      Matrix gcol = wn->value.transpose() * g;
      Matrix gx = Matrix::Zero(batch, in.size());
      for (Eigen::Index b = 0; b < batch; ++b) col2im(gcol, b * hw, in, gx.row(b).data());
      xn->accumulate(gx);
    }
  });
}

Var avg_pool2(const Var& x, MapShape in) {
  require(x.cols() == in.size() && in.height % 2 == 0 && in.width % 2 == 0, ErrorCode::ShapeMismatch,
          "avg_pool2: map shape");
  const int oh = in.height / 2, ow = in.width / 2;
  Matrix out(x.rows(), in.channels * oh * ow);
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const double* src = x.value().row(b).data();
    for (int c = 0; c < in.channels; ++c) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          const int base = c * in.plane() + 2 * y * in.width + 2 * xx;
          out(b, (c * oh + y) * ow + xx) =
              0.25 * (src[base] + src[base + 1] + src[base + in.width] + src[base + in.width + 1]);
        }
      }
    }
  }
  auto xn = x.node();
  return make(std::move(out), {xn}, [xn, in, oh, ow](Node& self) {
    Matrix g = Matrix::Zero(xn->value.rows(), in.size());
    for (Eigen::Index b = 0; b < g.rows(); ++b) {
      for (int c = 0; c < in.channels; ++c) {
        for (int y = 0; y < oh; ++y) {
          for (int xx = 0; xx < ow; ++xx) {
            const double v = 0.25 * self.grad(b, (c * oh + y) * ow + xx);
            const int base = c * in.plane() + 2 * y * in.width + 2 * xx;
            g(b, base) += v;
            g(b, base + 1) += v;
            g(b, base + in.width) += v;
            g(b, base + in.width + 1) += v;
          }
        }
      }
    }
    xn->accumulate(g);
  });
}

Var upsample2(const Var& x, MapShape in) {
  require(x.cols() == in.size(), ErrorCode::ShapeMismatch, "upsample2: map shape");
  const int oh = in.height * 2, ow = in.width * 2;
  Matrix out(x.rows(), in.channels * oh * ow);
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    for (int c = 0; c < in.channels; ++c) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          out(b, (c * oh + y) * ow + xx) = x.value()(b, c * in.plane() + (y / 2) * in.width + xx / 2);
        }
      }
    }
  }
  auto xn = x.node();
  return make(std::move(out), {xn}, [xn, in, oh, ow](Node& self) {
    Matrix g = Matrix::Zero(xn->value.rows(), in.size());
    for (Eigen::Index b = 0; b < g.rows(); ++b) {
      for (int c = 0; c < in.channels; ++c) {
        for (int y = 0; y < oh; ++y) {
          for (int xx = 0; xx < ow; ++xx) {
            g(b, c * in.plane() + (y / 2) * in.width + xx / 2) += self.grad(b, (c * oh + y) * ow + xx);
          }
        }
      }
    }
    xn->accumulate(g);
  });
}

Var add_channel_bias(const Var& x, const Var& bias, MapShape shape) {
  require(x.cols() == shape.size() && bias.rows() == x.rows() && bias.cols() == shape.channels,
          ErrorCode::ShapeMismatch, "add_channel_bias: shapes");
  Matrix out = x.value();
  const int hw = shape.plane();
  for (Eigen::Index b = 0; b < out.rows(); ++b) {
    for (int c = 0; c < shape.channels; ++c) out.block(b, c * hw, 1, hw).array() += bias.value()(b, c);
  }
  auto xn = x.node(), bn = bias.node();
  return make(std::move(out), {xn, bn}, [xn, bn, shape, hw](Node& self) {
    if (wants(xn)) xn->accumulate(self.grad);
    if (wants(bn)) {
      Matrix g(self.grad.rows(), shape.channels);
      for (Eigen::Index b = 0; b < g.rows(); ++b) {
        for (int c = 0; c < shape.channels; ++c) g(b, c) = self.grad.block(b, c * hw, 1, hw).sum();
      }
      bn->accumulate(g);
    }
  });
}

Var spatial_mean(const Var& x, MapShape shape) {
  require(x.cols() == shape.size(), ErrorCode::ShapeMismatch, "spatial_mean: map shape");
  const int hw = shape.plane();
  Matrix out(x.rows(), shape.channels);
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    for (int c = 0; c < shape.channels; ++c) out(b, c) = x.value().block(b, c * hw, 1, hw).mean();
  }
  auto xn = x.node();
  return make(std::move(out), {xn}, [xn, shape, hw](Node& self) {
    Matrix g(self.grad.rows(), shape.size());
    for (Eigen::Index b = 0; b < g.rows(); ++b) {
      for (int c = 0; c < shape.channels; ++c) g.block(b, c * hw, 1, hw).setConstant(self.grad(b, c) / hw);
    }
    xn->accumulate(g);
  });
}

Var dropout(const Var& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  Matrix mask(x.rows(), x.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  auto xn = x.node();
  return make(x.value().cwiseProduct(mask), {xn}, [xn, mask = std::move(mask)](Node& self) {
    xn->accumulate(self.grad.cwiseProduct(mask));
  });
}

}  // namespace mla::ad
