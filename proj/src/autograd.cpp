#include "smoothtail/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace smoothtail {

const char* group_name(ParamGroup group) {
  return group == ParamGroup::kClassAgnostic ? "class_agnostic" : "class_specific";
}

Tape::Var Tape::push(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  if (p.trainable) {
    nodes_[id].backward = [this, id] {
      Parameter* target = nodes_[id].param;
      const Matrix& g = nodes_[id].grad;
      if (target->grad.rows() != g.rows() || target->grad.cols() != g.cols()) {
        target->grad = g;
      } else {
        target->grad += g;
      }
    };
  }
  return Var{id};
}

Tape::Var Tape::ref(const Matrix& m) {
  Node n;
  n.external = &m;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::constant(Matrix m) { return push(std::move(m), false); }

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external ? *n.external : n.value;
}

Matrix& Tape::grad_of(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = value(Var{id});
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
  if (!nodes_[id].requires_grad) return;
  grad_of(id) += g;
}

template <typename Expr>
void Tape::accumulate_expr(int id, const Expr& g) {
  if (!nodes_[id].requires_grad) return;
  grad_of(id) += g;
}

void Tape::seed(Var v, const Matrix& g) {
  const Matrix& val = value(v);
  if (g.rows() != val.rows() || g.cols() != val.cols()) {
    throw std::invalid_argument("seed gradient shape mismatch");
  }
  accumulate(v.id, g);
}

void Tape::backward() {
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward();
  }
}

Tape::Var Tape::add(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  Var out = push(va + vb, requires_grad(a) || requires_grad(b));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      accumulate(a.id, g);
      accumulate(b.id, g);
    };
  }
  return out;
}

Tape::Var Tape::add_const(Var a, const Matrix& c) {
  const Matrix& va = value(a);
  if (va.rows() != c.rows() || va.cols() != c.cols()) {
    throw std::invalid_argument("add_const: shape mismatch");
  }
  Var out = push(va + c, requires_grad(a));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, a, out] { accumulate(a.id, nodes_[out.id].grad); };
  }
  return out;
}

Tape::Var Tape::matmul(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.cols() != vb.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix prod = va * vb;
  Var out = push(std::move(prod), requires_grad(a) || requires_grad(b));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (requires_grad(a)) accumulate_expr(a.id, g * value(b).transpose());
      if (requires_grad(b)) accumulate_expr(b.id, value(a).transpose() * g);
    };
  }
  return out;
}

Tape::Var Tape::linear(Var x, Var weight, Var bias) {
  const Matrix& vx = value(x);
  const Matrix& vw = value(weight);
  const Matrix& vb = value(bias);
  if (vx.cols() != vw.rows() || vb.rows() != 1 || vb.cols() != vw.cols()) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  Matrix y = vx * vw;
  y.rowwise() += vb.row(0);
  Var out = push(std::move(y), requires_grad(x) || requires_grad(weight) || requires_grad(bias));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, x, weight, bias, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (requires_grad(x)) accumulate_expr(x.id, g * value(weight).transpose());
      if (requires_grad(weight)) accumulate_expr(weight.id, value(x).transpose() * g);
      if (requires_grad(bias)) accumulate_expr(bias.id, g.colwise().sum());
    };
  }
  return out;
}

Tape::Var Tape::relu(Var a) {
  Var out = push(value(a).cwiseMax(0.0f), requires_grad(a));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, a, out] {
      const Matrix& g = nodes_[out.id].grad;
      accumulate_expr(a.id, (value(a).array() > 0.0f).select(g.array(), 0.0f).matrix());
    };
  }
  return out;
}

Tape::Var Tape::sigmoid(Var a) {
  Matrix y = (1.0f + (-value(a).array()).exp()).inverse().matrix();
  Var out = push(std::move(y), requires_grad(a));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, a, out] {
      const Matrix& y = nodes_[out.id].value;
      const Matrix& g = nodes_[out.id].grad;
      accumulate_expr(a.id, (g.array() * y.array() * (1.0f - y.array())).matrix());
    };
  }
  return out;
}

Tape::Var Tape::layer_norm(Var x, Var gamma, Var beta, float eps) {
  const Matrix& vx = value(x);
  const Eigen::Index d = vx.cols();
  Matrix xhat(vx.rows(), d);
  Eigen::VectorXf inv_std(vx.rows());
  for (Eigen::Index r = 0; r < vx.rows(); ++r) {
    const float mean = vx.row(r).mean();
    const float var = (vx.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0f / std::sqrt(var + eps);
    xhat.row(r) = (vx.row(r).array() - mean) * inv_std(r);
  }
  Matrix y = xhat.array().rowwise() * value(gamma).row(0).array();
  y.rowwise() += value(beta).row(0);
  Var out = push(std::move(y), requires_grad(x) || requires_grad(gamma) || requires_grad(beta));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, x, gamma, beta, out, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)] {
      const Matrix& g = nodes_[out.id].grad;
      if (requires_grad(gamma)) {
        accumulate_expr(gamma.id, (g.array() * xhat.array()).colwise().sum().matrix());
      }
      if (requires_grad(beta)) accumulate_expr(beta.id, g.colwise().sum());
      if (requires_grad(x)) {
        Matrix dxhat = g.array().rowwise() * value(gamma).row(0).array();
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const float m1 = dxhat.row(r).mean();
          const float m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        accumulate(x.id, dx);
      }
    };
  }
  return out;
}

Tape::Var Tape::attention(Var q, Var k, Var v, int heads, const Matrix* bias) {
  const Matrix& vq = value(q);
  const Matrix& vk = value(k);
  const Matrix& vv = value(v);
  const Eigen::Index d = vq.cols();
  if (vk.cols() != d || vv.cols() != d || vk.rows() != vv.rows() || heads < 1 || d % heads != 0) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  if (bias && (bias->rows() != vq.rows() || bias->cols() != vk.rows())) {
    throw std::invalid_argument("attention: bias shape mismatch");
  }
  const Eigen::Index dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Matrix> probs(heads);
  Matrix y(vq.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Matrix logits = (vq.middleCols(h * dh, dh) * vk.middleCols(h * dh, dh).transpose()) * scale;
    if (bias) logits += *bias;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const float mx = logits.row(r).maxCoeff();
      logits.row(r) = (logits.row(r).array() - mx).exp();
      logits.row(r) /= logits.row(r).sum();
    }
    y.middleCols(h * dh, dh) = logits * vv.middleCols(h * dh, dh);
    probs[h] = std::move(logits);
  }
  Var out = push(std::move(y), requires_grad(q) || requires_grad(k) || requires_grad(v));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, q, k, v, out, heads, dh, scale, probs = std::move(probs)] {
      const Matrix& g = nodes_[out.id].grad;
      const Matrix& vq = value(q);
      const Matrix& vk = value(k);
      const Matrix& vv = value(v);
      Matrix dq = Matrix::Zero(vq.rows(), vq.cols());
      Matrix dk = Matrix::Zero(vk.rows(), vk.cols());
      Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
      for (int h = 0; h < heads; ++h) {
        const Matrix& a = probs[h];
        const auto gh = g.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh) = a.transpose() * gh;
        Matrix da = gh * vv.middleCols(h * dh, dh).transpose();
        Eigen::VectorXf row_dot = (da.array() * a.array()).rowwise().sum();
        Matrix ds = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * scale;
        dq.middleCols(h * dh, dh) = ds * vk.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * vq.middleCols(h * dh, dh);
      }
      accumulate(q.id, dq);
      accumulate(k.id, dk);
      accumulate(v.id, dv);
    };
  }
  return out;
}

Tape::Var Tape::conv3x3(Var x, int height, int width, Var weight, Var bias, int stride) {
  const Matrix& vx = value(x);
  const Eigen::Index cin = vx.cols();
  if (vx.rows() != static_cast<Eigen::Index>(height) * width) {
    throw std::invalid_argument("conv3x3: input rows do not match height * width");
  }
  if (value(weight).rows() != 9 * cin) throw std::invalid_argument("conv3x3: weight shape");
  const int out_h = (height + 2 - 3) / stride + 1;
  const int out_w = (width + 2 - 3) / stride + 1;
  Matrix col = Matrix::Zero(static_cast<Eigen::Index>(out_h) * out_w, 9 * cin);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * out_w + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= width) continue;
          col.row(row).segment((ky * 3 + kx) * cin, cin) = vx.row(iy * width + ix);
        }
      }
    }
  }
  Matrix y = col * value(weight);
  y.rowwise() += value(bias).row(0);
  Var out = push(std::move(y), requires_grad(x) || requires_grad(weight) || requires_grad(bias));
  if (requires_grad(out)) {
    nodes_[out.id].backward = [this, x, weight, bias, out, height, width, stride, out_h, out_w,
                               cin, col = std::move(col)] {
      const Matrix& g = nodes_[out.id].grad;
      if (requires_grad(weight)) accumulate_expr(weight.id, col.transpose() * g);
      if (requires_grad(bias)) accumulate_expr(bias.id, g.colwise().sum());
      if (requires_grad(x)) {
        Matrix dcol = g * value(weight).transpose();
        Matrix& dx = grad_of(x.id);
        for (int oy = 0; oy < out_h; ++oy) {
          for (int ox = 0; ox < out_w; ++ox) {
            const Eigen::Index row = static_cast<Eigen::Index>(oy) * out_w + ox;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride + ky - 1;
              if (iy < 0 || iy >= height) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * stride + kx - 1;
                if (ix < 0 || ix >= width) continue;
                dx.row(iy * width + ix) += dcol.row(row).segment((ky * 3 + kx) * cin, cin);
              }
            }
          }
        }
      }
    };
  }
  return out;
}

}  // namespace smoothtail
