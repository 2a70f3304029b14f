#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

namespace smoothtail {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamGroup { kClassAgnostic, kClassSpecific };

const char* group_name(ParamGroup group);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kClassAgnostic;
  Matrix value;
  Matrix grad;  // allocated lazily by the tape; same shape as value
  bool trainable = true;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is already
// a topological order, so backward() is one reverse sweep. Nodes that do not
// depend on a trainable parameter are never visited on the way back.
class Tape {
 public:
  struct Var {
    int id = -1;
  };

  // Leaf referencing a parameter; gradients accumulate into param.grad when
  // the parameter is trainable.
  Var param(Parameter& p);
  // Leaf referencing an external matrix that must outlive the tape.
  Var ref(const Matrix& m);
  Var constant(Matrix m);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Adds `g` to the upstream gradient of `v` prior to backward().
  void seed(Var v, const Matrix& g);
  void backward();

  std::size_t size() const { return nodes_.size(); }

  // ---- ops ----
  Var add(Var a, Var b);
  Var add_const(Var a, const Matrix& c);
  Var matmul(Var a, Var b);
  // x W + b with b a 1 x out row broadcast over rows.
  Var linear(Var x, Var weight, Var bias);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);
  // Multi-head scaled dot-product attention; `bias` (rows(q) x rows(k)) is
  // added to the logits of every head when non-null and must outlive the tape.
  Var attention(Var q, Var k, Var v, int heads, const Matrix* bias = nullptr);
  // 3x3 convolution, padding 1. Input rows are pixels (row-major HxW),
  // columns are channels; weight is (9 * in) x out.
  Var conv3x3(Var x, int height, int width, Var weight, Var bias, int stride);

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Parameter* param = nullptr;
    Matrix grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Var push(Matrix value, bool requires_grad);
  Matrix& grad_of(int id);
  void accumulate(int id, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& g);

  std::vector<Node> nodes_;
};

}  // namespace smoothtail
