#include "mesanet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mesanet {

const Tensor& Gradients::at(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(id.index));
  return it->second;
}

const Tape::Node& Tape::node(NodeId id) const {
  if (!id.valid() || id.index >= nodes_.size()) throw std::out_of_range("tape: unknown node " + std::to_string(id.index));
  return nodes_[id.index];
}

NodeId Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

NodeId Tape::variable(Tensor value, std::string name) {
  Node n;
  n.op = "variable";
  n.name = std::move(name);
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_variable = true;
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

NodeId Tape::record(std::string op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  bool needs = false;
  for (NodeId in : inputs) needs = needs || node(in).requires_grad;
  if (!value.all_finite()) throw NumericError("tape: non-finite output from " + op);
  Node n;
  n.op = std::move(op);
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.backward = std::move(backward);
  n.requires_grad = needs;
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }
const std::string& Tape::op(NodeId id) const { return node(id).op; }
const std::string& Tape::name(NodeId id) const { return node(id).name; }
bool Tape::requires_grad(NodeId id) const { return node(id).requires_grad; }

Gradients Tape::backward(NodeId loss) {
  if (consumed_) throw std::logic_error("tape: backward already ran on this tape");
  if (node(loss).value.size() != 1) throw ShapeError("tape: backward needs a scalar loss");
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.index] = Tensor(node(loss).value.shape(), 1.0);
  std::vector<Tensor*> gin;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || grads[i].empty() || !n.backward) continue;
    gin.assign(n.inputs.size(), nullptr);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      const std::size_t in = n.inputs[j].index;
      if (!nodes_[in].requires_grad) continue;
      if (grads[in].empty()) grads[in] = Tensor::zeros_like(nodes_[in].value);
      gin[j] = &grads[in];
    }
    n.backward(grads[i], gin);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_variable) continue;
    Tensor g = grads[i].empty() ? Tensor::zeros_like(nodes_[i].value) : std::move(grads[i]);
    if (!g.all_finite()) throw NumericError("tape: non-finite gradient for " + nodes_[i].name);
    out.set(NodeId{i}, std::move(g));
  }
  return out;
}

namespace ops {
namespace {

using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmat(const Tensor& t) { return t.as_matrix(); }
MMap mmat(Tensor& t) { return t.as_matrix(); }

std::size_t width(const Tensor& t) { return t.rank() == 1 ? t.shape()[0] : t.cols(); }

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  if (same_shape(a, b)) return false;
  if (a.rank() != 2) return false;
  if (b.rank() == 1) return b.shape()[0] == a.cols();
  return b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols();
}

void check_binary(const Tensor& a, const Tensor& b, const char* what) {
  if (!same_shape(a, b) && !is_row_broadcast(a, b)) {
    throw ShapeError(std::string(what) + ": cannot combine " + to_string(a.shape()) + " with " + to_string(b.shape()));
  }
}

template <class F, class D>
NodeId unary(Tape& t, NodeId a, const char* name, F f, D df) {
  const Tensor& x = t.value(a);
  Tensor y = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(name, {a}, std::move(y), [x, df](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < x.size(); ++i) (*gin[0])[i] += g[i] * df(x[i]);
  });
}

}  // namespace

NodeId add(Tape& t, NodeId a, NodeId b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  check_binary(x, y, "add");
  Tensor out = x;
  const bool bcast = is_row_broadcast(x, y);
  if (bcast) {
    mmat(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(y.data().data(), static_cast<Eigen::Index>(y.size()));
  } else {
    out += y;
  }
  return t.record("add", {a, b}, std::move(out), [bcast](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (gin[0]) *gin[0] += g;
    if (gin[1]) {
      if (bcast) {
        Eigen::Map<Eigen::RowVectorXd>(gin[1]->data().data(), static_cast<Eigen::Index>(gin[1]->size())) +=
            cmat(g).colwise().sum();
      } else {
        *gin[1] += g;
      }
    }
  });
}

NodeId sub(Tape& t, NodeId a, NodeId b) { return add(t, a, scale(t, b, -1.0)); }

NodeId mul(Tape& t, NodeId a, NodeId b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  check_binary(x, y, "mul");
  const bool bcast = is_row_broadcast(x, y);
  Tensor out = x;
  if (bcast) {
    const std::size_t c = x.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i % c];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  }
  return t.record("mul", {a, b}, std::move(out), [x, y, bcast](const Tensor& g, const std::vector<Tensor*>& gin) {
    const std::size_t c = bcast ? x.cols() : x.size();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t j = bcast ? i % c : i;
      if (gin[0]) (*gin[0])[i] += g[i] * y[j];
      if (gin[1]) (*gin[1])[j] += g[i] * x[i];
    }
  });
}

NodeId matmul(Tape& t, NodeId a, NodeId b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
    throw ShapeError("matmul: " + to_string(x.shape()) + " x " + to_string(y.shape()));
  }
  Tensor out({x.rows(), y.cols()});
  mmat(out).noalias() = cmat(x) * cmat(y);
  return t.record("matmul", {a, b}, std::move(out), [x, y](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (gin[0]) mmat(*gin[0]).noalias() += cmat(g) * cmat(y).transpose();
    if (gin[1]) mmat(*gin[1]).noalias() += cmat(x).transpose() * cmat(g);
  });
}

NodeId linear(Tape& t, NodeId x, NodeId w) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.cols()) {
    throw ShapeError("linear: input " + to_string(xv.shape()) + " with weight " + to_string(wv.shape()));
  }
  Tensor out({xv.rows(), wv.rows()});
  mmat(out).noalias() = cmat(xv) * cmat(wv).transpose();
  return t.record("linear", {x, w}, std::move(out), [xv, wv](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (gin[0]) mmat(*gin[0]).noalias() += cmat(g) * cmat(wv);
    if (gin[1]) mmat(*gin[1]).noalias() += cmat(g).transpose() * cmat(xv);
  });
}

NodeId linear(Tape& t, NodeId x, NodeId w, NodeId bias) { return add(t, linear(t, x, w), bias); }

NodeId scale(Tape& t, NodeId a, double s) { return affine(t, a, s, 0.0); }

NodeId affine(Tape& t, NodeId a, double alpha, double beta) {
  Tensor out = t.value(a);
  for (double& v : out.data()) v = alpha * v + beta;
  return t.record("affine", {a}, std::move(out), [alpha](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += alpha * g[i];
  });
}

NodeId conv4(Tape& t, NodeId x, NodeId coeffs, std::size_t seq_len) {
  const Tensor& xv = t.value(x);
  const Tensor& cv = t.value(coeffs);
  if (xv.rank() != 2 || cv.rank() != 2 || cv.rows() != 4 || cv.cols() != xv.cols()) {
    throw ShapeError("conv4: input " + to_string(xv.shape()) + " with coefficients " + to_string(cv.shape()));
  }
  if (seq_len == 0 || xv.rows() % seq_len != 0) throw ShapeError("conv4: rows not a multiple of seq_len");
  const std::size_t d = xv.cols();
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const std::size_t tpos = r % seq_len;
    for (std::size_t i = 0; i < 4 && i <= tpos; ++i) {
      for (std::size_t c = 0; c < d; ++c) out(r, c) += cv(i, c) * xv(r - i, c);
    }
  }
  return t.record("conv4", {x, coeffs}, std::move(out),
                  [xv, cv, seq_len, d](const Tensor& g, const std::vector<Tensor*>& gin) {
                    for (std::size_t r = 0; r < xv.rows(); ++r) {
                      const std::size_t tpos = r % seq_len;
                      for (std::size_t i = 0; i < 4 && i <= tpos; ++i) {
                        for (std::size_t c = 0; c < d; ++c) {
                          if (gin[0]) (*gin[0])(r - i, c) += cv(i, c) * g(r, c);
                          if (gin[1]) (*gin[1])(i, c) += g(r, c) * xv(r - i, c);
                        }
                      }
                    }
                  });
}

NodeId silu(Tape& t, NodeId a) {
  return unary(t, a, "silu", [](double x) { return mesanet::silu(x); },
               [](double x) {
                 const double s = mesanet::sigmoid(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

NodeId sigmoid(Tape& t, NodeId a) {
  return unary(t, a, "sigmoid", [](double x) { return mesanet::sigmoid(x); },
               [](double x) {
                 const double s = mesanet::sigmoid(x);
                 return s * (1.0 - s);
               });
}

NodeId softplus(Tape& t, NodeId a) {
  return unary(t, a, "softplus", [](double x) { return mesanet::softplus(x); },
               [](double x) { return x > 30.0 ? 1.0 : mesanet::sigmoid(x); });
}

NodeId tanh(Tape& t, NodeId a) {
  return unary(t, a, "tanh", [](double x) { return std::tanh(x); },
               [](double x) {
                 const double y = std::tanh(x);
                 return 1.0 - y * y;
               });
}

NodeId rms_norm(Tape& t, NodeId x, NodeId weight, std::size_t group) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(weight);
  if (xv.rank() != 2 || width(wv) != xv.cols() || wv.size() != xv.cols()) {
    throw ShapeError("rms_norm: input " + to_string(xv.shape()) + " with weight " + to_string(wv.shape()));
  }
  if (group == 0 || xv.cols() % group != 0) throw ShapeError("rms_norm: group does not divide width");
  const std::size_t groups = xv.cols() / group;
  Tensor inv_r({xv.rows(), groups});
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      double ss = 0.0;
      for (std::size_t c = gi * group; c < (gi + 1) * group; ++c) ss += xv(r, c) * xv(r, c);
      const double ir = 1.0 / std::sqrt(ss / static_cast<double>(group) + kRmsEpsilon);
      inv_r(r, gi) = ir;
      for (std::size_t c = gi * group; c < (gi + 1) * group; ++c) out(r, c) = xv(r, c) * wv[c] * ir;
    }
  }
  return t.record("rms_norm", {x, weight}, std::move(out),
                  [xv, wv, inv_r, group, groups](const Tensor& g, const std::vector<Tensor*>& gin) {
                    const double n = static_cast<double>(group);
                    for (std::size_t r = 0; r < xv.rows(); ++r) {
                      for (std::size_t gi = 0; gi < groups; ++gi) {
                        const double ir = inv_r(r, gi);
                        const std::size_t lo = gi * group, hi = lo + group;
                        double dot = 0.0;
                        for (std::size_t c = lo; c < hi; ++c) dot += g(r, c) * wv[c] * xv(r, c);
                        for (std::size_t c = lo; c < hi; ++c) {
                          if (gin[0]) (*gin[0])(r, c) += g(r, c) * wv[c] * ir - xv(r, c) * dot * ir * ir * ir / n;
                          if (gin[1]) (*gin[1])[c] += g(r, c) * xv(r, c) * ir;
                        }
                      }
                    }
                  });
}

NodeId l2_normalize(Tape& t, NodeId x, std::size_t group) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2 || group == 0 || xv.cols() % group != 0) throw ShapeError("l2_normalize: group does not divide width");
  const std::size_t groups = xv.cols() / group;
  Tensor inv_n({xv.rows(), groups});
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      double ss = 0.0;
      for (std::size_t c = gi * group; c < (gi + 1) * group; ++c) ss += xv(r, c) * xv(r, c);
      const double n = std::sqrt(ss);
      const double in = n > kNormGuard ? 1.0 / n : 0.0;
      inv_n(r, gi) = in;
      if (in > 0)
        for (std::size_t c = gi * group; c < (gi + 1) * group; ++c) out(r, c) *= in;
    }
  }
  Tensor y = out;
  return t.record("l2_normalize", {x}, std::move(out),
                  [y, inv_n, group, groups](const Tensor& g, const std::vector<Tensor*>& gin) {
                    if (!gin[0]) return;
                    for (std::size_t r = 0; r < y.rows(); ++r) {
                      for (std::size_t gi = 0; gi < groups; ++gi) {
                        const std::size_t lo = gi * group, hi = lo + group;
                        const double in = inv_n(r, gi);
                        if (in == 0.0) {
                          for (std::size_t c = lo; c < hi; ++c) (*gin[0])(r, c) += g(r, c);
                          continue;
                        }
                        double dot = 0.0;
                        for (std::size_t c = lo; c < hi; ++c) dot += g(r, c) * y(r, c);
                        for (std::size_t c = lo; c < hi; ++c) (*gin[0])(r, c) += (g(r, c) - y(r, c) * dot) * in;
                      }
                    }
                  });
}

NodeId slice_cols(Tape& t, NodeId x, std::size_t begin, std::size_t count) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2 || begin + count > xv.cols()) throw ShapeError("slice_cols: range outside " + to_string(xv.shape()));
  Tensor out({xv.rows(), count});
  mmat(out) = cmat(xv).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return t.record("slice_cols", {x}, std::move(out), [begin, count](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    mmat(*gin[0]).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) += cmat(g);
  });
}

NodeId concat_cols(Tape& t, const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = t.value(parts[0]).rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (NodeId p : parts) {
    const Tensor& v = t.value(p);
    if (v.rank() != 2 || v.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    offsets.push_back(total);
    total += v.cols();
  }
  Tensor out({rows, total});
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = t.value(parts[i]);
    widths.push_back(v.cols());
    mmat(out).middleCols(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(v.cols())) = cmat(v);
  }
  return t.record("concat_cols", parts, std::move(out), [offsets, widths](const Tensor& g, const std::vector<Tensor*>& gin) {
    for (std::size_t i = 0; i < gin.size(); ++i) {
      if (!gin[i]) continue;
      mmat(*gin[i]) += cmat(g).middleCols(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(widths[i]));
    }
  });
}

NodeId embed(Tape& t, NodeId table, const std::vector<int>& tokens) {
  const Tensor& tv = t.value(table);
  if (tv.rank() != 2) throw ShapeError("embed: table must be rank 2");
  const std::size_t vocab = tv.rows(), dim = tv.cols();
  Tensor out({tokens.size(), dim});
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const int tok = tokens[r];
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw std::out_of_range("embed: token id " + std::to_string(tok) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.row(static_cast<std::size_t>(tok)).begin(), dim, out.row(r).begin());
  }
  return t.record("embed", {table}, std::move(out), [tokens, dim](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (std::size_t r = 0; r < tokens.size(); ++r) {
      auto dst = gin[0]->row(static_cast<std::size_t>(tokens[r]));
      auto src = g.row(r);
      for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
    }
  });
}

NodeId cross_entropy(Tape& t, NodeId logits, const std::vector<int>& targets, const std::vector<double>& mask) {
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 2 || targets.size() != lv.rows() || mask.size() != lv.rows()) {
    throw ShapeError("cross_entropy: logits " + to_string(lv.shape()) + " with " + std::to_string(targets.size()) +
                     " targets");
  }
  const std::size_t n = lv.rows(), v = lv.cols();
  Tensor probs = Tensor::zeros_like(lv);
  double total = 0.0, count = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = lv.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - m);
    for (std::size_t c = 0; c < v; ++c) probs(r, c) = std::exp(row[c] - m) / z;
    if (mask[r] <= 0) continue;
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) throw std::out_of_range("cross_entropy: target outside vocabulary");
    total += mask[r] * (m + std::log(z) - row[static_cast<std::size_t>(tgt)]);
    count += mask[r];
  }
  const double denom = count > 0 ? count : 1.0;
  return t.record("cross_entropy", {logits}, Tensor::scalar(total / denom),
                  [probs, targets, mask, denom](const Tensor& g, const std::vector<Tensor*>& gin) {
                    if (!gin[0]) return;
                    for (std::size_t r = 0; r < probs.rows(); ++r) {
                      if (mask[r] <= 0) continue;
                      const double w = g[0] * mask[r] / denom;
                      for (std::size_t c = 0; c < probs.cols(); ++c) (*gin[0])(r, c) += w * probs(r, c);
                      (*gin[0])(r, static_cast<std::size_t>(targets[r])) -= w;
                    }
                  });
}

NodeId sum(Tape& t, NodeId a) {
  return t.record("sum", {a}, Tensor::scalar(t.value(a).sum()), [](const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (double& v : gin[0]->data()) v += g[0];
  });
}

}  // namespace ops
}  // namespace mesanet
