#include "ccattn/tensor.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

namespace ccattn {

namespace {

std::atomic<std::uint64_t> g_zero_norm_cosine_count{0};

void check_shape_valid(const char* op, const Shape& shape) {
  if (shape.empty() || shape.size() > 2) {
    throw std::invalid_argument(std::string(op) + ": rank must be 1 or 2");
  }
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument(std::string(op) + ": dimensions must be positive");
  }
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NonFiniteError(std::string(op) + ": non-finite value produced");
    }
  }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

std::size_t flat(int i, int j, int cols) {
  return static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j);
}

double row_norm(const std::vector<double>& v, int i, int cols) {
  double s = 0.0;
  for (int j = 0; j < cols; ++j) {
    const double x = v[flat(i, j, cols)];
    s += x * x;
  }
  return std::sqrt(s);
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_valid("zeros", shape);
  std::vector<double> data(numel_of(shape), 0.0);
  return from_values(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape_valid("full", shape);
  std::vector<double> data(numel_of(shape), value);
  return from_values(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape_valid("from_values", shape);
  if (values.size() != numel_of(shape)) {
    throw std::invalid_argument("from_values: data length does not match shape");
  }
  check_finite("from_values", values);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->data.size(), 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::make(const char* op, Shape shape, std::vector<double> data,
                    std::vector<Tensor> parents,
                    std::function<void(TensorNode&)> backward_fn) {
  check_shape_valid(op, shape);
  if (data.size() != numel_of(shape)) {
    throw std::invalid_argument(std::string(op) + ": data length does not match shape");
  }
  check_finite(op, data);
  bool needs_grad = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) {
      needs_grad = true;
      break;
    }
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = needs_grad;
  if (needs_grad) {
    node->grad.assign(node->data.size(), 0.0);
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(p.ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad) {
    throw std::logic_error("grad: tensor does not require gradients");
  }
  return node_->grad;
}

double Tensor::value() const {
  if (node_->data.size() != 1) {
    throw std::logic_error("value: tensor is not a scalar");
  }
  return node_->data[0];
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  node_->backward_ran = false;
}

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.requires_grad()) return g;
  std::unordered_set<TensorNode*> visited;
  // iterative postorder: parents first, consumers after
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      g.order.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not require gradients");
  }
  if (loss.node().backward_ran) {
    throw std::logic_error("backward: already ran on this graph; zero_grad first");
  }
  Graph g = Graph::trace(loss);
  loss.node().grad[0] = 1.0;
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  loss.node().backward_ran = true;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make("add", a.shape(), std::move(out), {a, b}, [n](TensorNode& o) {
    TensorNode& pa = *o.parents[0];
    TensorNode& pb = *o.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) pb.grad[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make("sub", a.shape(), std::move(out), {a, b}, [n](TensorNode& o) {
    TensorNode& pa = *o.parents[0];
    TensorNode& pb = *o.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) pb.grad[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make("mul", a.shape(), std::move(out), {a, b}, [n](TensorNode& o) {
    TensorNode& pa = *o.parents[0];
    TensorNode& pb = *o.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) pb.grad[i] += o.grad[i] * pa.data[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + s;
  return Tensor::make("add_scalar", a.shape(), std::move(out), {a}, [n](TensorNode& o) {
    TensorNode& pa = *o.parents[0];
    for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i];
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * s;
  return Tensor::make("mul_scalar", a.shape(), std::move(out), {a}, [n, s](TensorNode& o) {
    TensorNode& pa = *o.parents[0];
    for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i] * s;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expects rank-2 tensors");
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  std::vector<double> out(static_cast<std::size_t>(m) * static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = a.data()[flat(i, kk, k)];
      for (int j = 0; j < n; ++j) {
        out[flat(i, j, n)] += av * b.data()[flat(kk, j, n)];
      }
    }
  }
  return Tensor::make("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& o) {
    TensorNode& pa = *o.parents[0];
    TensorNode& pb = *o.parents[1];
    // dA = dC . B^T, dB = A^T . dC
    if (pa.requires_grad) {
      for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += o.grad[flat(i, j, n)] * pb.data[flat(kk, j, n)];
          pa.grad[flat(i, kk, k)] += s;
        }
      }
    }
    if (pb.requires_grad) {
      for (int kk = 0; kk < k; ++kk) {
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int i = 0; i < m; ++i) s += pa.data[flat(i, kk, k)] * o.grad[flat(i, j, n)];
          pb.grad[flat(kk, j, n)] += s;
        }
      }
    }
  });
}

Tensor softmax_rows(const Tensor& x, double inv_temperature) {
  if (!std::isfinite(inv_temperature)) {
    throw std::invalid_argument("softmax_rows: non-finite inverse temperature");
  }
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, inv_temperature * x.data()[flat(i, j, n)]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(inv_temperature * x.data()[flat(i, j, n)] - mx);
      out[flat(i, j, n)] = e;
      denom += e;
    }
    for (int j = 0; j < n; ++j) out[flat(i, j, n)] /= denom;
  }
  return Tensor::make("softmax_rows", x.shape(), std::move(out), {x},
                      [m, n, inv_temperature](TensorNode& o) {
                        TensorNode& px = *o.parents[0];
                        for (int i = 0; i < m; ++i) {
                          double dot = 0.0;
                          for (int j = 0; j < n; ++j) dot += o.grad[flat(i, j, n)] * o.data[flat(i, j, n)];
                          for (int j = 0; j < n; ++j) {
                            const double w = o.data[flat(i, j, n)];
                            px.grad[flat(i, j, n)] += inv_temperature * w * (o.grad[flat(i, j, n)] - dot);
                          }
                        }
                      });
}

Tensor l2_normalize_rows(const Tensor& x) {
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const double nm = row_norm(x.data(), i, n);
    norms[static_cast<std::size_t>(i)] = nm;
    for (int j = 0; j < n; ++j) {
      out[flat(i, j, n)] = nm == 0.0 ? 0.0 : x.data()[flat(i, j, n)] / nm;
    }
  }
  return Tensor::make("l2_normalize_rows", x.shape(), std::move(out), {x},
                      [m, n, norms = std::move(norms)](TensorNode& o) {
                        TensorNode& px = *o.parents[0];
                        // dx = (dy - y * (y . dy)) / ||x||
                        for (int i = 0; i < m; ++i) {
                          const double nm = norms[static_cast<std::size_t>(i)];
                          if (nm == 0.0) continue;
                          double dot = 0.0;
                          for (int j = 0; j < n; ++j) dot += o.grad[flat(i, j, n)] * o.data[flat(i, j, n)];
                          for (int j = 0; j < n; ++j) {
                            px.grad[flat(i, j, n)] += (o.grad[flat(i, j, n)] - o.data[flat(i, j, n)] * dot) / nm;
                          }
                        }
                      });
}

Tensor relu(const Tensor& x) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(0.0, x.data()[i]);
  // subgradient 0 at x == 0 (tie-break toward the inactive side)
  return Tensor::make("relu", x.shape(), std::move(out), {x}, [n](TensorNode& o) {
    TensorNode& px = *o.parents[0];
    for (std::size_t i = 0; i < n; ++i) {
      if (px.data[i] > 0.0) px.grad[i] += o.grad[i];
    }
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.size();
  return Tensor::make("sum_all", {1}, {s}, {x}, [n](TensorNode& o) {
    TensorNode& px = *o.parents[0];
    for (std::size_t i = 0; i < n; ++i) px.grad[i] += o.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.size();
  const double inv = 1.0 / static_cast<double>(n);
  return Tensor::make("mean_all", {1}, {s * inv}, {x}, [n, inv](TensorNode& o) {
    TensorNode& px = *o.parents[0];
    for (std::size_t i = 0; i < n; ++i) px.grad[i] += o.grad[0] * inv;
  });
}

Tensor logsumexp_all(const Tensor& x) {
  const std::size_t n = x.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x.data()) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x.data()) s += std::exp(v - mx);
  const double y = mx + std::log(s);
  return Tensor::make("logsumexp_all", {1}, {y}, {x}, [n, y](TensorNode& o) {
    TensorNode& px = *o.parents[0];
    for (std::size_t i = 0; i < n; ++i) {
      px.grad[i] += o.grad[0] * std::exp(px.data[i] - y);
    }
  });
}

Tensor row(const Tensor& x, int i) {
  if (x.rank() != 2) throw std::invalid_argument("row: expects a rank-2 tensor");
  if (i < 0 || i >= x.rows()) throw std::invalid_argument("row: index out of range");
  const int n = x.cols();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = x.data()[flat(i, j, n)];
  return Tensor::make("row", {n}, std::move(out), {x}, [i, n](TensorNode& o) {
    TensorNode& px = *o.parents[0];
    for (int j = 0; j < n; ++j) px.grad[flat(i, j, n)] += o.grad[static_cast<std::size_t>(j)];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch");
  std::vector<double> out = x.data();
  return Tensor::make("reshape", std::move(shape), std::move(out), {x}, [](TensorNode& o) {
    TensorNode& px = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (idx.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const bool vec = x.rank() == 1;
  const int m = vec ? x.cols() : x.rows();
  const int n = vec ? 1 : x.cols();
  for (int i : idx) {
    if (i < 0 || i >= m) throw std::invalid_argument("gather_rows: index out of range");
  }
  const int k = static_cast<int>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(k) * static_cast<std::size_t>(n));
  for (int r = 0; r < k; ++r) {
    for (int j = 0; j < n; ++j) out[flat(r, j, n)] = x.data()[flat(idx[static_cast<std::size_t>(r)], j, n)];
  }
  Shape shape = vec ? Shape{k} : Shape{k, n};
  return Tensor::make("gather_rows", std::move(shape), std::move(out), {x},
                      [idx, k, n](TensorNode& o) {
                        TensorNode& px = *o.parents[0];
                        for (int r = 0; r < k; ++r) {
                          for (int j = 0; j < n; ++j) {
                            px.grad[flat(idx[static_cast<std::size_t>(r)], j, n)] += o.grad[flat(r, j, n)];
                          }
                        }
                      });
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("stack_scalars: empty input");
  const int k = static_cast<int>(scalars.size());
  std::vector<double> out(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = scalars[static_cast<std::size_t>(i)].value();
  return Tensor::make("stack_scalars", {k}, std::move(out), scalars, [k](TensorNode& o) {
    for (int i = 0; i < k; ++i) {
      TensorNode& p = *o.parents[static_cast<std::size_t>(i)];
      if (p.requires_grad) p.grad[0] += o.grad[static_cast<std::size_t>(i)];
    }
  });
}

namespace {

// shared forward/backward for the cosine family; pairs = (a-row, b-row, out-slot)
Tensor cosine_impl(const char* op, const Tensor& a, const Tensor& b, Shape out_shape,
                   std::vector<std::array<int, 3>> pairs) {
  const int da = a.cols(), db = b.cols();
  if (da != db) throw std::invalid_argument(std::string(op) + ": dimension mismatch");
  const int d = da;
  const int ra = a.rows(), rb = b.rows();
  std::vector<double> a_norm(static_cast<std::size_t>(ra)), b_norm(static_cast<std::size_t>(rb));
  for (int i = 0; i < ra; ++i) a_norm[static_cast<std::size_t>(i)] = row_norm(a.data(), i, d);
  for (int i = 0; i < rb; ++i) b_norm[static_cast<std::size_t>(i)] = row_norm(b.data(), i, d);

  std::vector<double> out(numel_of(out_shape), 0.0);
  for (const auto& [ia, ib, slot] : pairs) {
    const double na = a_norm[static_cast<std::size_t>(ia)];
    const double nb = b_norm[static_cast<std::size_t>(ib)];
    if (na == 0.0 || nb == 0.0) {
      g_zero_norm_cosine_count.fetch_add(1, std::memory_order_relaxed);
      continue;  // defined as 0
    }
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += a.data()[flat(ia, j, d)] * b.data()[flat(ib, j, d)];
    out[static_cast<std::size_t>(slot)] = std::clamp(dot / (na * nb), -1.0, 1.0);
  }
  return Tensor::make(op, std::move(out_shape), std::move(out), {a, b},
                      [d, a_norm = std::move(a_norm), b_norm = std::move(b_norm),
                       pairs = std::move(pairs)](TensorNode& o) {
                        TensorNode& pa = *o.parents[0];
                        TensorNode& pb = *o.parents[1];
                        for (const auto& [ia, ib, slot] : pairs) {
                          const double g = o.grad[static_cast<std::size_t>(slot)];
                          if (g == 0.0) continue;
                          const double na = a_norm[static_cast<std::size_t>(ia)];
                          const double nb = b_norm[static_cast<std::size_t>(ib)];
                          if (na == 0.0 || nb == 0.0) continue;
                          const double c = o.data[static_cast<std::size_t>(slot)];
                          // dc/da = b/(|a||b|) - c a/|a|^2 ; symmetric for b
                          if (pa.requires_grad) {
                            for (int j = 0; j < d; ++j) {
                              pa.grad[flat(ia, j, d)] +=
                                  g * (pb.data[flat(ib, j, d)] / (na * nb) -
                                       c * pa.data[flat(ia, j, d)] / (na * na));
                            }
                          }
                          if (pb.requires_grad) {
                            for (int j = 0; j < d; ++j) {
                              pb.grad[flat(ib, j, d)] +=
                                  g * (pa.data[flat(ia, j, d)] / (na * nb) -
                                       c * pb.data[flat(ib, j, d)] / (nb * nb));
                            }
                          }
                        }
                      });
}

}  // namespace

Tensor cosine(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1) {
    throw std::invalid_argument("cosine: expects rank-1 vectors");
  }
  return cosine_impl("cosine", a, b, {1}, {{0, 0, 0}});
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("cosine_rows: row count mismatch");
  const int m = a.rows();
  std::vector<std::array<int, 3>> pairs;
  pairs.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) pairs.push_back({i, i, i});
  return cosine_impl("cosine_rows", a, b, {m}, std::move(pairs));
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  const int m = a.rows(), n = b.rows();
  std::vector<std::array<int, 3>> pairs;
  pairs.reserve(static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) pairs.push_back({i, j, i * n + j});
  }
  return cosine_impl("cosine_matrix", a, b, {m, n}, std::move(pairs));
}

std::uint64_t zero_norm_cosine_count() {
  return g_zero_norm_cosine_count.load(std::memory_order_relaxed);
}

void reset_zero_norm_cosine_count() {
  g_zero_norm_cosine_count.store(0, std::memory_order_relaxed);
}

}  // namespace ccattn
