#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvrpo/rng.hpp"

namespace lvrpo {

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// Raw kernels. All dense math funnels through these so the tracked and
// untracked forward paths produce bit-identical values.
// ---------------------------------------------------------------------------

// C (m x n) = A (m x k) * B (k x n); accumulates when acc is true.
// Rows of A are processed four at a time so each streamed row of B is reused.
template <class S>
void gemm_nn(const S* A, const S* B, S* C, int m, int k, int n, bool acc) {
  if (!acc) std::fill(C, C + static_cast<std::size_t>(m) * n, S(0));
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const S* a0 = A + static_cast<std::size_t>(i) * k;
    const S* a1 = a0 + k;
    const S* a2 = a1 + k;
    const S* a3 = a2 + k;
    S* c0 = C + static_cast<std::size_t>(i) * n;
    S* c1 = c0 + n;
    S* c2 = c1 + n;
    S* c3 = c2 + n;
    for (int p = 0; p < k; ++p) {
      const S* b = B + static_cast<std::size_t>(p) * n;
      const S w0 = a0[p], w1 = a1[p], w2 = a2[p], w3 = a3[p];
      for (int j = 0; j < n; ++j) {
        const S bj = b[j];
        c0[j] += w0 * bj;
        c1[j] += w1 * bj;
        c2[j] += w2 * bj;
        c3[j] += w3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    const S* a = A + static_cast<std::size_t>(i) * k;
    S* c = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S w = a[p];
      const S* b = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += w * b[j];
    }
  }
}

// C (m x n) = A (m x k) * B^T where B is stored (n x k).
template <class S>
void gemm_nt(const S* A, const S* B, S* C, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const S* a = A + static_cast<std::size_t>(i) * k;
    S* c = C + static_cast<std::size_t>(i) * n;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      const S* b0 = B + static_cast<std::size_t>(j) * k;
      const S* b1 = b0 + k;
      const S* b2 = b1 + k;
      const S* b3 = b2 + k;
      S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (int p = 0; p < k; ++p) {
        const S ap = a[p];
        s0 += ap * b0[p];
        s1 += ap * b1[p];
        s2 += ap * b2[p];
        s3 += ap * b3[p];
      }
      if (acc) {
        c[j] += s0; c[j + 1] += s1; c[j + 2] += s2; c[j + 3] += s3;
      } else {
        c[j] = s0; c[j + 1] = s1; c[j + 2] = s2; c[j + 3] = s3;
      }
    }
    for (; j < n; ++j) {
      const S* b = B + static_cast<std::size_t>(j) * k;
      S s = 0;
      for (int p = 0; p < k; ++p) s += a[p] * b[p];
      if (acc) c[j] += s; else c[j] = s;
    }
  }
}

// C (k x n) = A^T * B where A is stored (m x k), B is (m x n).
template <class S>
void gemm_tn(const S* A, const S* B, S* C, int m, int k, int n, bool acc) {
  if (!acc) std::fill(C, C + static_cast<std::size_t>(k) * n, S(0));
  for (int p = 0; p < m; ++p) {
    const S* a = A + static_cast<std::size_t>(p) * k;
    const S* b = B + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < k; ++i) {
      const S w = a[i];
      if (w == S(0)) continue;
      S* c = C + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += w * b[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major value with optional leaf gradient and tape handle.
// ---------------------------------------------------------------------------

template <class S>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;  // allocated only for requires_grad leaves
  bool requires_grad = false;
  int node = -1;  // tape node id, -1 when detached

  Tensor() = default;

  std::size_t numel() const { return data ? data->size() : 0; }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  std::vector<S>& v() { return *data; }
  const std::vector<S>& v() const { return *data; }
  S item() const {
    if (numel() != 1) fail("item() on non-scalar tensor " + shape_str(shape));
    return (*data)[0];
  }
  S& at(int r, int c) { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }
  S at(int r, int c) const { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }

  bool tracked() const { return node >= 0 || requires_grad; }

  void set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<std::vector<S>>(numel(), S(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), S(0));
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
      if (e <= 0) fail("non-positive tensor extent in " + shape_str(shape));
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.data = std::make_shared<std::vector<S>>(count(shape), S(0));
    t.shape = std::move(shape);
    return t;
  }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
  }

  static Tensor scalar(S value) { return full({1}, value); }

  static Tensor from(std::vector<int> shape, std::vector<S> values) {
    if (count(shape) != values.size()) {
      fail("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.data = std::make_shared<std::vector<S>>(std::move(values));
    t.shape = std::move(shape);
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, S stddev) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : *t.data) x = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  Tensor clone_detached() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<S>>(*data);
    return t;
  }
};

// ---------------------------------------------------------------------------
// Tape: define-by-run reverse-mode graph, rebuilt per forward pass.
// Nodes are appended in topological order; backward walks them in reverse.
// ---------------------------------------------------------------------------

template <class S>
class Tape {
 public:
  using BackFn = std::function<void(Tape<S>&, const std::vector<S>&)>;

  int emit(std::size_t numel, BackFn back) {
    nodes_.push_back(Node{std::move(back), {}, numel});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<S>& grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.numel, S(0));
    return n.grad;
  }

  bool reached(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) fail("backward requires a scalar loss, got " + shape_str(loss.shape));
    if (loss.node < 0) fail("backward requires a loss recorded on this tape");
    grad_of(loss.node).assign(1, S(1));
    for (int id = loss.node; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty()) continue;
      if (n.back) n.back(*this, n.grad);
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }

 private:
  struct Node {
    BackFn back;
    std::vector<S> grad;
    std::size_t numel;
  };
  std::vector<Node> nodes_;
};

namespace detail {

// Accumulate a gradient contribution into either the tape buffer of an
// interior node or the leaf .grad of a parameter.
template <class S>
S* grad_sink(Tape<S>& tape, const Tensor<S>& x) {
  if (x.node >= 0) return tape.grad_of(x.node).data();
  if (x.requires_grad) return x.grad->data();
  return nullptr;
}

template <class S>
void add_into(S* dst, const std::vector<S>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template <class S>
bool record(Tape<S>* tape, const Tensor<S>& a) {
  return tape != nullptr && a.tracked();
}

template <class S>
bool record(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  return tape != nullptr && (a.tracked() || b.tracked());
}

template <class S>
bool record(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& c) {
  return tape != nullptr && (a.tracked() || b.tracked() || c.tracked());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Every op computes the value unconditionally and registers a
// tape node only when a tape is supplied and some input is tracked.
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.rows()) {
    fail("matmul shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<S> out = Tensor<S>::zeros({m, n});
  gemm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(out.numel(), [a, b, m, k, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) gemm_nt(g.data(), b.ptr(), da, m, n, k, true);
      if (S* db = detail::grad_sink(t, b)) gemm_tn(a.ptr(), g.data(), db, m, k, n, true);
    });
  }
  return out;
}

// a * b^T with b stored row-major (n x k); used for attention scores.
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.cols()) {
    fail("matmul_nt shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<S> out = Tensor<S>::zeros({m, n});
  gemm_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(out.numel(), [a, b, m, k, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) gemm_nn(g.data(), b.ptr(), da, m, n, k, true);
      if (S* db = detail::grad_sink(t, b)) gemm_tn(g.data(), a.ptr(), db, m, n, k, true);
    });
  }
  return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape != b.shape) fail("add shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(n, [a, b](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) detail::add_into(da, g);
      if (S* db = detail::grad_sink(t, b)) detail::add_into(db, g);
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape != b.shape) fail("sub shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(n, [a, b](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) detail::add_into(da, g);
      if (S* db = detail::grad_sink(t, b)) {
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape != b.shape) fail("mul shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(n, [a, b](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*b.data)[i];
      }
      if (S* db = detail::grad_sink(t, b)) {
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*a.data)[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c, Tape<S>* tape) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
  if (detail::record(tape, a)) {
    out.node = tape->emit(n, [a, c](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
      }
    });
  }
  return out;
}

// Broadcast-add a length-n row vector to every row of a (m x n).
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v, Tape<S>* tape) {
  const int m = a.rows(), n = a.cols();
  if (static_cast<int>(v.numel()) != n) {
    fail("add_rowvec length mismatch: " + shape_str(a.shape) + " vs " + shape_str(v.shape));
  }
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (int i = 0; i < m; ++i) {
    const S* ai = a.ptr() + static_cast<std::size_t>(i) * n;
    S* oi = out.ptr() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) oi[j] = ai[j] + (*v.data)[j];
  }
  if (detail::record(tape, a, v)) {
    out.node = tape->emit(out.numel(), [a, v, m, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) detail::add_into(da, g);
      if (S* dv = detail::grad_sink(t, v)) {
        for (int i = 0; i < m; ++i) {
          const S* gi = g.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) dv[j] += gi[j];
        }
      }
    });
  }
  return out;
}

// Scale each row i of a (m x n) by c[i] (c stored as m-length tensor).
template <class S>
Tensor<S> mul_colvec(const Tensor<S>& a, const Tensor<S>& c, Tape<S>* tape) {
  const int m = a.rows(), n = a.cols();
  if (static_cast<int>(c.numel()) != m) {
    fail("mul_colvec length mismatch: " + shape_str(a.shape) + " vs " + shape_str(c.shape));
  }
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (int i = 0; i < m; ++i) {
    const S w = (*c.data)[i];
    const S* ai = a.ptr() + static_cast<std::size_t>(i) * n;
    S* oi = out.ptr() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) oi[j] = ai[j] * w;
  }
  if (detail::record(tape, a, c)) {
    out.node = tape->emit(out.numel(), [a, c, m, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (int i = 0; i < m; ++i) {
          const S w = (*c.data)[i];
          const S* gi = g.data() + static_cast<std::size_t>(i) * n;
          S* di = da + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) di[j] += gi[j] * w;
        }
      }
      if (S* dc = detail::grad_sink(t, c)) {
        for (int i = 0; i < m; ++i) {
          const S* gi = g.data() + static_cast<std::size_t>(i) * n;
          const S* ai = a.ptr() + static_cast<std::size_t>(i) * n;
          S s = 0;
          for (int j = 0; j < n; ++j) s += gi[j] * ai[j];
          dc[i] += s;
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int>& ids, Tape<S>* tape) {
  const int n = table.cols();
  Tensor<S> out = Tensor<S>::zeros({static_cast<int>(ids.size()), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= table.rows()) fail("gather_rows index " + std::to_string(id) + " out of range");
    std::copy_n(table.ptr() + static_cast<std::size_t>(id) * n, n, out.ptr() + i * n);
  }
  if (detail::record(tape, table)) {
    out.node = tape->emit(out.numel(), [table, ids, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* dt = detail::grad_sink(t, table)) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const S* gi = g.data() + i * n;
          S* di = dt + static_cast<std::size_t>(ids[i]) * n;
          for (int j = 0; j < n; ++j) di[j] += gi[j];
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1, Tape<S>* tape) {
  if (r0 < 0 || r1 > a.rows() || r0 >= r1) fail("slice_rows range out of bounds");
  const int n = a.cols();
  Tensor<S> out = Tensor<S>::zeros({r1 - r0, n});
  std::copy_n(a.ptr() + static_cast<std::size_t>(r0) * n, out.numel(), out.ptr());
  if (detail::record(tape, a)) {
    out.node = tape->emit(out.numel(), [a, r0, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) detail::add_into(da + static_cast<std::size_t>(r0) * n, g);
    });
  }
  return out;
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1, Tape<S>* tape) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1) fail("slice_cols range out of bounds");
  const int m = a.rows(), n = a.cols(), w = c1 - c0;
  Tensor<S> out = Tensor<S>::zeros({m, w});
  for (int i = 0; i < m; ++i) {
    std::copy_n(a.ptr() + static_cast<std::size_t>(i) * n + c0, w, out.ptr() + static_cast<std::size_t>(i) * w);
  }
  if (detail::record(tape, a)) {
    out.node = tape->emit(out.numel(), [a, c0, m, n, w](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (int i = 0; i < m; ++i) {
          const S* gi = g.data() + static_cast<std::size_t>(i) * w;
          S* di = da + static_cast<std::size_t>(i) * n + c0;
          for (int j = 0; j < w; ++j) di[j] += gi[j];
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts, Tape<S>* tape) {
  if (parts.empty()) fail("concat_rows of empty list");
  const int n = parts.front().cols();
  int m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) fail("concat_rows column mismatch");
    m += p.rows();
  }
  Tensor<S> out = Tensor<S>::zeros({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.ptr(), p.numel(), out.ptr() + off);
    off += p.numel();
  }
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.tracked();
  if (tape && tracked) {
    out.node = tape->emit(out.numel(), [parts](Tape<S>& t, const std::vector<S>& g) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (S* dp = detail::grad_sink(t, p)) {
          for (std::size_t i = 0; i < p.numel(); ++i) dp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts, Tape<S>* tape) {
  if (parts.empty()) fail("concat_cols of empty list");
  const int m = parts.front().rows();
  int n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) fail("concat_cols row mismatch");
    n += p.cols();
  }
  Tensor<S> out = Tensor<S>::zeros({m, n});
  int c0 = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i) {
      std::copy_n(p.ptr() + static_cast<std::size_t>(i) * w, w,
                  out.ptr() + static_cast<std::size_t>(i) * n + c0);
    }
    c0 += w;
  }
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.tracked();
  if (tape && tracked) {
    out.node = tape->emit(out.numel(), [parts, m, n](Tape<S>& t, const std::vector<S>& g) {
      int c0 = 0;
      for (const auto& p : parts) {
        const int w = p.cols();
        if (S* dp = detail::grad_sink(t, p)) {
          for (int i = 0; i < m; ++i) {
            const S* gi = g.data() + static_cast<std::size_t>(i) * n + c0;
            S* di = dp + static_cast<std::size_t>(i) * w;
            for (int j = 0; j < w; ++j) di[j] += gi[j];
          }
        }
        c0 += w;
      }
    });
  }
  return out;
}

// Row-wise softmax with max subtraction. An optional 0/1 mask (same shape)
// zeroes the probability of disallowed entries.
template <class S>
Tensor<S> softmax_rows_impl(const Tensor<S>& a, const std::uint8_t* mask, Tape<S>* tape) {
  const int m = a.rows(), n = a.cols();
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (int i = 0; i < m; ++i) {
    const S* ai = a.ptr() + static_cast<std::size_t>(i) * n;
    const std::uint8_t* mi = mask ? mask + static_cast<std::size_t>(i) * n : nullptr;
    S mx = -std::numeric_limits<S>::infinity();
    for (int j = 0; j < n; ++j) {
      if (!mi || mi[j]) mx = std::max(mx, ai[j]);
    }
    S* oi = out.ptr() + static_cast<std::size_t>(i) * n;
    S z = 0;
    for (int j = 0; j < n; ++j) {
      if (!mi || mi[j]) {
        oi[j] = std::exp(ai[j] - mx);
        z += oi[j];
      } else {
        oi[j] = 0;
      }
    }
    const S inv = S(1) / z;
    for (int j = 0; j < n; ++j) oi[j] *= inv;
  }
  if (detail::record(tape, a)) {
    Tensor<S> saved = out;  // shares data; softmax backward needs only its output
    out.node = tape->emit(out.numel(), [a, saved, m, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (int i = 0; i < m; ++i) {
          const S* p = saved.ptr() + static_cast<std::size_t>(i) * n;
          const S* gi = g.data() + static_cast<std::size_t>(i) * n;
          S dot = 0;
          for (int j = 0; j < n; ++j) dot += p[j] * gi[j];
          S* di = da + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) di[j] += p[j] * (gi[j] - dot);
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a, Tape<S>* tape) {
  return softmax_rows_impl(a, static_cast<const std::uint8_t*>(nullptr), tape);
}

template <class S>
Tensor<S> masked_softmax_rows(const Tensor<S>& a, const std::shared_ptr<std::vector<std::uint8_t>>& mask,
                              Tape<S>* tape) {
  if (mask->size() != a.numel()) fail("masked_softmax_rows mask size mismatch");
  return softmax_rows_impl(a, mask->data(), tape);
}

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, Tape<S>* tape,
                     S eps = S(1e-5)) {
  const int m = x.rows(), n = x.cols();
  if (static_cast<int>(gain.numel()) != n || static_cast<int>(bias.numel()) != n) {
    fail("layer_norm parameter length mismatch");
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto inv_std = std::make_shared<std::vector<S>>(m);
  for (int i = 0; i < m; ++i) {
    const S* xi = x.ptr() + static_cast<std::size_t>(i) * n;
    S mean = 0;
    for (int j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<S>(n);
    S var = 0;
    for (int j = 0; j < n; ++j) {
      const S d = xi[j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(n);
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    S* hi = xhat->data() + static_cast<std::size_t>(i) * n;
    S* oi = out.ptr() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      hi[j] = (xi[j] - mean) * is;
      oi[j] = hi[j] * (*gain.data)[j] + (*bias.data)[j];
    }
  }
  if (detail::record(tape, x, gain, bias)) {
    out.node = tape->emit(out.numel(), [x, gain, bias, xhat, inv_std, m, n](Tape<S>& t, const std::vector<S>& g) {
      S* dx = detail::grad_sink(t, x);
      S* dgain = detail::grad_sink(t, gain);
      S* dbias = detail::grad_sink(t, bias);
      for (int i = 0; i < m; ++i) {
        const S* gi = g.data() + static_cast<std::size_t>(i) * n;
        const S* hi = xhat->data() + static_cast<std::size_t>(i) * n;
        if (dgain || dbias) {
          for (int j = 0; j < n; ++j) {
            if (dgain) dgain[j] += gi[j] * hi[j];
            if (dbias) dbias[j] += gi[j];
          }
        }
        if (dx) {
          const S is = (*inv_std)[i];
          S sum_gh = 0, sum_ghh = 0;
          for (int j = 0; j < n; ++j) {
            const S gh = gi[j] * (*gain.data)[j];
            sum_gh += gh;
            sum_ghh += gh * hi[j];
          }
          const S inv_n = S(1) / static_cast<S>(n);
          S* di = dx + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            const S gh = gi[j] * (*gain.data)[j];
            di[j] += is * (gh - inv_n * sum_gh - hi[j] * inv_n * sum_ghh);
          }
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a, Tape<S>* tape) {
  static constexpr S kC = S(0.7978845608028653559);  // sqrt(2/pi)
  static constexpr S kA = S(0.044715);
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S x = (*a.data)[i];
    const S u = kC * (x + kA * x * x * x);
    (*out.data)[i] = S(0.5) * x * (S(1) + std::tanh(u));
  }
  if (detail::record(tape, a)) {
    out.node = tape->emit(n, [a](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const S x = (*a.data)[i];
          const S u = kC * (x + kA * x * x * x);
          const S th = std::tanh(u);
          const S du = kC * (S(1) + S(3) * kA * x * x);
          const S d = S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
          da[i] += g[i] * d;
        }
      }
    });
  }
  return out;
}

// Rotary embedding over row pairs; pos[i] < 0 leaves row i unrotated.
template <class S>
Tensor<S> rope_rows(const Tensor<S>& a, const std::shared_ptr<std::vector<int>>& pos, Tape<S>* tape,
                    S base = S(10000)) {
  const int m = a.rows(), n = a.cols();
  if (static_cast<int>(pos->size()) != m) fail("rope_rows position count mismatch");
  if (n % 2 != 0) fail("rope_rows requires an even feature dim");
  const int half = n / 2;
  std::vector<S> inv_freq(static_cast<std::size_t>(half));
  for (int j = 0; j < half; ++j) {
    inv_freq[static_cast<std::size_t>(j)] = std::pow(base, -S(2 * j) / S(n));
  }
  auto rotate = [&](const S* src, S* dst, int i, S sgn) {
    const int p = (*pos)[static_cast<std::size_t>(i)];
    if (p < 0) {
      std::copy_n(src, n, dst);
      return;
    }
    for (int j = 0; j < half; ++j) {
      const S ang = S(p) * inv_freq[static_cast<std::size_t>(j)];
      const S c = std::cos(ang), s = sgn * std::sin(ang);
      const S x0 = src[2 * j], x1 = src[2 * j + 1];
      dst[2 * j] = x0 * c - x1 * s;
      dst[2 * j + 1] = x0 * s + x1 * c;
    }
  };
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (int i = 0; i < m; ++i) {
    rotate(a.ptr() + static_cast<std::size_t>(i) * n, out.ptr() + static_cast<std::size_t>(i) * n, i, S(1));
  }
  if (detail::record(tape, a)) {
    out.node = tape->emit(out.numel(), [a, pos, m, n, base](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        const int half = n / 2;
        for (int i = 0; i < m; ++i) {
          const int p = (*pos)[static_cast<std::size_t>(i)];
          const S* gi = g.data() + static_cast<std::size_t>(i) * n;
          S* di = da + static_cast<std::size_t>(i) * n;
          if (p < 0) {
            for (int j = 0; j < n; ++j) di[j] += gi[j];
            continue;
          }
          for (int j = 0; j < half; ++j) {
            const S ang = S(p) * std::pow(base, -S(2 * j) / S(n));
            const S c = std::cos(ang), s = std::sin(ang);
            const S g0 = gi[2 * j], g1 = gi[2 * j + 1];
            di[2 * j] += g0 * c + g1 * s;      // inverse rotation
            di[2 * j + 1] += -g0 * s + g1 * c;
          }
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> row_l2_normalize(const Tensor<S>& a, Tape<S>* tape, S eps = S(1e-12)) {
  const int m = a.rows(), n = a.cols();
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  auto inv_norm = std::make_shared<std::vector<S>>(m);
  for (int i = 0; i < m; ++i) {
    const S* ai = a.ptr() + static_cast<std::size_t>(i) * n;
    S ss = 0;
    for (int j = 0; j < n; ++j) ss += ai[j] * ai[j];
    const S inv = S(1) / std::sqrt(ss + eps);
    (*inv_norm)[i] = inv;
    S* oi = out.ptr() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) oi[j] = ai[j] * inv;
  }
  if (detail::record(tape, a)) {
    Tensor<S> saved = out;
    out.node = tape->emit(out.numel(), [a, saved, inv_norm, m, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (int i = 0; i < m; ++i) {
          const S* ui = saved.ptr() + static_cast<std::size_t>(i) * n;
          const S* gi = g.data() + static_cast<std::size_t>(i) * n;
          S dot = 0;
          for (int j = 0; j < n; ++j) dot += ui[j] * gi[j];
          const S inv = (*inv_norm)[i];
          S* di = da + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) di[j] += inv * (gi[j] - ui[j] * dot);
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets, Tape<S>* tape) {
  const int m = logits.rows(), n = logits.cols();
  if (static_cast<int>(targets.size()) != m) fail("cross_entropy target count mismatch");
  for (int t : targets) {
    if (t < 0 || t >= n) fail("cross_entropy target index " + std::to_string(t) + " out of [0," + std::to_string(n) + ")");
  }
  auto probs = std::make_shared<std::vector<S>>(logits.numel());
  S loss = 0;
  for (int i = 0; i < m; ++i) {
    const S* li = logits.ptr() + static_cast<std::size_t>(i) * n;
    S mx = li[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, li[j]);
    S z = 0;
    S* pi = probs->data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      pi[j] = std::exp(li[j] - mx);
      z += pi[j];
    }
    const S inv = S(1) / z;
    for (int j = 0; j < n; ++j) pi[j] *= inv;
    loss -= std::log(pi[targets[static_cast<std::size_t>(i)]]);
  }
  Tensor<S> out = Tensor<S>::scalar(loss / static_cast<S>(m));
  if (detail::record(tape, logits)) {
    out.node = tape->emit(1, [logits, probs, targets, m, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* dl = detail::grad_sink(t, logits)) {
        const S w = g[0] / static_cast<S>(m);
        for (int i = 0; i < m; ++i) {
          const S* pi = probs->data() + static_cast<std::size_t>(i) * n;
          S* di = dl + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) di[j] += w * pi[j];
          di[targets[static_cast<std::size_t>(i)]] -= w;
        }
      }
    });
  }
  return out;
}

// Sum over elements of log N(x | mean, std^2), isotropic std.
template <class S>
Tensor<S> gaussian_log_density(const Tensor<S>& x, const Tensor<S>& mean, S stddev, Tape<S>* tape) {
  if (stddev <= S(0)) fail("gaussian_log_density requires std > 0, got " + std::to_string(static_cast<double>(stddev)));
  if (x.shape != mean.shape) {
    fail("gaussian_log_density shape mismatch: " + shape_str(x.shape) + " vs " + shape_str(mean.shape));
  }
  constexpr S kHalfLog2Pi = S(0.91893853320467274178);
  const std::size_t n = x.numel();
  const S inv_var = S(1) / (stddev * stddev);
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const S d = (*x.data)[i] - (*mean.data)[i];
    acc += d * d;
  }
  const S value = S(-0.5) * acc * inv_var - static_cast<S>(n) * (std::log(stddev) + kHalfLog2Pi);
  Tensor<S> out = Tensor<S>::scalar(value);
  if (detail::record(tape, x, mean)) {
    out.node = tape->emit(1, [x, mean, inv_var, n](Tape<S>& t, const std::vector<S>& g) {
      S* dx = detail::grad_sink(t, x);
      S* dm = detail::grad_sink(t, mean);
      if (!dx && !dm) return;
      const S w = g[0] * inv_var;
      for (std::size_t i = 0; i < n; ++i) {
        const S d = ((*x.data)[i] - (*mean.data)[i]) * w;
        if (dx) dx[i] -= d;
        if (dm) dm[i] += d;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a, Tape<S>* tape) {
  S acc = 0;
  for (const S v : *a.data) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::record(tape, a)) {
    out.node = tape->emit(1, [a](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < a.numel(); ++i) da[i] += g[0];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a, Tape<S>* tape) {
  return scale(sum_all(a, tape), S(1) / static_cast<S>(a.numel()), tape);
}

template <class S>
Tensor<S> mse_loss(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape != b.shape) fail("mse_loss shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const std::size_t n = a.numel();
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const S d = (*a.data)[i] - (*b.data)[i];
    acc += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(n));
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(1, [a, b, n](Tape<S>& t, const std::vector<S>& g) {
      S* da = detail::grad_sink(t, a);
      S* db = detail::grad_sink(t, b);
      if (!da && !db) return;
      const S w = S(2) * g[0] / static_cast<S>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const S d = ((*a.data)[i] - (*b.data)[i]) * w;
        if (da) da[i] += d;
        if (db) db[i] -= d;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> elem_exp(const Tensor<S>& a, Tape<S>* tape) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = std::exp((*a.data)[i]);
  if (detail::record(tape, a)) {
    Tensor<S> saved = out;
    out.node = tape->emit(n, [a, saved](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*saved.data)[i];
      }
    });
  }
  return out;
}

// Element-wise min; subgradient follows the selected branch (ties go to a).
template <class S>
Tensor<S> elem_min(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
  if (a.shape != b.shape) fail("elem_min shape mismatch");
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  auto pick_a = std::make_shared<std::vector<std::uint8_t>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pa = (*a.data)[i] <= (*b.data)[i];
    (*pick_a)[i] = pa;
    (*out.data)[i] = pa ? (*a.data)[i] : (*b.data)[i];
  }
  if (detail::record(tape, a, b)) {
    out.node = tape->emit(n, [a, b, pick_a](Tape<S>& t, const std::vector<S>& g) {
      S* da = detail::grad_sink(t, a);
      S* db = detail::grad_sink(t, b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*pick_a)[i]) {
          if (da) da[i] += g[i];
        } else if (db) {
          db[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> elem_clamp(const Tensor<S>& a, S lo, S hi, Tape<S>* tape) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = std::clamp((*a.data)[i], lo, hi);
  if (detail::record(tape, a)) {
    out.node = tape->emit(n, [a, lo, hi](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const S x = (*a.data)[i];
          if (x > lo && x < hi) da[i] += g[i];
        }
      }
    });
  }
  return out;
}

// Multiply every element by a learnable 1-element tensor.
template <class S>
Tensor<S> mul_scalar_t(const Tensor<S>& a, const Tensor<S>& s, Tape<S>* tape) {
  if (s.numel() != 1) fail("mul_scalar_t expects a 1-element scale");
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const S w = (*s.data)[0];
  for (std::size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] * w;
  if (detail::record(tape, a, s)) {
    out.node = tape->emit(out.numel(), [a, s](Tape<S>& t, const std::vector<S>& g) {
      const S w = (*s.data)[0];
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * w;
      }
      if (S* ds = detail::grad_sink(t, s)) {
        S acc = 0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (*a.data)[i];
        ds[0] += acc;
      }
    });
  }
  return out;
}

// Add a learnable 1-element tensor to every element.
template <class S>
Tensor<S> add_scalar_t(const Tensor<S>& a, const Tensor<S>& s, Tape<S>* tape) {
  if (s.numel() != 1) fail("add_scalar_t expects a 1-element offset");
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const S w = (*s.data)[0];
  for (std::size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] + w;
  if (detail::record(tape, a, s)) {
    out.node = tape->emit(out.numel(), [a, s](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) detail::add_into(da, g);
      if (S* ds = detail::grad_sink(t, s)) {
        S acc = 0;
        for (const S gi : g) acc += gi;
        ds[0] += acc;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> softplus(const Tensor<S>& a, Tape<S>* tape) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const S x = (*a.data)[i];
    (*out.data)[i] = x > S(30) ? x : std::log1p(std::exp(x));
  }
  if (detail::record(tape, a)) {
    out.node = tape->emit(a.numel(), [a](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const S x = (*a.data)[i];
          da[i] += g[i] / (S(1) + std::exp(-x));
        }
      }
    });
  }
  return out;
}

// Max over rows per column; subgradient routes to the first argmax.
template <class S>
Tensor<S> col_max(const Tensor<S>& a, Tape<S>* tape) {
  const int m = a.rows(), n = a.cols();
  Tensor<S> out = Tensor<S>::zeros({1, n});
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n), 0);
  for (int j = 0; j < n; ++j) {
    S best = a.at(0, j);
    int bi = 0;
    for (int i = 1; i < m; ++i) {
      if (a.at(i, j) > best) {
        best = a.at(i, j);
        bi = i;
      }
    }
    (*out.data)[static_cast<std::size_t>(j)] = best;
    (*arg)[static_cast<std::size_t>(j)] = bi;
  }
  if (detail::record(tape, a)) {
    out.node = tape->emit(out.numel(), [a, arg, n](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) {
        for (int j = 0; j < n; ++j) {
          da[static_cast<std::size_t>((*arg)[static_cast<std::size_t>(j)]) * n + j] += g[static_cast<std::size_t>(j)];
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c, Tape<S>* tape) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] + c;
  if (detail::record(tape, a)) {
    out.node = tape->emit(a.numel(), [a](Tape<S>& t, const std::vector<S>& g) {
      if (S* da = detail::grad_sink(t, a)) detail::add_into(da, g);
    });
  }
  return out;
}

template <class S>
bool all_finite(const Tensor<S>& a) {
  for (const S v : *a.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class S>
void backward(const Tensor<S>& loss, Tape<S>& tape) {
  tape.backward(loss);
}

template <class D, class S>
Tensor<D> cast_tensor(const Tensor<S>& a) {
  Tensor<D> out = Tensor<D>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = static_cast<D>((*a.data)[i]);
  return out;
}

}  // namespace lvrpo
