#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sheaflab/array.hpp"

namespace sheaflab {

class Tape;

/// Handle to a value recorded on a tape.
struct Value {
  int id = -1;
  const Tape* owner = nullptr;
};

/// Reverse-mode tape over dense arrays. Records primitive operations in
/// forward order; backward() replays partial-derivative rules in reverse.
/// A tape is confined to a single thread; Arrays are immutable after
/// creation and safe to share between tapes.
class Tape {
 public:
  Value leaf(Array v, bool requires_grad = false) {
    int id = push(std::move(v), requires_grad, nullptr);
    return {id, this};
  }
  Value constant(Array v) { return leaf(std::move(v), false); }
  Value constant(double v) { return leaf(Array::scalar(v), false); }

  const Array& val(Value v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  /// Adjoint of any recorded value; valid after backward(). Zero-filled if
  /// the value does not influence the loss.
  const Array& grad(Value v) {
    check(v);
    ensure_adjoint(v.id);
    return adjoints_[static_cast<size_t>(v.id)];
  }

  size_t size() const { return nodes_.size(); }

  // -- primitives -----------------------------------------------------------

  Value matmul(Value a, Value b) {
    Array out = kernels::matmul(val(a), val(b));
    return record(std::move(out), {a, b}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      t.accumulate(c.parents[0], kernels::matmul_nt(adj, t.node_val(c.parents[1])));
      t.accumulate(c.parents[1], matmul_tn(t.node_val(c.parents[0]), adj));
    });
  }

  /// a * b^T.
  Value matmul_nt(Value a, Value b) {
    Array out = kernels::matmul_nt(val(a), val(b));
    return record(std::move(out), {a, b}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      t.accumulate(c.parents[0], kernels::matmul(adj, t.node_val(c.parents[1])));
      t.accumulate(c.parents[1], matmul_tn(adj, t.node_val(c.parents[0])));
    });
  }

  Value add(Value a, Value b) {
    Array out = kernels::add(val(a), val(b));
    return record(std::move(out), {a, b}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      t.accumulate(c.parents[0], adj);
      t.accumulate(c.parents[1], adj);
    });
  }

  Value sub(Value a, Value b) {
    Array out = kernels::sub(val(a), val(b));
    return record(std::move(out), {a, b}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      t.accumulate(c.parents[0], adj);
      t.accumulate(c.parents[1], kernels::scale(adj, -1.0));
    });
  }

  Value mul(Value a, Value b) {
    Array out = kernels::mul(val(a), val(b));
    return record(std::move(out), {a, b}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      t.accumulate(c.parents[0], kernels::mul(adj, t.node_val(c.parents[1])));
      t.accumulate(c.parents[1], kernels::mul(adj, t.node_val(c.parents[0])));
    });
  }

  Value scale(Value a, double c) {
    Array out = kernels::scale(val(a), c);
    return record(std::move(out), {a}, [c](Tape& t, const BackCtx& ctx) {
      t.accumulate(ctx.parents[0],
                   kernels::scale(t.adjoints_[static_cast<size_t>(ctx.self)], c));
    });
  }

  Value relu(Value a) {
    Array out = kernels::relu(val(a));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& x = t.node_val(c.parents[0]);
      Array d = adj;
      for (size_t i = 0; i < d.data.size(); ++i)
        if (x.data[i] <= 0.0) d.data[i] = 0.0;
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value logistic(Value a) {
    Array out = kernels::logistic(val(a));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& y = t.nodes_[static_cast<size_t>(c.self)].value;
      Array d = adj;
      for (size_t i = 0; i < d.data.size(); ++i) d.data[i] *= y.data[i] * (1.0 - y.data[i]);
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value softplus(Value a) {
    Array out = kernels::softplus(val(a));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      Array d = kernels::logistic(t.node_val(c.parents[0]));
      for (size_t i = 0; i < d.data.size(); ++i) d.data[i] *= adj.data[i];
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value log(Value a) {
    Array out = kernels::log(val(a));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& x = t.node_val(c.parents[0]);
      Array d = adj;
      for (size_t i = 0; i < d.data.size(); ++i) d.data[i] /= x.data[i];
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value softmax_rows(Value a) {
    Array out = kernels::softmax_rows(val(a));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& y = t.nodes_[static_cast<size_t>(c.self)].value;
      const int n = y.shape[0], m = y.shape[1];
      Array d({n, m});
      for (int i = 0; i < n; ++i) {
        const double* yr = &y.data[static_cast<size_t>(i) * m];
        const double* ar = &adj.data[static_cast<size_t>(i) * m];
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += yr[j] * ar[j];
        double* dr = &d.data[static_cast<size_t>(i) * m];
        for (int j = 0; j < m; ++j) dr[j] = yr[j] * (ar[j] - dot);
      }
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value log_softmax_row(Value a) {
    Array out = kernels::log_softmax_row(val(a));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& logp = t.nodes_[static_cast<size_t>(c.self)].value;
      double total = 0.0;
      for (double v : adj.data) total += v;
      Array d = adj;
      for (size_t i = 0; i < d.data.size(); ++i) d.data[i] -= std::exp(logp.data[i]) * total;
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value gather_rows(Value table, std::vector<int> ids) {
    Array out = kernels::gather_rows(val(table), ids);
    return record(std::move(out), {table},
                  [ids = std::move(ids)](Tape& t, const BackCtx& c) {
                    const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
                    const Array& tab = t.node_val(c.parents[0]);
                    Array d(tab.shape);
                    const int m = tab.shape[1];
                    for (size_t i = 0; i < ids.size(); ++i)
                      for (int j = 0; j < m; ++j)
                        d.data[static_cast<size_t>(ids[i]) * m + j] +=
                            adj.data[i * static_cast<size_t>(m) + j];
                    t.accumulate(c.parents[0], std::move(d));
                  });
  }

  Value slice_rows(Value a, int begin, int end) {
    Array out = kernels::slice_rows(val(a), begin, end);
    return record(std::move(out), {a}, [begin](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& x = t.node_val(c.parents[0]);
      Array d(x.shape);
      const int m = x.shape[1];
      std::copy(adj.data.begin(), adj.data.end(),
                d.data.begin() + static_cast<size_t>(begin) * m);
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value concat_rows(Value a, Value b) {
    Array out = kernels::concat_rows(val(a), val(b));
    return record(std::move(out), {a, b}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& x = t.node_val(c.parents[0]);
      const Array& y = t.node_val(c.parents[1]);
      const int m = x.shape[1];
      Array da({x.shape[0], m}), db({y.shape[0], m});
      std::copy_n(adj.data.begin(), da.data.size(), da.data.begin());
      std::copy_n(adj.data.begin() + da.data.size(), db.data.size(), db.data.begin());
      t.accumulate(c.parents[0], std::move(da));
      t.accumulate(c.parents[1], std::move(db));
    });
  }

  /// Same data, new shape (element count must match).
  Value reshape(Value a, std::vector<int> new_shape) {
    const Array& x = val(a);
    require(Array::count(new_shape) == x.numel(),
            "reshape: element count mismatch " + shape_str(x.shape) + " -> " +
                shape_str(new_shape));
    Array out(new_shape, x.data);
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& x2 = t.node_val(c.parents[0]);
      t.accumulate(c.parents[0], Array(x2.shape, adj.data));
    });
  }

  /// Scalar element pick by flat index.
  Value pick(Value a, int flat_index) {
    const Array& x = val(a);
    require(flat_index >= 0 && static_cast<size_t>(flat_index) < x.numel(),
            "pick: index " + std::to_string(flat_index) + " out of range for " +
                shape_str(x.shape));
    Array out = Array::scalar(x.data[static_cast<size_t>(flat_index)]);
    return record(std::move(out), {a}, [flat_index](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      const Array& x2 = t.node_val(c.parents[0]);
      Array d(x2.shape);
      d.data[static_cast<size_t>(flat_index)] = adj.data[0];
      t.accumulate(c.parents[0], std::move(d));
    });
  }

  Value mean(Value a) {
    Array out = Array::scalar(kernels::mean(val(a)));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const double g = t.adjoints_[static_cast<size_t>(c.self)].data[0];
      const Array& x = t.node_val(c.parents[0]);
      t.accumulate(c.parents[0],
                   Array::full(x.shape, g / static_cast<double>(x.numel())));
    });
  }

  Value sum(Value a) {
    Array out = Array::scalar(kernels::sum(val(a)));
    return record(std::move(out), {a}, [](Tape& t, const BackCtx& c) {
      const double g = t.adjoints_[static_cast<size_t>(c.self)].data[0];
      const Array& x = t.node_val(c.parents[0]);
      t.accumulate(c.parents[0], Array::full(x.shape, g));
    });
  }

  /// Forward identity; gradient does not flow through.
  Value detach(Value a) {
    Array out = val(a);
    int id = push(std::move(out), false, nullptr);
    return {id, this};
  }

  /// sum_i gates[i] * terms[i], accumulated left to right from zeros.
  /// Gates are scalars; terms share one shape.
  Value gated_sum(const std::vector<Value>& gates, const std::vector<Value>& terms) {
    require(gates.size() == terms.size() && !terms.empty(),
            "gated_sum: gate vector length mismatch (" + std::to_string(gates.size()) +
                " gates vs " + std::to_string(terms.size()) + " terms)");
    Array acc(val(terms[0]).shape);
    for (size_t i = 0; i < terms.size(); ++i) {
      require(val(gates[i]).is_scalar(), "gated_sum: gate must be scalar");
      require_same_shape(val(terms[0]), val(terms[i]), "gated_sum");
      const double g = val(gates[i]).data[0];
      const Array& x = val(terms[i]);
      for (size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += g * x.data[k];
    }
    std::vector<Value> parents;
    parents.reserve(gates.size() * 2);
    for (size_t i = 0; i < gates.size(); ++i) {
      parents.push_back(gates[i]);
      parents.push_back(terms[i]);
    }
    return record(std::move(acc), parents, [](Tape& t, const BackCtx& c) {
      const Array& adj = t.adjoints_[static_cast<size_t>(c.self)];
      for (size_t i = 0; i + 1 < c.parents.size(); i += 2) {
        int gid = c.parents[i], xid = c.parents[i + 1];
        const Array& x = t.node_val(xid);
        const double g = t.node_val(gid).data[0];
        double dot = 0.0;
        for (size_t k = 0; k < x.data.size(); ++k) dot += adj.data[k] * x.data[k];
        t.accumulate(gid, Array::scalar(dot));
        t.accumulate(xid, kernels::scale(adj, g));
      }
    });
  }

  // -- backward --------------------------------------------------------------

  /// Propagates d(loss)/d(node) adjoints for every node reachable from the
  /// scalar `loss`. Adjoints are reset on each call.
  void backward(Value loss) {
    check(loss);
    require(val(loss).is_scalar(), "backward: loss must be a scalar");
    adjoints_.assign(nodes_.size(), Array{});
    ensure_adjoint(loss.id);
    adjoints_[static_cast<size_t>(loss.id)].data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || !n.backward) continue;
      if (adjoints_[static_cast<size_t>(id)].data.empty()) continue;  // unreached
      BackCtx ctx{id, n.parent_ids};
      n.backward(*this, ctx);
    }
  }

 private:
  struct BackCtx {
    int self;
    const std::vector<int>& parents;
  };
  using BackwardFn = std::function<void(Tape&, const BackCtx&)>;

  struct Node {
    Array value;
    std::vector<int> parent_ids;
    BackwardFn backward;
    bool needs_grad = false;
  };

  void check(Value v) const {
    require(v.owner == this, "value does not belong to this tape");
    require(v.id >= 0 && static_cast<size_t>(v.id) < nodes_.size(), "stale value handle");
  }

  const Array& node_val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  int push(Array v, bool needs_grad, BackwardFn fn, std::vector<int> parents = {}) {
    nodes_.push_back(Node{std::move(v), std::move(parents), std::move(fn), needs_grad});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Value record(Array out, const std::vector<Value>& parents, BackwardFn fn) {
    bool needs = false;
    std::vector<int> pids;
    pids.reserve(parents.size());
    for (Value p : parents) {
      check(p);
      pids.push_back(p.id);
      needs = needs || nodes_[static_cast<size_t>(p.id)].needs_grad;
    }
    int id = push(std::move(out), needs, needs ? std::move(fn) : BackwardFn{},
                  std::move(pids));
    return {id, this};
  }

  void ensure_adjoint(int id) {
    if (adjoints_.size() != nodes_.size()) adjoints_.assign(nodes_.size(), Array{});
    Array& adj = adjoints_[static_cast<size_t>(id)];
    if (adj.data.empty() && nodes_[static_cast<size_t>(id)].value.numel() > 0)
      adj = Array(nodes_[static_cast<size_t>(id)].value.shape);
  }

  void accumulate(int id, const Array& delta) {
    if (!nodes_[static_cast<size_t>(id)].needs_grad) return;
    ensure_adjoint(id);
    Array& adj = adjoints_[static_cast<size_t>(id)];
    for (size_t i = 0; i < adj.data.size(); ++i) adj.data[i] += delta.data[i];
  }

  static Array matmul_tn(const Array& a, const Array& b) {
    // a^T * b where a is (n x k), b is (n x m) -> (k x m).
    require(a.shape[0] == b.shape[0], "matmul_tn: outer dimensions disagree " +
                                          shape_str(a.shape) + " vs " + shape_str(b.shape));
    const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
    Array out({k, m});
    for (int i = 0; i < n; ++i) {
      const double* arow = &a.data[static_cast<size_t>(i) * k];
      const double* brow = &b.data[static_cast<size_t>(i) * m];
      for (int p = 0; p < k; ++p) {
        const double av = arow[p];
        double* orow = &out.data[static_cast<size_t>(p) * m];
        for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
      }
    }
    return out;
  }

  std::vector<Node> nodes_;
  std::vector<Array> adjoints_;
};

/// Straight-through estimator: forward value is the binary threshold
/// 1[s > 0.5], gradient flows through the continuous score s.
inline Value straight_through(Tape& t, Value score) {
  Array hard = t.val(score);
  for (double& v : hard.data) v = v > 0.5 ? 1.0 : 0.0;
  Value gap = t.detach(t.sub(t.constant(std::move(hard)), score));
  return t.add(gap, score);
}

/// Max over coordinates of |analytic - central difference| / max(1, |central|).
/// `f` must be a pure function of its input value.
inline double finite_diff_check(const std::function<Value(Tape&, Value)>& f, const Array& x,
                                double h) {
  Array analytic;
  {
    Tape t;
    Value vx = t.leaf(x, true);
    Value loss = f(t, vx);
    require(t.val(loss).is_scalar(), "finite_diff_check: f must return a scalar");
    require(std::isfinite(t.val(loss).data[0]), "finite_diff_check: non-finite f(x)");
    t.backward(loss);
    analytic = t.grad(vx);
  }
  auto eval = [&](const Array& xv) {
    Tape t;
    Value loss = f(t, t.leaf(xv, false));
    double v = t.val(loss).data[0];
    require(std::isfinite(v), "finite_diff_check: non-finite f value at probe point");
    return v;
  };
  double worst = 0.0;
  for (size_t i = 0; i < x.numel(); ++i) {
    Array xp = x, xm = x;
    xp.data[i] += h;
    xm.data[i] -= h;
    double numeric = (eval(xp) - eval(xm)) / (2.0 * h);
    double err = std::fabs(analytic.data[i] - numeric) / std::max(1.0, std::fabs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sheaflab
