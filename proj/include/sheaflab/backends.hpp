#pragma once

#include <vector>

#include "sheaflab/array.hpp"
#include "sheaflab/tape.hpp"

namespace sheaflab {

// The transformer core is written once against a backend concept and
// instantiated twice: PlainBackend evaluates immediately, TapeBackend records
// the same operations for reverse-mode differentiation. Both route forward
// arithmetic through kernels::, so the two paths are bit-identical.

struct PlainBackend {
  using V = Array;         // activation
  using P = const Array*;  // bound parameter
  using G = double;        // edge gate

  P bind(const Array& a, bool /*trainable*/ = false) { return &a; }
  const Array& use(P p) const { return *p; }
  V lift(const Array& a) const { return a; }
  G gate(double g) const { return g; }

  V matmul(const Array& a, const Array& b) const { return kernels::matmul(a, b); }
  V matmul_nt(const Array& a, const Array& b) const { return kernels::matmul_nt(a, b); }
  V add(const Array& a, const Array& b) const { return kernels::add(a, b); }
  V relu(const Array& a) const { return kernels::relu(a); }
  V softmax_rows(const Array& a) const { return kernels::softmax_rows(a); }
  V scale(const Array& a, double c) const { return kernels::scale(a, c); }
  V gather_rows(const Array& t, const std::vector<int>& ids) const {
    return kernels::gather_rows(t, ids);
  }
  V slice_rows(const Array& a, int b, int e) const { return kernels::slice_rows(a, b, e); }

  V gated_sum(const std::vector<G>& gates, const std::vector<const V*>& terms) const {
    require(gates.size() == terms.size() && !terms.empty(),
            "gated_sum: gate vector length mismatch (" + std::to_string(gates.size()) +
                " gates vs " + std::to_string(terms.size()) + " terms)");
    Array acc(terms[0]->shape);
    for (size_t i = 0; i < terms.size(); ++i) {
      require_same_shape(*terms[0], *terms[i], "gated_sum");
      const double g = gates[i];
      const Array& x = *terms[i];
      for (size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += g * x.data[k];
    }
    return acc;
  }
};

struct TapeBackend {
  Tape& t;
  using V = Value;
  using P = Value;
  using G = Value;

  P bind(const Array& a, bool trainable = false) { return t.leaf(a, trainable); }
  Value use(P p) const { return p; }
  V lift(const Array& a) { return t.constant(a); }
  G gate(double g) { return t.constant(g); }

  V matmul(Value a, Value b) { return t.matmul(a, b); }
  V matmul_nt(Value a, Value b) { return t.matmul_nt(a, b); }
  V add(Value a, Value b) { return t.add(a, b); }
  V relu(Value a) { return t.relu(a); }
  V softmax_rows(Value a) { return t.softmax_rows(a); }
  V scale(Value a, double c) { return t.scale(a, c); }
  V gather_rows(Value tab, const std::vector<int>& ids) { return t.gather_rows(tab, ids); }
  V slice_rows(Value a, int b, int e) { return t.slice_rows(a, b, e); }

  V gated_sum(const std::vector<G>& gates, const std::vector<const V*>& terms) {
    std::vector<Value> ts;
    ts.reserve(terms.size());
    for (const V* v : terms) ts.push_back(*v);
    return t.gated_sum(gates, ts);
  }
};

}  // namespace sheaflab
