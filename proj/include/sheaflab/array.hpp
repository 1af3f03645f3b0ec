#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "sheaflab/common.hpp"
#include "sheaflab/rng.hpp"

namespace sheaflab {

/// Dense row-major array of 64-bit floats. Rank is dynamic but in practice
/// everything here is a scalar, vector, or matrix.
struct Array {
  std::vector<int> shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
  Array(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == count(shape), "Array: data length does not match shape");
  }

  static size_t count(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      require(d >= 0, "Array: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  static Array scalar(double v) { return Array({}, {v}); }
  static Array full(std::vector<int> s, double v) {
    Array a(std::move(s));
    std::fill(a.data.begin(), a.data.end(), v);
    return a;
  }
  static Array randn(std::vector<int> s, Rng& rng, double std_dev = 1.0) {
    Array a(std::move(s));
    for (double& v : a.data) v = std_dev * rng.normal();
    return a;
  }

  size_t numel() const { return data.size(); }
  bool is_scalar() const { return shape.empty(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void require_same_shape(const Array& a, const Array& b, const char* op) {
  require(a.shape == b.shape, std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                  " vs " + shape_str(b.shape));
}

// ---------------------------------------------------------------------------
// Forward kernels. The tape primitives and the plain evaluator both call
// these, so the two execution paths perform identical floating-point work.
// ---------------------------------------------------------------------------
namespace kernels {

inline Array matmul(const Array& a, const Array& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2,
          "matmul: expected rank-2 operands, got " + shape_str(a.shape) + " and " +
              shape_str(b.shape));
  require(a.shape[1] == b.shape[0], "matmul: inner dimensions disagree " + shape_str(a.shape) +
                                        " vs " + shape_str(b.shape));
  const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
  Array out({n, m});
  for (int i = 0; i < n; ++i) {
    double* orow = &out.data[static_cast<size_t>(i) * m];
    const double* arow = &a.data[static_cast<size_t>(i) * k];
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = &b.data[static_cast<size_t>(p) * m];
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a (n x k) times b^T where b is (m x k).
inline Array matmul_nt(const Array& a, const Array& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2,
          "matmul_nt: expected rank-2 operands, got " + shape_str(a.shape) + " and " +
              shape_str(b.shape));
  require(a.shape[1] == b.shape[1], "matmul_nt: inner dimensions disagree " +
                                        shape_str(a.shape) + " vs " + shape_str(b.shape));
  const int n = a.shape[0], k = a.shape[1], m = b.shape[0];
  Array out({n, m});
  for (int i = 0; i < n; ++i) {
    const double* arow = &a.data[static_cast<size_t>(i) * k];
    for (int j = 0; j < m; ++j) {
      const double* brow = &b.data[static_cast<size_t>(j) * k];
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.data[static_cast<size_t>(i) * m + j] = acc;
    }
  }
  return out;
}

inline Array add(const Array& a, const Array& b) {
  require_same_shape(a, b, "add");
  Array out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Array sub(const Array& a, const Array& b) {
  require_same_shape(a, b, "sub");
  Array out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

inline Array mul(const Array& a, const Array& b) {
  require_same_shape(a, b, "mul");
  Array out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

inline Array scale(const Array& a, double c) {
  Array out = a;
  for (double& v : out.data) v *= c;
  return out;
}

// scalar (rank-0) gate times arbitrary array; the one broadcast allowed.
inline Array scale_by(const Array& a, double gate) { return scale(a, gate); }

inline Array relu(const Array& a) {
  Array out = a;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Array logistic(const Array& a) {
  Array out = a;
  for (double& v : out.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return out;
}

inline Array softplus(const Array& a) {
  Array out = a;
  for (double& v : out.data) v = std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v)));
  return out;
}

inline Array log(const Array& a) {
  Array out = a;
  for (double& v : out.data) v = std::log(v);
  return out;
}

inline Array softmax_rows(const Array& a) {
  require(a.shape.size() == 2, "softmax_rows: expected rank-2, got " + shape_str(a.shape));
  Array out = a;
  const int n = a.shape[0], m = a.shape[1];
  for (int i = 0; i < n; ++i) {
    double* row = &out.data[static_cast<size_t>(i) * m];
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < m; ++j) row[j] /= sum;
  }
  return out;
}

inline Array log_softmax_row(const Array& a) {
  require(a.shape.size() == 1, "log_softmax_row: expected rank-1, got " + shape_str(a.shape));
  Array out = a;
  const int m = a.shape[0];
  double mx = out.data[0];
  for (int j = 1; j < m; ++j) mx = std::max(mx, out.data[j]);
  double sum = 0.0;
  for (int j = 0; j < m; ++j) sum += std::exp(out.data[j] - mx);
  const double lse = mx + std::log(sum);
  for (int j = 0; j < m; ++j) out.data[j] -= lse;
  return out;
}

inline Array gather_rows(const Array& table, const std::vector<int>& ids) {
  require(table.shape.size() == 2, "gather_rows: table must be rank-2");
  const int m = table.shape[1];
  Array out({static_cast<int>(ids.size()), m});
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.shape[0],
            "gather_rows: row id " + std::to_string(ids[i]) + " out of range [0," +
                std::to_string(table.shape[0]) + ")");
    std::copy_n(&table.data[static_cast<size_t>(ids[i]) * m], m,
                &out.data[i * static_cast<size_t>(m)]);
  }
  return out;
}

inline Array slice_rows(const Array& a, int begin, int end) {
  require(a.shape.size() == 2, "slice_rows: expected rank-2, got " + shape_str(a.shape));
  require(0 <= begin && begin <= end && end <= a.shape[0],
          "slice_rows: bad row range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") for " + shape_str(a.shape));
  const int m = a.shape[1];
  Array out({end - begin, m});
  std::copy_n(&a.data[static_cast<size_t>(begin) * m], static_cast<size_t>(end - begin) * m,
              out.data.begin());
  return out;
}

inline Array concat_rows(const Array& a, const Array& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2 && a.shape[1] == b.shape[1],
          "concat_rows: incompatible shapes " + shape_str(a.shape) + " and " +
              shape_str(b.shape));
  Array out({a.shape[0] + b.shape[0], a.shape[1]});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
  return out;
}

inline double mean(const Array& a) {
  require(!a.data.empty(), "mean: empty array");
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return acc / static_cast<double>(a.data.size());
}

inline double sum(const Array& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return acc;
}

}  // namespace kernels

inline double max_abs_diff(const Array& a, const Array& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace sheaflab
