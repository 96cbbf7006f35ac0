#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "zeroshot/errors.hpp"
#include "zeroshot/tensor.hpp"

namespace zeroshot {

enum class PoolMode { average, max };

/// Numerically stable logistic function; never overflows, saturates cleanly.
inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// ln(1 + e^x) without overflow for large |x|.
inline double softplus(double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Recorded computation for reverse-mode differentiation. Nodes are appended
/// in forward order; backward() walks them in reverse, so every node's
/// adjoint is complete before its inputs are updated. Single-threaded by
/// design: one tape per training step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() objective with respect to node v.
  /// Zero tensor if the node did not participate.
  const Tensor& gradient(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.requires_grad) {
      throw contract_error("gradient requested for a node outside the differentiated set");
    }
    return n.grad;
  }

  // ---- leaves ----

  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }

  Var parameter(Tensor value) { return push(std::move(value), true, {}, nullptr); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [](Tape& t, Node& n) {
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      });
      t.accumulate(n.inputs[1], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      });
    });
  }

  Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [](Tape& t, Node& n) {
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      });
      t.accumulate(n.inputs[1], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
      });
    });
  }

  Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [](Tape& t, Node& n) {
      const Tensor& va = t.value(n.inputs[0]);
      const Tensor& vb2 = t.value(n.inputs[1]);
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * vb2[i];
      });
      t.accumulate(n.inputs[1], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * va[i];
      });
    });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return push(std::move(out), needs(a), {a}, [c](Tape& t, Node& n) {
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
      });
    });
  }

  Var relu(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return push(std::move(out), needs(a), {a}, [](Tape& t, Node& n) {
      const Tensor& in = t.value(n.inputs[0]);
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in[i] > 0.0) g[i] += n.grad[i];
        }
      });
    });
  }

  Var sigmoid(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(out[i]);
    return push(std::move(out), needs(a), {a}, [](Tape& t, Node& n) {
      const Tensor& y = n.value;
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y[i] * (1.0 - y[i]);
      });
    });
  }

  // ---- reductions ----

  Var sum(Var a) {
    double s = 0.0;
    for (double v : value(a).values()) s += v;
    return push(Tensor::scalar(s), needs(a), {a}, [](Tape& t, Node& n) {
      const double up = n.grad[0];
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
      });
    });
  }

  Var dot(Var a, Var b) {
    if (value(a).size() != value(b).size()) {
      throw dimension_error("dot size mismatch: " + shape_string(value(a).shape()) + " vs " +
                            shape_string(value(b).shape()));
    }
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * vb[i];
    return push(Tensor::scalar(s), needs(a) || needs(b), {a, b}, [](Tape& t, Node& n) {
      const double up = n.grad[0];
      const Tensor& x = t.value(n.inputs[0]);
      const Tensor& y = t.value(n.inputs[1]);
      t.accumulate(n.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * y[i];
      });
      t.accumulate(n.inputs[1], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * x[i];
      });
    });
  }

  // ---- linear algebra ----

  /// y = W x + b for a vector x[n], or row-wise for a matrix X[B,n].
  /// W is [m,n], b is [m].
  Var linear(Var x, Var w, Var b) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    const Tensor& vb = value(b);
    if (vw.rank() != 2) throw dimension_error("linear weights must be rank 2, got " + shape_string(vw.shape()));
    const std::size_t m = vw.extent(0);
    const std::size_t n = vw.extent(1);
    if (vb.size() != m) {
      throw dimension_error("linear bias " + shape_string(vb.shape()) + " does not match weights " +
                            shape_string(vw.shape()));
    }
    const bool batched = vx.rank() == 2;
    const std::size_t rows = batched ? vx.extent(0) : 1;
    const std::size_t cols = batched ? vx.extent(1) : vx.size();
    if (cols != n) {
      throw dimension_error("linear input " + shape_string(vx.shape()) + " does not match weights " +
                            shape_string(vw.shape()));
    }
    Tensor out(batched ? Shape{rows, m} : Shape{m});
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = vx.values().data() + r * n;
      double* yr = out.values().data() + r * m;
      for (std::size_t j = 0; j < m; ++j) {
        const double* wj = vw.values().data() + j * n;
        double acc = vb[j];
        for (std::size_t i = 0; i < n; ++i) acc += wj[i] * xr[i];
        yr[j] = acc;
      }
    }
    return push(std::move(out), needs(x) || needs(w) || needs(b), {x, w, b},
                [rows, m, n](Tape& t, Node& nd) {
                  const Tensor& vx2 = t.value(nd.inputs[0]);
                  const Tensor& vw2 = t.value(nd.inputs[1]);
                  t.accumulate(nd.inputs[0], [&](Tensor& gx) {
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < m; ++j) {
                        const double up = nd.grad[r * m + j];
                        if (up == 0.0) continue;
                        const double* wj = vw2.values().data() + j * n;
                        double* gxr = gx.values().data() + r * n;
                        for (std::size_t i = 0; i < n; ++i) gxr[i] += up * wj[i];
                      }
                  });
                  t.accumulate(nd.inputs[1], [&](Tensor& gw) {
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < m; ++j) {
                        const double up = nd.grad[r * m + j];
                        if (up == 0.0) continue;
                        const double* xr = vx2.values().data() + r * n;
                        double* gwj = gw.values().data() + j * n;
                        for (std::size_t i = 0; i < n; ++i) gwj[i] += up * xr[i];
                      }
                  });
                  t.accumulate(nd.inputs[2], [&](Tensor& gb) {
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < m; ++j) gb[j] += nd.grad[r * m + j];
                  });
                });
  }

  /// S = A Bᵀ: [B,k] x [C,k] -> [B,C].
  Var matmul_nt(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.extent(1) != vb.extent(1)) {
      throw dimension_error("matmul_nt shapes " + shape_string(va.shape()) + " and " +
                            shape_string(vb.shape()) + " are incompatible");
    }
    const std::size_t rows = va.extent(0);
    const std::size_t cols = vb.extent(0);
    const std::size_t k = va.extent(1);
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const double* ai = va.values().data() + i * k;
        const double* bj = vb.values().data() + j * k;
        double acc = 0.0;
        for (std::size_t q = 0; q < k; ++q) acc += ai[q] * bj[q];
        out(i, j) = acc;
      }
    return push(std::move(out), needs(a) || needs(b), {a, b}, [rows, cols, k](Tape& t, Node& nd) {
      const Tensor& va2 = t.value(nd.inputs[0]);
      const Tensor& vb2 = t.value(nd.inputs[1]);
      t.accumulate(nd.inputs[0], [&](Tensor& ga) {
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) {
            const double up = nd.grad[i * cols + j];
            if (up == 0.0) continue;
            const double* bj = vb2.values().data() + j * k;
            double* gai = ga.values().data() + i * k;
            for (std::size_t q = 0; q < k; ++q) gai[q] += up * bj[q];
          }
      });
      t.accumulate(nd.inputs[1], [&](Tensor& gb) {
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) {
            const double up = nd.grad[i * cols + j];
            if (up == 0.0) continue;
            const double* ai = va2.values().data() + i * k;
            double* gbj = gb.values().data() + j * k;
            for (std::size_t q = 0; q < k; ++q) gbj[q] += up * ai[q];
          }
      });
    });
  }

  /// Squared L2 norm of each row: [B,n] -> [B].
  Var row_sqnorm(Var x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 2) throw dimension_error("row_sqnorm expects rank 2, got " + shape_string(vx.shape()));
    const std::size_t rows = vx.extent(0);
    const std::size_t n = vx.extent(1);
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = vx.values().data() + r * n;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += xr[i] * xr[i];
      out[r] = acc;
    }
    return push(std::move(out), needs(x), {x}, [rows, n](Tape& t, Node& nd) {
      const Tensor& vx2 = t.value(nd.inputs[0]);
      t.accumulate(nd.inputs[0], [&](Tensor& g) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double up = nd.grad[r];
          if (up == 0.0) continue;
          const double* xr = vx2.values().data() + r * n;
          double* gr = g.values().data() + r * n;
          for (std::size_t i = 0; i < n; ++i) gr[i] += 2.0 * up * xr[i];
        }
      });
    });
  }

  /// O[i,j] = u[i] + v[j]: [B],[C] -> [B,C].
  Var outer_sum(Var u, Var v) {
    const Tensor& vu = value(u);
    const Tensor& vv = value(v);
    if (vu.rank() != 1 || vv.rank() != 1) {
      throw dimension_error("outer_sum expects two vectors, got " + shape_string(vu.shape()) + " and " +
                            shape_string(vv.shape()));
    }
    const std::size_t rows = vu.size();
    const std::size_t cols = vv.size();
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out(i, j) = vu[i] + vv[j];
    return push(std::move(out), needs(u) || needs(v), {u, v}, [rows, cols](Tape& t, Node& nd) {
      t.accumulate(nd.inputs[0], [&](Tensor& gu) {
        for (std::size_t i = 0; i < rows; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < cols; ++j) acc += nd.grad[i * cols + j];
          gu[i] += acc;
        }
      });
      t.accumulate(nd.inputs[1], [&](Tensor& gv) {
        for (std::size_t j = 0; j < cols; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < rows; ++i) acc += nd.grad[i * cols + j];
          gv[j] += acc;
        }
      });
    });
  }

  // ---- convolution and pooling ----

  /// Same-padded stride-1 cross-correlation: input [M,w,h], filters
  /// [K,M,s,s] with s odd -> [K,w,h]. Optional bias [K] added per channel.
  Var conv2d(Var input, Var filters, Var bias = Var{}) {
    const Tensor& vin = value(input);
    const Tensor& vf = value(filters);
    if (vin.rank() != 3) throw dimension_error("conv2d input must be [M,w,h], got " + shape_string(vin.shape()));
    if (vf.rank() != 4) throw dimension_error("conv2d filters must be [K,M,s,s], got " + shape_string(vf.shape()));
    if (vf.extent(1) != vin.extent(0)) {
      throw dimension_error("conv2d channel mismatch: input " + shape_string(vin.shape()) + ", filters " +
                            shape_string(vf.shape()));
    }
    if (vf.extent(2) != vf.extent(3)) {
      throw config_error("conv2d filters must be square, got " + shape_string(vf.shape()));
    }
    const std::size_t s = vf.extent(2);
    if (s % 2 == 0) throw config_error("conv2d filter size must be odd, got " + std::to_string(s));
    const std::size_t channels_in = vin.extent(0);
    const std::size_t width = vin.extent(1);
    const std::size_t height = vin.extent(2);
    const std::size_t channels_out = vf.extent(0);
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(s / 2);
    const bool has_bias = bias.valid();
    if (has_bias && value(bias).size() != channels_out) {
      throw dimension_error("conv2d bias " + shape_string(value(bias).shape()) + " does not match filters " +
                            shape_string(vf.shape()));
    }

    Tensor out({channels_out, width, height});
    for (std::size_t k = 0; k < channels_out; ++k) {
      const double b = has_bias ? value(bias)[k] : 0.0;
      for (std::size_t y = 0; y < width; ++y)
        for (std::size_t x = 0; x < height; ++x) {
          double acc = b;
          for (std::size_t m = 0; m < channels_in; ++m)
            for (std::size_t dy = 0; dy < s; ++dy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - r;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(width)) continue;
              for (std::size_t dx = 0; dx < s; ++dx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - r;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(height)) continue;
                acc += vf(k, m, dy, dx) * vin(m, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
            }
          out(k, y, x) = acc;
        }
    }
    std::vector<Var> ins = {input, filters};
    if (has_bias) ins.push_back(bias);
    bool rg = needs(input) || needs(filters) || (has_bias && needs(bias));
    return push(std::move(out), rg, std::move(ins),
                [channels_in, channels_out, width, height, s, r, has_bias](Tape& t, Node& nd) {
                  const Tensor& vin2 = t.value(nd.inputs[0]);
                  const Tensor& vf2 = t.value(nd.inputs[1]);
                  auto up = [&](std::size_t k, std::size_t y, std::size_t x) {
                    return nd.grad[(k * width + y) * height + x];
                  };
                  t.accumulate(nd.inputs[0], [&](Tensor& gin) {
                    for (std::size_t k = 0; k < channels_out; ++k)
                      for (std::size_t y = 0; y < width; ++y)
                        for (std::size_t x = 0; x < height; ++x) {
                          const double u = up(k, y, x);
                          if (u == 0.0) continue;
                          for (std::size_t m = 0; m < channels_in; ++m)
                            for (std::size_t dy = 0; dy < s; ++dy) {
                              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - r;
                              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(width)) continue;
                              for (std::size_t dx = 0; dx < s; ++dx) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - r;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(height)) continue;
                                gin((std::size_t)m, (std::size_t)iy, (std::size_t)ix) += u * vf2(k, m, dy, dx);
                              }
                            }
                        }
                  });
                  t.accumulate(nd.inputs[1], [&](Tensor& gf) {
                    for (std::size_t k = 0; k < channels_out; ++k)
                      for (std::size_t y = 0; y < width; ++y)
                        for (std::size_t x = 0; x < height; ++x) {
                          const double u = up(k, y, x);
                          if (u == 0.0) continue;
                          for (std::size_t m = 0; m < channels_in; ++m)
                            for (std::size_t dy = 0; dy < s; ++dy) {
                              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - r;
                              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(width)) continue;
                              for (std::size_t dx = 0; dx < s; ++dx) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - r;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(height)) continue;
                                gf(k, m, dy, dx) += u * vin2((std::size_t)m, (std::size_t)iy, (std::size_t)ix);
                              }
                            }
                        }
                  });
                  if (has_bias) {
                    t.accumulate(nd.inputs[2], [&](Tensor& gb) {
                      for (std::size_t k = 0; k < channels_out; ++k) {
                        double acc = 0.0;
                        for (std::size_t y = 0; y < width; ++y)
                          for (std::size_t x = 0; x < height; ++x) acc += up(k, y, x);
                        gb[k] += acc;
                      }
                    });
                  }
                });
  }

  /// Global pooling of each channel: [K,w,h] -> [K]. Max pooling routes the
  /// gradient to the first maximal cell of each channel.
  Var channel_pool(Var maps, PoolMode mode) {
    const Tensor& vm = value(maps);
    if (vm.rank() != 3) throw dimension_error("channel_pool expects [K,w,h], got " + shape_string(vm.shape()));
    const std::size_t channels = vm.extent(0);
    const std::size_t area = vm.extent(1) * vm.extent(2);
    Tensor out({channels});
    std::vector<std::size_t> argmax(mode == PoolMode::max ? channels : 0);
    for (std::size_t k = 0; k < channels; ++k) {
      const double* base = vm.values().data() + k * area;
      if (mode == PoolMode::average) {
        double acc = 0.0;
        for (std::size_t i = 0; i < area; ++i) acc += base[i];
        out[k] = acc / static_cast<double>(area);
      } else {
        std::size_t best = 0;
        for (std::size_t i = 1; i < area; ++i)
          if (base[i] > base[best]) best = i;
        out[k] = base[best];
        argmax[k] = best;
      }
    }
    return push(std::move(out), needs(maps), {maps},
                [mode, channels, area, argmax = std::move(argmax)](Tape& t, Node& nd) {
                  t.accumulate(nd.inputs[0], [&](Tensor& g) {
                    for (std::size_t k = 0; k < channels; ++k) {
                      const double u = nd.grad[k];
                      if (u == 0.0) continue;
                      double* base = g.values().data() + k * area;
                      if (mode == PoolMode::average) {
                        const double share = u / static_cast<double>(area);
                        for (std::size_t i = 0; i < area; ++i) base[i] += share;
                      } else {
                        base[argmax[k]] += u;
                      }
                    }
                  });
                });
  }

  /// Global pooling of one [w,h] map to a scalar.
  Var global_pool(Var map, PoolMode mode) {
    const Tensor& vm = value(map);
    if (vm.rank() != 2) throw dimension_error("global_pool expects [w,h], got " + shape_string(vm.shape()));
    Var as3 = reshape(map, {1, vm.extent(0), vm.extent(1)});
    Var pooled = channel_pool(as3, mode);
    return reshape(pooled, {1});
  }

  // ---- structure ----

  Var reshape(Var a, Shape shape) {
    Tensor out(std::move(shape), std::vector<double>(value(a).values().begin(), value(a).values().end()));
    if (out.size() != value(a).size()) {
      throw dimension_error("reshape size mismatch: " + shape_string(value(a).shape()) + " -> " +
                            shape_string(out.shape()));
    }
    return push(std::move(out), needs(a), {a}, [](Tape& t, Node& nd) {
      t.accumulate(nd.inputs[0], [&](Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
      });
    });
  }

  /// Stack n same-length vectors into an [n,m] matrix.
  Var stack_rows(std::span<const Var> rows) {
    if (rows.empty()) throw contract_error("stack_rows requires at least one row");
    const std::size_t m = value(rows[0]).size();
    Tensor out({rows.size(), m});
    bool rg = false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Tensor& vr = value(rows[i]);
      if (vr.size() != m) throw dimension_error("stack_rows rows have mismatched lengths");
      for (std::size_t j = 0; j < m; ++j) out(i, j) = vr[j];
      rg = rg || needs(rows[i]);
    }
    std::vector<Var> ins(rows.begin(), rows.end());
    return push(std::move(out), rg, std::move(ins), [m](Tape& t, Node& nd) {
      for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
        t.accumulate(nd.inputs[i], [&](Tensor& g) {
          for (std::size_t j = 0; j < m; ++j) g[j] += nd.grad[i * m + j];
        });
      }
    });
  }

  /// Extension point: a node with a precomputed value and a caller-supplied
  /// backward rule. `back(tape, upstream, inputs)` must accumulate into the
  /// inputs' gradients via Tape::accumulate.
  Var custom(std::vector<Var> inputs, Tensor value,
             std::function<void(Tape&, const Tensor&, std::span<const Var>)> back) {
    bool rg = false;
    for (Var v : inputs) rg = rg || needs(v);
    return push(std::move(value), rg, std::move(inputs),
                [back = std::move(back)](Tape& t, Node& nd) { back(t, nd.grad, nd.inputs); });
  }

  // ---- reverse pass ----

  /// Propagates d(objective)/d(node) to every recorded node. The objective
  /// must be scalar.
  void backward(Var objective) {
    Node& root = nodes_.at(objective.id);
    if (!root.value.is_scalar()) {
      throw contract_error("backward objective must be scalar, got " + shape_string(root.value.shape()));
    }
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        n.grad = Tensor(n.value.shape());
      } else {
        n.grad = Tensor();
      }
    }
    if (!root.requires_grad) return;  // objective does not depend on any parameter
    root.grad[0] = 1.0;
    for (std::size_t i = objective.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backprop) n.backprop(*this, n);
    }
  }

  /// Runs fn on the gradient tensor of v if v participates in
  /// differentiation; no-op otherwise. Used inside backward rules.
  template <typename Fn>
  void accumulate(Var v, Fn&& fn) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    fn(n.grad);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> inputs;
    std::function<void(Tape&, Node&)> backprop;
  };

  bool needs(Var v) const { return nodes_.at(v.id).requires_grad; }

  void require_same_shape(const char* op, Var a, Var b) const {
    if (!value(a).same_shape(value(b))) {
      throw dimension_error(std::string(op) + " shape mismatch: " + shape_string(value(a).shape()) + " vs " +
                            shape_string(value(b).shape()));
    }
  }

  Var push(Tensor value, bool requires_grad, std::vector<Var> inputs,
           std::function<void(Tape&, Node&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

/// Vector-in, vector-out affine map y = Wx + b on a fresh tape; the plain
/// (non-recorded) counterpart of Tape::linear for inference call sites.
inline Tensor affine(const Tensor& input, const Tensor& weights, const Tensor& biases) {
  Tape tape;
  Var y = tape.linear(tape.constant(input), tape.constant(weights), tape.constant(biases));
  return tape.value(y);
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return out;
}

}  // namespace zeroshot
