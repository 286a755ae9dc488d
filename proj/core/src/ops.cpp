#include "drivekd/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace drivekd {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

CMapM mat(const Tensor& t) {
  return CMapM(t.data().data(), t.rows(), t.cols());
}

MapM grad_mat(Tensor t) {
  return MapM(t.grad().data(), t.rows(), t.cols());
}

bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

void require(bool cond, const char* msg) {
  if (!cond) throw TensorError(msg);
}

bool has_out_grad(const Tensor& out) { return out.has_grad(); }

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "add: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const int n = a.numel();
  for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");
  if (tape) {
    tape->record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "sub: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const int n = a.numel();
  for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  check_finite(out, "sub");
  if (tape) {
    tape->record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "mul: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const int n = a.numel();
  for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");
  if (tape) {
    tape->record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * b.data()[i];
        gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tape, const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const int n = a.numel();
  for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  check_finite(out, "scale");
  if (tape) {
    tape->record([a, out, s]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
  require(bias.numel() == x.cols(), "add_bias: bias length != cols");
  Tensor out = Tensor::zeros(x.shape());
  const int r = x.rows(), c = x.cols();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[i * c + j] = x.data()[i * c + j] + bias.data()[j];
  check_finite(out, "add_bias");
  if (tape) {
    tape->record([x, bias, out, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      auto& gb = bias.grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          gx[i * c + j] += g[i * c + j];
          gb[j] += g[i * c + j];
        }
    });
  }
  return out;
}

Tensor mul_row(Tape* tape, const Tensor& x, const Tensor& row) {
  require(row.numel() == x.cols(), "mul_row: row length != cols");
  Tensor out = Tensor::zeros(x.shape());
  const int r = x.rows(), c = x.cols();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[i * c + j] = x.data()[i * c + j] * row.data()[j];
  check_finite(out, "mul_row");
  if (tape) {
    tape->record([x, row, out, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      auto& gr = row.grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          gx[i * c + j] += g[i * c + j] * row.data()[j];
          gr[j] += g[i * c + j] * x.data()[i * c + j];
        }
    });
  }
  return out;
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree");
  Tensor out = Tensor::zeros({a.rows(), b.cols()});
  MapM(out.data().data(), out.rows(), out.cols()).noalias() = mat(a) * mat(b);
  check_finite(out, "matmul");
  if (tape) {
    tape->record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      CMapM g(out.grad().data(), out.rows(), out.cols());
      grad_mat(a).noalias() += g * mat(b).transpose();
      grad_mat(b).noalias() += mat(a).transpose() * g;
    });
  }
  return out;
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w,
              const Tensor& bias) {
  require(x.cols() == w.rows(), "linear: inner dimensions disagree");
  require(bias.numel() == w.cols(), "linear: bias length != out dim");
  Tensor out = Tensor::zeros({x.rows(), w.cols()});
  MapM o(out.data().data(), out.rows(), out.cols());
  o.noalias() = mat(x) * mat(w);
  o.rowwise() +=
      Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), bias.numel());
  check_finite(out, "linear");
  if (tape) {
    tape->record([x, w, bias, out]() mutable {
      if (!has_out_grad(out)) return;
      CMapM g(out.grad().data(), out.rows(), out.cols());
      grad_mat(x).noalias() += g * mat(w).transpose();
      grad_mat(w).noalias() += mat(x).transpose() * g;
      Eigen::Map<Eigen::RowVectorXf> gb(bias.grad().data(), bias.numel());
      gb += g.colwise().sum();
    });
  }
  return out;
}

Tensor transpose(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros({x.cols(), x.rows()});
  MapM(out.data().data(), out.rows(), out.cols()) = mat(x).transpose();
  if (tape) {
    tape->record([x, out]() mutable {
      if (!has_out_grad(out)) return;
      CMapM g(out.grad().data(), out.rows(), out.cols());
      grad_mat(x).noalias() += g.transpose();
    });
  }
  return out;
}

Tensor softmax_t(Tape* tape, const Tensor& x, float temperature) {
  if (!(temperature > 0.0f)) {
    throw TensorError("softmax_t: temperature must be positive");
  }
  Tensor out = Tensor::zeros(x.shape());
  const int r = x.rows(), c = x.cols();
  for (int i = 0; i < r; ++i) {
    const float* xi = x.data().data() + i * c;
    float* yi = out.data().data() + i * c;
    float m = xi[0];
    for (int j = 1; j < c; ++j) m = std::max(m, xi[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      double e = std::exp(static_cast<double>((xi[j] - m) / temperature));
      yi[j] = static_cast<float>(e);
      sum += e;
    }
    for (int j = 0; j < c; ++j) yi[j] = static_cast<float>(yi[j] / sum);
  }
  check_finite(out, "softmax_t");
  if (tape) {
    tape->record([x, out, temperature, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      const auto& y = out.data();
      auto& gx = x.grad();
      for (int i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += static_cast<double>(g[i * c + j]) * y[i * c + j];
        for (int j = 0; j < c; ++j) {
          gx[i * c + j] += static_cast<float>(
              y[i * c + j] * (g[i * c + j] - dot) / temperature);
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const int n = x.numel();
  for (int i = 0; i < n; ++i) {
    out.data()[i] = static_cast<float>(
        1.0 / (1.0 + std::exp(-static_cast<double>(x.data()[i]))));
  }
  check_finite(out, "sigmoid");
  if (tape) {
    tape->record([x, out]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      const auto& y = out.data();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * y[i] * (1.0f - y[i]);
      }
    });
  }
  return out;
}

Tensor gelu(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const int n = x.numel();
  for (int i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] =
        static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
  }
  check_finite(out, "gelu");
  if (tape) {
    tape->record([x, out]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x.data()[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += static_cast<float>(g[i] * (cdf + v * pdf));
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta) {
  const int r = x.rows(), c = x.cols();
  require(gamma.numel() == c && beta.numel() == c,
          "layer_norm: gamma/beta length != cols");
  constexpr double kEps = 1e-5;
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto istd = std::make_shared<std::vector<float>>(r);
  for (int i = 0; i < r; ++i) {
    const float* xi = x.data().data() + i * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xi[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xi[j] - mean;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + kEps);
    (*istd)[i] = static_cast<float>(is);
    for (int j = 0; j < c; ++j) {
      const float xh = static_cast<float>((xi[j] - mean) * is);
      (*xhat)[i * c + j] = xh;
      out.data()[i * c + j] =
          xh * gamma.data()[j] + beta.data()[j];
    }
  }
  check_finite(out, "layer_norm");
  if (tape) {
    tape->record([x, gamma, beta, out, xhat, istd, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      auto& gg = gamma.grad();
      auto& gb = beta.grad();
      for (int i = 0; i < r; ++i) {
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
        for (int j = 0; j < c; ++j) {
          const double dxh = static_cast<double>(g[i * c + j]) * gamma.data()[j];
          m1 += dxh;
          m2 += dxh * (*xhat)[i * c + j];
        }
        m1 /= c;
        m2 /= c;
        for (int j = 0; j < c; ++j) {
          const double dxh = static_cast<double>(g[i * c + j]) * gamma.data()[j];
          gx[i * c + j] += static_cast<float>(
              (*istd)[i] * (dxh - m1 - (*xhat)[i * c + j] * m2));
          gg[j] += g[i * c + j] * (*xhat)[i * c + j];
          gb[j] += g[i * c + j];
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape* tape, const Tensor& x, float p, RngStream& stream) {
  if (!(p >= 0.0f && p < 1.0f)) {
    throw TensorError("dropout: p must be in [0, 1)");
  }
  if (p == 0.0f) return x;  // identity, no draws consumed
  const int n = x.numel();
  auto mask = std::make_shared<std::vector<float>>(n);
  const float keep_scale = 1.0f / (1.0f - p);
  for (int i = 0; i < n; ++i) {
    (*mask)[i] = (stream.uniform() < p) ? 0.0f : keep_scale;
  }
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i) out.data()[i] = x.data()[i] * (*mask)[i];
  check_finite(out, "dropout");
  if (tape) {
    tape->record([x, out, mask]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor embedding_lookup(Tape* tape, const Tensor& table,
                        std::span<const int> ids) {
  const int v = table.rows(), c = table.cols();
  for (int id : ids) {
    require(id >= 0 && id < v, "embedding_lookup: id out of range");
  }
  const int n = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({n, c});
  for (int i = 0; i < n; ++i) {
    std::copy_n(table.data().data() + ids[i] * c, c,
                out.data().data() + i * c);
  }
  if (tape) {
    std::vector<int> idv(ids.begin(), ids.end());
    tape->record([table, out, idv, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        for (int j = 0; j < c; ++j) gt[idv[i] * c + j] += g[i * c + j];
      }
    });
  }
  return out;
}

Tensor concat_rows(Tape* tape, std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const int c = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  int row = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data().data(), p.numel(), out.data().data() + row * c);
    row += p.rows();
  }
  if (tape) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    tape->record([held, out, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      int row = 0;
      for (auto& p : held) {
        auto& gp = p.grad();
        for (int i = 0; i < p.numel(); ++i) gp[i] += g[row * c + i];
        row += p.rows();
      }
    });
  }
  return out;
}

Tensor slice_rows(Tape* tape, const Tensor& x, int begin, int end) {
  require(begin >= 0 && end <= x.rows() && begin < end,
          "slice_rows: bad range");
  const int c = x.cols();
  Tensor out = Tensor::zeros({end - begin, c});
  std::copy_n(x.data().data() + begin * c, (end - begin) * c,
              out.data().data());
  if (tape) {
    tape->record([x, out, begin, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (int i = 0; i < out.numel(); ++i) gx[begin * c + i] += g[i];
    });
  }
  return out;
}

std::vector<Tensor> split_rows(Tape* tape, const Tensor& x,
                               std::span<const int> sizes) {
  int total = 0;
  for (int s : sizes) total += s;
  require(total == x.rows(), "split_rows: sizes do not sum to rows");
  std::vector<Tensor> outs;
  int row = 0;
  for (int s : sizes) {
    outs.push_back(slice_rows(tape, x, row, row + s));
    row += s;
  }
  return outs;
}

Tensor mean_rows(Tape* tape, const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({1, c});
  for (int j = 0; j < c; ++j) {
    double s = 0.0;
    for (int i = 0; i < r; ++i) s += x.data()[i * c + j];
    out.data()[j] = static_cast<float>(s / r);
  }
  check_finite(out, "mean_rows");
  if (tape) {
    tape->record([x, out, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gx[i * c + j] += g[j] / r;
    });
  }
  return out;
}

Tensor center(Tape* tape, const Tensor& x) {
  const int n = x.numel();
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x.data()[i];
  mean /= n;
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i) {
    out.data()[i] = static_cast<float>(x.data()[i] - mean);
  }
  check_finite(out, "center");
  if (tape) {
    tape->record([x, out, n]() mutable {
      if (!has_out_grad(out)) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      double gm = 0.0;
      for (int i = 0; i < n; ++i) gm += g[i];
      gm /= n;
      for (int i = 0; i < n; ++i) gx[i] += static_cast<float>(g[i] - gm);
    });
  }
  return out;
}

Tensor mse(Tape* tape, const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "mse: shape mismatch");
  const int r = a.rows(), c = a.cols();
  double acc = 0.0;
  for (int i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / r));
  check_finite(out, "mse");
  if (tape) {
    tape->record([a, b, out, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const float g = out.grad()[0];
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (int i = 0; i < r * c; ++i) {
        const float d = a.data()[i] - b.data()[i];
        const float t = 2.0f * d * g / r;
        ga[i] += t;
        gb[i] -= t;
      }
    });
  }
  return out;
}

Tensor mse(Tape* tape, const Tensor& a, const Tensor& b, const Tensor& w) {
  require(same_shape(a, b), "mse: shape mismatch");
  require(w.numel() == a.rows(), "mse: weights length != row count");
  const int r = a.rows(), c = a.cols();
  double acc = 0.0;
  for (int i = 0; i < r; ++i) {
    double rowsq = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d =
          static_cast<double>(a.data()[i * c + j]) - b.data()[i * c + j];
      rowsq += d * d;
    }
    acc += static_cast<double>(w.data()[i]) * rowsq;
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / r));
  check_finite(out, "mse");
  if (tape) {
    tape->record([a, b, w, out, r, c]() mutable {
      if (!has_out_grad(out)) return;
      const float g = out.grad()[0];
      auto& ga = a.grad();
      auto& gb = b.grad();
      auto& gw = w.grad();
      for (int i = 0; i < r; ++i) {
        double rowsq = 0.0;
        for (int j = 0; j < c; ++j) {
          const float d = a.data()[i * c + j] - b.data()[i * c + j];
          const float t = 2.0f * d * w.data()[i] * g / r;
          ga[i * c + j] += t;
          gb[i * c + j] -= t;
          rowsq += static_cast<double>(d) * d;
        }
        gw[i] += static_cast<float>(rowsq * g / r);
      }
    });
  }
  return out;
}

namespace {

// Row log-sum-exp in double.
double row_lse(const float* row, int c) {
  float m = row[0];
  for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
  double s = 0.0;
  for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - m));
  return static_cast<double>(m) + std::log(s);
}

}  // namespace

double cross_entropy_value(const Tensor& logits,
                           std::span<const int> targets) {
  const int r = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != r) {
    throw TensorError("cross_entropy: one logit row per target required");
  }
  double acc = 0.0;
  for (int i = 0; i < r; ++i) {
    const int t = targets[i];
    if (t < 0 || t >= c) {
      throw TensorError("cross_entropy: target id out of range");
    }
    const float* row = logits.data().data() + i * c;
    acc += row_lse(row, c) - static_cast<double>(row[t]);
  }
  return acc / r;
}

Tensor cross_entropy(Tape* tape, const Tensor& logits,
                     std::span<const int> targets) {
  Tensor out = Tensor::scalar(static_cast<float>(cross_entropy_value(logits, targets)));
  check_finite(out, "cross_entropy");
  if (tape) {
    std::vector<int> tv(targets.begin(), targets.end());
    tape->record([logits, out, tv]() mutable {
      if (!has_out_grad(out)) return;
      const float g = out.grad()[0];
      const int r = logits.rows(), c = logits.cols();
      auto& gl = logits.grad();
      for (int i = 0; i < r; ++i) {
        const float* row = logits.data().data() + i * c;
        float m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - m));
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(static_cast<double>(row[j] - m)) / s;
          const double onehot = (j == tv[i]) ? 1.0 : 0.0;
          gl[i * c + j] += static_cast<float>((p - onehot) * g / r);
        }
      }
    });
  }
  return out;
}

Tensor kl_div(Tape* tape, const Tensor& p_logits, const Tensor& q_logits,
              float temperature) {
  require(same_shape(p_logits, q_logits), "kl_div: shape mismatch");
  if (!(temperature > 0.0f)) {
    throw TensorError("kl_div: temperature must be positive");
  }
  const int r = p_logits.rows(), c = p_logits.cols();
  const double tau = temperature;
  // Scaled logits and per-row log-softmax terms, all in double.
  std::vector<double> a(c), b(c);
  double acc = 0.0;
  for (int i = 0; i < r; ++i) {
    const float* pr = p_logits.data().data() + i * c;
    const float* qr = q_logits.data().data() + i * c;
    double ma = -1e300, mb = -1e300;
    for (int j = 0; j < c; ++j) {
      a[j] = pr[j] / tau;
      b[j] = qr[j] / tau;
      ma = std::max(ma, a[j]);
      mb = std::max(mb, b[j]);
    }
    double sa = 0.0, sb = 0.0;
    for (int j = 0; j < c; ++j) {
      sa += std::exp(a[j] - ma);
      sb += std::exp(b[j] - mb);
    }
    const double lse_a = ma + std::log(sa), lse_b = mb + std::log(sb);
    for (int j = 0; j < c; ++j) {
      const double lp = a[j] - lse_a;
      const double lq = b[j] - lse_b;
      acc += std::exp(lp) * (lp - lq);
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / r));
  check_finite(out, "kl_div");
  if (tape) {
    tape->record([p_logits, q_logits, out, r, c, tau]() mutable {
      if (!has_out_grad(out)) return;
      const float g = out.grad()[0];
      auto& gp = p_logits.grad();
      auto& gq = q_logits.grad();
      std::vector<double> lp(c), lq(c);
      for (int i = 0; i < r; ++i) {
        const float* pr = p_logits.data().data() + i * c;
        const float* qr = q_logits.data().data() + i * c;
        double ma = -1e300, mb = -1e300;
        for (int j = 0; j < c; ++j) {
          lp[j] = pr[j] / tau;
          lq[j] = qr[j] / tau;
          ma = std::max(ma, lp[j]);
          mb = std::max(mb, lq[j]);
        }
        double sa = 0.0, sb = 0.0;
        for (int j = 0; j < c; ++j) {
          sa += std::exp(lp[j] - ma);
          sb += std::exp(lq[j] - mb);
        }
        const double lse_a = ma + std::log(sa), lse_b = mb + std::log(sb);
        double row_kl = 0.0;
        for (int j = 0; j < c; ++j) {
          lp[j] -= lse_a;
          lq[j] -= lse_b;
          row_kl += std::exp(lp[j]) * (lp[j] - lq[j]);
        }
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(lp[j]);
          const double q = std::exp(lq[j]);
          gp[i * c + j] += static_cast<float>(
              p * ((lp[j] - lq[j]) - row_kl) * g / (tau * r));
          gq[i * c + j] += static_cast<float>((q - p) * g / (tau * r));
        }
      }
    });
  }
  return out;
}

Tensor attention(Tape* tape, const Tensor& q, const Tensor& k,
                 const Tensor& v, int num_heads,
                 std::span<const int> visible) {
  require(same_shape(q, k) && same_shape(q, v), "attention: q/k/v mismatch");
  const int L = q.rows(), D = q.cols();
  require(D % num_heads == 0, "attention: dim not divisible by heads");
  require(static_cast<int>(visible.size()) == L, "attention: visible size");
  for (int i = 0; i < L; ++i) {
    require(visible[i] >= 1 && visible[i] <= L, "attention: bad visible range");
  }
  const int hd = D / num_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

  // Per-head softmax probabilities, zero outside the visible range; kept for
  // the backward pass.
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(num_heads) * L * L, 0.0f);
  std::vector<int> vis(visible.begin(), visible.end());

  Tensor out = Tensor::zeros({L, D});
  MapM o(out.data().data(), L, D);
  RowMat s(L, L);
  for (int h = 0; h < num_heads; ++h) {
    auto qh = mat(q).middleCols(h * hd, hd);
    auto kh = mat(k).middleCols(h * hd, hd);
    auto vh = mat(v).middleCols(h * hd, hd);
    s.noalias() = qh * kh.transpose();
    float* ph = probs->data() + static_cast<std::size_t>(h) * L * L;
    for (int i = 0; i < L; ++i) {
      const int w = vis[i];
      float m = -std::numeric_limits<float>::infinity();
      for (int j = 0; j < w; ++j) m = std::max(m, s(i, j) * inv_sqrt);
      double sum = 0.0;
      for (int j = 0; j < w; ++j) {
        const double e = std::exp(static_cast<double>(s(i, j) * inv_sqrt - m));
        ph[i * L + j] = static_cast<float>(e);
        sum += e;
      }
      for (int j = 0; j < w; ++j) {
        ph[i * L + j] = static_cast<float>(ph[i * L + j] / sum);
      }
    }
    CMapM pm(ph, L, L);
    o.middleCols(h * hd, hd).noalias() = pm * vh;
  }
  check_finite(out, "attention");

  if (tape) {
    tape->record([q, k, v, out, probs, vis, num_heads, hd, inv_sqrt, L]() mutable {
      if (!has_out_grad(out)) return;
      CMapM go(out.grad().data(), L, num_heads * hd);
      RowMat dp(L, L), ds(L, L);
      for (int h = 0; h < num_heads; ++h) {
        const float* ph = probs->data() + static_cast<std::size_t>(h) * L * L;
        CMapM pm(ph, L, L);
        auto qh = mat(q).middleCols(h * hd, hd);
        auto kh = mat(k).middleCols(h * hd, hd);
        auto vh = mat(v).middleCols(h * hd, hd);
        auto goh = go.middleCols(h * hd, hd);
        grad_mat(v).middleCols(h * hd, hd).noalias() += pm.transpose() * goh;
        dp.noalias() = goh * vh.transpose();
        for (int i = 0; i < L; ++i) {
          const int w = vis[i];
          double dot = 0.0;
          for (int j = 0; j < w; ++j) {
            dot += static_cast<double>(dp(i, j)) * pm(i, j);
          }
          for (int j = 0; j < L; ++j) {
            ds(i, j) = (j < w) ? static_cast<float>(pm(i, j) *
                                                    (dp(i, j) - dot) * inv_sqrt)
                               : 0.0f;
          }
        }
        grad_mat(q).middleCols(h * hd, hd).noalias() += ds * kh;
        grad_mat(k).middleCols(h * hd, hd).noalias() += ds.transpose() * qh;
      }
    });
  }
  return out;
}

int argmax_row(const Tensor& x, int row, int col_begin, int col_end) {
  const int c = x.cols();
  if (row < 0 || row >= x.rows() || col_begin < 0 || col_end > c ||
      col_begin >= col_end) {
    throw TensorError("argmax_row: bad range");
  }
  const float* r = x.data().data() + row * c;
  int best = col_begin;
  for (int j = col_begin + 1; j < col_end; ++j) {
    if (r[j] > r[best]) best = j;
  }
  return best;
}

}  // namespace drivekd
