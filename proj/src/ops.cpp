#include "neuroalign/ops.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

namespace neuroalign::ad {
namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(fmt::format("{}: shape mismatch {}x{} vs {}x{}", op, a.rows(), a.cols(),
                                  b.rows(), b.cols()));
  }
}

Tape& tape_of(const Var& a) { return *a.tape(); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return tape_of(a).record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return tape_of(a).record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {a, b},
                           [a, b](Tape& t, const Mat& g) {
                             t.accumulate(a, g.cwiseProduct(b.value()));
                             t.accumulate(b, g.cwiseProduct(a.value()));
                           });
}

Var scale(Var a, double s) {
  return tape_of(a).record(a.value() * s, {a}, [a, s](Tape& t, const Mat& g) {
    t.accumulate(a, g * s);
  });
}

Var add_scalar(Var a, double s) {
  Mat out = a.value().array() + s;
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
}

Var add_row(Var a, Var row) {
  const Mat& av = a.value();
  const Mat& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ConfigError(fmt::format("add_row: row 1x{} vs matrix {}x{}", rv.cols(), av.rows(),
                                  av.cols()));
  }
  Mat out = av.rowwise() + rv.row(0);
  return tape_of(a).record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var scale_rows(Var a, Var w) {
  const Mat& av = a.value();
  const Mat& wv = w.value();
  if (wv.cols() != 1 || wv.rows() != av.rows()) throw ConfigError("scale_rows: weight shape");
  Mat out = av.array().colwise() * wv.col(0).array();
  return tape_of(a).record(std::move(out), {a, w}, [a, w](Tape& t, const Mat& g) {
    const Mat& av = a.value();
    const Mat& wv = w.value();
    Mat ga = g.array().colwise() * wv.col(0).array();
    t.accumulate(a, ga);
    Mat gw = g.cwiseProduct(av).rowwise().sum();
    t.accumulate(w, gw);
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ConfigError(fmt::format("matmul: {}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
  }
  return tape_of(a).record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw ConfigError(fmt::format("matmul_nt: {}x{} * ({}x{})^T", a.rows(), a.cols(), b.rows(),
                                  b.cols()));
  }
  return tape_of(a).record(a.value() * b.value().transpose(), {a, b},
                           [a, b](Tape& t, const Mat& g) {
                             if (t.requires_grad(a)) t.accumulate(a, g * b.value());
                             if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
                           });
}

Var transpose(Var a) {
  return tape_of(a).record(a.value().transpose(), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, g.transpose());
  });
}

Var rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ConfigError("rows: out of range");
  Mat out = a.value().middleRows(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

Var cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ConfigError("cols: out of range");
  Mat out = a.value().middleCols(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("vcat: no inputs");
  Eigen::Index total = 0;
  const Eigen::Index c = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != c) throw ConfigError("vcat: column mismatch");
    total += p.rows();
  }
  Mat out(total, c);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape_of(parts.front()).record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const Var& p : parts) {
      const Eigen::Index r = p.rows();
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(at, r));
      at += r;
    }
  });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("hcat: no inputs");
  Eigen::Index total = 0;
  const Eigen::Index r = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != r) throw ConfigError("hcat: row mismatch");
    total += p.cols();
  }
  Mat out(r, total);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return tape_of(parts.front()).record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const Var& p : parts) {
      const Eigen::Index c = p.cols();
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

Var reshape(Var a, Eigen::Index r, Eigen::Index c) {
  if (r * c != a.value().size()) throw ConfigError("reshape: element count mismatch");
  Mat out = Eigen::Map<const Mat>(a.value().data(), r, c);
  const Eigen::Index ar = a.rows();
  const Eigen::Index ac = a.cols();
  return tape_of(a).record(std::move(out), {a}, [a, ar, ac](Tape& t, const Mat& g) {
    Mat back = Eigen::Map<const Mat>(g.data(), ar, ac);
    t.accumulate(a, back);
  });
}

Var repeat_rows(Var row, Eigen::Index n) {
  if (row.rows() != 1) throw ConfigError("repeat_rows: expects a single row");
  Mat out = row.value().replicate(n, 1);
  return tape_of(row).record(std::move(out), {row}, [row](Tape& t, const Mat& g) {
    t.accumulate(row, g.colwise().sum());
  });
}

Var mean_rows(Var a) {
  const double n = static_cast<double>(a.rows());
  Mat out = a.value().colwise().mean();
  return tape_of(a).record(std::move(out), {a}, [a, n](Tape& t, const Mat& g) {
    Mat full = g.replicate(a.rows(), 1) / n;
    t.accumulate(a, full);
  });
}

Var softmax_rows(Var a) {
  const Mat& av = a.value();
  Mat out(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    const double m = av.row(i).maxCoeff();
    out.row(i) = (av.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  Mat y = out;
  return tape_of(a).record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) {
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat ga = y.array() * (g.array().colwise() - dots.array());
    t.accumulate(a, ga);
  });
}

Var log_softmax_rows(Var a) {
  const Mat& av = a.value();
  Mat out(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    const double m = av.row(i).maxCoeff();
    const double lse = m + std::log((av.row(i).array() - m).exp().sum());
    out.row(i) = av.row(i).array() - lse;
  }
  Mat sm = out.array().exp();
  return tape_of(a).record(std::move(out), {a}, [a, sm](Tape& t, const Mat& g) {
    Vec sums = g.rowwise().sum();
    Mat ga = g - Mat(sm.array().colwise() * sums.array());
    t.accumulate(a, ga);
  });
}

Var sigmoid(Var a) {
  Mat out = (1.0 + (-a.value().array()).exp()).inverse();
  Mat y = out;
  return tape_of(a).record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) {
    Mat ga = g.array() * y.array() * (1.0 - y.array());
    t.accumulate(a, ga);
  });
}

Var gelu(Var a) {
  const Mat& x = a.value();
  Mat out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Mat d = a.value().unaryExpr([inv_sqrt_2pi](double v) {
      return 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var tanh(Var a) {
  Mat out = a.value().array().tanh();
  Mat y = out;
  return tape_of(a).record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) {
    Mat ga = g.array() * (1.0 - y.array().square());
    t.accumulate(a, ga);
  });
}

Var exp(Var a) {
  Mat out = a.value().array().exp();
  Mat y = out;
  return tape_of(a).record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) {
    t.accumulate(a, g.cwiseProduct(y));
  });
}

Var normalize_sum_rows(Var a) {
  const Mat& av = a.value();
  Vec s = av.rowwise().sum();
  if ((s.array() <= 0.0).any() || !s.allFinite()) throw NumericError("normalize_sum_rows: non-positive row sum");
  Mat out = av.array().colwise() / s.array();
  Mat y = out;
  return tape_of(a).record(std::move(out), {a}, [a, y, s](Tape& t, const Mat& g) {
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat ga = (g.array().colwise() - dots.array()).colwise() / s.array();
    t.accumulate(a, ga);
  });
}

Var l2_normalize_rows(Var a) {
  const Mat& av = a.value();
  Vec norms = av.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0) || !std::isfinite(norms(i))) {
      throw NumericError(fmt::format("l2_normalize_rows: row {} has zero or non-finite norm", i));
    }
  }
  Mat out = av.array().colwise() / norms.array();
  Mat y = out;
  return tape_of(a).record(std::move(out), {a}, [a, y, norms](Tape& t, const Mat& g) {
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat ga = (g - Mat(y.array().colwise() * dots.array())).array().colwise() / norms.array();
    t.accumulate(a, ga);
  });
}

Var layer_norm_rows(Var a, Var gain, Var bias, double eps) {
  const Mat& x = a.value();
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ConfigError("layer_norm_rows: gain/bias shape");
  }
  Vec mu = x.rowwise().mean();
  Mat centered = x.colwise() - mu;
  Vec inv_std = ((centered.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt();
  Mat xhat = centered.array().colwise() * inv_std.array();
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return tape_of(a).record(std::move(out), {a, gain, bias},
                           [a, gain, bias, xhat, inv_std, d](Tape& t, const Mat& g) {
                             if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                             if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                             if (t.requires_grad(a)) {
                               Mat gx = g.array().rowwise() * gain.value().row(0).array();
                               Vec m1 = gx.rowwise().mean();
                               Vec m2 = gx.cwiseProduct(xhat).rowwise().mean();
                               Mat ga = (gx.colwise() - m1) - Mat(xhat.array().colwise() * m2.array());
                               ga = ga.array().colwise() * inv_std.array();
                               t.accumulate(a, ga);
                             }
                             (void)d;
                           });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return tape_of(a).record(std::move(out), {a}, [a, n](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

Var mean_square(Var a) {
  const double n = static_cast<double>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().squaredNorm() / n;
  return tape_of(a).record(std::move(out), {a}, [a, n](Tape& t, const Mat& g) {
    t.accumulate(a, a.value() * (2.0 * g(0, 0) / n));
  });
}

Var mean_abs(Var a) {
  const double n = static_cast<double>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().cwiseAbs().sum() / n;
  return tape_of(a).record(std::move(out), {a}, [a, n](Tape& t, const Mat& g) {
    Mat sign = a.value().unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    t.accumulate(a, sign * (g(0, 0) / n));
  });
}

Var patchify(Var signal, int len, double pad_value) {
  if (len < 1) throw ConfigError("patchify: patch length must be positive");
  const Mat& x = signal.value();
  const Eigen::Index c = x.rows();
  const Eigen::Index t_len = x.cols();
  const Eigen::Index n = (t_len + len - 1) / len;
  Mat out(n, len * c);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (int k = 0; k < len; ++k) {
      const Eigen::Index ts = p * len + k;
      for (Eigen::Index ch = 0; ch < c; ++ch) {
        out(p, k * c + ch) = ts < t_len ? x(ch, ts) : pad_value;
      }
    }
  }
  return tape_of(signal).record(std::move(out), {signal}, [signal, len, n, c, t_len](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(c, t_len);
    for (Eigen::Index p = 0; p < n; ++p) {
      for (int k = 0; k < len; ++k) {
        const Eigen::Index ts = p * len + k;
        if (ts >= t_len) break;
        for (Eigen::Index ch = 0; ch < c; ++ch) gx(ch, ts) += g(p, k * c + ch);
      }
    }
    t.accumulate(signal, gx);
  });
}

Var unfold_rows(Var a, int k) {
  if (k < 1 || k % 2 == 0) throw ConfigError("unfold_rows: kernel must be odd and positive");
  const Mat& x = a.value();
  const Eigen::Index l = x.rows();
  const Eigen::Index d = x.cols();
  const int half = k / 2;
  Mat out = Mat::Zero(l, k * d);
  for (Eigen::Index r = 0; r < l; ++r) {
    for (int j = 0; j < k; ++j) {
      const Eigen::Index src = r + j - half;
      if (src >= 0 && src < l) out.block(r, j * d, 1, d) = x.row(src);
    }
  }
  return tape_of(a).record(std::move(out), {a}, [a, k, l, d, half](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(l, d);
    for (Eigen::Index r = 0; r < l; ++r) {
      for (int j = 0; j < k; ++j) {
        const Eigen::Index src = r + j - half;
        if (src >= 0 && src < l) gx.row(src) += g.block(r, j * d, 1, d);
      }
    }
    t.accumulate(a, gx);
  });
}

}  // namespace neuroalign::ad
