// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Batched evaluation and exact backprop for the implicit scene network.
// Matrices use a dual layout of 4N columns [values | d/dx | d/dy | d/dz];
// value-only paths use N columns. All dense math is GEMM-shaped.

#ifndef INHAND_FIELD_EVAL_HPP
#define INHAND_FIELD_EVAL_HPP

#include <type_traits>

#include "inhand/neural_field.hpp"

namespace inhand {

template <typename S>
using MatS = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecS = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct FieldGrads {
  VecS<S> values;
  explicit FieldGrads(const FieldParams<S>& p) : values(VecS<S>::Zero(p.total)) {}
  void zero() { values.setZero(); }

  Eigen::Map<MatS<S>> weight(const LayerSlot& l) {
    return {values.data() + l.w_offset, l.out, l.in};
  }
  Eigen::Map<VecS<S>> bias(const LayerSlot& l) { return {values.data() + l.b_offset, l.out}; }
  Eigen::Map<VecS<S>> embedding(const FieldParams<S>& p, int frame) {
    return {values.data() + p.embed_offset + frame * p.config.embed_dim, p.config.embed_dim};
  }
  Eigen::Map<Eigen::Matrix<S, 6, 1>> pose_correction(const FieldParams<S>& p, int frame) {
    return Eigen::Map<Eigen::Matrix<S, 6, 1>>(values.data() + p.pose_offset + frame * 6);
  }
  S& log_h_inv(const FieldParams<S>& p) { return values[p.log_h_inv_offset]; }
};

namespace feval {

inline constexpr double kSoftplusBeta = 100.0;

template <typename S>
S softplus(S z) {
  S bz = S(kSoftplusBeta) * z;
  if (bz > S(30)) return z;
  if (bz < S(-30)) return std::exp(bz) / S(kSoftplusBeta);
  return std::log1p(std::exp(bz)) / S(kSoftplusBeta);
}

template <typename S>
S sigmoid_beta(S z) {
  S bz = S(kSoftplusBeta) * z;
  if (bz > S(30)) return S(1);
  if (bz < S(-30)) return S(0);
  return S(1) / (S(1) + std::exp(-bz));
}

/// Softplus over a dual-layout matrix: values get softplus, tangent blocks
/// scale by the derivative at the value column.
template <typename S>
void softplus_forward(const MatS<S>& z, int n, bool tangents, MatS<S>* h) {
  h->resize(z.rows(), z.cols());
  for (int c = 0; c < n; ++c)
    for (int r = 0; r < static_cast<int>(z.rows()); ++r) (*h)(r, c) = softplus(z(r, c));
  if (!tangents) return;
  for (int d = 0; d < 3; ++d) {
    for (int c = 0; c < n; ++c) {
      int tc = n * (1 + d) + c;
      for (int r = 0; r < static_cast<int>(z.rows()); ++r)
        (*h)(r, tc) = sigmoid_beta(z(r, c)) * z(r, tc);
    }
  }
}

/// zbar_val = sig * hbar_val + beta sig (1 - sig) * sum_d z_t[d] hbar_t[d];
/// zbar_t = sig * hbar_t. The curvature term routes tangent adjoints into the
/// value chain, which is what makes gradient-consuming losses exact.
template <typename S>
void softplus_backward(const MatS<S>& z, int n, bool tangents, const MatS<S>& hbar,
                       MatS<S>* zbar) {
  zbar->resize(z.rows(), z.cols());
  for (int c = 0; c < n; ++c) {
    for (int r = 0; r < static_cast<int>(z.rows()); ++r) {
      S sig = sigmoid_beta(z(r, c));
      S acc = sig * hbar(r, c);
      if (tangents) {
        S curv = S(kSoftplusBeta) * sig * (S(1) - sig);
        for (int d = 0; d < 3; ++d) {
          int tc = n * (1 + d) + c;
          acc += curv * z(r, tc) * hbar(r, tc);
          (*zbar)(r, tc) = sig * hbar(r, tc);
        }
      }
      (*zbar)(r, c) = acc;
    }
  }
}

template <typename S>
void dense_forward(const FieldParams<S>& p, const LayerSlot& l, const MatS<S>& x, int n,
                   MatS<S>* z) {
  z->noalias() = p.weight(l) * x;
  z->leftCols(n).colwise() += p.bias(l);
}

template <typename S>
void dense_backward(const FieldParams<S>& p, const LayerSlot& l, const MatS<S>& x, int n,
                    const MatS<S>& zbar, FieldGrads<S>* grads, MatS<S>* xbar) {
  grads->weight(l).noalias() += zbar * x.transpose();
  grads->bias(l).noalias() += zbar.leftCols(n).rowwise().sum();
  if (xbar) xbar->noalias() = p.weight(l).transpose() * zbar;
}

/// Windowed encoding over a dual-layout batch; rows are
/// [identity(3) | per band: sin(3), cos(3)].
template <typename S>
void encode_forward(int bands, double progress, const MatS<S>& x, int n, bool tangents,
                    MatS<S>* e) {
  int rows = 3 + 6 * bands;
  e->resize(rows, x.cols());
  e->topRows(3) = x;
  for (int k = 0; k < bands; ++k) {
    S w = static_cast<S>(encoding_window(k, bands, progress));
    S f = static_cast<S>(std::ldexp(kPi, k));
    int rs = 3 + 6 * k, rc = rs + 3;
    for (int dim = 0; dim < 3; ++dim) {
      for (int c = 0; c < n; ++c) {
        S arg = f * x(dim, c);
        S sv = std::sin(arg), cv = std::cos(arg);
        (*e)(rs + dim, c) = w * sv;
        (*e)(rc + dim, c) = w * cv;
        if (tangents) {
          for (int d = 0; d < 3; ++d) {
            int tc = n * (1 + d) + c;
            S t = x(dim, tc);
            (*e)(rs + dim, tc) = w * f * cv * t;
            (*e)(rc + dim, tc) = -w * f * sv * t;
          }
        }
      }
    }
  }
}

/// Accumulates into xbar (same dual layout as x).
template <typename S>
void encode_backward(int bands, double progress, const MatS<S>& x, int n, bool tangents,
                     const MatS<S>& ebar, MatS<S>* xbar) {
  xbar->topRows(3) += ebar.topRows(3);
  for (int k = 0; k < bands; ++k) {
    S w = static_cast<S>(encoding_window(k, bands, progress));
    S f = static_cast<S>(std::ldexp(kPi, k));
    int rs = 3 + 6 * k, rc = rs + 3;
    for (int dim = 0; dim < 3; ++dim) {
      for (int c = 0; c < n; ++c) {
        S arg = f * x(dim, c);
        S sv = std::sin(arg), cv = std::cos(arg);
        S d1s = w * f * cv, d1c = -w * f * sv;
        S d2s = -w * f * f * sv, d2c = -w * f * f * cv;
        S acc = d1s * ebar(rs + dim, c) + d1c * ebar(rc + dim, c);
        if (tangents) {
          for (int d = 0; d < 3; ++d) {
            int tc = n * (1 + d) + c;
            S t = x(dim, tc);
            acc += d2s * t * ebar(rs + dim, tc) + d2c * t * ebar(rc + dim, tc);
            (*xbar)(dim, tc) += d1s * ebar(rs + dim, tc) + d1c * ebar(rc + dim, tc);
          }
        }
        (*xbar)(dim, c) += acc;
      }
    }
  }
}

}  // namespace feval

// ---------------------------------------------------------------------------
// Forward caches
// ---------------------------------------------------------------------------

template <typename S>
struct DenseCache {
  MatS<S> x;  // layer input
  MatS<S> z;  // pre-activation
};

template <typename S>
struct FieldForward {
  int n = 0;
  bool tangents = true;
  double progress = 0.0;
  std::vector<int> frames;

  MatS<S> p_dual;  // 3 x cols: positions with identity tangent basis
  MatS<S> dirs;    // 3 x N

  bool deformed = false;
  MatS<S> enc_w;  // deform input encoding
  std::vector<DenseCache<S>> deform;
  MatS<S> deform_final_x;
  MatS<S> six;     // 6 x cols
  MatS<S> pprime;  // 3 x cols

  MatS<S> enc_p;
  std::vector<DenseCache<S>> trunk;
  MatS<S> trunk_out;

  VecS<S> s;       // N
  MatS<S> grad_s;  // 3 x N
  MatS<S> feat;    // feature_dim x N

  MatS<S> enc_d;
  std::vector<DenseCache<S>> color;
  MatS<S> color_lin;  // pre-sigmoid
  MatS<S> color_out;  // 3 x N in (0,1)

  std::vector<DenseCache<S>> semantic;
  MatS<S> logits;  // 3 x N
};

template <typename S>
struct FieldAdjoints {
  VecS<S> s_bar;  // N
  MatS<S> n_bar;  // 3 x N, adjoint of grad_s
  MatS<S> c_bar;  // 3 x N
  MatS<S> l_bar;  // 3 x N
};

namespace feval {

template <typename S>
void pack_dual_inputs(const MatS<S>& positions, int n, bool tangents, MatS<S>* p_dual) {
  int cols = tangents ? 4 * n : n;
  p_dual->setZero(3, cols);
  p_dual->leftCols(n) = positions;
  if (tangents)
    for (int d = 0; d < 3; ++d) p_dual->row(d).segment(n * (1 + d), n).setOnes();
}

template <typename S>
void deform_stage_forward(const FieldParams<S>& params, FieldForward<S>* fwd) {
  const FieldConfig& cfg = params.config;
  const int n = fwd->n;
  const int cols = static_cast<int>(fwd->p_dual.cols());
  const bool tg = fwd->tangents;

  encode_forward(cfg.pos_bands, fwd->progress, fwd->p_dual, n, tg, &fwd->enc_w);
  MatS<S> x = MatS<S>::Zero(cfg.deform_in_dim(), cols);
  x.topRows(cfg.pos_enc_dim()) = fwd->enc_w;
  for (int i = 0; i < n; ++i)
    x.col(i).tail(cfg.embed_dim) = params.embedding(fwd->frames[i]);

  fwd->deform.resize(cfg.deform_hidden);
  for (int li = 0; li < cfg.deform_hidden; ++li) {
    fwd->deform[li].x = std::move(x);
    dense_forward(params, params.deform[li], fwd->deform[li].x, n, &fwd->deform[li].z);
    softplus_forward(fwd->deform[li].z, n, tg, &x);
  }
  fwd->deform_final_x = std::move(x);
  dense_forward(params, params.deform.back(), fwd->deform_final_x, n, &fwd->six);

  fwd->pprime.resize(3, cols);
  DualTape<S> tape;
  for (int i = 0; i < n; ++i) {
    Dual3<S> a[3], t[3], p[3];
    for (int r = 0; r < 3; ++r) {
      a[r] = Dual3<S>(fwd->six(r, i));
      t[r] = Dual3<S>(fwd->six(3 + r, i));
      p[r] = Dual3<S>(fwd->p_dual(r, i));
      if (tg) {
        for (int d = 0; d < 3; ++d) {
          a[r].g[d] = fwd->six(r, n * (1 + d) + i);
          t[r].g[d] = fwd->six(3 + r, n * (1 + d) + i);
          p[r].g[d] = fwd->p_dual(r, n * (1 + d) + i);
        }
      }
    }
    tape.clear();
    WarpNodes<S> nodes = build_warp(&tape, a, t, p);
    for (int r = 0; r < 3; ++r) {
      const Dual3<S>& o = tape.value(nodes.out[r]);
      fwd->pprime(r, i) = o.v;
      if (tg)
        for (int d = 0; d < 3; ++d) fwd->pprime(r, n * (1 + d) + i) = o.g[d];
    }
  }
  fwd->deformed = true;
}

template <typename S>
void deform_stage_backward(const FieldParams<S>& params, const FieldForward<S>& fwd,
                           const MatS<S>& pprime_bar, FieldGrads<S>* grads,
                           MatS<S>* p_bar_dual) {
  const FieldConfig& cfg = params.config;
  const int n = fwd.n;
  const int cols = static_cast<int>(fwd.p_dual.cols());
  const bool tg = fwd.tangents;

  MatS<S> six_bar = MatS<S>::Zero(6, cols);
  DualTape<S> tape;
  for (int i = 0; i < n; ++i) {
    Dual3<S> a[3], t[3], p[3];
    for (int r = 0; r < 3; ++r) {
      a[r] = Dual3<S>(fwd.six(r, i));
      t[r] = Dual3<S>(fwd.six(3 + r, i));
      p[r] = Dual3<S>(fwd.p_dual(r, i));
      if (tg) {
        for (int d = 0; d < 3; ++d) {
          a[r].g[d] = fwd.six(r, n * (1 + d) + i);
          t[r].g[d] = fwd.six(3 + r, n * (1 + d) + i);
          p[r].g[d] = fwd.p_dual(r, n * (1 + d) + i);
        }
      }
    }
    tape.clear();
    WarpNodes<S> nodes = build_warp(&tape, a, t, p);
    std::vector<std::pair<int, Dual3<S>>> seeds;
    for (int r = 0; r < 3; ++r) {
      Dual3<S> adj(pprime_bar(r, i));
      if (tg)
        for (int d = 0; d < 3; ++d) adj.g[d] = pprime_bar(r, n * (1 + d) + i);
      seeds.emplace_back(nodes.out[r], adj);
    }
    tape.backward(seeds);
    for (int r = 0; r < 3; ++r) {
      const Dual3<S>& aa = tape.adj(nodes.a[r]);
      const Dual3<S>& ta = tape.adj(nodes.t[r]);
      const Dual3<S>& pa = tape.adj(nodes.p[r]);
      six_bar(r, i) = aa.v;
      six_bar(3 + r, i) = ta.v;
      if (p_bar_dual) (*p_bar_dual)(r, i) += pa.v;
      if (tg) {
        for (int d = 0; d < 3; ++d) {
          six_bar(r, n * (1 + d) + i) = aa.g[d];
          six_bar(3 + r, n * (1 + d) + i) = ta.g[d];
          if (p_bar_dual) (*p_bar_dual)(r, n * (1 + d) + i) += pa.g[d];
        }
      }
    }
  }

  MatS<S> xbar;
  dense_backward(params, params.deform.back(), fwd.deform_final_x, n, six_bar, grads, &xbar);
  for (int li = cfg.deform_hidden - 1; li >= 0; --li) {
    MatS<S> zbar;
    softplus_backward(fwd.deform[li].z, n, tg, xbar, &zbar);
    dense_backward(params, params.deform[li], fwd.deform[li].x, n, zbar, grads, &xbar);
  }
  // First-layer input adjoint: encoding rows chain to the raw positions,
  // embedding rows accumulate per frame (value columns only: embedding
  // tangents are structurally zero).
  for (int i = 0; i < n; ++i)
    grads->embedding(params, fwd.frames[i]) += xbar.col(i).tail(cfg.embed_dim);
  MatS<S> enc_bar = xbar.topRows(cfg.pos_enc_dim());
  if (p_bar_dual)
    encode_backward(cfg.pos_bands, fwd.progress, fwd.p_dual, n, tg, enc_bar, p_bar_dual);
}

}  // namespace feval

// ---------------------------------------------------------------------------
// Public evaluation API
// ---------------------------------------------------------------------------

/// Full forward pass: SDF, spatial gradient, color, semantic logits and the
/// canonical point, with caches for the backward pass.
template <typename S>
void field_forward(const FieldParams<S>& params, double progress, const MatS<S>& positions,
                   const MatS<S>& dirs, const std::vector<int>& frames,
                   FieldForward<S>* fwd) {
  const FieldConfig& cfg = params.config;
  const int n = static_cast<int>(positions.cols());
  fwd->n = n;
  fwd->tangents = true;
  fwd->progress = progress;
  fwd->frames = frames;
  fwd->dirs = dirs;
  fwd->deformed = false;
  feval::pack_dual_inputs(positions, n, true, &fwd->p_dual);

  const MatS<S>* trunk_points = &fwd->p_dual;
  if (cfg.use_deformation) {
    feval::deform_stage_forward(params, fwd);
    trunk_points = &fwd->pprime;
  }
  feval::encode_forward(cfg.pos_bands, progress, *trunk_points, n, true, &fwd->enc_p);

  fwd->trunk.resize(cfg.trunk_depth);
  MatS<S> h;
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (int li = 0; li < cfg.trunk_depth; ++li) {
    if (li == 0) {
      fwd->trunk[li].x = fwd->enc_p;
    } else if (li == cfg.skip_layer) {
      MatS<S> cat(h.rows() + fwd->enc_p.rows(), h.cols());
      cat.topRows(h.rows()) = h;
      cat.bottomRows(fwd->enc_p.rows()) = fwd->enc_p;
      fwd->trunk[li].x = inv_sqrt2 * cat;
    } else {
      fwd->trunk[li].x = std::move(h);
    }
    feval::dense_forward(params, params.trunk[li], fwd->trunk[li].x, n, &fwd->trunk[li].z);
    feval::softplus_forward(fwd->trunk[li].z, n, true, &h);
  }
  fwd->trunk_out = std::move(h);

  // SDF row over the full dual layout: values are s, tangents are grad s.
  MatS<S> srow;
  srow.noalias() = params.weight(params.sdf_row) * fwd->trunk_out;
  srow.leftCols(n).array() += params.bias(params.sdf_row)(0);
  fwd->s = srow.leftCols(n).transpose();
  fwd->grad_s.resize(3, n);
  for (int d = 0; d < 3; ++d) fwd->grad_s.row(d) = srow.middleCols(n * (1 + d), n);

  // Feature head: values only.
  fwd->feat.noalias() = params.weight(params.feature_head) * fwd->trunk_out.leftCols(n);
  fwd->feat.colwise() += params.bias(params.feature_head);

  // Color head: (feature, encoded direction, normal), values only.
  feval::encode_forward(cfg.dir_bands, progress, dirs, n, false, &fwd->enc_d);
  MatS<S> cx(cfg.color_in_dim(), n);
  cx.topRows(cfg.feature_dim) = fwd->feat;
  cx.middleRows(cfg.feature_dim, cfg.dir_enc_dim()) = fwd->enc_d;
  cx.bottomRows(3) = fwd->grad_s;
  fwd->color.resize(cfg.color_hidden);
  for (int li = 0; li < cfg.color_hidden; ++li) {
    fwd->color[li].x = std::move(cx);
    feval::dense_forward(params, params.color[li], fwd->color[li].x, n, &fwd->color[li].z);
    feval::softplus_forward(fwd->color[li].z, n, false, &cx);
  }
  fwd->color.push_back({});
  fwd->color.back().x = std::move(cx);
  feval::dense_forward(params, params.color.back(), fwd->color.back().x, n, &fwd->color_lin);
  fwd->color_out = (S(1) / (S(1) + (-fwd->color_lin.array()).exp())).matrix();

  // Semantic head: feature only (view-independent labels).
  fwd->semantic.resize(1);
  fwd->semantic[0].x = fwd->feat;
  feval::dense_forward(params, params.semantic[0], fwd->semantic[0].x, n, &fwd->semantic[0].z);
  MatS<S> sh;
  feval::softplus_forward(fwd->semantic[0].z, n, false, &sh);
  fwd->semantic.push_back({});
  fwd->semantic.back().x = std::move(sh);
  feval::dense_forward(params, params.semantic.back(), fwd->semantic.back().x, n, &fwd->logits);
}

/// Exact parameter gradients plus input adjoints. p_bar/d_bar (3 x N) receive
/// the total derivative w.r.t. sample position and ray direction (for the
/// camera-pose chain); pass nullptr to skip.
template <typename S>
void field_backward(const FieldParams<S>& params, const FieldForward<S>& fwd,
                    const FieldAdjoints<S>& adj, FieldGrads<S>* grads,
                    std::type_identity_t<MatS<S>>* p_bar = nullptr,
                    std::type_identity_t<MatS<S>>* d_bar = nullptr) {
  const FieldConfig& cfg = params.config;
  const int n = fwd.n;
  const int cols = static_cast<int>(fwd.p_dual.cols());

  // Semantic head.
  MatS<S> feat_bar = MatS<S>::Zero(cfg.feature_dim, n);
  {
    MatS<S> xbar;
    feval::dense_backward(params, params.semantic.back(), fwd.semantic.back().x, n, adj.l_bar,
                          grads, &xbar);
    MatS<S> zbar;
    feval::softplus_backward(fwd.semantic[0].z, n, false, xbar, &zbar);
    feval::dense_backward(params, params.semantic[0], fwd.semantic[0].x, n, zbar, grads,
                          &xbar);
    feat_bar += xbar;
  }

  // Color head (sigmoid output).
  MatS<S> n_bar = adj.n_bar;
  {
    MatS<S> lin_bar =
        (adj.c_bar.array() * fwd.color_out.array() * (S(1) - fwd.color_out.array())).matrix();
    MatS<S> xbar;
    feval::dense_backward(params, params.color.back(), fwd.color.back().x, n, lin_bar, grads,
                          &xbar);
    for (int li = cfg.color_hidden - 1; li >= 0; --li) {
      MatS<S> zbar;
      feval::softplus_backward(fwd.color[li].z, n, false, xbar, &zbar);
      feval::dense_backward(params, params.color[li], fwd.color[li].x, n, zbar, grads, &xbar);
    }
    feat_bar += xbar.topRows(cfg.feature_dim);
    if (d_bar) {
      MatS<S> enc_d_bar = xbar.middleRows(cfg.feature_dim, cfg.dir_enc_dim());
      feval::encode_backward(cfg.dir_bands, fwd.progress, fwd.dirs, n, false, enc_d_bar,
                             d_bar);
    }
    n_bar += xbar.bottomRows(3);
  }

  // SDF row + feature head into the trunk output adjoint.
  MatS<S> srow_bar = MatS<S>::Zero(1, cols);
  srow_bar.leftCols(n) = adj.s_bar.transpose();
  for (int d = 0; d < 3; ++d) srow_bar.middleCols(n * (1 + d), n) = n_bar.row(d);

  MatS<S> out_bar = MatS<S>::Zero(cfg.trunk_width, cols);
  out_bar.noalias() += params.weight(params.sdf_row).transpose() * srow_bar;
  grads->weight(params.sdf_row).noalias() += srow_bar * fwd.trunk_out.transpose();
  grads->bias(params.sdf_row)(0) += adj.s_bar.sum();

  out_bar.leftCols(n).noalias() +=
      params.weight(params.feature_head).transpose() * feat_bar;
  grads->weight(params.feature_head).noalias() +=
      feat_bar * fwd.trunk_out.leftCols(n).transpose();
  grads->bias(params.feature_head).noalias() += feat_bar.rowwise().sum();

  // Trunk reverse.
  MatS<S> enc_bar = MatS<S>::Zero(cfg.pos_enc_dim(), cols);
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  MatS<S> hbar = std::move(out_bar);
  for (int li = cfg.trunk_depth - 1; li >= 0; --li) {
    MatS<S> zbar;
    feval::softplus_backward(fwd.trunk[li].z, n, true, hbar, &zbar);
    MatS<S> xbar;
    feval::dense_backward(params, params.trunk[li], fwd.trunk[li].x, n, zbar, grads, &xbar);
    if (li == 0) {
      enc_bar += xbar;
      break;
    }
    if (li == cfg.skip_layer) {
      hbar = inv_sqrt2 * xbar.topRows(cfg.trunk_width);
      enc_bar += inv_sqrt2 * xbar.bottomRows(cfg.pos_enc_dim());
    } else {
      hbar = std::move(xbar);
    }
  }

  // Encoding back to (possibly deformed) points, then through the warp.
  MatS<S> pprime_bar = MatS<S>::Zero(3, cols);
  const MatS<S>& trunk_points = fwd.deformed ? fwd.pprime : fwd.p_dual;
  feval::encode_backward(cfg.pos_bands, fwd.progress, trunk_points, n, true, enc_bar,
                         &pprime_bar);

  if (fwd.deformed) {
    MatS<S> p_bar_dual = MatS<S>::Zero(3, cols);
    feval::deform_stage_backward(params, fwd, pprime_bar, grads, &p_bar_dual);
    if (p_bar) *p_bar += p_bar_dual.leftCols(n);
  } else {
    if (p_bar) *p_bar += pprime_bar.leftCols(n);
  }
}

/// SDF values only (coarse sampling, mesh extraction). No caches.
template <typename S>
void field_sdf(const FieldParams<S>& params, double progress, const MatS<S>& positions,
               const std::vector<int>& frames, bool apply_deform, VecS<S>* s_out) {
  const FieldConfig& cfg = params.config;
  const int n = static_cast<int>(positions.cols());
  MatS<S> pts = positions;
  if (apply_deform && cfg.use_deformation) {
    FieldForward<S> scratch;
    scratch.n = n;
    scratch.tangents = false;
    scratch.progress = progress;
    scratch.frames = frames;
    scratch.p_dual = positions;
    feval::deform_stage_forward(params, &scratch);
    pts = scratch.pprime;
  }
  MatS<S> enc;
  feval::encode_forward(cfg.pos_bands, progress, pts, n, false, &enc);
  MatS<S> h, z;
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (int li = 0; li < cfg.trunk_depth; ++li) {
    const MatS<S>* x = &h;
    MatS<S> cat;
    if (li == 0) {
      x = &enc;
    } else if (li == cfg.skip_layer) {
      cat.resize(h.rows() + enc.rows(), n);
      cat.topRows(h.rows()) = h;
      cat.bottomRows(enc.rows()) = enc;
      cat *= inv_sqrt2;
      x = &cat;
    }
    feval::dense_forward(params, params.trunk[li], *x, n, &z);
    feval::softplus_forward(z, n, false, &h);
  }
  s_out->noalias() = (params.weight(params.sdf_row) * h).transpose();
  s_out->array() += params.bias(params.sdf_row)(0);
}

/// Deformation displacements p' - p for the divergence regularizer probes.
/// Value-only; fwd keeps the caches for deform_probe_backward.
template <typename S>
void deform_probe_forward(const FieldParams<S>& params, double progress,
                          const MatS<S>& positions, const std::vector<int>& frames,
                          FieldForward<S>* fwd, MatS<S>* displacement) {
  const int n = static_cast<int>(positions.cols());
  fwd->n = n;
  fwd->tangents = false;
  fwd->progress = progress;
  fwd->frames = frames;
  fwd->p_dual = positions;
  feval::deform_stage_forward(params, fwd);
  *displacement = fwd->pprime - positions;
}

template <typename S>
void deform_probe_backward(const FieldParams<S>& params, const FieldForward<S>& fwd,
                           const MatS<S>& displacement_bar, FieldGrads<S>* grads,
                           std::type_identity_t<MatS<S>>* p_bar = nullptr) {
  MatS<S> p_bar_dual = MatS<S>::Zero(3, fwd.n);
  feval::deform_stage_backward(params, fwd, displacement_bar, grads, &p_bar_dual);
  if (p_bar) {
    *p_bar += p_bar_dual;
    *p_bar -= displacement_bar;  // d(p' - p)/dp direct term
  }
}

/// Single-query convenience wrapper.
struct FieldOutput {
  double sdf = 0.0;
  Vec3 color = Vec3::Zero();
  Vec3 logits = Vec3::Zero();
  Vec3 grad_sdf = Vec3::Zero();
  Vec3 canonical_point = Vec3::Zero();
};

template <typename S>
FieldOutput evaluate_field(const FieldParams<S>& params, double progress, const Vec3& p,
                           const Vec3& d, int frame) {
  MatS<S> pos(3, 1), dir(3, 1);
  pos.col(0) = p.cast<S>();
  dir.col(0) = d.normalized().cast<S>();
  FieldForward<S> fwd;
  field_forward(params, progress, pos, dir, {frame}, &fwd);
  FieldOutput out;
  out.sdf = static_cast<double>(fwd.s[0]);
  for (int r = 0; r < 3; ++r) {
    out.color[r] = static_cast<double>(fwd.color_out(r, 0));
    out.logits[r] = static_cast<double>(fwd.logits(r, 0));
    out.grad_sdf[r] = static_cast<double>(fwd.grad_s(r, 0));
    out.canonical_point[r] = static_cast<double>(
        fwd.deformed ? fwd.pprime(r, 0) : fwd.p_dual(r, 0));
  }
  if (!std::isfinite(out.sdf) || !out.color.allFinite() || !out.grad_sdf.allFinite())
    throw std::runtime_error("field evaluation produced non-finite output");
  return out;
}

}  // namespace inhand

#endif  // INHAND_FIELD_EVAL_HPP
