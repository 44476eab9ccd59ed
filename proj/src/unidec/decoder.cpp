#include "unidec/decoder.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace unidec {

namespace {
constexpr double kNormEps = 1e-5;

template <typename T>
void fill_normal(Mat<T>& m, Rng& rng, double std) {
  for (auto& x : m.d) x = static_cast<T>(rng.normal() * std);
}

template <typename T>
void fill_const(Mat<T>& m, double v) {
  for (auto& x : m.d) x = static_cast<T>(v);
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}
}  // namespace

void DecoderConfig::validate() const {
  if (d_model < 1) throw ConfigError("model.d_model must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw ConfigError("model.d_model must be divisible by model.n_heads");
  if (d_head() % 2 != 0) throw ConfigError("model head dim must be even for rotary pairs");
  if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
  if (n_mixed < 1 || n_mixed > n_layers)
    throw ConfigError("model.n_mixed must satisfy 1 <= n_mixed <= n_layers");
  if (d_ffn < 1) throw ConfigError("model.d_ffn must be >= 1");
  if (rotary_base <= 1.0) throw ConfigError("model.rotary_base must be > 1");
  if (e3d_scale <= 0.0) throw ConfigError("model.e3d_scale must be > 0");
}

// ------------------------------------------------------------- rotary -----

template <typename T>
void rotary_rows(Mat<T>& x, const std::vector<int>& pos, double base, int n_heads,
                 bool inverse) {
  const int d = x.cols;
  const int dh = d / n_heads;
  const int n_pairs = dh / 2;
  std::vector<double> freq(n_pairs);
  for (int p = 0; p < n_pairs; ++p) freq[p] = std::pow(base, -2.0 * p / dh);
  for (int i = 0; i < x.rows; ++i) {
    T* row = x.row(i);
    for (int p = 0; p < n_pairs; ++p) {
      double ang = pos[i] * freq[p];
      if (inverse) ang = -ang;
      const T c = static_cast<T>(std::cos(ang));
      const T s = static_cast<T>(std::sin(ang));
      for (int h = 0; h < n_heads; ++h) {
        T& a = row[h * dh + 2 * p];
        T& b = row[h * dh + 2 * p + 1];
        const T a2 = a * c - b * s;
        const T b2 = a * s + b * c;
        a = a2;
        b = b2;
      }
    }
  }
}

// ---------------------------------------------------------------- e3d -----

std::vector<double> e3d_embed(Vec2 ref, int d_head, double scale) {
  std::vector<double> out(static_cast<size_t>(d_head), 0.0);
  const int m = d_head / 2;
  const double coords[2] = {ref.x / scale, ref.y / scale};
  for (int half = 0; half < 2; ++half) {
    const double u = coords[half];
    for (int e = 0; e < m; ++e) {
      const int pair = e / 2;
      const double f = std::pow(10000.0, -2.0 * pair / m);
      out[half * m + e] = (e % 2 == 0) ? std::sin(u * f) : std::cos(u * f);
    }
  }
  return out;
}

void e3d_embed_deriv(Vec2 ref, int d_head, double scale, std::vector<double>& dx,
                     std::vector<double>& dy) {
  dx.assign(static_cast<size_t>(d_head), 0.0);
  dy.assign(static_cast<size_t>(d_head), 0.0);
  const int m = d_head / 2;
  const double coords[2] = {ref.x / scale, ref.y / scale};
  for (int half = 0; half < 2; ++half) {
    const double u = coords[half];
    std::vector<double>& target = half == 0 ? dx : dy;
    for (int e = 0; e < m; ++e) {
      const int pair = e / 2;
      const double f = std::pow(10000.0, -2.0 * pair / m);
      const double d_du = (e % 2 == 0) ? std::cos(u * f) * f : -std::sin(u * f) * f;
      target[half * m + e] = d_du / scale;
    }
  }
}

std::vector<double> e3d_for_token(const TokenSequence& seq, int idx, int d_head,
                                  double scale) {
  if (seq.roles[idx] == Role::text)
    throw ContractError("e3d_for_token: text tokens carry no spatial reference");
  if (seq.ref_kind[idx] != RefKind::fixed)
    throw ContractError("e3d_for_token: reference point is anchor-owned; resolve via the model");
  return e3d_embed(seq.ref_value[idx], d_head, scale);
}

// -------------------------------------------------------------- masks -----

MaskView make_mask_view(const MaskSpec& m) {
  MaskView v;
  v.L = m.L;
  v.bitmap = m.allowed.data();
  v.limits.assign(m.L, -1);
  for (int i = 0; i < m.L; ++i) {
    int j = 0;
    while (j < m.L && m.at(i, j)) ++j;
    int j2 = j;
    while (j2 < m.L && !m.at(i, j2)) ++j2;
    if (j2 == m.L) v.limits[i] = j;  // row is a plain prefix
  }
  return v;
}

// ---------------------------------------------------------------- norm -----

template <typename T>
void rmsnorm_rows(const Mat<T>& x, const Mat<T>& gain, Mat<T>& y, Mat<T>& inv_rms) {
  const int d = x.cols;
  for (int i = 0; i < x.rows; ++i) {
    const T* xr = x.row(i);
    const T ss = kern::K<T>().sumsq(xr, d);
    const T inv = T(1) / std::sqrt(ss / T(d) + T(kNormEps));
    inv_rms.d[i] = inv;
    T* yr = y.row(i);
    const T* g = gain.data();
    for (int j = 0; j < d; ++j) yr[j] = xr[j] * inv * g[j];
  }
}

template <typename T>
void rmsnorm_rows_backward(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& inv_rms,
                           const Mat<T>& dy, Mat<T>& dx, Mat<T>* dgain) {
  const int d = x.cols;
  std::vector<T> dyg(d);
  for (int i = 0; i < x.rows; ++i) {
    const T* xr = x.row(i);
    const T* dyr = dy.row(i);
    const T* g = gain.data();
    const T inv = inv_rms.d[i];
    for (int j = 0; j < d; ++j) dyg[j] = dyr[j] * g[j];
    const T proj = kern::K<T>().dot(dyg.data(), xr, d);
    const T coef = inv * inv * inv * proj / T(d);
    T* dxr = dx.row(i);
    for (int j = 0; j < d; ++j) dxr[j] += inv * dyg[j] - coef * xr[j];
    if (dgain) {
      T* dg = dgain->data();
      for (int j = 0; j < d; ++j) dg[j] += dyr[j] * xr[j] * inv;
    }
  }
}

// ----------------------------------------------------------- attention -----

template <typename T>
void AttnScratch<T>::resize(int L, int d, int n_heads) {
  q = Mat<T>(L, d);
  k = Mat<T>(L, d);
  v = Mat<T>(L, d);
  probs = Mat<T>(n_heads * L, L);
  att_out = Mat<T>(L, d);
  proj = Mat<T>(L, d);
  out = Mat<T>(L, d);
}

namespace {

template <typename T>
void softmax_prefix(T* row, int n) {
  T mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum = 0;
  for (int j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const T inv = T(1) / sum;
  for (int j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace

template <typename T>
void attention_piece(const Mat<T>& x_attn, const Mat<T>& residual,
                     const AttnWeightsView<T>& w, const MaskView& mask,
                     const std::vector<int>* rotary_pos, double rotary_base,
                     const Mat<T>* e3d_rows, const std::vector<uint8_t>& keep_residual,
                     int n_heads, AttnScratch<T>& s) {
  const int L = x_attn.rows;
  const int d = x_attn.cols;
  const int dh = d / n_heads;
  const auto& kk = kern::K<T>();

  mm(x_attn, *w.wq, s.q);
  mm(x_attn, *w.wk, s.k);
  mm(x_attn, *w.wv, s.v);
  if (rotary_pos) {
    rotary_rows(s.q, *rotary_pos, rotary_base, n_heads, false);
    rotary_rows(s.k, *rotary_pos, rotary_base, n_heads, false);
  }
  if (e3d_rows) {
    for (int i = 0; i < L; ++i) {
      const T* e = e3d_rows->row(i);
      T* qr = s.q.row(i);
      T* kr = s.k.row(i);
      for (int h = 0; h < n_heads; ++h) {
        kk.axpy(T(1), e, qr + h * dh, dh);
        kk.axpy(T(1), e, kr + h * dh, dh);
      }
    }
  }

  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));
  s.probs.zero();
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < L; ++i) {
      T* prow = s.probs.row(h * L + i);
      const T* qrow = s.q.row(i) + off;
      T* orow = s.att_out.row(i) + off;
      std::memset(orow, 0, sizeof(T) * dh);
      const int lim = mask.limits[i];
      if (lim > 0) {
        for (int j = 0; j < lim; ++j) {
          prow[j] = kk.dot(qrow, s.k.row(j) + off, dh) * inv_sqrt;
        }
        softmax_prefix(prow, lim);
        for (int j = 0; j < lim; ++j) kk.axpy(prow[j], s.v.row(j) + off, orow, dh);
      } else if (lim < 0) {
        const uint8_t* mrow = mask.bitmap + static_cast<size_t>(i) * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < L; ++j) {
          if (!mrow[j]) continue;
          prow[j] = kk.dot(qrow, s.k.row(j) + off, dh) * inv_sqrt;
          mx = std::max(mx, prow[j]);
        }
        T sum = 0;
        for (int j = 0; j < L; ++j) {
          if (!mrow[j]) continue;
          prow[j] = std::exp(prow[j] - mx);
          sum += prow[j];
        }
        if (sum > 0) {
          const T inv = T(1) / sum;
          for (int j = 0; j < L; ++j) {
            if (mrow[j]) prow[j] *= inv;
          }
        }
        for (int j = 0; j < L; ++j) {
          if (mrow[j]) kk.axpy(prow[j], s.v.row(j) + off, orow, dh);
        }
      }
      // lim == 0: row attends to nothing; output stays zero
    }
  }

  mm(s.att_out, *w.wo, s.proj);
  for (int i = 0; i < L; ++i) {
    const T* pr = s.proj.row(i);
    T* outr = s.out.row(i);
    if (keep_residual[i]) {
      kk.vadd(pr, residual.row(i), outr, d);
    } else {
      std::memcpy(outr, pr, sizeof(T) * d);
    }
  }
}

template <typename T>
void attention_piece_backward(const Mat<T>& x_attn, const AttnWeightsView<T>& w,
                              const MaskView& mask, const std::vector<int>* rotary_pos,
                              double rotary_base, const std::vector<uint8_t>& keep_residual,
                              int n_heads, const AttnScratch<T>& s, const Mat<T>& dout,
                              Mat<T>& dx_attn, Mat<T>& dresidual, const AttnGradRefs<T>& dw,
                              Mat<T>* d_e3d_rows) {
  const int L = x_attn.rows;
  const int d = x_attn.cols;
  const int dh = d / n_heads;
  const auto& kk = kern::K<T>();

  for (int i = 0; i < L; ++i) {
    if (keep_residual[i]) kk.axpy(T(1), dout.row(i), dresidual.row(i), d);
  }

  // dout is also d(proj)
  if (dw.dwo) mm_at(s.att_out, dout, *dw.dwo, true);
  Mat<T> datt(L, d);
  mm_bt(dout, *w.wo, datt);

  Mat<T> dq(L, d), dk(L, d), dv(L, d);
  std::vector<T> dp(L);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < L; ++i) {
      const T* prow = s.probs.row(h * L + i);
      const T* dorow = datt.row(i) + off;
      const int lim = mask.limits[i];
      const uint8_t* mrow = lim < 0 ? mask.bitmap + static_cast<size_t>(i) * L : nullptr;
      const int jend = lim >= 0 ? lim : L;
      T psum = 0;
      for (int j = 0; j < jend; ++j) {
        if (mrow && !mrow[j]) continue;
        kk.axpy(prow[j], dorow, dv.row(j) + off, dh);
        dp[j] = kk.dot(dorow, s.v.row(j) + off, dh);
        psum += prow[j] * dp[j];
      }
      T* dqrow = dq.row(i) + off;
      for (int j = 0; j < jend; ++j) {
        if (mrow && !mrow[j]) continue;
        const T ds = prow[j] * (dp[j] - psum) * inv_sqrt;
        kk.axpy(ds, s.k.row(j) + off, dqrow, dh);
        kk.axpy(ds, s.q.row(i) + off, dk.row(j) + off, dh);
      }
    }
  }

  if (d_e3d_rows) {
    for (int i = 0; i < L; ++i) {
      T* er = d_e3d_rows->row(i);
      for (int h = 0; h < n_heads; ++h) {
        kk.axpy(T(1), dq.row(i) + h * dh, er, dh);
        kk.axpy(T(1), dk.row(i) + h * dh, er, dh);
      }
    }
  }
  if (rotary_pos) {
    rotary_rows(dq, *rotary_pos, rotary_base, n_heads, true);
    rotary_rows(dk, *rotary_pos, rotary_base, n_heads, true);
  }

  if (dw.dwq) mm_at(x_attn, dq, *dw.dwq, true);
  if (dw.dwk) mm_at(x_attn, dk, *dw.dwk, true);
  if (dw.dwv) mm_at(x_attn, dv, *dw.dwv, true);
  mm_bt(dq, *w.wq, dx_attn, true);
  mm_bt(dk, *w.wk, dx_attn, true);
  mm_bt(dv, *w.wv, dx_attn, true);
}

// ----------------------------------------------------------------- mlp -----

template <typename T>
void mlp_rows(const Mat<T>& x, int r0, int r1, const Mat<T>& w1, const Mat<T>& b1,
              const Mat<T>& w2, const Mat<T>& b2, Mat<T>& pre, Mat<T>& act, Mat<T>& y) {
  if (r0 >= r1) return;
  const int rows = r1 - r0;
  const int din = x.cols;
  const int dhid = w1.cols;
  const int dout = w2.cols;
  const auto& kk = kern::K<T>();
  kk.matmul(x.row(r0), w1.data(), pre.row(r0), rows, din, dhid, false);
  for (int i = r0; i < r1; ++i) {
    T* pr = pre.row(i);
    kk.vadd(pr, b1.data(), pr, dhid);
    T* ar = act.row(i);
    for (int j = 0; j < dhid; ++j) ar[j] = pr[j] * sigmoid(pr[j]);
  }
  kk.matmul(act.row(r0), w2.data(), y.row(r0), rows, dhid, dout, false);
  for (int i = r0; i < r1; ++i) kk.vadd(y.row(i), b2.data(), y.row(i), dout);
}

template <typename T>
void mlp_rows_backward(const Mat<T>& x, int r0, int r1, const Mat<T>& w1,
                       const Mat<T>& w2, const Mat<T>& pre, const Mat<T>& act,
                       const Mat<T>& dy, Mat<T>& dx, const MlpGradRefs<T>& dw) {
  if (r0 >= r1) return;
  const int rows = r1 - r0;
  const int din = x.cols;
  const int dhid = w1.cols;
  const int dout = w2.cols;
  const auto& kk = kern::K<T>();

  if (dw.dw2) kk.matmul_at(act.row(r0), dy.row(r0), dw.dw2->data(), rows, dhid, dout, true);
  if (dw.db2) {
    for (int i = r0; i < r1; ++i) kk.vadd(dw.db2->data(), dy.row(i), dw.db2->data(), dout);
  }
  Mat<T> dact(rows, dhid);
  kk.matmul_bt(dy.row(r0), w2.data(), dact.data(), rows, dout, dhid, false);
  // silu'(x) = sig(x) * (1 + x * (1 - sig(x)))
  Mat<T> dpre(rows, dhid);
  for (int i = 0; i < rows; ++i) {
    const T* pr = pre.row(r0 + i);
    const T* da = dact.row(i);
    T* dp = dpre.row(i);
    for (int j = 0; j < dhid; ++j) {
      const T sg = sigmoid(pr[j]);
      dp[j] = da[j] * sg * (T(1) + pr[j] * (T(1) - sg));
    }
  }
  if (dw.dw1) kk.matmul_at(x.row(r0), dpre.data(), dw.dw1->data(), rows, din, dhid, true);
  if (dw.db1) {
    for (int i = 0; i < rows; ++i) kk.vadd(dw.db1->data(), dpre.row(i), dw.db1->data(), dhid);
  }
  kk.matmul_bt(dpre.data(), w1.data(), dx.row(r0), rows, dhid, din, true);
}

// ---------------------------------------------------------- ffn routing -----

SegRanges seg_ranges(const SequenceLayout& layout) {
  SegRanges r;
  r.img0 = 0;
  r.img1 = layout.n_img;
  if (layout.include_queries) {
    r.det0 = layout.det_begin();
    r.det1 = r.det0 + layout.n_det;
    r.lane0 = layout.lane_begin();
    r.lane1 = r.lane0 + layout.n_lane;
    r.group0 = layout.n_img;
    r.group1 = layout.n_img + layout.n_det + layout.n_lane;
  } else {
    r.det0 = r.det1 = r.lane0 = r.lane1 = layout.n_img;
    r.group0 = r.group1 = layout.n_img;
  }
  if (layout.include_plan) {
    r.ego0 = layout.ego_pos();
    r.ego1 = r.ego0 + 1;
    r.plan0 = layout.plan_begin();
    r.plan1 = r.plan0 + layout.n_plan;
  } else {
    r.ego0 = r.ego1 = r.plan0 = r.plan1 = r.group1;
  }
  r.text0 = layout.text_begin();
  r.text1 = r.text0 + layout.n_text;
  return r;
}

template <typename T>
void FfnScratch<T>::resize(int L, int d, int d_ffn) {
  pre = Mat<T>(L, d_ffn);
  act = Mat<T>(L, d_ffn);
  out = Mat<T>(L, d);
}

template <typename T>
void ffn_dispatch(const Mat<T>& x_norm, const Mat<T>& residual, const TokenSequence& seq,
                  const LayerParams<T>& lp, bool mixed, FfnScratch<T>& s) {
  const SegRanges r = seg_ranges(seq.layout);
  auto run = [&](int a, int b, const FfnParams<T>& f) {
    mlp_rows(x_norm, a, b, f.w1.v, f.b1.v, f.w2.v, f.b2.v, s.pre, s.act, s.out);
  };
  if (mixed) {
    run(r.img0, r.img1, lp.text_ffn);
    run(r.det0, r.det1, lp.det_ffn);
    run(r.lane0, r.lane1, lp.lane_ffn);
    run(r.ego0, r.plan1, lp.plan_ffn);  // ego token rides the planning ffn
    run(r.text0, r.text1, lp.text_ffn);
  } else {
    run(0, x_norm.rows, lp.text_ffn);
  }
  kern::K<T>().vadd(s.out.data(), residual.data(), s.out.data(),
                    static_cast<int>(s.out.numel()));
}

namespace {

template <typename T>
MlpGradRefs<T> refs_of(FfnParams<T>& f) {
  MlpGradRefs<T> r;
  if (f.w1.trainable) {
    r.dw1 = &f.w1.g;
    r.db1 = &f.b1.g;
    r.dw2 = &f.w2.g;
    r.db2 = &f.b2.g;
  }
  return r;
}

}  // namespace

template <typename T>
void ffn_dispatch_backward(const Mat<T>& x_norm, const TokenSequence& seq,
                           LayerParams<T>& lp, bool mixed, const FfnScratch<T>& s,
                           const Mat<T>& dy, Mat<T>& dx_norm) {
  const SegRanges r = seg_ranges(seq.layout);
  auto run = [&](int a, int b, FfnParams<T>& f) {
    mlp_rows_backward(x_norm, a, b, f.w1.v, f.w2.v, s.pre, s.act, dy, dx_norm, refs_of(f));
  };
  if (mixed) {
    run(r.img0, r.img1, lp.text_ffn);
    run(r.det0, r.det1, lp.det_ffn);
    run(r.lane0, r.lane1, lp.lane_ffn);
    run(r.ego0, r.plan1, lp.plan_ffn);
    run(r.text0, r.text1, lp.text_ffn);
  } else {
    run(0, x_norm.rows, lp.text_ffn);
  }
}

// ---------------------------------------------------------------- model -----

namespace {

template <typename T>
void init_param(Param<T>& p, const std::string& name, const std::string& group, int r,
                int c, Rng& rng, double std, bool decay) {
  p.name = name;
  p.group = group;
  p.v = Mat<T>(r, c);
  p.g = Mat<T>(r, c);
  p.decay = decay;
  p.trainable = true;
  if (std > 0) fill_normal(p.v, rng, std);
}

template <typename T>
void init_gain(Param<T>& p, const std::string& name, const std::string& group, int d) {
  p.name = name;
  p.group = group;
  p.v = Mat<T>(1, d);
  p.g = Mat<T>(1, d);
  p.decay = false;
  fill_const(p.v, 1.0);
}

template <typename T>
void init_ffn(FfnParams<T>& f, const std::string& prefix, const std::string& group, int d,
              int d_ffn, Rng& rng) {
  init_param(f.w1, prefix + ".w1", group, d, d_ffn, rng, 0.02, true);
  init_param(f.b1, prefix + ".b1", group, 1, d_ffn, rng, 0.0, false);
  init_param(f.w2, prefix + ".w2", group, d_ffn, d, rng, 0.02, true);
  init_param(f.b2, prefix + ".b2", group, 1, d, rng, 0.0, false);
}

template <typename T>
void init_attn(AttnParams<T>& a, const std::string& prefix, const std::string& group,
               int d, Rng& rng) {
  init_param(a.wq, prefix + ".wq", group, d, d, rng, 0.02, true);
  init_param(a.wk, prefix + ".wk", group, d, d, rng, 0.02, true);
  init_param(a.wv, prefix + ".wv", group, d, d, rng, 0.02, true);
  init_param(a.wo, prefix + ".wo", group, d, d, rng, 0.02, true);
}

template <typename T>
void init_head(HeadParams<T>& h, const std::string& prefix, const std::string& group,
               int d, int hidden, int out, Rng& rng) {
  init_param(h.w1, prefix + ".w1", group, d, hidden, rng, 0.02, true);
  init_param(h.b1, prefix + ".b1", group, 1, hidden, rng, 0.0, false);
  init_param(h.w2, prefix + ".w2", group, hidden, out, rng, 0.02, true);
  init_param(h.b2, prefix + ".b2", group, 1, out, rng, 0.0, false);
}

template <typename T>
void collect_ffn(std::vector<Param<T>*>& out, FfnParams<T>& f) {
  out.push_back(&f.w1);
  out.push_back(&f.b1);
  out.push_back(&f.w2);
  out.push_back(&f.b2);
}

template <typename T>
void collect_attn(std::vector<Param<T>*>& out, AttnParams<T>& a) {
  out.push_back(&a.wq);
  out.push_back(&a.wk);
  out.push_back(&a.wv);
  out.push_back(&a.wo);
}

template <typename T>
void collect_head(std::vector<Param<T>*>& out, HeadParams<T>& h) {
  out.push_back(&h.w1);
  out.push_back(&h.b1);
  out.push_back(&h.w2);
  out.push_back(&h.b2);
}

}  // namespace

std::vector<std::vector<Vec2>> default_anchor_traj(const WorldConfig& w) {
  std::vector<std::vector<Vec2>> out(3);
  const double v = 0.5 * (w.speed_min + w.speed_max);
  for (int cmd = 0; cmd < 3; ++cmd) {
    const double sign = cmd == static_cast<int>(Command::left)    ? 1.0
                        : cmd == static_cast<int>(Command::right) ? -1.0
                                                                  : 0.0;
    Vec2 pos{0.0, 0.0};
    for (int k = 1; k <= w.horizon; ++k) {
      const double heading = sign * w.turn_rate * w.dt * k;
      pos = pos + (v * w.dt) * Vec2{std::cos(heading), std::sin(heading)};
      out[cmd].push_back(pos);
    }
  }
  return out;
}

template <typename T>
void Model<T>::init(uint64_t seed) {
  Rng rng(seed);
  const int d = cfg.d_model;
  const int V = vocab.size();

  init_param(text_embed, "embed.text", "text_embed", V, d, rng, 0.02, false);
  init_param(img_embed_w, "embed.img.w", "img_embed", world.grid_channels, d, rng, 0.02, true);
  init_param(img_embed_b, "embed.img.b", "img_embed", 1, d, rng, 0.0, false);
  if (layout.include_plan) {
    init_param(ego_embed_w, "embed.ego.w", "ego_embed", 9, d, rng, 0.02, true);
    init_param(ego_embed_b, "embed.ego.b", "ego_embed", 1, d, rng, 0.0, false);
    init_param(plan_query, "query.plan", "plan_queries", layout.n_plan, d, rng, 0.02, false);
  }
  if (layout.include_queries) {
    init_param(det_query, "query.det", "det_queries", layout.n_det, d, rng, 0.02, false);
    init_param(lane_query, "query.lane", "lane_queries", layout.n_lane, d, rng, 0.02, false);
    init_param(det_anchor, "anchor.det", "det_queries", layout.n_det, 2, rng, 0.0, false);
    init_param(lane_anchor, "anchor.lane", "lane_queries", layout.n_lane, 2, rng, 0.0, false);
    for (auto& x : det_anchor.v.d) x = static_cast<T>(rng.uniform(-0.7 * world.extent, 0.7 * world.extent));
    for (auto& x : lane_anchor.v.d) x = static_cast<T>(rng.uniform(-0.7 * world.extent, 0.7 * world.extent));
  }
  if (cfg.e3d_learned) {
    init_param(e3d_map, "e3d.map", "e3d_map", cfg.d_head(), cfg.d_head(), rng, 0.0, false);
    for (int i = 0; i < cfg.d_head(); ++i) e3d_map.v.at(i, i) = T(1);  // starts as identity
  }

  layers.clear();
  layers.resize(cfg.n_layers);
  for (int li = 0; li < cfg.n_layers; ++li) {
    LayerParams<T>& lp = layers[li];
    lp.mixed = li < cfg.n_mixed;
    const std::string pre = "layers." + std::to_string(li);
    const std::string attn_group = lp.mixed ? "attn_mixed" : "attn_deep";
    init_gain(lp.attn_norm_gain, pre + ".attn_norm", "norms", d);
    init_attn(lp.attn, pre + ".attn", attn_group, d, rng);
    init_gain(lp.ffn_norm_gain, pre + ".ffn_norm", "norms", d);
    init_ffn(lp.text_ffn, pre + ".text_ffn", "text_ffn", d, cfg.d_ffn, rng);
    if (lp.mixed && layout.include_queries) {
      init_gain(lp.group_norm_gain, pre + ".group_norm", "group_attn", d);
      init_attn(lp.group_attn, pre + ".group_attn", "group_attn", d, rng);
      init_ffn(lp.det_ffn, pre + ".det_ffn", "det_ffn", d, cfg.d_ffn, rng);
      init_ffn(lp.lane_ffn, pre + ".lane_ffn", "lane_ffn", d, cfg.d_ffn, rng);
    }
    if (lp.mixed && layout.include_plan) {
      init_ffn(lp.plan_ffn, pre + ".plan_ffn", "plan_ffn", d, cfg.d_ffn, rng);
    }
  }
  init_gain(final_norm_gain, "final_norm", "norms", d);

  const int hidden = cfg.head_hidden > 0 ? cfg.head_hidden : d;
  if (layout.include_queries) {
    init_head(det_head, "head.det", "det_head", d, hidden, world.n_classes + 1 + 6, rng);
    init_head(lane_head, "head.lane", "lane_head", d, hidden, world.lane_points * 2 + 1, rng);
  }
  if (layout.include_plan) {
    init_head(plan_head, "head.plan", "plan_head", d, hidden, 2, rng);
  }
  anchor_traj = default_anchor_traj(world);
  lora_rank = 0;
}

template <typename T>
std::vector<Param<T>*> Model<T>::params() {
  std::vector<Param<T>*> out;
  auto add = [&](Param<T>& p) {
    if (p.v.numel() > 0) out.push_back(&p);
  };
  add(text_embed);
  add(img_embed_w);
  add(img_embed_b);
  add(ego_embed_w);
  add(ego_embed_b);
  add(det_query);
  add(lane_query);
  add(det_anchor);
  add(lane_anchor);
  add(plan_query);
  add(e3d_map);
  for (auto& lp : layers) {
    add(lp.attn_norm_gain);
    collect_attn(out, lp.attn);
    add(lp.ffn_norm_gain);
    collect_ffn(out, lp.text_ffn);
    if (lp.group_attn.wq.v.numel() > 0) {
      add(lp.group_norm_gain);
      collect_attn(out, lp.group_attn);
    }
    if (lp.det_ffn.w1.v.numel() > 0) collect_ffn(out, lp.det_ffn);
    if (lp.lane_ffn.w1.v.numel() > 0) collect_ffn(out, lp.lane_ffn);
    if (lp.plan_ffn.w1.v.numel() > 0) collect_ffn(out, lp.plan_ffn);
    if (lp.has_lora) {
      out.push_back(&lp.lora_q.a);
      out.push_back(&lp.lora_q.b);
      out.push_back(&lp.lora_v.a);
      out.push_back(&lp.lora_v.b);
    }
  }
  add(final_norm_gain);
  if (det_head.w1.v.numel() > 0) collect_head(out, det_head);
  if (lane_head.w1.v.numel() > 0) collect_head(out, lane_head);
  if (plan_head.w1.v.numel() > 0) collect_head(out, plan_head);
  return out;
}

template <typename T>
std::vector<const Param<T>*> Model<T>::params() const {
  auto mut = const_cast<Model<T>*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
void Model<T>::zero_grad() {
  for (Param<T>* p : params()) p->g.zero();
}

template <typename T>
int64_t Model<T>::param_count() const {
  int64_t n = 0;
  for (const Param<T>* p : params()) n += p->v.numel();
  return n;
}

template <typename T>
void Model<T>::attach_lora(int rank, double alpha, uint64_t seed) {
  if (rank < 1) throw ConfigError("lora rank must be >= 1");
  if (rank > cfg.d_model) throw ConfigError("lora rank must not exceed d_model");
  Rng rng(seed);
  lora_rank = rank;
  lora_alpha = alpha;
  for (int li = cfg.n_mixed; li < cfg.n_layers; ++li) {
    LayerParams<T>& lp = layers[li];
    const std::string pre = "layers." + std::to_string(li);
    init_param(lp.lora_q.a, pre + ".lora_q.a", "lora", rank, cfg.d_model, rng, 0.01, false);
    init_param(lp.lora_q.b, pre + ".lora_q.b", "lora", cfg.d_model, rank, rng, 0.0, false);
    init_param(lp.lora_v.a, pre + ".lora_v.a", "lora", rank, cfg.d_model, rng, 0.01, false);
    init_param(lp.lora_v.b, pre + ".lora_v.b", "lora", cfg.d_model, rank, rng, 0.0, false);
    lp.has_lora = true;
  }
}

namespace {

template <typename T>
void add_lora_delta(Mat<T>& w, const LoraAdapter<T>& ad, double alpha, int rank) {
  Mat<T> delta(w.rows, w.cols);
  mm(ad.b.v, ad.a.v, delta);
  kern::K<T>().axpy(static_cast<T>(alpha / rank), delta.data(), w.data(),
                    static_cast<int>(w.numel()));
}

}  // namespace

template <typename T>
void Model<T>::merge_lora() {
  for (LayerParams<T>& lp : layers) {
    if (!lp.has_lora) continue;
    add_lora_delta(lp.attn.wq.v, lp.lora_q, lora_alpha, lora_rank);
    add_lora_delta(lp.attn.wv.v, lp.lora_v, lora_alpha, lora_rank);
    lp.lora_q = LoraAdapter<T>{};
    lp.lora_v = LoraAdapter<T>{};
    lp.has_lora = false;
  }
  lora_rank = 0;
}

// -------------------------------------------------------------- inputs -----

template <typename T>
ModelInputs<T> make_inputs_with_ids(const Model<T>& m, const SceneSample& scene,
                                    const SequenceLayout& layout,
                                    const std::vector<int>& caption_ids) {
  const GridFeatures grid = rasterize(scene, m.world);
  ModelInputs<T> in;
  in.seq = assemble_sequence(grid, layout, scene, caption_ids, m.anchor_traj);
  const int n_img = layout.n_img;
  in.raster = Mat<T>(n_img, m.world.grid_channels);
  for (int c = 0; c < m.world.grid_channels; ++c) {
    for (int i = 0; i < n_img; ++i) in.raster.at(i, c) = static_cast<T>(grid.at(c, i));
  }
  in.ego_feat = Mat<T>(1, 9);
  if (layout.include_plan) {
    const EgoState& e = scene.ego;
    T* f = in.ego_feat.data();
    f[0] = static_cast<T>(e.pos.x / m.world.extent);
    f[1] = static_cast<T>(e.pos.y / m.world.extent);
    f[2] = static_cast<T>(std::cos(e.heading));
    f[3] = static_cast<T>(std::sin(e.heading));
    f[4] = static_cast<T>(e.speed / 10.0);
    f[5] = static_cast<T>(e.accel);
    f[6 + static_cast<int>(e.command)] = T(1);
  }
  return in;
}

template <typename T>
ModelInputs<T> make_inputs(const Model<T>& m, const SceneSample& scene,
                           const SequenceLayout& layout) {
  return make_inputs_with_ids(m, scene, layout, encode_text(scene.caption, m.vocab));
}

// ------------------------------------------------------------- forward -----

namespace {

uint64_t layout_signature(const SequenceLayout& l) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull;
    h *= 1099511628211ull;
  };
  mix(static_cast<uint64_t>(l.order));
  mix(l.n_img);
  mix(l.n_det);
  mix(l.n_lane);
  mix(l.n_plan);
  mix(l.n_text);
  mix(l.include_queries ? 1 : 0);
  mix(l.include_plan ? 1 : 0);
  return h;
}

template <typename T>
void prepare_acts(const Model<T>& m, const TokenSequence& seq, Acts<T>& acts) {
  const int L = seq.L();
  const int d = m.cfg.d_model;
  const uint64_t sig = layout_signature(seq.layout);
  if (acts.L != L || acts.layout_sig != sig) {
    acts.L = L;
    acts.layout_sig = sig;
    acts.x0 = Mat<T>(L, d);
    acts.e3d_sinus = Mat<T>(L, m.cfg.d_head());
    acts.e3d_rows = Mat<T>(L, m.cfg.d_head());
    acts.layers.assign(m.cfg.n_layers, LayerActs<T>{});
    acts.rng = seg_ranges(seq.layout);
    const int nb = acts.rng.group1 - acts.rng.group0;
    for (int li = 0; li < m.cfg.n_layers; ++li) {
      LayerActs<T>& la = acts.layers[li];
      la.xin = Mat<T>(L, d);
      la.xnorm = Mat<T>(L, d);
      la.inv_rms = Mat<T>(L, 1);
      la.attn.resize(L, d, m.cfg.n_heads);
      la.h2 = Mat<T>(L, d);
      la.fnorm = Mat<T>(L, d);
      la.f_inv_rms = Mat<T>(L, 1);
      la.ffn.resize(L, d, m.cfg.d_ffn);
      if (li < m.cfg.n_mixed && nb > 0) {
        la.gx = Mat<T>(nb, d);
        la.gnorm = Mat<T>(nb, d);
        la.g_inv_rms = Mat<T>(nb, 1);
        la.group.resize(nb, d, m.cfg.n_heads);
      }
    }
    acts.backbone_mask = build_backbone_mask(seq);
    acts.backbone_view = make_mask_view(acts.backbone_mask);
    acts.keep_residual.assign(L, 0);
    for (int i = 0; i < L; ++i) {
      const Role r = seq.roles[i];
      acts.keep_residual[i] = (r == Role::img || r == Role::text) ? 1 : 0;
    }
    if (nb > 0) {
      acts.block_mask.L = nb;
      acts.block_mask.allowed.assign(static_cast<size_t>(nb) * nb, 0);
      for (int i = 0; i < nb; ++i) {
        const Role ri = seq.roles[acts.rng.group0 + i];
        for (int j = 0; j < nb; ++j) {
          const Role rj = seq.roles[acts.rng.group0 + j];
          if (m.cfg.group_per_task && ri != rj) continue;
          acts.block_mask.set(i, j, true);
        }
      }
      acts.block_view = make_mask_view(acts.block_mask);
      acts.block_keep.assign(nb, 1);
    }
    acts.text_norm = Mat<T>(seq.layout.n_text, d);
    acts.text_inv_rms = Mat<T>(seq.layout.n_text, 1);
  }
}

template <typename T>
Vec2 resolve_ref(const Model<T>& m, const TokenSequence& seq, int i) {
  switch (seq.ref_kind[i]) {
    case RefKind::det_anchor:
      return {static_cast<double>(m.det_anchor.v.at(seq.ref_index[i], 0)),
              static_cast<double>(m.det_anchor.v.at(seq.ref_index[i], 1))};
    case RefKind::lane_anchor:
      return {static_cast<double>(m.lane_anchor.v.at(seq.ref_index[i], 0)),
              static_cast<double>(m.lane_anchor.v.at(seq.ref_index[i], 1))};
    default:
      return seq.ref_value[i];
  }
}

template <typename T>
void build_e3d_rows(const Model<T>& m, const TokenSequence& seq, Acts<T>& acts) {
  const int dh = m.cfg.d_head();
  acts.e3d_sinus.zero();
  for (int i = 0; i < seq.L(); ++i) {
    if (seq.ref_kind[i] == RefKind::none) continue;
    const std::vector<double> e = e3d_embed(resolve_ref(m, seq, i), dh, m.cfg.e3d_scale);
    T* row = acts.e3d_sinus.row(i);
    for (int j = 0; j < dh; ++j) row[j] = static_cast<T>(e[j]);
  }
  if (m.cfg.e3d_learned) {
    mm(acts.e3d_sinus, m.e3d_map.v, acts.e3d_rows);
  } else {
    acts.e3d_rows = acts.e3d_sinus;
  }
}

template <typename T>
void embed_forward(const Model<T>& m, const ModelInputs<T>& in, Acts<T>& acts) {
  const SegRanges& r = acts.rng;
  const int d = m.cfg.d_model;
  Mat<T>& x0 = acts.x0;
  const auto& kk = kern::K<T>();
  kk.matmul(in.raster.data(), m.img_embed_w.v.data(), x0.data(), r.img1, in.raster.cols, d,
            false);
  for (int i = r.img0; i < r.img1; ++i) kk.vadd(x0.row(i), m.img_embed_b.v.data(), x0.row(i), d);
  for (int i = r.det0; i < r.det1; ++i)
    std::memcpy(x0.row(i), m.det_query.v.row(i - r.det0), sizeof(T) * d);
  for (int i = r.lane0; i < r.lane1; ++i)
    std::memcpy(x0.row(i), m.lane_query.v.row(i - r.lane0), sizeof(T) * d);
  if (r.ego1 > r.ego0) {
    kk.matmul(in.ego_feat.data(), m.ego_embed_w.v.data(), x0.row(r.ego0), 1, 9, d, false);
    kk.vadd(x0.row(r.ego0), m.ego_embed_b.v.data(), x0.row(r.ego0), d);
    for (int i = r.plan0; i < r.plan1; ++i)
      std::memcpy(x0.row(i), m.plan_query.v.row(i - r.plan0), sizeof(T) * d);
  }
  for (int i = r.text0; i < r.text1; ++i) {
    const int id = in.seq.text_ids[i - r.text0];
    std::memcpy(x0.row(i), m.text_embed.v.row(id), sizeof(T) * d);
  }
}

template <typename T>
void make_eff_weight(const Mat<T>& base, const LoraAdapter<T>& ad, double alpha, int rank,
                     Mat<T>& out) {
  out = base;
  Mat<T> delta(base.rows, base.cols);
  mm(ad.b.v, ad.a.v, delta);
  kern::K<T>().axpy(static_cast<T>(alpha / rank), delta.data(), out.data(),
                    static_cast<int>(out.numel()));
}

template <typename T>
void layer_forward(const Model<T>& m, int li, const TokenSequence& seq, Acts<T>& acts,
                   const Mat<T>& x_in) {
  LayerActs<T>& la = acts.layers[li];
  const LayerParams<T>& lp = m.layers[li];
  la.xin = x_in;

  const Mat<T>* wq = &lp.attn.wq.v;
  const Mat<T>* wv = &lp.attn.wv.v;
  if (lp.has_lora) {
    make_eff_weight(lp.attn.wq.v, lp.lora_q, m.lora_alpha, m.lora_rank, la.weff_q);
    make_eff_weight(lp.attn.wv.v, lp.lora_v, m.lora_alpha, m.lora_rank, la.weff_v);
    wq = &la.weff_q;
    wv = &la.weff_v;
  }

  rmsnorm_rows(la.xin, lp.attn_norm_gain.v, la.xnorm, la.inv_rms);
  const AttnWeightsView<T> w{wq, &lp.attn.wk.v, wv, &lp.attn.wo.v};
  attention_piece(la.xnorm, la.xin, w, acts.backbone_view, &seq.rotary_pos,
                  m.cfg.rotary_base, &acts.e3d_rows, acts.keep_residual, m.cfg.n_heads,
                  la.attn);

  la.h2 = la.attn.out;
  const int nb = acts.rng.group1 - acts.rng.group0;
  if (lp.mixed && nb > 0 && seq.layout.include_queries) {
    const int g0 = acts.rng.group0;
    for (int i = 0; i < nb; ++i)
      std::memcpy(la.gx.row(i), la.attn.out.row(g0 + i), sizeof(T) * m.cfg.d_model);
    rmsnorm_rows(la.gx, lp.group_norm_gain.v, la.gnorm, la.g_inv_rms);
    const AttnWeightsView<T> gw{&lp.group_attn.wq.v, &lp.group_attn.wk.v,
                                &lp.group_attn.wv.v, &lp.group_attn.wo.v};
    attention_piece(la.gnorm, la.gx, gw, acts.block_view, nullptr, 0.0, nullptr,
                    acts.block_keep, m.cfg.n_heads, la.group);
    for (int i = 0; i < nb; ++i)
      std::memcpy(la.h2.row(g0 + i), la.group.out.row(i), sizeof(T) * m.cfg.d_model);
  }

  rmsnorm_rows(la.h2, lp.ffn_norm_gain.v, la.fnorm, la.f_inv_rms);
  ffn_dispatch(la.fnorm, la.h2, seq, lp, lp.mixed, la.ffn);
}

template <typename T>
void record_trace(const SegRanges& r, const Mat<T>& x, TraceLayer<T>& t) {
  const int d = x.cols;
  auto copy_rows = [&](int a, int b, Mat<T>& dst) {
    dst = Mat<T>(b - a, d);
    for (int i = a; i < b; ++i) std::memcpy(dst.row(i - a), x.row(i), sizeof(T) * d);
  };
  copy_rows(r.det0, r.det1, t.det);
  copy_rows(r.lane0, r.lane1, t.lane);
  copy_rows(r.plan0, r.plan1, t.plan);
}

}  // namespace

template <typename T>
void decoder_forward(const Model<T>& m, const ModelInputs<T>& in, Mode mode,
                     Acts<T>& acts, ForwardTrace<T>& trace) {
  const TokenSequence& seq = in.seq;
  prepare_acts(m, seq, acts);
  build_e3d_rows(m, seq, acts);
  embed_forward(m, in, acts);

  const int n_run = mode == Mode::truncated ? m.cfg.n_mixed : m.cfg.n_layers;
  trace.mode = mode;
  trace.mixed.assign(m.cfg.n_mixed, TraceLayer<T>{});
  const Mat<T>* x = &acts.x0;
  for (int li = 0; li < n_run; ++li) {
    layer_forward(m, li, seq, acts, *x);
    x = &acts.layers[li].ffn.out;
    if (li < m.cfg.n_mixed) record_trace(acts.rng, *x, trace.mixed[li]);
  }
  trace.layers_executed = n_run;

  if (mode == Mode::full) {
    const SegRanges& r = acts.rng;
    const int nt = r.text1 - r.text0;
    const int d = m.cfg.d_model;
    // final norm + tied LM map over text rows only
    for (int i = 0; i < nt; ++i) {
      const T* xr = x->row(r.text0 + i);
      const T ss = kern::K<T>().sumsq(xr, d);
      const T inv = T(1) / std::sqrt(ss / T(d) + T(kNormEps));
      acts.text_inv_rms.d[i] = inv;
      T* yr = acts.text_norm.row(i);
      const T* g = m.final_norm_gain.v.data();
      for (int j = 0; j < d; ++j) yr[j] = xr[j] * inv * g[j];
    }
    trace.text_logits = Mat<T>(nt, m.vocab.size());
    mm_bt(acts.text_norm, m.text_embed.v, trace.text_logits);
  } else {
    trace.text_logits = Mat<T>();
  }
}

// ------------------------------------------------------------ backward -----

namespace {

template <typename T>
void layer_backward(Model<T>& m, int li, const TokenSequence& seq, Acts<T>& acts,
                    const Mat<T>& dout, Mat<T>& dxin, Mat<T>& d_e3d) {
  LayerActs<T>& la = acts.layers[li];
  LayerParams<T>& lp = m.layers[li];
  const int L = seq.L();
  const int d = m.cfg.d_model;
  dxin.zero();

  // ffn.out = h2 + ffn(fnorm)
  Mat<T> dfnorm(L, d);
  Mat<T> dh2 = dout;
  ffn_dispatch_backward(la.fnorm, seq, lp, lp.mixed, la.ffn, dout, dfnorm);
  rmsnorm_rows_backward(la.h2, lp.ffn_norm_gain.v, la.f_inv_rms, dfnorm, dh2,
                        lp.ffn_norm_gain.trainable ? &lp.ffn_norm_gain.g : nullptr);

  // group block
  Mat<T>& dh1 = dh2;  // reuse; block rows are replaced below
  const int nb = acts.rng.group1 - acts.rng.group0;
  if (lp.mixed && nb > 0 && seq.layout.include_queries) {
    const int g0 = acts.rng.group0;
    Mat<T> dgout(nb, d);
    for (int i = 0; i < nb; ++i) std::memcpy(dgout.row(i), dh2.row(g0 + i), sizeof(T) * d);
    Mat<T> dgnorm(nb, d), dgx(nb, d);
    const AttnWeightsView<T> gw{&lp.group_attn.wq.v, &lp.group_attn.wk.v,
                                &lp.group_attn.wv.v, &lp.group_attn.wo.v};
    AttnGradRefs<T> grefs;
    if (lp.group_attn.wq.trainable) {
      grefs.dwq = &lp.group_attn.wq.g;
      grefs.dwk = &lp.group_attn.wk.g;
      grefs.dwv = &lp.group_attn.wv.g;
      grefs.dwo = &lp.group_attn.wo.g;
    }
    attention_piece_backward(la.gnorm, gw, acts.block_view, nullptr, 0.0, acts.block_keep,
                             m.cfg.n_heads, la.group, dgout, dgnorm, dgx, grefs, nullptr);
    rmsnorm_rows_backward(la.gx, lp.group_norm_gain.v, la.g_inv_rms, dgnorm, dgx,
                          lp.group_norm_gain.trainable ? &lp.group_norm_gain.g : nullptr);
    for (int i = 0; i < nb; ++i) std::memcpy(dh1.row(g0 + i), dgx.row(i), sizeof(T) * d);
  }

  // backbone attention
  const Mat<T>* wq = lp.has_lora ? &la.weff_q : &lp.attn.wq.v;
  const Mat<T>* wv = lp.has_lora ? &la.weff_v : &lp.attn.wv.v;
  const AttnWeightsView<T> w{wq, &lp.attn.wk.v, wv, &lp.attn.wo.v};
  Mat<T> dweff_q, dweff_v;
  AttnGradRefs<T> refs;
  const bool base_trainable = lp.attn.wq.trainable;
  if (lp.has_lora) {
    dweff_q = Mat<T>(d, d);
    dweff_v = Mat<T>(d, d);
    refs.dwq = &dweff_q;
    refs.dwv = &dweff_v;
    if (base_trainable) {
      refs.dwk = &lp.attn.wk.g;
      refs.dwo = &lp.attn.wo.g;
    }
  } else if (base_trainable) {
    refs.dwq = &lp.attn.wq.g;
    refs.dwk = &lp.attn.wk.g;
    refs.dwv = &lp.attn.wv.g;
    refs.dwo = &lp.attn.wo.g;
  }
  Mat<T> dxnorm(L, d);
  attention_piece_backward(la.xnorm, w, acts.backbone_view, &seq.rotary_pos,
                           m.cfg.rotary_base, acts.keep_residual, m.cfg.n_heads, la.attn,
                           dh1, dxnorm, dxin, refs, &d_e3d);
  rmsnorm_rows_backward(la.xin, lp.attn_norm_gain.v, la.inv_rms, dxnorm, dxin,
                        lp.attn_norm_gain.trainable ? &lp.attn_norm_gain.g : nullptr);

  if (lp.has_lora) {
    const T scale = static_cast<T>(m.lora_alpha / m.lora_rank);
    auto route = [&](const Mat<T>& dweff, Param<T>& base, LoraAdapter<T>& ad) {
      if (base.trainable)
        kern::K<T>().axpy(T(1), dweff.data(), base.g.data(), static_cast<int>(dweff.numel()));
      if (ad.a.trainable) {
        Mat<T> tmp_a(ad.a.v.rows, ad.a.v.cols);
        mm_at(ad.b.v, dweff, tmp_a);  // (r x d) += b^T dW
        kern::K<T>().axpy(scale, tmp_a.data(), ad.a.g.data(), static_cast<int>(tmp_a.numel()));
        Mat<T> tmp_b(ad.b.v.rows, ad.b.v.cols);
        mm_bt(dweff, ad.a.v, tmp_b);  // (d x r) += dW a^T
        kern::K<T>().axpy(scale, tmp_b.data(), ad.b.g.data(), static_cast<int>(tmp_b.numel()));
      }
    };
    route(dweff_q, lp.attn.wq, lp.lora_q);
    route(dweff_v, lp.attn.wv, lp.lora_v);
  }
}

template <typename T>
void embed_backward(Model<T>& m, const ModelInputs<T>& in, const Acts<T>& acts,
                    const Mat<T>& dx0) {
  const SegRanges& r = acts.rng;
  const int d = m.cfg.d_model;
  const auto& kk = kern::K<T>();
  if (m.img_embed_w.trainable) {
    kk.matmul_at(in.raster.data(), dx0.data(), m.img_embed_w.g.data(), r.img1,
                 in.raster.cols, d, true);
    for (int i = r.img0; i < r.img1; ++i)
      kk.vadd(m.img_embed_b.g.data(), dx0.row(i), m.img_embed_b.g.data(), d);
  }
  if (m.det_query.v.numel() > 0 && m.det_query.trainable) {
    for (int i = r.det0; i < r.det1; ++i)
      kk.axpy(T(1), dx0.row(i), m.det_query.g.row(i - r.det0), d);
  }
  if (m.lane_query.v.numel() > 0 && m.lane_query.trainable) {
    for (int i = r.lane0; i < r.lane1; ++i)
      kk.axpy(T(1), dx0.row(i), m.lane_query.g.row(i - r.lane0), d);
  }
  if (r.ego1 > r.ego0) {
    if (m.ego_embed_w.trainable) {
      kk.matmul_at(in.ego_feat.data(), dx0.row(r.ego0), m.ego_embed_w.g.data(), 1, 9, d, true);
      kk.vadd(m.ego_embed_b.g.data(), dx0.row(r.ego0), m.ego_embed_b.g.data(), d);
    }
    if (m.plan_query.trainable) {
      for (int i = r.plan0; i < r.plan1; ++i)
        kk.axpy(T(1), dx0.row(i), m.plan_query.g.row(i - r.plan0), d);
    }
  }
  if (m.text_embed.trainable) {
    for (int i = r.text0; i < r.text1; ++i) {
      const int id = in.seq.text_ids[i - r.text0];
      kk.axpy(T(1), dx0.row(i), m.text_embed.g.row(id), d);
    }
  }
}

template <typename T>
void e3d_backward(Model<T>& m, const TokenSequence& seq, const Acts<T>& acts,
                  const Mat<T>& d_e3d) {
  const int dh = m.cfg.d_head();
  const Mat<T>* d_sinus = &d_e3d;
  Mat<T> tmp;
  if (m.cfg.e3d_learned) {
    if (m.e3d_map.trainable) mm_at(acts.e3d_sinus, d_e3d, m.e3d_map.g, true);
    tmp = Mat<T>(d_e3d.rows, dh);
    mm_bt(d_e3d, m.e3d_map.v, tmp);
    d_sinus = &tmp;
  }
  std::vector<double> dx, dy;
  for (int i = 0; i < seq.L(); ++i) {
    Param<T>* anchor = nullptr;
    if (seq.ref_kind[i] == RefKind::det_anchor) anchor = &m.det_anchor;
    if (seq.ref_kind[i] == RefKind::lane_anchor) anchor = &m.lane_anchor;
    if (!anchor || !anchor->trainable) continue;
    const Vec2 ref = resolve_ref(m, seq, i);
    e3d_embed_deriv(ref, dh, m.cfg.e3d_scale, dx, dy);
    const T* row = d_sinus->row(i);
    double gx = 0, gy = 0;
    for (int j = 0; j < dh; ++j) {
      gx += static_cast<double>(row[j]) * dx[j];
      gy += static_cast<double>(row[j]) * dy[j];
    }
    anchor->g.at(seq.ref_index[i], 0) += static_cast<T>(gx);
    anchor->g.at(seq.ref_index[i], 1) += static_cast<T>(gy);
  }
}

}  // namespace

template <typename T>
void decoder_backward(Model<T>& m, const ModelInputs<T>& in, const Acts<T>& acts,
                      const TraceGrads<T>& grads) {
  const TokenSequence& seq = in.seq;
  const int L = seq.L();
  const int d = m.cfg.d_model;
  const SegRanges& r = acts.rng;
  const auto& kk = kern::K<T>();

  Mat<T> dx(L, d);
  Mat<T> dnext(L, d);
  Mat<T> d_e3d(L, m.cfg.d_head());

  // text logits -> final norm -> last layer output (text rows)
  const Mat<T>& xlast = acts.layers[m.cfg.n_layers - 1].ffn.out;
  if (grads.d_text_logits.numel() > 0) {
    const int nt = r.text1 - r.text0;
    Mat<T> d_text_norm(nt, m.cfg.d_model);
    mm(grads.d_text_logits, m.text_embed.v, d_text_norm);
    if (m.text_embed.trainable)
      mm_at(grads.d_text_logits, acts.text_norm, m.text_embed.g, true);
    // rmsnorm backward over text rows of xlast
    std::vector<T> dyg(d);
    const T* g = m.final_norm_gain.v.data();
    for (int i = 0; i < nt; ++i) {
      const T* xr = xlast.row(r.text0 + i);
      const T* dyr = d_text_norm.row(i);
      const T inv = acts.text_inv_rms.d[i];
      for (int j = 0; j < d; ++j) dyg[j] = dyr[j] * g[j];
      const T proj = kk.dot(dyg.data(), xr, d);
      const T coef = inv * inv * inv * proj / T(d);
      T* dxr = dx.row(r.text0 + i);
      for (int j = 0; j < d; ++j) dxr[j] += inv * dyg[j] - coef * xr[j];
      if (m.final_norm_gain.trainable) {
        T* dg = m.final_norm_gain.g.data();
        for (int j = 0; j < d; ++j) dg[j] += dyr[j] * xr[j] * inv;
      }
    }
  }

  for (int li = m.cfg.n_layers - 1; li >= 0; --li) {
    if (li < m.cfg.n_mixed && li < static_cast<int>(grads.mixed.size())) {
      const TraceLayer<T>& tg = grads.mixed[li];
      auto scatter = [&](const Mat<T>& src, int a) {
        for (int i = 0; i < src.rows; ++i) kk.axpy(T(1), src.row(i), dx.row(a + i), d);
      };
      if (tg.det.numel() > 0) scatter(tg.det, r.det0);
      if (tg.lane.numel() > 0) scatter(tg.lane, r.lane0);
      if (tg.plan.numel() > 0) scatter(tg.plan, r.plan0);
    }
    layer_backward(m, li, seq, acts, dx, dnext, d_e3d);
    std::swap(dx, dnext);
  }

  embed_backward(m, in, acts, dx);
  e3d_backward(m, seq, acts, d_e3d);
}

// ---------------------------------------------------------- generation -----

template <typename T>
std::vector<int> generate_text(const Model<T>& m, const SceneSample& scene, int max_len) {
  std::vector<int> emitted;
  if (max_len <= 0) return emitted;
  std::vector<int> ids = {Vocab::bos_id};
  Acts<T> acts;
  ForwardTrace<T> trace;
  while (static_cast<int>(emitted.size()) < max_len &&
         static_cast<int>(ids.size()) < m.layout.n_text) {
    const ModelInputs<T> in = make_inputs_with_ids(m, scene, m.layout, ids);
    decoder_forward(m, in, Mode::full, acts, trace);
    const int pos = static_cast<int>(ids.size()) - 1;
    const T* logits = trace.text_logits.row(pos);
    int best = 0;
    for (int vtok = 1; vtok < m.vocab.size(); ++vtok) {
      if (logits[vtok] > logits[best]) best = vtok;
    }
    if (best == Vocab::eos_id) break;
    ids.push_back(best);
    emitted.push_back(best);
  }
  return emitted;
}

template <typename T>
T max_trace_deviation(const ForwardTrace<T>& a, const ForwardTrace<T>& b) {
  if (a.mixed.size() != b.mixed.size())
    throw ContractError("max_trace_deviation: mixed layer count mismatch");
  T m = 0;
  for (size_t i = 0; i < a.mixed.size(); ++i) {
    m = std::max(m, max_abs_diff(a.mixed[i].det, b.mixed[i].det));
    m = std::max(m, max_abs_diff(a.mixed[i].lane, b.mixed[i].lane));
    m = std::max(m, max_abs_diff(a.mixed[i].plan, b.mixed[i].plan));
  }
  return m;
}

// ------------------------------------------------------ instantiations -----

template void rotary_rows<float>(Mat<float>&, const std::vector<int>&, double, int, bool);
template void rotary_rows<double>(Mat<double>&, const std::vector<int>&, double, int, bool);

template struct AttnScratch<float>;
template struct AttnScratch<double>;
template struct FfnScratch<float>;
template struct FfnScratch<double>;

template void rmsnorm_rows<float>(const Mat<float>&, const Mat<float>&, Mat<float>&, Mat<float>&);
template void rmsnorm_rows<double>(const Mat<double>&, const Mat<double>&, Mat<double>&, Mat<double>&);
template void rmsnorm_rows_backward<float>(const Mat<float>&, const Mat<float>&, const Mat<float>&,
                                           const Mat<float>&, Mat<float>&, Mat<float>*);
template void rmsnorm_rows_backward<double>(const Mat<double>&, const Mat<double>&, const Mat<double>&,
                                            const Mat<double>&, Mat<double>&, Mat<double>*);

template void attention_piece<float>(const Mat<float>&, const Mat<float>&, const AttnWeightsView<float>&,
                                     const MaskView&, const std::vector<int>*, double, const Mat<float>*,
                                     const std::vector<uint8_t>&, int, AttnScratch<float>&);
template void attention_piece<double>(const Mat<double>&, const Mat<double>&, const AttnWeightsView<double>&,
                                      const MaskView&, const std::vector<int>*, double, const Mat<double>*,
                                      const std::vector<uint8_t>&, int, AttnScratch<double>&);
template void attention_piece_backward<float>(const Mat<float>&, const AttnWeightsView<float>&,
                                              const MaskView&, const std::vector<int>*, double,
                                              const std::vector<uint8_t>&, int, const AttnScratch<float>&,
                                              const Mat<float>&, Mat<float>&, Mat<float>&,
                                              const AttnGradRefs<float>&, Mat<float>*);
template void attention_piece_backward<double>(const Mat<double>&, const AttnWeightsView<double>&,
                                               const MaskView&, const std::vector<int>*, double,
                                               const std::vector<uint8_t>&, int, const AttnScratch<double>&,
                                               const Mat<double>&, Mat<double>&, Mat<double>&,
                                               const AttnGradRefs<double>&, Mat<double>*);

template void mlp_rows<float>(const Mat<float>&, int, int, const Mat<float>&, const Mat<float>&,
                              const Mat<float>&, const Mat<float>&, Mat<float>&, Mat<float>&, Mat<float>&);
template void mlp_rows<double>(const Mat<double>&, int, int, const Mat<double>&, const Mat<double>&,
                               const Mat<double>&, const Mat<double>&, Mat<double>&, Mat<double>&, Mat<double>&);
template void mlp_rows_backward<float>(const Mat<float>&, int, int, const Mat<float>&, const Mat<float>&,
                                       const Mat<float>&, const Mat<float>&, const Mat<float>&, Mat<float>&,
                                       const MlpGradRefs<float>&);
template void mlp_rows_backward<double>(const Mat<double>&, int, int, const Mat<double>&, const Mat<double>&,
                                        const Mat<double>&, const Mat<double>&, const Mat<double>&, Mat<double>&,
                                        const MlpGradRefs<double>&);

template void ffn_dispatch<float>(const Mat<float>&, const Mat<float>&, const TokenSequence&,
                                  const LayerParams<float>&, bool, FfnScratch<float>&);
template void ffn_dispatch<double>(const Mat<double>&, const Mat<double>&, const TokenSequence&,
                                   const LayerParams<double>&, bool, FfnScratch<double>&);
template void ffn_dispatch_backward<float>(const Mat<float>&, const TokenSequence&, LayerParams<float>&,
                                           bool, const FfnScratch<float>&, const Mat<float>&, Mat<float>&);
template void ffn_dispatch_backward<double>(const Mat<double>&, const TokenSequence&, LayerParams<double>&,
                                            bool, const FfnScratch<double>&, const Mat<double>&, Mat<double>&);

template struct Model<float>;
template struct Model<double>;

template ModelInputs<float> make_inputs_with_ids<float>(const Model<float>&, const SceneSample&,
                                                        const SequenceLayout&, const std::vector<int>&);
template ModelInputs<double> make_inputs_with_ids<double>(const Model<double>&, const SceneSample&,
                                                          const SequenceLayout&, const std::vector<int>&);
template ModelInputs<float> make_inputs<float>(const Model<float>&, const SceneSample&,
                                               const SequenceLayout&);
template ModelInputs<double> make_inputs<double>(const Model<double>&, const SceneSample&,
                                                 const SequenceLayout&);

template void decoder_forward<float>(const Model<float>&, const ModelInputs<float>&, Mode,
                                     Acts<float>&, ForwardTrace<float>&);
template void decoder_forward<double>(const Model<double>&, const ModelInputs<double>&, Mode,
                                      Acts<double>&, ForwardTrace<double>&);
template void decoder_backward<float>(Model<float>&, const ModelInputs<float>&, const Acts<float>&,
                                      const TraceGrads<float>&);
template void decoder_backward<double>(Model<double>&, const ModelInputs<double>&, const Acts<double>&,
                                       const TraceGrads<double>&);

template std::vector<int> generate_text<float>(const Model<float>&, const SceneSample&, int);
template std::vector<int> generate_text<double>(const Model<double>&, const SceneSample&, int);

template float max_trace_deviation<float>(const ForwardTrace<float>&, const ForwardTrace<float>&);
template double max_trace_deviation<double>(const ForwardTrace<double>&, const ForwardTrace<double>&);

}  // namespace unidec
