#pragma once

#include <memory>
#include <string>
#include <vector>

#include "unidec/mat.hpp"
#include "unidec/rng.hpp"
#include "unidec/token_space.hpp"

namespace unidec {

enum class Mode : uint8_t { full, truncated };

struct DecoderConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 4;
  int n_mixed = 2;  // shallow mixed layers; structured outputs read here
  int d_ffn = 256;
  double rotary_base = 10000.0;
  double e3d_scale = 20.0;     // world-coordinate normalization divisor
  bool e3d_learned = false;    // per-head learned map on the sinusoid features
  bool group_per_task = false; // split the query block per task group
  int head_hidden = 0;         // 0 = d_model

  int d_head() const { return d_model / n_heads; }
  void validate() const;
};

template <typename T>
struct Param {
  std::string name, group;
  Mat<T> v, g;
  bool trainable = true;
  bool decay = false;  // weight decay applies to projection/FFN matrices only
};

template <typename T>
struct AttnParams {
  Param<T> wq, wk, wv, wo;  // each d_model x d_model
};

template <typename T>
struct FfnParams {
  Param<T> w1, b1, w2, b2;  // d x d_ffn, 1 x d_ffn, d_ffn x d, 1 x d
};

template <typename T>
struct LoraAdapter {
  Param<T> a;  // r x d, small random
  Param<T> b;  // d x r, zero init so the adapter starts as a no-op
};

template <typename T>
struct LayerParams {
  bool mixed = false;
  Param<T> attn_norm_gain;
  AttnParams<T> attn;
  Param<T> ffn_norm_gain;
  FfnParams<T> text_ffn;
  // mixed layers only
  Param<T> group_norm_gain;
  AttnParams<T> group_attn;
  FfnParams<T> det_ffn, lane_ffn, plan_ffn;
  // optional low-rank adapters on wq / wv
  bool has_lora = false;
  LoraAdapter<T> lora_q, lora_v;
};

template <typename T>
struct HeadParams {
  Param<T> w1, b1, w2, b2;  // two-layer perceptron
};

// Full parameter set of the unified decoder plus the source-style plain
// decoder (which simply has include_queries/include_plan cleared in its
// layouts and never touches the mixed extras).
template <typename T>
struct Model {
  DecoderConfig cfg;
  SequenceLayout layout;  // full layout; stage-specific variants derive from it
  Vocab vocab;
  WorldConfig world;
  double lora_alpha = 8.0;
  int lora_rank = 0;

  Param<T> text_embed;             // V x d, tied LM output map
  Param<T> img_embed_w, img_embed_b;
  Param<T> ego_embed_w, ego_embed_b;
  Param<T> det_query, lane_query;  // n x d
  Param<T> det_anchor, lane_anchor;  // n x 2 learnable reference points
  Param<T> plan_query;             // horizon x d
  Param<T> e3d_map;                // d_head x d_head (used when cfg.e3d_learned)
  std::vector<LayerParams<T>> layers;
  Param<T> final_norm_gain;
  HeadParams<T> det_head, lane_head, plan_head;

  // command-indexed anchor trajectories (buffer, not trained)
  std::vector<std::vector<Vec2>> anchor_traj;  // [3][horizon]

  void init(uint64_t seed);
  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;
  void zero_grad();
  void attach_lora(int rank, double alpha, uint64_t seed);  // deep layers, wq+wv
  void merge_lora();  // folds adapters into base weights and removes them
  int64_t param_count() const;
};

// ----------------------------------------------------------------- ops -----

// In-place rotary encoding over per-head pairs; inverse applies the opposite
// rotation (used by the backward pass).
template <typename T>
void rotary_rows(Mat<T>& x, const std::vector<int>& pos, double base, int n_heads,
                 bool inverse = false);

// Sinusoidal spatial embedding of a 2D reference point: first half of the
// head dim encodes x/scale, second half y/scale, sin/cos alternating over
// geometric frequencies.
std::vector<double> e3d_embed(Vec2 ref, int d_head, double scale);
// d(embed)/dx and d(embed)/dy, same layout.
void e3d_embed_deriv(Vec2 ref, int d_head, double scale, std::vector<double>& dx,
                     std::vector<double>& dy);
// Token-aware wrapper; text tokens have no spatial reference.
std::vector<double> e3d_for_token(const TokenSequence& seq, int idx, int d_head,
                                  double scale);

// Row attendability resolved once per mask: rows that attend to a plain
// prefix take the fast path, anything else consults the bitmap.
struct MaskView {
  int L = 0;
  const uint8_t* bitmap = nullptr;
  std::vector<int> limits;  // limits[i] >= 0: row i attends [0, limits[i])
};
MaskView make_mask_view(const MaskSpec& m);

template <typename T>
struct AttnScratch {
  Mat<T> q, k, v;        // L x d
  Mat<T> probs;          // (n_heads * L) x L
  Mat<T> att_out;        // L x d (heads concatenated)
  Mat<T> proj;           // L x d
  Mat<T> out;            // L x d
  void resize(int L, int d, int n_heads);
};

template <typename T>
struct AttnWeightsView {
  const Mat<T>*wq, *wk, *wv, *wo;
};

// Null members skip that gradient entirely (frozen parameters must keep
// identically-zero accumulators).
template <typename T>
struct AttnGradRefs {
  Mat<T>*dwq = nullptr, *dwk = nullptr, *dwv = nullptr, *dwo = nullptr;
};

// Shared masked multi-head attention with optional rotary positions, optional
// additive per-head spatial embedding on q/k, and a per-row residual policy.
// rows with keep_residual unset receive the attention output alone.
template <typename T>
void attention_piece(const Mat<T>& x_attn, const Mat<T>& residual,
                     const AttnWeightsView<T>& w, const MaskView& mask,
                     const std::vector<int>* rotary_pos, double rotary_base,
                     const Mat<T>* e3d_rows, const std::vector<uint8_t>& keep_residual,
                     int n_heads, AttnScratch<T>& s);

template <typename T>
void attention_piece_backward(const Mat<T>& x_attn, const AttnWeightsView<T>& w,
                              const MaskView& mask, const std::vector<int>* rotary_pos,
                              double rotary_base, const std::vector<uint8_t>& keep_residual,
                              int n_heads, const AttnScratch<T>& s, const Mat<T>& dout,
                              Mat<T>& dx_attn, Mat<T>& dresidual, const AttnGradRefs<T>& dw,
                              Mat<T>* d_e3d_rows);

// y = silu(x w1 + b1) w2 + b2 on the row range [r0, r1)
template <typename T>
void mlp_rows(const Mat<T>& x, int r0, int r1, const Mat<T>& w1, const Mat<T>& b1,
              const Mat<T>& w2, const Mat<T>& b2, Mat<T>& pre, Mat<T>& act, Mat<T>& y);

template <typename T>
struct MlpGradRefs {
  Mat<T>*dw1 = nullptr, *db1 = nullptr, *dw2 = nullptr, *db2 = nullptr;
};

template <typename T>
void mlp_rows_backward(const Mat<T>& x, int r0, int r1, const Mat<T>& w1,
                       const Mat<T>& w2, const Mat<T>& pre, const Mat<T>& act,
                       const Mat<T>& dy, Mat<T>& dx, const MlpGradRefs<T>& dw);

// y_row = x_row * gain / rms(x_row)
template <typename T>
void rmsnorm_rows(const Mat<T>& x, const Mat<T>& gain, Mat<T>& y, Mat<T>& inv_rms);

template <typename T>
void rmsnorm_rows_backward(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& inv_rms,
                           const Mat<T>& dy, Mat<T>& dx, Mat<T>* dgain);

// Role-routed feed-forward over the whole sequence: mixed layers send query
// segments through their task FFNs, deep layers use the text FFN everywhere.
// Residual is kept for every row.
template <typename T>
struct FfnScratch {
  Mat<T> pre, act;  // L x d_ffn
  Mat<T> out;       // L x d
  void resize(int L, int d, int d_ffn);
};

template <typename T>
void ffn_dispatch(const Mat<T>& x_norm, const Mat<T>& residual, const TokenSequence& seq,
                  const LayerParams<T>& lp, bool mixed, FfnScratch<T>& s);

// Accumulates FFN parameter grads (trainable groups only) and d(x_norm);
// the residual grad is the caller's dy itself.
template <typename T>
void ffn_dispatch_backward(const Mat<T>& x_norm, const TokenSequence& seq,
                           LayerParams<T>& lp, bool mixed, const FfnScratch<T>& s,
                           const Mat<T>& dy, Mat<T>& dx_norm);

// ------------------------------------------------------------ forward -----

template <typename T>
struct LayerActs {
  Mat<T> xin;                  // layer input
  Mat<T> xnorm, inv_rms;
  AttnScratch<T> attn;         // attn.out == h1
  Mat<T> gx, gnorm, g_inv_rms; // group block slice (mixed only)
  AttnScratch<T> group;
  Mat<T> h2;
  Mat<T> fnorm, f_inv_rms;
  FfnScratch<T> ffn;           // ffn.out == layer output
  Mat<T> weff_q, weff_v;       // effective projections when adapters attached
};

template <typename T>
struct TraceLayer {
  Mat<T> det, lane, plan;  // per-layer structured query states
};

template <typename T>
struct ForwardTrace {
  Mode mode = Mode::full;
  std::vector<TraceLayer<T>> mixed;
  Mat<T> text_logits;  // full mode only, n_text x V
  int layers_executed = 0;
};

// Segment row ranges of a layout; group0/group1 span det+lane.
struct SegRanges {
  int img0 = 0, img1 = 0;
  int det0 = 0, det1 = 0;
  int lane0 = 0, lane1 = 0;
  int ego0 = 0, ego1 = 0;
  int plan0 = 0, plan1 = 0;
  int text0 = 0, text1 = 0;
  int group0 = 0, group1 = 0;
};
SegRanges seg_ranges(const SequenceLayout& layout);

template <typename T>
struct Acts {
  int L = 0;
  uint64_t layout_sig = 0;
  Mat<T> x0;
  Mat<T> e3d_sinus;  // L x d_head raw sinusoid rows (zero for text)
  Mat<T> e3d_rows;   // after the optional learned map
  std::vector<LayerActs<T>> layers;
  Mat<T> text_norm, text_inv_rms;  // final norm over text rows
  MaskSpec backbone_mask, block_mask;
  MaskView backbone_view, block_view;
  std::vector<uint8_t> keep_residual;
  std::vector<uint8_t> block_keep;  // all ones; group residual always kept
  SegRanges rng;
};

template <typename T>
struct ModelInputs {
  TokenSequence seq;
  Mat<T> raster;    // n_img x channels
  Mat<T> ego_feat;  // 1 x 9 (zeros when the plan segment is absent)
};

template <typename T>
ModelInputs<T> make_inputs(const Model<T>& m, const SceneSample& scene,
                           const SequenceLayout& layout);

template <typename T>
void decoder_forward(const Model<T>& m, const ModelInputs<T>& in, Mode mode,
                     Acts<T>& acts, ForwardTrace<T>& trace);

template <typename T>
struct TraceGrads {
  std::vector<TraceLayer<T>> mixed;  // d(loss)/d(query states), pre-scaled
  Mat<T> d_text_logits;              // zero-sized when text loss is off
};

template <typename T>
void decoder_backward(Model<T>& m, const ModelInputs<T>& in, const Acts<T>& acts,
                      const TraceGrads<T>& grads);

// Greedy autoregressive decoding from BOS; stops at EOS or max_len words.
template <typename T>
std::vector<int> generate_text(const Model<T>& m, const SceneSample& scene, int max_len);

template <typename T>
T max_trace_deviation(const ForwardTrace<T>& a, const ForwardTrace<T>& b);

std::vector<std::vector<Vec2>> default_anchor_traj(const WorldConfig& w);

}  // namespace unidec
