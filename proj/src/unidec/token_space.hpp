#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "unidec/common.hpp"
#include "unidec/scene_sim.hpp"

namespace unidec {

enum class Role : uint8_t { img, det_q, lane_q, ego, plan_q, text };

const char* role_name(Role r);

struct Vocab {
  static constexpr int pad_id = 0;
  static constexpr int bos_id = 1;
  static constexpr int eos_id = 2;

  std::vector<std::string> id_to_word;  // dense ids, specials first
  std::unordered_map<std::string, int> word_to_id;

  int size() const { return static_cast<int>(id_to_word.size()); }
  int id_of(const std::string& w) const;  // throws ConfigError naming the word
};

// Specials get ids 0..2, then the unique words in sorted order.
Vocab build_vocab(const std::vector<std::string>& words);

std::vector<int> encode_text(const std::vector<std::string>& words, const Vocab& v);
std::vector<std::string> decode_text(const std::vector<int>& ids, const Vocab& v);

enum class SegOrder : uint8_t { det_lane, lane_det };

// Segment plan for the unified sequence. IMG always leads and TEXT always
// trails; the perception blocks sit between them, optionally followed by the
// ego token and per-timestep planning tokens (absent until the planning stage).
struct SequenceLayout {
  SegOrder order = SegOrder::det_lane;
  int n_img = 0;
  int n_det = 0;
  int n_lane = 0;
  int n_plan = 0;  // one per future timestep
  int n_text = 0;  // fixed text window incl. BOS/EOS/padding
  bool include_queries = true;  // det+lane segments present
  bool include_plan = true;     // ego+plan segments present

  int total() const;
  int img_begin() const { return 0; }
  int det_begin() const;
  int lane_begin() const;
  int ego_pos() const;   // -1 when planning segment absent
  int plan_begin() const;
  int text_begin() const;
  int eff_det() const { return include_queries ? n_det : 0; }
  int eff_lane() const { return include_queries ? n_lane : 0; }
  int eff_plan() const { return include_plan ? n_plan : 0; }
  int eff_ego() const { return include_plan ? 1 : 0; }

  void validate() const;
};

// How a token's reference point is sourced: data-carried value, or an index
// into the model's learnable detection/lane anchors.
enum class RefKind : uint8_t { none, fixed, det_anchor, lane_anchor };

struct TokenSequence {
  SequenceLayout layout;
  std::vector<Role> roles;
  std::vector<int> rotary_pos;       // 0..L-1
  std::vector<RefKind> ref_kind;
  std::vector<Vec2> ref_value;       // valid where ref_kind == fixed
  std::vector<int> ref_index;        // valid for det_anchor / lane_anchor
  std::vector<int> text_ids;         // length layout.n_text, PAD padded
  int n_real_text = 0;               // BOS..EOS token count before padding

  int L() const { return static_cast<int>(roles.size()); }
};

// anchor_traj: per-command anchor trajectory, [3][horizon] ego-frame points;
// planning token t carries the command-selected waypoint t as its reference.
TokenSequence assemble_sequence(const GridFeatures& grid, const SequenceLayout& layout,
                                const SceneSample& scene, const std::vector<int>& caption_ids,
                                const std::vector<std::vector<Vec2>>& anchor_traj);

struct MaskSpec {
  int L = 0;
  std::vector<uint8_t> allowed;  // row-major L x L

  bool at(int i, int j) const { return allowed[static_cast<size_t>(i) * L + j] != 0; }
  void set(int i, int j, bool v) { allowed[static_cast<size_t>(i) * L + j] = v ? 1 : 0; }
  int64_t count() const;
};

// Lower-triangular (inclusive) causal mask, independent of roles.
MaskSpec build_backbone_mask(const TokenSequence& seq);

// Full bidirectional block over det+lane positions; false elsewhere.
// per_task splits it into one block per query group instead.
MaskSpec build_group_mask(const TokenSequence& seq, bool per_task = false);

}  // namespace unidec
