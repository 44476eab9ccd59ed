#include "unidec/token_space.hpp"

#include <algorithm>
#include <set>

namespace unidec {

const char* role_name(Role r) {
  switch (r) {
    case Role::img: return "img";
    case Role::det_q: return "det_q";
    case Role::lane_q: return "lane_q";
    case Role::ego: return "ego";
    case Role::plan_q: return "plan_q";
    case Role::text: return "text";
  }
  return "?";
}

int Vocab::id_of(const std::string& w) const {
  const auto it = word_to_id.find(w);
  if (it == word_to_id.end()) throw ConfigError("vocab: unknown word '" + w + "'");
  return it->second;
}

Vocab build_vocab(const std::vector<std::string>& words) {
  if (words.empty()) throw ConfigError("build_vocab: word set must be nonempty");
  Vocab v;
  v.id_to_word = {"<pad>", "<bos>", "<eos>"};
  std::set<std::string> sorted(words.begin(), words.end());
  for (const auto& w : sorted) v.id_to_word.push_back(w);
  for (int i = 0; i < v.size(); ++i) v.word_to_id[v.id_to_word[i]] = i;
  return v;
}

std::vector<int> encode_text(const std::vector<std::string>& words, const Vocab& v) {
  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(Vocab::bos_id);
  for (const auto& w : words) ids.push_back(v.id_of(w));
  ids.push_back(Vocab::eos_id);
  return ids;
}

std::vector<std::string> decode_text(const std::vector<int>& ids, const Vocab& v) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == Vocab::eos_id) break;
    if (id == Vocab::bos_id || id == Vocab::pad_id) continue;
    if (id < 0 || id >= v.size()) throw ContractError("decode_text: id out of range");
    out.push_back(v.id_to_word[id]);
  }
  return out;
}

int SequenceLayout::total() const {
  return n_img + eff_det() + eff_lane() + eff_ego() + eff_plan() + n_text;
}

int SequenceLayout::det_begin() const {
  if (!include_queries) return -1;
  return order == SegOrder::det_lane ? n_img : n_img + n_lane;
}

int SequenceLayout::lane_begin() const {
  if (!include_queries) return -1;
  return order == SegOrder::det_lane ? n_img + n_det : n_img;
}

int SequenceLayout::ego_pos() const {
  if (!include_plan) return -1;
  return n_img + eff_det() + eff_lane();
}

int SequenceLayout::plan_begin() const {
  if (!include_plan) return -1;
  return ego_pos() + 1;
}

int SequenceLayout::text_begin() const {
  return n_img + eff_det() + eff_lane() + eff_ego() + eff_plan();
}

void SequenceLayout::validate() const {
  if (n_img < 1) throw ConfigError("layout: n_img must be >= 1");
  if (include_queries && (n_det < 1 || n_lane < 1))
    throw ConfigError("layout: n_det and n_lane must be >= 1");
  if (include_plan && n_plan < 1) throw ConfigError("layout: n_plan must be >= 1");
  if (n_text < 2) throw ConfigError("layout: n_text must be >= 2 (BOS+EOS)");
}

TokenSequence assemble_sequence(const GridFeatures& grid, const SequenceLayout& layout,
                                const SceneSample& scene, const std::vector<int>& caption_ids,
                                const std::vector<std::vector<Vec2>>& anchor_traj) {
  layout.validate();
  if (layout.n_img != grid.hw * grid.hw)
    throw ContractError("assemble_sequence: layout.n_img does not match the grid");
  if (static_cast<int>(caption_ids.size()) > layout.n_text)
    throw ConfigError("assemble_sequence: caption of " + std::to_string(caption_ids.size()) +
                      " tokens overflows the text window of " + std::to_string(layout.n_text));

  const int L = layout.total();
  TokenSequence s;
  s.layout = layout;
  s.roles.assign(L, Role::text);
  s.rotary_pos.resize(L);
  s.ref_kind.assign(L, RefKind::none);
  s.ref_value.assign(L, Vec2{});
  s.ref_index.assign(L, -1);
  for (int i = 0; i < L; ++i) s.rotary_pos[i] = i;

  for (int i = 0; i < layout.n_img; ++i) {
    s.roles[i] = Role::img;
    s.ref_kind[i] = RefKind::fixed;
    s.ref_value[i] = grid.cell_centers[i];
  }
  if (layout.include_queries) {
    for (int i = 0; i < layout.n_det; ++i) {
      const int p = layout.det_begin() + i;
      s.roles[p] = Role::det_q;
      s.ref_kind[p] = RefKind::det_anchor;
      s.ref_index[p] = i;
    }
    for (int i = 0; i < layout.n_lane; ++i) {
      const int p = layout.lane_begin() + i;
      s.roles[p] = Role::lane_q;
      s.ref_kind[p] = RefKind::lane_anchor;
      s.ref_index[p] = i;
    }
  }
  if (layout.include_plan) {
    const int e = layout.ego_pos();
    s.roles[e] = Role::ego;
    s.ref_kind[e] = RefKind::fixed;
    s.ref_value[e] = scene.ego.pos;
    const auto& anchors = anchor_traj.at(static_cast<size_t>(scene.ego.command));
    if (static_cast<int>(anchors.size()) < layout.n_plan)
      throw ContractError("assemble_sequence: anchor trajectory shorter than n_plan");
    for (int t = 0; t < layout.n_plan; ++t) {
      const int p = layout.plan_begin() + t;
      s.roles[p] = Role::plan_q;
      s.ref_kind[p] = RefKind::fixed;
      s.ref_value[p] = anchors[t];
    }
  }

  s.text_ids.assign(layout.n_text, Vocab::pad_id);
  for (size_t i = 0; i < caption_ids.size(); ++i) s.text_ids[i] = caption_ids[i];
  s.n_real_text = static_cast<int>(caption_ids.size());
  return s;
}

int64_t MaskSpec::count() const {
  int64_t c = 0;
  for (uint8_t v : allowed) c += v ? 1 : 0;
  return c;
}

MaskSpec build_backbone_mask(const TokenSequence& seq) {
  const int L = seq.L();
  MaskSpec m;
  m.L = L;
  m.allowed.assign(static_cast<size_t>(L) * L, 0);
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

MaskSpec build_group_mask(const TokenSequence& seq, bool per_task) {
  const int L = seq.L();
  MaskSpec m;
  m.L = L;
  m.allowed.assign(static_cast<size_t>(L) * L, 0);
  for (int i = 0; i < L; ++i) {
    if (seq.roles[i] != Role::det_q && seq.roles[i] != Role::lane_q) continue;
    for (int j = 0; j < L; ++j) {
      if (seq.roles[j] != Role::det_q && seq.roles[j] != Role::lane_q) continue;
      if (per_task && seq.roles[i] != seq.roles[j]) continue;
      m.set(i, j, true);
    }
  }
  return m;
}

}  // namespace unidec
