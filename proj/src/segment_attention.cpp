#include "flowscope/segment_attention.hpp"

#include <algorithm>
#include <cstdio>

#include "flowscope/errors.hpp"

namespace flowscope {
namespace {

std::size_t row_of(const LayerCapture& cap, std::size_t id) {
  auto it = std::find(cap.token_ids.begin(), cap.token_ids.end(), id);
  if (it == cap.token_ids.end()) throw ContractError("token id " + std::to_string(id) + " not present at this layer");
  return static_cast<std::size_t>(it - cap.token_ids.begin());
}

void check_query(const TokenLayout& layout, std::size_t id) {
  if (id < layout.prompt_length() || id == 0) {
    throw ContractError("query row " + std::to_string(id) + " precedes the end of the prompt (" +
                        std::to_string(layout.prompt_length()) + ") and cannot see every segment");
  }
}

SegmentShares normalized(SegmentShares s) {
  const double t = s.total();
  if (!(t > 0.0)) throw ContractError("query row places no attention on the prompt");
  return {s.system / t, s.image / t, s.user / t};
}

InfluenceProfile profile_for(const AttentionRecord& record, const TokenLayout& layout,
                             std::span<const std::size_t> query_ids, std::optional<std::size_t> head) {
  if (query_ids.empty()) throw ContractError("influence_rates: no query rows");
  for (auto id : query_ids) check_query(layout, id);
  InfluenceProfile profile;
  const double inv_q = 1.0 / static_cast<double>(query_ids.size());
  for (std::size_t l = 1; l <= record.n_layers(); ++l) {
    SegmentShares acc;
    for (auto id : query_ids) {
      const auto s = normalized(segment_sums(record, layout, l, id, head));
      acc.system += s.system * inv_q;
      acc.image += s.image * inv_q;
      acc.user += s.user * inv_q;
    }
    profile.layers.push_back(acc);
  }
  return profile;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

std::vector<double> InfluenceProfile::image_shares() const {
  std::vector<double> out;
  for (const auto& s : layers) out.push_back(s.image);
  return out;
}

std::vector<std::size_t> answer_query_ids(const TokenLayout& layout, std::size_t n_answer, QueryPolicy policy) {
  if (n_answer == 0) throw ContractError("answer_query_ids: need at least one answer token");
  if (layout.prompt_length() == 0) throw ContractError("answer_query_ids: empty prompt");
  const std::size_t n = policy == QueryPolicy::first_answer ? 1 : n_answer;
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = layout.prompt_length() + i;
  return ids;
}

SegmentShares segment_sums(const AttentionRecord& record, const TokenLayout& layout, std::size_t layer,
                           std::size_t query_id, std::optional<std::size_t> head) {
  const auto& cap = record.layer(layer);
  if (cap.heads.empty()) throw ContractError("attention record holds no heads");
  if (head && *head >= cap.heads.size()) throw ContractError("head index out of range");
  const std::size_t r = row_of(cap, query_id);
  const std::size_t h0 = head ? *head : 0;
  const std::size_t h1 = head ? *head + 1 : cap.heads.size();
  const double inv_h = 1.0 / static_cast<double>(h1 - h0);

  SegmentShares s;
  for (std::size_t c = 0; c < cap.token_ids.size(); ++c) {
    double a = 0.0;
    for (std::size_t h = h0; h < h1; ++h) a += cap.heads[h].at(r, c);
    a *= inv_h;
    switch (layout.segment_of(cap.token_ids[c])) {
      case Segment::system: s.system += a; break;
      case Segment::image: s.image += a; break;
      case Segment::user: s.user += a; break;
      case Segment::generated: break;
    }
  }
  return s;
}

InfluenceProfile influence_rates(const AttentionRecord& record, const TokenLayout& layout,
                                 std::span<const std::size_t> query_ids) {
  return profile_for(record, layout, query_ids, std::nullopt);
}

std::vector<InfluenceProfile> influence_rates_per_head(const AttentionRecord& record, const TokenLayout& layout,
                                                       std::span<const std::size_t> query_ids) {
  const std::size_t n_heads = record.layer(1).heads.size();
  std::vector<InfluenceProfile> out;
  for (std::size_t h = 0; h < n_heads; ++h) out.push_back(profile_for(record, layout, query_ids, h));
  return out;
}

std::optional<std::size_t> first_layer_below(const InfluenceProfile& profile, double threshold) {
  for (std::size_t l = 0; l < profile.layers.size(); ++l)
    if (profile.layers[l].image < threshold) return l + 1;
  return std::nullopt;
}

ProfileReport profile_report(const InfluenceProfile& profile, double threshold, std::size_t cell_size) {
  if (cell_size == 0) throw ContractError("profile_report: cell size must be positive");
  ProfileReport rep;
  rep.csv = "layer,lambda_sys,lambda_img,lambda_user\n";
  for (std::size_t l = 0; l < profile.layers.size(); ++l) {
    const auto& s = profile.layers[l];
    rep.csv += std::to_string(l + 1) + "," + format_double(s.system) + "," + format_double(s.image) + "," +
               format_double(s.user) + "\n";
  }
  rep.flagged_layer = first_layer_below(profile, threshold);

  rep.matrix = Raster::blank(3 * cell_size, profile.layers.size() * cell_size, 1);
  for (std::size_t l = 0; l < profile.layers.size(); ++l) {
    const double shares[3] = {profile.layers[l].system, profile.layers[l].image, profile.layers[l].user};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto v = quantize_unit(shares[k]);
      for (std::size_t y = 0; y < cell_size; ++y)
        for (std::size_t x = 0; x < cell_size; ++x) rep.matrix.at(k * cell_size + x, l * cell_size + y) = v;
    }
  }
  return rep;
}

}  // namespace flowscope
