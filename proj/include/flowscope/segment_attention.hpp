#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowscope/layout.hpp"
#include "flowscope/model.hpp"
#include "flowscope/raster.hpp"

namespace flowscope {

struct SegmentShares {
  double system = 0.0;
  double image = 0.0;
  double user = 0.0;

  double total() const noexcept { return system + image + user; }
};

// Per-layer influence rates (lambda_sys, lambda_img, lambda_user); layers[l-1]
// holds layer l and each triple sums to 1.
struct InfluenceProfile {
  std::vector<SegmentShares> layers;

  std::size_t n_layers() const noexcept { return layers.size(); }
  std::vector<double> image_shares() const;
};

enum class QueryPolicy {
  answer_average,  // every row that emits an answer token
  first_answer,    // only the row that emits the first answer token
};

inline constexpr double kImageShareThreshold = 0.02;

// Rows (1-based token ids) that emit answer tokens: the last prompt token,
// then each generated token but the last.
std::vector<std::size_t> answer_query_ids(const TokenLayout& layout, std::size_t n_answer,
                                          QueryPolicy policy = QueryPolicy::answer_average);

// Raw head-averaged attention mass one query row puts on each segment.
// `head` selects a single head instead of the average.
SegmentShares segment_sums(const AttentionRecord& record, const TokenLayout& layout, std::size_t layer,
                           std::size_t query_id, std::optional<std::size_t> head = std::nullopt);

// Heads are averaged first; each query row's segment sums are normalised by
// their total over the prompt, then averaged across query rows.
InfluenceProfile influence_rates(const AttentionRecord& record, const TokenLayout& layout,
                                 std::span<const std::size_t> query_ids);

// Diagnostic breakdown: one profile per head.
std::vector<InfluenceProfile> influence_rates_per_head(const AttentionRecord& record, const TokenLayout& layout,
                                                       std::span<const std::size_t> query_ids);

// First 1-based layer whose image share falls below `threshold`.
std::optional<std::size_t> first_layer_below(const InfluenceProfile& profile, double threshold = kImageShareThreshold);

struct ProfileReport {
  std::string csv;   // header: layer,lambda_sys,lambda_img,lambda_user
  Raster matrix;     // layers x {sys, img, user} grayscale, one cell per share
  std::optional<std::size_t> flagged_layer;
};

ProfileReport profile_report(const InfluenceProfile& profile, double threshold = kImageShareThreshold,
                             std::size_t cell_size = 16);

}  // namespace flowscope
