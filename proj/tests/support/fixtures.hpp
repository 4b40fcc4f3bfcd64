#pragma once

#include <random>
#include <vector>

#include "flowscope/model.hpp"

namespace flowscope::testing {

inline ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 2, std::size_t d = 32,
                                std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_ff = 2 * d;
  c.vocab_size = 24;
  c.patch_rows = 3;
  c.patch_cols = 3;
  c.patch_channels = 4;
  c.max_seq = 32;
  c.seed = seed;
  return c;
}

inline MultimodalInput random_input(const ModelConfig& c, std::mt19937_64& rng, std::size_t n_sys = 2,
                                    std::size_t n_user = 3) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  std::normal_distribution<double> px(0.0, 1.0);
  MultimodalInput in;
  for (std::size_t i = 0; i < n_sys; ++i) in.system_tokens.push_back(tok(rng));
  in.image = PatchGrid::zeros(c.patch_rows, c.patch_cols, c.patch_channels);
  for (double& v : in.image.values) v = px(rng);
  for (std::size_t i = 0; i < n_user; ++i) in.user_tokens.push_back(tok(rng));
  return in;
}

}  // namespace flowscope::testing
