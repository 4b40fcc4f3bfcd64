#include "flowscope/cam.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "flowscope/errors.hpp"
#include "support/finite_difference.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace flowscope;
namespace ft = flowscope::testing;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = n(rng);
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(AnswerLogit, SumsRealisedTokenLogits) {
  Tape tape(true);
  Tensor logits = Tensor::matrix(4, 3);
  logits.at(1, 0) = 1.5;
  logits.at(2, 2) = -0.5;
  logits.at(3, 1) = 2.0;
  Var l = tape.variable(logits);
  const std::size_t rows[] = {1, 2, 3};
  const int toks[] = {0, 2, 1};
  Var z = answer_logit(l, rows, toks);
  EXPECT_DOUBLE_EQ(z.value().item(), 3.0);
  const auto g = tape.backward(z);
  EXPECT_EQ(g.of(l).at(2, 2), 1.0);
  EXPECT_EQ(g.of(l).at(0, 0), 0.0);
  const std::size_t bad_rows[] = {1};
  EXPECT_THROW(answer_logit(l, bad_rows, toks), ContractError);
}

TEST(CamMap, ZeroGradientGivesZeroMap) {
  const TokenLayout layout(1, 4, 1);
  std::mt19937_64 rng(1);
  const auto a = random_matrix(6, 5, rng);
  const auto map = cam_map(a, Tensor::matrix(6, 5), layout);
  EXPECT_EQ(map, std::vector<double>(4, 0.0));
  EXPECT_TRUE(normalize_max(to_grid(map, 2, 2)).is_zero());
}

TEST(CamMap, SingleChannelRelu) {
  const TokenLayout layout(0, 3, 0);
  const Tensor a = Tensor::from_rows({{-1.0}, {2.0}, {3.0}});
  const Tensor g = Tensor::from_rows({{1.0}, {1.0}, {1.0}});
  EXPECT_EQ(cam_map(a, g, layout), (std::vector<double>{0.0, 2.0, 3.0}));
}

TEST(CamMap, MatchesDoubleLoopOracle) {
  const TokenLayout layout(2, 6, 3);
  std::mt19937_64 rng(3);
  const auto a = random_matrix(13, 7, rng);
  const auto g = random_matrix(13, 7, rng);
  const auto map = cam_map(a, g, layout);
  for (std::size_t p = 0; p < 6; ++p) {
    double v = 0;
    for (std::size_t k = 0; k < 7; ++k) {
      double alpha = 0;
      for (std::size_t r = 0; r < 13; ++r) alpha += g.at(r, k);
      v += alpha / 13.0 * a.at(2 + p, k);
    }
    EXPECT_NEAR(map[p], std::max(v, 0.0), 1e-13);
  }
}

TEST(FeatureGradients, StopGradientYieldsZero) {
  Tape tape(true);
  std::mt19937_64 rng(2);
  Var a = tape.variable(random_matrix(3, 2, rng));
  Var z = sum(mul(stop_gradient(a), stop_gradient(a)));
  const auto g = feature_gradients(z, a);
  EXPECT_EQ(g, Tensor::matrix(3, 2));
}

TEST(FeatureGradients, LinearHeadGradientIsTheWeight) {
  Tape tape(true);
  std::mt19937_64 rng(5);
  const auto w = random_matrix(4, 3, rng);
  Var a = tape.variable(random_matrix(4, 3, rng));
  Var z = sum(mul(a, tape.constant(w)));
  EXPECT_EQ(feature_gradients(z, a), w);
}

TEST(FeatureGradients, RejectsForeignOrUnrelatedFeatures) {
  Tape t1(true), t2(true);
  Var a = t1.variable(Tensor::scalar(1.0));
  Var b = t2.variable(Tensor::scalar(2.0));
  Var z = sum(b);
  EXPECT_THROW(feature_gradients(z, a), ContractError);
  Var late = t2.variable(Tensor::scalar(3.0));
  EXPECT_THROW(feature_gradients(z, late), ContractError);
  Var c = t2.constant(Tensor::scalar(3.0));
  EXPECT_THROW(feature_gradients(z, c), ContractError);
  Tape frozen(false);
  Var f = frozen.constant(Tensor::scalar(1.0));
  EXPECT_THROW(feature_gradients(sum(f), f), ContractError);
}

TEST(FeatureGradients, MatchFiniteDifferencesThroughTheModel) {
  const auto cfg = ft::small_config(2, 2, 16, 9);
  const Model model(cfg);
  std::mt19937_64 rng(21);
  const auto in = ft::random_input(cfg, rng);
  const std::vector<int> cont = {4};
  const int answer[] = {7, 3};
  const std::size_t n_prompt = in.layout().prompt_length();
  const std::size_t rows[] = {n_prompt - 1, n_prompt};

  auto pass = model.forward(in, cont, {}, true);
  Var z = answer_logit(pass.logits, rows, answer);
  const auto grads = pass.tape->backward(z);
  const auto ref_rows = ft::reference_rows(in, cont);

  std::uniform_int_distribution<std::size_t> layer_d(1, cfg.n_layers), row_d(0, ref_rows.size() - 1),
      col_d(0, cfg.d_model - 1);
  for (int i = 0; i < 8; ++i) {
    const std::size_t l = layer_d(rng), r = row_d(rng), c = col_d(rng);
    const Tensor g = feature_gradients(grads, z, pass.record.layer(l).features);
    auto zf = [&](double delta) {
      const auto lg = ft::reference_logits(model, in, ref_rows, ft::RefPerturbation{l, r, c, delta});
      return lg[rows[0]][answer[0]] + lg[rows[1]][answer[1]];
    };
    const double fd = (zf(ft::kFdStep) - zf(-ft::kFdStep)) / (2 * ft::kFdStep);
    EXPECT_LT(ft::relative_error(g.at(r, c), fd), 1e-4) << "layer " << l << " row " << r << " col " << c;
  }
}

TEST(Perturb, ZeroNoiseIsIdentity) {
  const auto cfg = ft::small_config();
  std::mt19937_64 rng(1);
  const auto in = ft::random_input(cfg, rng);
  EXPECT_EQ(perturb_image(in.image, 0.0, 3, 9).values, in.image.values);
  EXPECT_THROW(perturb_image(in.image, -1.0, 0, 0), ContractError);
}

TEST(Perturb, KeyedBySeedAndSample) {
  const auto img = PatchGrid::zeros(3, 3, 4);
  EXPECT_EQ(perturb_image(img, 0.5, 2, 7).values, perturb_image(img, 0.5, 2, 7).values);
  EXPECT_NE(perturb_image(img, 0.5, 2, 7).values, perturb_image(img, 0.5, 3, 7).values);
  EXPECT_NE(perturb_image(img, 0.5, 2, 7).values, perturb_image(img, 0.5, 2, 8).values);
}

TEST(Perturb, EmpiricalStandardDeviation) {
  const auto img = PatchGrid::zeros(100, 100, 10);
  const double s = 0.3;
  const auto noisy = perturb_image(img, s, 0, 42);
  double mean = 0, sq = 0;
  for (double v : noisy.values) mean += v;
  mean /= static_cast<double>(noisy.values.size());
  for (double v : noisy.values) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(noisy.values.size() - 1));
  EXPECT_NEAR(sd, s, 0.02 * s);
  EXPECT_NEAR(mean, 0.0, 0.01);
}

TEST(SmoothCam, SingleCleanSampleEqualsPlainCam) {
  const auto cfg = ft::small_config(2, 2, 16, 3);
  const Model model(cfg);
  std::mt19937_64 rng(8);
  const auto in = ft::random_input(cfg, rng);
  CamConfig cc;
  cc.layer = 2;
  cc.max_new = 2;
  const auto res = smooth_cam(model, in, cc);

  const auto answer = model.greedy_decode(in, 2);
  const std::vector<int> cont = {answer[0]};
  auto pass = model.forward(in, cont, {}, true);
  const std::size_t n = in.layout().prompt_length();
  const std::size_t rows[] = {n - 1, n};
  Var z = answer_logit(pass.logits, rows, answer);
  const auto& cap = pass.record.layer(2);
  const auto raw = cam_map(cap.features.value(), feature_gradients(z, cap.features), in.layout());
  EXPECT_EQ(res.mean_raw, raw);
  EXPECT_EQ(res.map.values, normalize_max(to_grid(raw, 3, 3)).values);
  EXPECT_TRUE(res.map.normalized);
}

TEST(SmoothCam, AverageIsMeanOfIndependentSamples) {
  const auto cfg = ft::small_config(2, 2, 16, 3);
  const Model model(cfg);
  std::mt19937_64 rng(8);
  const auto in = ft::random_input(cfg, rng);
  CamConfig cc;
  cc.layer = 1;
  cc.noise_s = 0.4;
  cc.n_samples = 5;
  cc.seed = 17;
  const auto res = smooth_cam(model, in, cc);
  const auto answer = model.greedy_decode(in, 1);
  const std::size_t layer[] = {1};
  std::vector<double> mean(9, 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto m = cam_sample(model, in, cc, answer, i, layer).front();
    EXPECT_EQ(m, res.sample_maps[i]);
    for (std::size_t p = 0; p < 9; ++p) mean[p] += m[p] / 5.0;
  }
  for (std::size_t p = 0; p < 9; ++p) EXPECT_NEAR(res.mean_raw[p], mean[p], 1e-12);
  double mx = 0;
  for (double v : res.map.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    mx = std::max(mx, v);
  }
  if (!res.map.is_zero()) EXPECT_EQ(mx, 1.0);
  // Same seed, same run.
  EXPECT_EQ(smooth_cam(model, in, cc).map.values, res.map.values);
}

TEST(SmoothCam, HookPointChangesTheMap) {
  const auto cfg = ft::small_config(2, 2, 16, 3);
  const Model model(cfg);
  std::mt19937_64 rng(8);
  const auto in = ft::random_input(cfg, rng);
  CamConfig a;
  a.layer = 1;
  CamConfig b = a;
  b.hook = HookPoint::pre_norm;
  CamConfig c = a;
  c.hook = HookPoint::mlp_out;
  const auto ma = smooth_cam(model, in, a).mean_raw;
  EXPECT_NE(ma, smooth_cam(model, in, b).mean_raw);
  EXPECT_NE(ma, smooth_cam(model, in, c).mean_raw);
}

TEST(SmoothCam, RejectsBadConfig) {
  const auto cfg = ft::small_config();
  const Model model(cfg);
  std::mt19937_64 rng(8);
  const auto in = ft::random_input(cfg, rng);
  CamConfig cc;
  cc.layer = 3;
  EXPECT_THROW(smooth_cam(model, in, cc), ContractError);
  cc.layer = 1;
  cc.n_samples = 0;
  EXPECT_THROW(smooth_cam(model, in, cc), ContractError);
  cc.n_samples = 1;
  cc.step = 1;
  EXPECT_THROW(smooth_cam(model, in, cc), ContractError);
}

TEST(Grid, ReshapeRoundTrip) {
  const std::vector<double> seq = {1, 2, 3, 4, 5, 6};
  const auto g = to_grid(seq, 2, 3);
  EXPECT_EQ(g.at(1, 0), 4.0);
  EXPECT_EQ(to_sequence(g), seq);
  EXPECT_THROW(to_grid(seq, 4, 2), DimensionError);
}

TEST(Overlay, ZeroMapIsGrayscale) {
  const auto cfg = ft::small_config();
  std::mt19937_64 rng(4);
  const auto in = ft::random_input(cfg, rng);
  const SaliencyMap zero{3, 3, std::vector<double>(9, 0.0), true};
  EXPECT_EQ(render_overlay(zero, in.image).pixels, render_grayscale(in.image).pixels);
  const auto g = render_grayscale(in.image);
  for (std::size_t i = 0; i < g.pixels.size(); i += 3) {
    EXPECT_EQ(g.pixels[i], g.pixels[i + 1]);
    EXPECT_EQ(g.pixels[i], g.pixels[i + 2]);
  }
}

TEST(Overlay, OneHotMapColoursOnePatch) {
  const auto img = PatchGrid::zeros(3, 3, 2);
  SaliencyMap m{3, 3, std::vector<double>(9, 0.0), true};
  m.values[4] = 1.0;
  const auto r = render_overlay(m, img, 2);
  const auto hot = jet(255);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      const bool inside = x / 2 == 1 && y / 2 == 1;
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(r.at(x, y, ch), inside ? hot[ch] : 128);
    }
}

TEST(Overlay, ExportIsByteStableAndReportsIoErrors) {
  const auto cfg = ft::small_config();
  std::mt19937_64 rng(4);
  const auto in = ft::random_input(cfg, rng);
  SaliencyMap m{3, 3, {0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0}, true};
  const auto dir = std::filesystem::temp_directory_path() / "flowscope_cam_test";
  std::filesystem::create_directories(dir);
  overlay_export(m, in.image, dir / "a.ppm");
  overlay_export(m, in.image, dir / "b.ppm");
  const auto a = slurp(dir / "a.ppm");
  EXPECT_EQ(a, slurp(dir / "b.ppm"));
  EXPECT_EQ(a.substr(0, 13), "P6\n24 24\n255\n");
  EXPECT_THROW(overlay_export(m, in.image, dir / "missing" / "c.ppm"), IoError);
  m.normalized = false;
  EXPECT_THROW(overlay_export(m, in.image, dir / "d.ppm"), ContractError);
  std::filesystem::remove_all(dir);
}

TEST(Overlay, JetEndpoints) {
  EXPECT_EQ(jet(0), (std::array<std::uint8_t, 3>{0, 0, 127}));
  EXPECT_EQ(jet(255), (std::array<std::uint8_t, 3>{127, 0, 0}));
  EXPECT_EQ(jet(128)[1], 255);
}

TEST(SaliencyCsv, Format) {
  const SaliencyMap m{1, 2, {0.5, 1.0}, true};
  EXPECT_EQ(saliency_csv(m), "row,col,value\n0,0,0.5\n0,1,1\n");
}
