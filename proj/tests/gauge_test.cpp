#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "gaugekit/error.hpp"
#include "gaugekit/gauge.hpp"
#include "gaugekit/transformer.hpp"
#include "json.hpp"
#include "oracles.hpp"

namespace gauge {
namespace {

using testing::gqa_config;
using testing::single_head_config;

const SiteSet kVo{true, false, false};
const SiteSet kMlp{false, true, false};
const SiteSet kQk{false, false, true};
const SiteSet kAll{true, true, true};

// Names of tensors whose bytes differ between two views.
std::set<std::string> changed(const CheckpointView& a, const CheckpointView& b) {
  std::set<std::string> out;
  for (const auto& [name, w] : a.tensors())
    if (!(b.tensors().at(name).value == w.value)) out.insert(name);
  return out;
}

double max_tensor_diff(const CheckpointView& a, const CheckpointView& b) {
  double m = 0;
  for (const auto& [name, w] : a.tensors()) m = std::max(m, max_abs_diff(w.value, b.tensors().at(name).value));
  return m;
}

TEST(SiteSet, ParseAndFormat) {
  EXPECT_TRUE(SiteSet::parse("").empty());
  EXPECT_EQ(SiteSet::parse("vo,mlp"), (SiteSet{true, true, false}));
  EXPECT_EQ(SiteSet::parse(" qk , vo "), (SiteSet{true, false, true}));
  EXPECT_EQ(SiteSet::parse("mlp,qk,vo").to_string(), "vo,mlp,qk");
  EXPECT_THROW(SiteSet::parse("vo,attn"), FormatError);
}

TEST(BuildGaugeSpec, EmptySitesIsIdentity) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  const auto g = apply_gauge(v, build_gauge_spec(c, 42, SiteSet{}));
  EXPECT_TRUE(changed(v, g).empty());
}

TEST(BuildGaugeSpec, DeterministicInSeed) {
  const ModelConfig c = ModelConfig::desk_default();
  const auto a = build_gauge_spec(c, 7, kAll);
  const auto b = build_gauge_spec(c, 7, kAll);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t h = 0; h < c.n_kv_heads; ++h) EXPECT_EQ(a.layers[l].vo[h].matrix(), b.layers[l].vo[h].matrix());
    EXPECT_EQ(*a.layers[l].mlp, *b.layers[l].mlp);
    EXPECT_EQ(a.layers[l].qk, b.layers[l].qk);
  }
  const auto other = build_gauge_spec(c, 8, kAll);
  EXPECT_NE(a.layers[0].vo[0].matrix(), other.layers[0].vo[0].matrix());
}

TEST(BuildGaugeSpec, SitesDrawFromIndependentStreams) {
  const ModelConfig c = ModelConfig::desk_default();
  const auto vo_only = build_gauge_spec(c, 7, kVo);
  const auto all = build_gauge_spec(c, 7, kAll);
  EXPECT_EQ(vo_only.layers[1].vo[1].matrix(), all.layers[1].vo[1].matrix());
}

TEST(BuildGaugeSpec, TwoLayerVoConstruction) {
  const ModelConfig c = ModelConfig::desk_default();
  const auto spec = build_gauge_spec(c, 3, kVo);
  ASSERT_EQ(spec.layers.size(), 2u);
  std::size_t count = 0;
  for (const auto& layer : spec.layers) {
    EXPECT_FALSE(layer.mlp.has_value());
    EXPECT_TRUE(layer.qk.empty());
    for (const auto& g : layer.vo) {
      EXPECT_EQ(g.dim(), c.head_dim);
      EXPECT_LE(orthogonality_residual(g.matrix()), 1e-12);
      ++count;
    }
  }
  EXPECT_EQ(count, 2 * c.n_kv_heads);
}

TEST(ApplyVoGauge, IdentityGaugeLeavesViewUnchanged) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  EXPECT_TRUE(changed(v, apply_vo_gauge(v, identity_gauge_spec(c, kVo))).empty());
}

TEST(ApplyVoGauge, SingleHeadProductInvariance) {
  const ModelConfig c = single_head_config();
  const CheckpointView v = random_checkpoint(c, 2);
  const auto g = apply_vo_gauge(v, build_gauge_spec(c, 5, kVo));
  const Matrix before = matmul(v.weight(0, Site::kV), v.weight(0, Site::kO));
  const Matrix after = matmul(g.weight(0, Site::kV), g.weight(0, Site::kO));
  EXPECT_LE(max_abs_diff(before, after), 1e-12);
  EXPECT_GT(max_abs_diff(v.weight(0, Site::kV), g.weight(0, Site::kV)), 1e-3);
}

TEST(ApplyVoGauge, GqaAttentionOutputInvariant) {
  const ModelConfig c = gqa_config();
  const CheckpointView v = random_checkpoint(c, 2);
  const auto g = apply_vo_gauge(v, build_gauge_spec(c, 5, kVo));
  double worst = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Matrix x = testing::random_tokens(5, c.hidden_size, i);
    worst = std::max(worst, max_abs_diff(attention_block(x, layer_weights(v, 0), c),
                                         attention_block(x, layer_weights(g, 0), c)));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(ApplyVoGauge, QueryHeadsShareTheirGroupsGauge) {
  // Each W_O row block of query head q gets G_{q / group}^T.
  const ModelConfig c = gqa_config();
  const CheckpointView v = random_checkpoint(c, 2);
  const auto spec = build_gauge_spec(c, 5, kVo);
  const auto g = apply_vo_gauge(v, spec);
  const std::size_t hd = c.head_dim;
  for (std::size_t q = 0; q < c.n_heads; ++q) {
    const Matrix& gh = spec.layers[0].vo[q / c.q_heads_per_kv()].matrix();
    const Matrix expected = testing::naive_matmul(gh.transpose(), v.weight(0, Site::kO).row_block(q * hd, hd));
    EXPECT_LE(max_abs_diff(g.weight(0, Site::kO).row_block(q * hd, hd), expected), 1e-15);
  }
}

TEST(ApplyVoGauge, ErrorsOnDisabledSiteAndForeignConfig) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  EXPECT_THROW(apply_vo_gauge(v, build_gauge_spec(c, 1, kMlp)), SiteNotEnabledError);
  EXPECT_THROW(apply_vo_gauge(v, build_gauge_spec(gqa_config(), 1, kVo)), ConfigMismatchError);
  auto bad = build_gauge_spec(c, 1, kVo);
  bad.layers[0].vo.pop_back();
  EXPECT_THROW(apply_vo_gauge(v, bad), ShapeError);
}

TEST(Locality, EachSiteTouchesOnlyItsTensors) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  auto expect_only = [&](const SiteSet& s, std::initializer_list<Site> sites) {
    std::set<std::string> want;
    for (std::size_t l = 0; l < c.n_layers; ++l)
      for (Site site : sites) want.insert(weight_name(l, site));
    EXPECT_EQ(changed(v, apply_gauge(v, build_gauge_spec(c, 42, s))), want) << s.to_string();
  };
  expect_only(kVo, {Site::kV, Site::kO});
  expect_only(kMlp, {Site::kGate, Site::kUp, Site::kDown});
  expect_only(kQk, {Site::kQ, Site::kK});
}

TEST(ApplyMlpPermutation, IdentityAndBlockInvariance) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  EXPECT_TRUE(changed(v, apply_mlp_permutation(v, identity_gauge_spec(c, kMlp))).empty());

  const auto g = apply_mlp_permutation(v, build_gauge_spec(c, 9, kMlp));
  double worst = 0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Matrix x = testing::random_tokens(4, c.hidden_size, i);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      worst = std::max(worst, max_abs_diff(mlp_block(x, layer_weights(v, l)), mlp_block(x, layer_weights(g, l))));
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(ApplyMlpPermutation, TranspositionIsAnInvolution) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  GaugeSpec spec = identity_gauge_spec(c, kMlp);
  std::vector<std::size_t> swap(c.intermediate_size);
  std::iota(swap.begin(), swap.end(), std::size_t{0});
  std::swap(swap[3], swap[77]);
  for (auto& layer : spec.layers) layer.mlp = PermutationMatrix(swap);
  const auto once = apply_mlp_permutation(v, spec);
  EXPECT_FALSE(changed(v, once).empty());
  EXPECT_TRUE(changed(v, apply_mlp_permutation(once, spec)).empty());

  // A 3-cycle applied twice is not the identity.
  std::vector<std::size_t> cycle(c.intermediate_size);
  std::iota(cycle.begin(), cycle.end(), std::size_t{0});
  cycle[0] = 1;
  cycle[1] = 2;
  cycle[2] = 0;
  for (auto& layer : spec.layers) layer.mlp = PermutationMatrix(cycle);
  EXPECT_FALSE(changed(v, apply_mlp_permutation(apply_mlp_permutation(v, spec), spec)).empty());
}

TEST(ApplyQkRopeGauge, ZeroAnglesAreIdentity) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 1);
  EXPECT_TRUE(changed(v, apply_qk_rope_gauge(v, identity_gauge_spec(c, kQk))).empty());
}

TEST(ApplyQkRopeGauge, ForwardInvariantWithRope) {
  const ModelConfig c = gqa_config();
  const CheckpointView v = random_checkpoint(c, 1);
  const auto g = apply_qk_rope_gauge(v, build_gauge_spec(c, 4, kQk));
  EXPECT_GT(max_abs_diff(v.weight(0, Site::kQ), g.weight(0, Site::kQ)), 1e-3);
  EXPECT_LE(max_divergence(v, g, nullptr, nullptr, {100, 3, 6}), 1e-10);
}

TEST(ApplyQkRopeGauge, NonOrthogonalScaledBlocksKeepScores) {
  const ModelConfig c = gqa_config();
  const CheckpointView v = random_checkpoint(c, 1);
  GaugeSpec spec = build_gauge_spec(c, 4, kQk);
  std::mt19937_64 eng(1);
  std::uniform_real_distribution<double> scale(0.5, 2.0);
  for (auto& layer : spec.layers)
    for (auto& head : layer.qk)
      for (auto& p : head) p.scale = scale(eng);
  const auto g = apply_qk_rope_gauge(v, spec);
  const Matrix x = testing::random_tokens(6, c.hidden_size, 11);
  for (bool rope : {false, true}) {
    const AttentionOptions opts{rope, true};
    for (std::size_t q = 0; q < c.n_heads; ++q) {
      EXPECT_LE(max_abs_diff(attention_probabilities(x, layer_weights(v, 0), c, q, opts),
                             attention_probabilities(x, layer_weights(g, 0), c, q, opts)),
                1e-10);
    }
  }
  // Q side is scaled by s, K side by 1/s: the individual projections change
  // while their inner products do not.
  EXPECT_GT(max_abs_diff(v.weight(0, Site::kK), g.weight(0, Site::kK)), 1e-3);
}

TEST(ApplyQkRopeGauge, RefusedUnderQkNorm) {
  ModelConfig c = ModelConfig::desk_default();
  c.qk_norm = true;
  const CheckpointView v = random_checkpoint(c, 1);
  EXPECT_THROW(apply_qk_rope_gauge(v, build_gauge_spec(c, 1, kQk)), UnsupportedArchitectureError);
  EXPECT_THROW(apply_gauge(v, build_gauge_spec(c, 1, kAll)), UnsupportedArchitectureError);
  EXPECT_NO_THROW(apply_gauge(v, build_gauge_spec(c, 1, SiteSet{true, true, false})));
}

TEST(PairRotationMatrix, CommutesWithRopeRotation) {
  const std::size_t hd = 8;
  std::vector<PairRotation> pairs{{0.3, 1.7}, {1.1, 0.4}, {-2.0, 1.0}, {0.9, 2.5}};
  const Matrix g = pair_rotation_matrix(pairs, hd);
  // Build the RoPE matrix for position 5 by rotating basis vectors.
  Matrix r(hd, hd);
  for (std::size_t i = 0; i < hd; ++i) {
    std::vector<double> e(hd, 0.0);
    e[i] = 1.0;
    apply_rope(e, 5, 10000.0);
    for (std::size_t j = 0; j < hd; ++j) r(i, j) = e[j];
  }
  EXPECT_LE(max_abs_diff(matmul(g, r), matmul(r, g)), 1e-14);
}

TEST(PullbackAdapter, IdentitySpecIsPassthrough) {
  const ModelConfig c = ModelConfig::desk_default();
  const LoraAdapter a = random_adapter(c, kAllSites, 4, 8.0, 1);
  EXPECT_EQ(pullback_adapter(a, identity_gauge_spec(c, kAll)), a);
  EXPECT_EQ(pushforward_adapter(a, identity_gauge_spec(c, kAll)), a);
}

TEST(PullbackAdapter, SingleHeadQSiteIsRightMultiplicationByInverse) {
  const ModelConfig c = single_head_config();
  GaugeSpec spec = build_gauge_spec(c, 2, kQk);
  for (auto& p : spec.layers[0].qk[0]) p.scale = 1.5;  // G^-1 differs from G^T
  const std::array<Site, 1> q{Site::kQ};
  const LoraAdapter a = random_adapter(c, q, 2, 4.0, 7);
  const LoraAdapter pulled = pullback_adapter(a, spec);
  const Matrix g = pair_rotation_matrix(spec.layers[0].qk[0], c.head_dim);
  const Matrix expected = testing::naive_matmul(a.delta({0, Site::kQ}), invert(g));
  EXPECT_LE(max_abs_diff(pulled.delta({0, Site::kQ}), expected), 1e-12);
  EXPECT_EQ(pulled.targets.at({0, Site::kQ}).a, a.targets.at({0, Site::kQ}).a);
}

TEST(PullbackAdapter, DenseIdentitiesPerSite) {
  // Each site's pulled-back delta satisfies gauged(W) + C = gauged(W + pullback(C)).
  const ModelConfig c = gqa_config();
  const CheckpointView v = random_checkpoint(c, 3);
  const GaugeSpec spec = build_gauge_spec(c, 6, kAll);
  const LoraAdapter a = random_adapter(c, kAllSites, 3, 6.0, 2);
  const LoraAdapter pulled = pullback_adapter(a, spec);
  CheckpointView merged_original = v;
  for (const auto& [t, _] : a.targets) merged_original.weight(t.layer, t.site) = v.weight(t.layer, t.site) + pulled.delta(t);
  const auto lhs = apply_gauge(merged_original, spec);
  const auto gauged = apply_gauge(v, spec);
  for (const auto& [t, _] : a.targets) {
    EXPECT_LE(max_abs_diff(lhs.weight(t.layer, t.site), gauged.weight(t.layer, t.site) + a.delta(t)), 1e-12)
        << "layer " << t.layer << " site " << site_name(t.site);
  }
}

TEST(PullbackAdapter, MlpSitesForwardEquivalence) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 3);
  const GaugeSpec spec = build_gauge_spec(c, 6, kMlp);
  const auto g = apply_gauge(v, spec);
  const std::array<Site, 3> mlp{Site::kGate, Site::kUp, Site::kDown};
  const LoraAdapter a = random_adapter(c, mlp, 4, 8.0, 2);
  const LoraAdapter pulled = pullback_adapter(a, spec);
  EXPECT_LE(max_divergence(g, v, &a, &pulled, {100, 5, 4}), 1e-10);
  // Not trivially equal: the same adapter on the original differs.
  EXPECT_GT(max_divergence(g, v, &a, &a, {5, 5, 4}), 1e-6);
}

TEST(PullbackAdapter, DisabledSitesPassThroughAndRankIsKept) {
  const ModelConfig c = ModelConfig::desk_default();
  const LoraAdapter a = random_adapter(c, kAllSites, 4, 8.0, 1);
  const LoraAdapter pulled = pullback_adapter(a, build_gauge_spec(c, 3, kMlp));
  EXPECT_EQ(pulled.rank, a.rank);
  for (const auto& [t, p] : a.targets) {
    const bool mlp_site = !is_attention_site(t.site);
    EXPECT_EQ(pulled.targets.at(t) == p, !mlp_site) << site_name(t.site);
    EXPECT_EQ(pulled.targets.at(t).a.cols(), 4u);
  }
}

TEST(PushforwardAdapter, InverseOfPullback) {
  const ModelConfig c = ModelConfig::desk_default();
  GaugeSpec spec = build_gauge_spec(c, 12, kAll);
  spec.layers[1].qk[0][2].scale = 0.6;
  const LoraAdapter a = random_adapter(c, kAllSites, 4, 8.0, 9);
  auto close = [](const LoraAdapter& x, const LoraAdapter& y) {
    double m = 0;
    for (const auto& [t, p] : x.targets) {
      m = std::max(m, max_abs_diff(p.a, y.targets.at(t).a));
      m = std::max(m, max_abs_diff(p.b, y.targets.at(t).b));
    }
    return m;
  };
  EXPECT_LE(close(pushforward_adapter(pullback_adapter(a, spec), spec), a), 1e-12);
  EXPECT_LE(close(pullback_adapter(pushforward_adapter(a, spec), spec), a), 1e-12);
}

TEST(PushforwardAdapter, ForwardEquivalence) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 3);
  const GaugeSpec spec = build_gauge_spec(c, 6, kAll);
  const auto g = apply_gauge(v, spec);
  const LoraAdapter a = random_adapter(c, kAllSites, 4, 8.0, 2);
  const LoraAdapter pushed = pushforward_adapter(a, spec);
  EXPECT_LE(max_divergence(v, g, &a, &pushed, {100, 5, 4}), 1e-10);
}

TEST(ComposeGauges, IdentityIsNeutral) {
  const ModelConfig c = ModelConfig::desk_default();
  const auto s = build_gauge_spec(c, 1, kAll);
  const auto composed = compose_gauges(s, identity_gauge_spec(c, kAll));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
      EXPECT_EQ(composed.layers[l].vo[h].matrix(), s.layers[l].vo[h].matrix());
    }
    EXPECT_EQ(*composed.layers[l].mlp, *s.layers[l].mlp);
    EXPECT_EQ(composed.layers[l].qk, s.layers[l].qk);
  }
}

TEST(ComposeGauges, MatchesSequentialApplication) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 2);
  const auto s1 = build_gauge_spec(c, 1, kAll);
  const auto s2 = build_gauge_spec(c, 2, kAll);
  const auto sequential = apply_gauge(apply_gauge(v, s1), s2);
  EXPECT_LE(max_tensor_diff(apply_gauge(v, compose_gauges(s1, s2)), sequential), 1e-12);
}

TEST(ComposeGauges, InverseRestoresCheckpoint) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 2);
  const auto s = build_gauge_spec(c, 1, kAll);
  EXPECT_LE(max_tensor_diff(apply_gauge(v, compose_gauges(s, inverse_gauge(s))), v), 1e-12);
  EXPECT_LE(max_tensor_diff(apply_gauge(apply_gauge(v, s), inverse_gauge(s)), v), 1e-12);
}

TEST(ComposeGauges, Associative) {
  const ModelConfig c = ModelConfig::desk_default();
  const CheckpointView v = random_checkpoint(c, 2);
  const auto s1 = build_gauge_spec(c, 1, kAll);
  const auto s2 = build_gauge_spec(c, 2, kAll);
  const auto s3 = build_gauge_spec(c, 3, kAll);
  const auto left = apply_gauge(v, compose_gauges(compose_gauges(s1, s2), s3));
  const auto right = apply_gauge(v, compose_gauges(s1, compose_gauges(s2, s3)));
  EXPECT_LE(max_tensor_diff(left, right), 1e-12);
}

TEST(ComposeGauges, RejectsMismatchedSpecs) {
  const ModelConfig c = ModelConfig::desk_default();
  EXPECT_THROW(compose_gauges(build_gauge_spec(c, 1, kVo), build_gauge_spec(gqa_config(), 1, kVo)),
               ConfigMismatchError);
  EXPECT_THROW(compose_gauges(build_gauge_spec(c, 1, kVo), build_gauge_spec(c, 1, kMlp)), ConfigMismatchError);
}

TEST(GaugeSpecJson, RegeneratesFromSeed) {
  const ModelConfig c = ModelConfig::desk_default();
  const auto s = build_gauge_spec(c, 1234, kAll);
  const auto back = GaugeSpec::from_json(s.to_json(), c);
  EXPECT_EQ(back.seed, s.seed);
  EXPECT_EQ(back.sites, s.sites);
  EXPECT_EQ(back.layers[1].vo[0].matrix(), s.layers[1].vo[0].matrix());
  EXPECT_EQ(*back.layers[0].mlp, *s.layers[0].mlp);

  const auto inv = GaugeSpec::from_json(inverse_gauge(s).to_json(), c);
  EXPECT_TRUE(inv.inverted);
  EXPECT_EQ(inv.layers[0].vo[1].matrix(), s.layers[0].vo[1].matrix().transpose());

  const auto j = nlohmann::json::parse(s.to_json());
  EXPECT_FALSE(j.contains("layers"));
  EXPECT_TRUE(j.contains("config_hash"));
}

TEST(GaugeSpecJson, ConfigHashMismatchAndComposedSpecs) {
  const ModelConfig c = ModelConfig::desk_default();
  const auto s = build_gauge_spec(c, 1, kVo);
  EXPECT_THROW(GaugeSpec::from_json(s.to_json(), gqa_config()), ConfigMismatchError);
  EXPECT_THROW(compose_gauges(s, s).to_json(), Error);
  EXPECT_THROW(GaugeSpec::from_json("{", c), FormatError);
}

}  // namespace
}  // namespace gauge
