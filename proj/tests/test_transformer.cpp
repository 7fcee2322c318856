// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "kdlsq/dataset.hpp"
#include "kdlsq/ops.hpp"
#include "kdlsq/scale_init.hpp"
#include "kdlsq/transformer.hpp"

using namespace kdlsq;

namespace {

using Mat = std::vector<std::vector<double>>;  // [n][cols]

ModelConfig small(std::size_t layers = 2) {
  ModelConfig c;
  c.layers = layers;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.vocab = 13;
  c.max_seq = 7;
  return c;
}

Batch random_batch(std::size_t b, std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Example> ex(b);
  for (auto& e : ex) {
    for (std::size_t i = 0; i < n; ++i) {
      e.tokens.push_back(rng() % vocab);
      e.segments.push_back(rng() % 2);
    }
    e.label = static_cast<int>(rng() % 2);
  }
  return make_batch(ex);
}

// Plain-loop reference model at full precision, written independently of
// the autodiff ops.
Mat mm(const Mat& a, const Tensor& w) {
  const std::size_t k = w.shape()[0], m = w.shape()[1];
  Mat out(a.size(), std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i][j] += a[i][t] * w.data()[t * m + j];
  return out;
}

Mat layer_norm_ref(const Mat& x, const Tensor& g, const Tensor& b) {
  Mat out = x;
  for (auto& row : out) {
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + 1e-12) * g[j] + b[j];
  }
  return out;
}

struct RefOut {
  std::vector<Mat> hidden;
  std::vector<std::vector<Mat>> scores;  // [layer][head] n x n
  std::vector<double> logits;
};

RefOut reference(const ModelState& m, const Batch& batch, std::size_t ex) {
  const ModelConfig& c = m.config();
  const std::size_t n = batch.seq_len, d = c.hidden, dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.attention_scaling == AttentionScaling::kHiddenSize ? d : dh));
  RefOut r;
  Mat h(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t tok = batch.tokens[ex * n + i], seg = batch.segments[ex * n + i];
    for (std::size_t j = 0; j < d; ++j)
      h[i][j] = m.word_emb[tok * d + j] + m.seg_emb[seg * d + j] + m.pos_emb[i * d + j];
  }
  r.hidden.push_back(h);
  for (const LayerParams& p : m.layers) {
    const Mat q = mm(h, p.wq), k = mm(h, p.wk), v = mm(h, p.wv);
    Mat ctx(n, std::vector<double>(d, 0.0));
    std::vector<Mat> layer_scores;
    for (std::size_t hd = 0; hd < c.heads; ++hd) {
      Mat s(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t t = hd * dh; t < (hd + 1) * dh; ++t) s[i][j] += q[i][t] * k[j][t];
          s[i][j] *= scale;
        }
        double mx = s[i][0];
        for (double x : s[i]) mx = std::max(mx, x);
        std::vector<double> pr(n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += pr[j] = std::exp(s[i][j] - mx);
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t t = hd * dh; t < (hd + 1) * dh; ++t) ctx[i][t] += pr[j] / z * v[j][t];
      }
      layer_scores.push_back(s);
    }
    r.scores.push_back(layer_scores);
    const Mat attn = mm(ctx, p.wo);
    Mat x = h;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += attn[i][j];
    x = layer_norm_ref(x, p.ln1_gain, p.ln1_bias);
    Mat inner = mm(x, p.w1);
    for (auto& row : inner)
      for (std::size_t j = 0; j < row.size(); ++j) {
        const double u = row[j] + p.b1[j];
        row[j] = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
      }
    const Mat f = mm(inner, p.w2);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += f[i][j] + p.b2[j];
    h = layer_norm_ref(x, p.ln2_gain, p.ln2_bias);
    r.hidden.push_back(h);
  }
  std::vector<double> pooled(d, 0.0);
  for (const auto& row : h)
    for (std::size_t j = 0; j < d; ++j) pooled[j] += row[j] / static_cast<double>(n);
  const std::size_t k = c.num_classes;
  r.logits.assign(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    r.logits[j] = m.cls_bias[j];
    for (std::size_t t = 0; t < d; ++t) r.logits[j] += pooled[t] * m.cls_weight[t * k + j];
  }
  return r;
}

// Non-trivial layer-norm and bias values so the oracle exercises them.
ModelState perturbed(const ModelConfig& c, std::uint64_t seed) {
  ModelState m = ModelState::random(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& p : m.layers) {
    for (Tensor* t : {&p.b1, &p.b2, &p.ln1_bias, &p.ln2_bias, &p.ln1_gain, &p.ln2_gain})
      for (double& x : t->data()) x += nd(rng);
    for (Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2})
      for (double& x : t->data()) x *= 20.0;  // sharpen attention
  }
  for (double& x : m.cls_bias.data()) x = nd(rng);
  return m;
}

void check_against_reference(const ModelConfig& c, std::size_t n) {
  ModelState m = perturbed(c, 31);
  const Batch batch = random_batch(3, n, c.vocab, 32);
  Graph g;
  ForwardOptions opt;
  opt.mode = ForwardMode::kTeacher;
  const ForwardTrace tr = forward_model(g, m, batch, opt);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const RefOut r = reference(m, batch, b);
    for (std::size_t l = 0; l < r.hidden.size(); ++l)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c.hidden; ++j)
          EXPECT_NEAR(tr.hidden[l].value()[(b * n + i) * c.hidden + j], r.hidden[l][i][j], 1e-10);
    for (std::size_t l = 0; l < c.layers; ++l)
      for (std::size_t hd = 0; hd < c.heads; ++hd)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            EXPECT_NEAR(tr.scores[l].value()[((b * c.heads + hd) * n + i) * n + j], r.scores[l][hd][i][j], 1e-10);
    for (std::size_t k = 0; k < c.num_classes; ++k)
      EXPECT_NEAR(tr.logits.value()[b * c.num_classes + k], r.logits[k], 1e-10);
  }
}

}  // namespace

TEST(Forward, MatchesLoopReference) { check_against_reference(small(), 5); }

TEST(Forward, MatchesLoopReferenceHeadScaling) {
  ModelConfig c = small(1);
  c.attention_scaling = AttentionScaling::kHeadSize;
  check_against_reference(c, 6);
}

TEST(Forward, SingleToken) { check_against_reference(small(), 1); }

TEST(AttentionHead, ConcatenatedHeadsEqualMha) {
  ModelConfig c = small(1);
  ModelState m = perturbed(c, 40);
  const Batch batch = random_batch(2, 4, c.vocab, 41);
  Graph g;
  ForwardOptions opt;
  opt.mode = ForwardMode::kTeacher;
  ForwardContext ctx(g, m, opt);
  Var h = embed(ctx, batch);
  auto [out, scores] = mha(ctx, 0, h);
  const std::size_t n = 4, d = c.hidden, dh = c.head_dim();
  std::vector<Tensor> heads;
  for (std::size_t hd = 0; hd < c.heads; ++hd) {
    auto [ho, hs] = attention_head(ctx, 0, h, hd);
    EXPECT_EQ(ho.shape(), (Shape{2, n, dh}));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < n * n; ++i)
        EXPECT_NEAR(hs.value()[b * n * n + i], scores.value()[(b * c.heads + hd) * n * n + i], 1e-12);
    heads.push_back(ho.value());
  }
  // out = concat(heads) W^O
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < d; ++t)
          acc += heads[t / dh][(b * n + i) * dh + t % dh] * m.layers[0].wo[t * d + j];
        EXPECT_NEAR(out.value()[(b * n + i) * d + j], acc, 1e-10);
      }
  EXPECT_THROW(attention_head(ctx, 0, h, c.heads), std::out_of_range);
}

TEST(Ffn, ZeroInputGivesGeluOfBias) {
  ModelConfig c = small(1);
  ModelState m = perturbed(c, 50);
  Graph g;
  ForwardOptions opt;
  opt.mode = ForwardMode::kTeacher;
  ForwardContext ctx(g, m, opt);
  const Tensor out = ffn(ctx, 0, g.constant(Tensor({1, 1, c.hidden}, 0.0))).value();
  const LayerParams& p = m.layers[0];
  for (std::size_t j = 0; j < c.hidden; ++j) {
    double acc = p.b2[j];
    for (std::size_t t = 0; t < c.ffn; ++t) {
      const double u = p.b1[t];
      acc += 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u))) * p.w2[t * c.hidden + j];
    }
    EXPECT_NEAR(out[j], acc, 1e-12);
  }
}

TEST(Census, SitesMatchExpectation) {
  for (std::size_t layers : {1u, 2u, 3u}) {
    ModelState m(small(layers));
    const SiteCensus want = expected_census(m.config());
    EXPECT_EQ(want.weight_sites, 6 * layers + 1);
    EXPECT_EQ(want.activation_sites, 10 * layers);
    std::size_t w = 0, a = 0;
    for (const auto& s : m.scales()) (s.kind == SiteKind::kWeight ? w : a)++;
    EXPECT_EQ(w, want.weight_sites);
    EXPECT_EQ(a, want.activation_sites);
  }
}

TEST(Census, ExemptTensorsHaveNoSite) {
  ModelState m(small());
  std::set<std::string> guarded;
  for (const auto& s : m.scales())
    if (s.kind == SiteKind::kWeight) guarded.insert(s.site_id);
  for (const auto& [name, t] : m.named_parameters()) {
    static const std::set<std::string> quantized{"emb.word", "attn.wq", "attn.wk", "attn.wv",
                                                 "attn.wo",  "ffn.w1",  "ffn.w2"};
    const std::string tail = name.starts_with("layer.") ? name.substr(name.find('.', 6) + 1) : name;
    const bool exempt = quantized.count(tail) == 0;
    EXPECT_EQ(guarded.count(name) == 0, exempt) << name;
    if (exempt) {
      EXPECT_THROW(m.weight_of(name), std::out_of_range) << name;
    } else {
      EXPECT_EQ(m.weight_of(name), t) << name;
    }
  }
}

TEST(Forward, TeacherAndFullPrecisionStudentAreBitwiseEqual) {
  ModelState m = perturbed(small(), 60);
  const Batch batch = random_batch(3, 5, m.config().vocab, 61);
  Graph g;
  ForwardOptions teacher;
  teacher.mode = ForwardMode::kTeacher;
  ForwardOptions student;
  const ForwardTrace a = forward_model(g, m, batch, teacher);
  const ForwardTrace b = forward_model(g, m, batch, student);
  EXPECT_EQ(a.logits.value().values(), b.logits.value().values());
  for (std::size_t l = 0; l < a.hidden.size(); ++l) EXPECT_EQ(a.hidden[l].value().values(), b.hidden[l].value().values());
}

TEST(Forward, TernaryWeightsReachTheMatmul) {
  ModelConfig c = small();
  c.set_bits(2, 2, 8);
  ModelState m = ModelState::random(c, 70);
  init_weight_scales(m, 0.05);
  const Batch batch = random_batch(2, 5, c.vocab, 71);
  calibrate_activations(m, batch, 0.05);
  Graph g;
  ForwardContext ctx(g, m, ForwardOptions{});
  const Tensor wq = ctx.quantize_weight(m.weight_scale(0, 0), m.layers[0].wq, ctx.bits_w()).value();
  std::set<double> distinct(wq.data().begin(), wq.data().end());
  EXPECT_LE(distinct.size(), 3u);
  // The embedding table is quantized as a whole; only membership is checked.
  const double s = m.embedding_scale().get();
  const Tensor emb = embed(ctx, batch).value();
  (void)emb;
  const Tensor we = ctx.quantize_weight(m.embedding_scale(), m.word_emb, ctx.bits_e()).value();
  for (double x : we.data()) EXPECT_TRUE(x == 0.0 || x == s || x == -s);
}

TEST(Forward, UninitializedScaleThrows) {
  ModelConfig c = small(1);
  c.set_bits(4, 4, 8);
  ModelState m = ModelState::random(c, 80);
  Graph g;
  EXPECT_THROW(forward_model(g, m, random_batch(1, 3, c.vocab, 81), ForwardOptions{}), std::logic_error);
}

TEST(Forward, RejectsBadBatch) {
  ModelState m = ModelState::random(small(1), 90);
  Graph g;
  ForwardOptions opt;
  opt.mode = ForwardMode::kTeacher;
  Batch bad = random_batch(1, 3, m.config().vocab, 91);
  bad.tokens[0] = m.config().vocab;
  EXPECT_ANY_THROW(forward_model(g, m, bad, opt));
  Batch long_seq = random_batch(1, m.config().max_seq + 1, m.config().vocab, 92);
  EXPECT_ANY_THROW(forward_model(g, m, long_seq, opt));
}

TEST(ModelConfig, BitsParsingAndValidation) {
  EXPECT_EQ(parse_bits("2-2-8"), std::make_tuple(2, 2, 8));
  EXPECT_THROW(parse_bits("3-2-8"), std::invalid_argument);
  EXPECT_THROW(parse_bits("2-2"), std::invalid_argument);
  ModelConfig c = small();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
