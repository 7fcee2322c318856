// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/transformer.hpp"

#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kdlsq/ops.hpp"

namespace kdlsq {
namespace {

constexpr std::array<const char*, kWeightSitesPerLayer> kWeightNames = {
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"};

constexpr std::array<const char*, kActivationSitesPerLayer> kActivationNames = {
    "attn.wq.input",      "attn.wk.input",       "attn.wv.input",       "attn.wo.input",
    "ffn.w1.input",       "ffn.w2.input",        "attn.scores.query",   "attn.scores.key",
    "attn.context.probs", "attn.context.value",
};

constexpr std::size_t kSitesPerLayer = kWeightSitesPerLayer + kActivationSitesPerLayer;

bool valid_bits(int b) { return b == 2 || b == 4 || b == 6 || b == 8 || b == kFullPrecisionBits; }

std::string layer_prefix(std::size_t layer) { return "layer." + std::to_string(layer) + "."; }

Tensor& weight_tensor(LayerParams& p, std::size_t which) {
  switch (which) {
    case 0: return p.wq;
    case 1: return p.wk;
    case 2: return p.wv;
    case 3: return p.wo;
    case 4: return p.w1;
    case 5: return p.w2;
    default: throw std::out_of_range("weight site index");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (layers == 0 || hidden == 0 || heads == 0 || ffn == 0 || vocab == 0 || max_seq == 0 || num_classes < 2 ||
      segments == 0) {
    throw std::invalid_argument("model config: all dimensions must be positive (num_classes >= 2)");
  }
  if (hidden % heads != 0) {
    throw std::invalid_argument("model config: hidden size " + std::to_string(hidden) +
                                " is not divisible by head count " + std::to_string(heads));
  }
  if (!valid_bits(bits_w) || !valid_bits(bits_e) || !valid_bits(bits_a)) {
    throw std::invalid_argument("model config: bits must be one of 2, 4, 6, 8, 32 (got " + bits_label() + ")");
  }
}

std::string ModelConfig::bits_label() const {
  return std::to_string(bits_w) + "-" + std::to_string(bits_e) + "-" + std::to_string(bits_a);
}

void ModelConfig::set_bits(int w, int e, int a) {
  bits_w = w;
  bits_e = e;
  bits_a = a;
}

std::tuple<int, int, int> parse_bits(std::string_view text) {
  std::array<int, 3> v{};
  std::istringstream is{std::string(text)};
  char d1 = 0;
  char d2 = 0;
  if (!(is >> v[0] >> d1 >> v[1] >> d2 >> v[2]) || d1 != '-' || d2 != '-' || !is.eof()) {
    throw std::invalid_argument("bits must look like W-E-A (e.g. 2-2-8), got '" + std::string(text) + "'");
  }
  for (int b : v) {
    if (!valid_bits(b)) throw std::invalid_argument("unsupported bit width in '" + std::string(text) + "'");
  }
  return {v[0], v[1], v[2]};
}

SiteCensus expected_census(const ModelConfig& config) {
  return {kWeightSitesPerLayer * config.layers + 1, kActivationSitesPerLayer * config.layers};
}

std::string activation_site_id(std::size_t layer, ActivationSite site) {
  return layer_prefix(layer) + kActivationNames.at(static_cast<std::size_t>(site));
}

std::string weight_site_id(std::size_t layer, std::size_t which) {
  return layer_prefix(layer) + kWeightNames.at(which);
}

ModelState::ModelState(ModelConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.hidden;
  word_emb = Tensor({config_.vocab, d});
  seg_emb = Tensor({config_.segments, d});
  pos_emb = Tensor({config_.max_seq, d});
  layers.resize(config_.layers);
  for (auto& p : layers) {
    p.wq = Tensor({d, d});
    p.wk = Tensor({d, d});
    p.wv = Tensor({d, d});
    p.wo = Tensor({d, d});
    p.w1 = Tensor({d, config_.ffn});
    p.b1 = Tensor({config_.ffn});
    p.w2 = Tensor({config_.ffn, d});
    p.b2 = Tensor({d});
    p.ln1_gain = Tensor({d}, 1.0);
    p.ln1_bias = Tensor({d});
    p.ln2_gain = Tensor({d}, 1.0);
    p.ln2_bias = Tensor({d});
  }
  cls_weight = Tensor({d, config_.num_classes});
  cls_bias = Tensor({config_.num_classes});
  build_sites();
}

void ModelState::build_sites() {
  scales_.clear();
  scale_index_.clear();
  scales_.emplace_back(std::string(kEmbeddingSiteId), SiteKind::kWeight);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    for (std::size_t w = 0; w < kWeightSitesPerLayer; ++w) scales_.emplace_back(weight_site_id(l, w), SiteKind::kWeight);
    for (std::size_t a = 0; a < kActivationSitesPerLayer; ++a) {
      scales_.emplace_back(activation_site_id(l, static_cast<ActivationSite>(a)), SiteKind::kActivation);
    }
  }
  for (std::size_t i = 0; i < scales_.size(); ++i) scale_index_.emplace(scales_[i].site_id, i);

  SiteCensus found;
  for (const auto& s : scales_) {
    (s.kind == SiteKind::kWeight ? found.weight_sites : found.activation_sites) += 1;
  }
  const SiteCensus want = expected_census(config_);
  if (found.weight_sites != want.weight_sites || found.activation_sites != want.activation_sites ||
      scale_index_.size() != scales_.size()) {
    throw std::logic_error("quantization site census mismatch");
  }
}

ModelState ModelState::random(const ModelConfig& config, std::uint64_t seed) {
  ModelState m(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& [name, t] : m.named_parameters()) {
    const bool is_matrix = t->rank() == 2;
    if (!is_matrix) continue;  // biases stay zero, gains stay one
    for (double& v : t->data()) v = normal(rng);
  }
  return m;
}

void ModelState::set_bits(int w, int e, int a) {
  ModelConfig c = config_;
  c.set_bits(w, e, a);
  c.validate();
  config_ = c;
}

std::vector<std::pair<std::string, Tensor*>> ModelState::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("emb.word", &word_emb);
  out.emplace_back("emb.segment", &seg_emb);
  out.emplace_back("emb.position", &pos_emb);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& p = layers[l];
    const std::string pre = layer_prefix(l);
    out.emplace_back(pre + "attn.wq", &p.wq);
    out.emplace_back(pre + "attn.wk", &p.wk);
    out.emplace_back(pre + "attn.wv", &p.wv);
    out.emplace_back(pre + "attn.wo", &p.wo);
    out.emplace_back(pre + "ln1.gain", &p.ln1_gain);
    out.emplace_back(pre + "ln1.bias", &p.ln1_bias);
    out.emplace_back(pre + "ffn.w1", &p.w1);
    out.emplace_back(pre + "ffn.b1", &p.b1);
    out.emplace_back(pre + "ffn.w2", &p.w2);
    out.emplace_back(pre + "ffn.b2", &p.b2);
    out.emplace_back(pre + "ln2.gain", &p.ln2_gain);
    out.emplace_back(pre + "ln2.bias", &p.ln2_bias);
  }
  out.emplace_back("classifier.weight", &cls_weight);
  out.emplace_back("classifier.bias", &cls_bias);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelState::named_parameters() const {
  auto mutable_list = const_cast<ModelState*>(this)->named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(std::move(name), t);
  return out;
}

ScaleFactor& ModelState::scale(std::string_view site_id) {
  auto it = scale_index_.find(std::string(site_id));
  if (it == scale_index_.end()) throw std::out_of_range("no quantization site '" + std::string(site_id) + "'");
  return scales_[it->second];
}

const ScaleFactor& ModelState::scale(std::string_view site_id) const {
  return const_cast<ModelState*>(this)->scale(site_id);
}

ScaleFactor& ModelState::weight_scale(std::size_t layer, std::size_t which) {
  if (layer >= config_.layers || which >= kWeightSitesPerLayer) throw std::out_of_range("weight site");
  return scales_[1 + layer * kSitesPerLayer + which];
}

ScaleFactor& ModelState::embedding_scale() { return scales_[0]; }

ScaleFactor& ModelState::activation_scale(std::size_t layer, ActivationSite site) {
  const auto a = static_cast<std::size_t>(site);
  if (layer >= config_.layers || a >= kActivationSitesPerLayer) throw std::out_of_range("activation site");
  return scales_[1 + layer * kSitesPerLayer + kWeightSitesPerLayer + a];
}

const Tensor* ModelState::weight_of(std::string_view site_id) const {
  const ScaleFactor& s = scale(site_id);
  if (s.kind != SiteKind::kWeight) return nullptr;
  for (const auto& [name, t] : named_parameters()) {
    if (name == site_id) return t;
  }
  throw std::logic_error("weight site without parameter: " + std::string(site_id));
}

void ModelState::set_trainable(bool on) {
  for (auto& [name, t] : named_parameters()) t->set_requires_grad(on);
  for (auto& s : scales_) s.value.set_requires_grad(on);
}

void ModelState::zero_grad() {
  for (auto& [name, t] : named_parameters()) t->zero_grad();
  for (auto& s : scales_) s.value.zero_grad();
}

// ---------------------------------------------------------------------------

ForwardContext::ForwardContext(Graph& graph, ModelState& state, const ForwardOptions& options)
    : graph_(graph), state_(state), options_(options) {
  const ModelConfig& c = state.config();
  const bool full_precision = options.mode == ForwardMode::kTeacher || options.capture != nullptr;
  bits_w_ = full_precision ? kFullPrecisionBits : c.bits_w;
  bits_e_ = full_precision ? kFullPrecisionBits : c.bits_e;
  bits_a_ = full_precision ? kFullPrecisionBits : c.bits_a;
  dropout_ = full_precision ? 0.0 : options.dropout;
  if (dropout_ > 0.0 && options.rng == nullptr) {
    throw std::invalid_argument("forward: dropout requires a random generator");
  }
}

Var ForwardContext::param(Tensor& t) {
  if (auto it = leaves_.find(&t); it != leaves_.end()) return it->second;
  Var v = graph_.parameter(t);
  leaves_.emplace(&t, v);
  return v;
}

Var ForwardContext::quantize(ScaleFactor& site, Var x, const QuantSpec& spec) {
  if (!site.initialized) {
    throw std::logic_error("scale-factor for site '" + site.site_id + "' is uninitialized; calibrate first");
  }
  const auto cache_key = std::make_pair(static_cast<const ScaleFactor*>(&site), x.id());
  if (auto it = quantized_.find(cache_key); it != quantized_.end()) return it->second;

  Var s = param(site.value);
  const RoundingSnapshot* frozen = nullptr;
  if (options_.freeze) {
    const std::string key = site.site_id + "#" + std::to_string(uses_[site.site_id]++);
    if (options_.freeze->replay) {
      auto it = options_.freeze->sites.find(key);
      if (it == options_.freeze->sites.end()) throw std::logic_error("no rounding snapshot for " + key);
      frozen = &it->second;
    } else {
      options_.freeze->sites[key] = capture_rounding(x.value(), s.value()[0], spec);
    }
  }
  Var out = fake_quantize(x, s, spec, site.kind, frozen);
  quantized_.emplace(cache_key, out);
  return out;
}

Var ForwardContext::quantize_weight(ScaleFactor& site, Tensor& weight, int bits) {
  Var w = param(weight);
  if (bits == kFullPrecisionBits) return w;
  return quantize(site, w, QuantSpec(bits, true));
}

Var ForwardContext::quantize_activation(ScaleFactor& site, Var x, bool is_signed) {
  if (options_.capture) {
    auto [it, inserted] = options_.capture->try_emplace(site.site_id, x.value());
    if (!inserted) {
      std::vector<double> merged = it->second.values();
      merged.insert(merged.end(), x.value().data().begin(), x.value().data().end());
      const std::size_t n = merged.size();
      it->second = Tensor({n}, std::move(merged));
    }
    return x;
  }
  if (bits_a_ == kFullPrecisionBits) return x;
  return quantize(site, x, QuantSpec(bits_a_, is_signed));
}

Var ForwardContext::maybe_dropout(Var x) {
  if (dropout_ == 0.0) return x;
  return dropout(x, dropout_, *options_.rng);
}

// ---------------------------------------------------------------------------

namespace {

void validate_batch(const ModelConfig& c, const Batch& b) {
  if (b.size == 0 || b.seq_len == 0) throw DimensionError("batch: empty");
  if (b.seq_len > c.max_seq) {
    throw DimensionError("batch: sequence length " + std::to_string(b.seq_len) + " exceeds max_seq " +
                         std::to_string(c.max_seq));
  }
  if (b.tokens.size() != b.size * b.seq_len || b.segments.size() != b.size * b.seq_len) {
    throw DimensionError("batch: token/segment count does not match size x seq_len");
  }
}

double score_scale(const ModelConfig& c) {
  const double denom = c.attention_scaling == AttentionScaling::kHiddenSize ? static_cast<double>(c.hidden)
                                                                           : static_cast<double>(c.head_dim());
  return 1.0 / std::sqrt(denom);
}

}  // namespace

Var embed(ForwardContext& ctx, const Batch& batch) {
  ModelState& st = ctx.state();
  validate_batch(st.config(), batch);
  const Shape prefix{batch.size, batch.seq_len};
  std::vector<std::size_t> positions(batch.size * batch.seq_len);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % batch.seq_len;

  Var words = ctx.quantize_weight(st.embedding_scale(), st.word_emb, ctx.bits_e());
  Var h = embedding(words, batch.tokens, prefix);
  h = add(h, embedding(ctx.param(st.seg_emb), batch.segments, prefix));
  h = add(h, embedding(ctx.param(st.pos_emb), positions, prefix));
  return h;
}

std::pair<Var, Var> attention_head(ForwardContext& ctx, std::size_t layer, Var h, std::size_t head) {
  ModelState& st = ctx.state();
  const ModelConfig& c = st.config();
  if (head >= c.heads) throw std::out_of_range("attention_head: head index");
  LayerParams& p = st.layers.at(layer);
  const std::size_t dh = c.head_dim();
  const std::size_t lo = head * dh;
  const std::size_t hi = lo + dh;

  auto act = [&](ActivationSite site, Var x, bool is_signed = true) {
    return ctx.quantize_activation(st.activation_scale(layer, site), x, is_signed);
  };
  auto weight = [&](std::size_t which) {
    return slice_last(ctx.quantize_weight(st.weight_scale(layer, which), weight_tensor(p, which), ctx.bits_w()), lo, hi);
  };

  Var q = matmul(act(ActivationSite::kQueryInput, h), weight(0));
  Var k = matmul(act(ActivationSite::kKeyInput, h), weight(1));
  Var v = matmul(act(ActivationSite::kValueInput, h), weight(2));
  Var kt = permute(k, {0, 2, 1});
  Var scores = scale(matmul(act(ActivationSite::kScoreQuery, q), act(ActivationSite::kScoreKey, kt)), score_scale(c));
  // Dropout acts on the quantized probabilities so the quantizer sees the
  // same distribution in training and evaluation.
  Var probs = ctx.maybe_dropout(act(ActivationSite::kContextProbs, softmax(scores, 2), false));
  Var out = matmul(probs, act(ActivationSite::kContextValue, v));
  return {out, scores};
}

std::pair<Var, Var> mha(ForwardContext& ctx, std::size_t layer, Var h) {
  ModelState& st = ctx.state();
  const ModelConfig& c = st.config();
  LayerParams& p = st.layers.at(layer);
  const Shape& hs = h.shape();
  if (hs.size() != 3 || hs[2] != c.hidden) throw DimensionError("mha: expected [batch, n, d], got " + shape_str(hs));
  const std::size_t b = hs[0];
  const std::size_t n = hs[1];
  const std::size_t nh = c.heads;
  const std::size_t dh = c.head_dim();

  auto act = [&](ActivationSite site, Var x, bool is_signed = true) {
    return ctx.quantize_activation(st.activation_scale(layer, site), x, is_signed);
  };
  auto weight = [&](std::size_t which) {
    return ctx.quantize_weight(st.weight_scale(layer, which), weight_tensor(p, which), ctx.bits_w());
  };

  Var q = matmul(act(ActivationSite::kQueryInput, h), weight(0));
  Var k = matmul(act(ActivationSite::kKeyInput, h), weight(1));
  Var v = matmul(act(ActivationSite::kValueInput, h), weight(2));

  Var qh = permute(reshape(q, {b, n, nh, dh}), {0, 2, 1, 3});  // [b, heads, n, dh]
  Var kt = permute(reshape(k, {b, n, nh, dh}), {0, 2, 3, 1});  // [b, heads, dh, n]
  Var vh = permute(reshape(v, {b, n, nh, dh}), {0, 2, 1, 3});

  Var scores = scale(matmul(act(ActivationSite::kScoreQuery, qh), act(ActivationSite::kScoreKey, kt)), score_scale(c));
  Var probs = ctx.maybe_dropout(act(ActivationSite::kContextProbs, softmax(scores, 3), false));
  Var context = matmul(probs, act(ActivationSite::kContextValue, vh));
  Var merged = reshape(permute(context, {0, 2, 1, 3}), {b, n, c.hidden});
  Var out = matmul(act(ActivationSite::kOutputInput, merged), weight(3));
  return {out, scores};
}

Var ffn(ForwardContext& ctx, std::size_t layer, Var x) {
  ModelState& st = ctx.state();
  LayerParams& p = st.layers.at(layer);
  Var x1 = ctx.quantize_activation(st.activation_scale(layer, ActivationSite::kFfn1Input), x, true);
  Var w1 = ctx.quantize_weight(st.weight_scale(layer, 4), p.w1, ctx.bits_w());
  Var inner = gelu(add_bias(matmul(x1, w1), ctx.param(p.b1)));
  Var x2 = ctx.quantize_activation(st.activation_scale(layer, ActivationSite::kFfn2Input), inner, true);
  Var w2 = ctx.quantize_weight(st.weight_scale(layer, 5), p.w2, ctx.bits_w());
  return add_bias(matmul(x2, w2), ctx.param(p.b2));
}

std::pair<Var, Var> transformer_layer(ForwardContext& ctx, std::size_t layer, Var h) {
  LayerParams& p = ctx.state().layers.at(layer);
  auto [attn, scores] = mha(ctx, layer, h);
  Var x = layer_norm(add(h, ctx.maybe_dropout(attn)), ctx.param(p.ln1_gain), ctx.param(p.ln1_bias));
  Var f = ctx.maybe_dropout(ffn(ctx, layer, x));
  Var out = layer_norm(add(x, f), ctx.param(p.ln2_gain), ctx.param(p.ln2_bias));
  return {out, scores};
}

ForwardTrace forward_model(Graph& graph, ModelState& state, const Batch& batch, const ForwardOptions& options) {
  ForwardContext ctx(graph, state, options);
  ForwardTrace trace;
  Var h = ctx.maybe_dropout(embed(ctx, batch));
  trace.hidden.push_back(h);
  for (std::size_t l = 0; l < state.config().layers; ++l) {
    auto [next, scores] = transformer_layer(ctx, l, h);
    trace.hidden.push_back(next);
    trace.scores.push_back(scores);
    h = next;
  }
  Var pooled = mean_axis(h, 1);
  trace.logits = add_bias(matmul(pooled, ctx.param(state.cls_weight)), ctx.param(state.cls_bias));
  return trace;
}

ForwardTrace detach_trace(const ForwardTrace& trace, Graph& graph) {
  ForwardTrace out;
  for (const Var& v : trace.hidden) out.hidden.push_back(graph.constant(v.value()));
  for (const Var& v : trace.scores) out.scores.push_back(graph.constant(v.value()));
  out.logits = graph.constant(trace.logits.value());
  return out;
}

}  // namespace kdlsq
