// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kdlsq/graph.hpp"
#include "kdlsq/lsq.hpp"

namespace kdlsq {

/// Bit width meaning "quantization disabled" for a site class.
inline constexpr int kFullPrecisionBits = 32;

/// How attention scores are scaled before the softmax.
enum class AttentionScaling {
  kHiddenSize,  // 1/sqrt(d), the default
  kHeadSize,    // 1/sqrt(d / heads), the common convention
};

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t vocab = 64;
  std::size_t max_seq = 16;
  std::size_t num_classes = 2;
  std::size_t segments = 2;
  int bits_w = kFullPrecisionBits;
  int bits_e = kFullPrecisionBits;
  int bits_a = kFullPrecisionBits;
  AttentionScaling attention_scaling = AttentionScaling::kHiddenSize;

  std::size_t head_dim() const { return hidden / heads; }
  /// Throws std::invalid_argument on inconsistent dimensions or unsupported bits.
  void validate() const;
  /// "W-E-A", e.g. "2-2-8".
  std::string bits_label() const;
  void set_bits(int w, int e, int a);
};

/// Parses "W-E-A" into three bit widths; throws std::invalid_argument.
std::tuple<int, int, int> parse_bits(std::string_view text);

/// Role of an activation quantization site inside one Transformer layer.
enum class ActivationSite : std::size_t {
  kQueryInput,    // input of the W^Q linear
  kKeyInput,      // input of the W^K linear
  kValueInput,    // input of the W^V linear
  kOutputInput,   // input of the W^O linear
  kFfn1Input,     // input of the W^1 linear
  kFfn2Input,     // input of the W^2 linear
  kScoreQuery,    // left operand of Q K^T
  kScoreKey,      // right operand of Q K^T
  kContextProbs,  // left operand of softmax(.) V; non-negative, unsigned levels
  kContextValue,  // right operand of softmax(.) V
  kCount
};

inline constexpr std::size_t kActivationSitesPerLayer = static_cast<std::size_t>(ActivationSite::kCount);
inline constexpr std::size_t kWeightSitesPerLayer = 6;

struct SiteCensus {
  std::size_t weight_sites = 0;
  std::size_t activation_sites = 0;
};

/// Expected number of quantization sites for a configuration: one weight
/// site per W^Q, W^K, W^V, W^O, W^1, W^2 and the word embedding; ten
/// activation sites per layer (six linear inputs, two operands for each of
/// the two attention products).
SiteCensus expected_census(const ModelConfig& config);

struct LayerParams {
  Tensor wq, wk, wv, wo;  // [d, d], heads concatenated along columns
  Tensor w1, b1;          // [d, d_ff], [d_ff]
  Tensor w2, b2;          // [d_ff, d], [d]
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
};

/// All parameters and scale-factors of one model instance.
///
/// Scale-factors exist only for quantizable tensors: W^E and the six
/// projection matrices of each layer, plus every activation site. Segment and
/// position embeddings, biases, layer-norm parameters and the classifier are
/// never quantized.
class ModelState {
 public:
  ModelState() = default;
  /// Zero-initialised parameters with the given shapes.
  explicit ModelState(ModelConfig config);

  /// BERT-style random initialisation: N(0, 0.02) matrices and embeddings,
  /// zero biases, unit layer-norm gains.
  static ModelState random(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  /// Replaces the W-E-A assignment; dimensions stay fixed.
  void set_bits(int w, int e, int a);

  Tensor word_emb, seg_emb, pos_emb;
  std::vector<LayerParams> layers;
  Tensor cls_weight, cls_bias;

  /// (stable dotted name, tensor) for every parameter, in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;

  std::vector<ScaleFactor>& scales() noexcept { return scales_; }
  const std::vector<ScaleFactor>& scales() const noexcept { return scales_; }
  ScaleFactor& scale(std::string_view site_id);
  const ScaleFactor& scale(std::string_view site_id) const;
  ScaleFactor& weight_scale(std::size_t layer, std::size_t which);  // which in [0, 6): q,k,v,o,1,2
  ScaleFactor& embedding_scale();
  ScaleFactor& activation_scale(std::size_t layer, ActivationSite site);

  /// Parameter tensor guarded by a weight site, or nullptr for activation sites.
  const Tensor* weight_of(std::string_view site_id) const;

  /// Marks every parameter and scale-factor as trainable (or frozen).
  void set_trainable(bool on);
  void zero_grad();

 private:
  void build_sites();

  ModelConfig config_;
  std::vector<ScaleFactor> scales_;
  std::unordered_map<std::string, std::size_t> scale_index_;
};

std::string activation_site_id(std::size_t layer, ActivationSite site);
std::string weight_site_id(std::size_t layer, std::size_t which);
inline constexpr std::string_view kEmbeddingSiteId = "emb.word";

/// A fixed-length batch of token sequences.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> tokens;    // size * seq_len
  std::vector<std::size_t> segments;  // size * seq_len
  std::vector<int> labels;            // size
};

enum class ForwardMode { kTeacher, kStudent };

/// Records the input of every activation site, keyed by site id.
using ActivationCapture = std::map<std::string, Tensor>;

/// Rounding snapshots for every enabled site. While recording, each
/// quantizer stores its regions and residuals; while replaying, quantizers
/// evaluate the smooth surrogate instead of rounding.
struct RoundingFreeze {
  bool replay = false;
  std::map<std::string, RoundingSnapshot> sites;
};

struct ForwardOptions {
  ForwardMode mode = ForwardMode::kStudent;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;  // required when dropout > 0
  /// When set, the pass runs at full precision and fills the capture.
  ActivationCapture* capture = nullptr;
  RoundingFreeze* freeze = nullptr;
};

/// Values exposed for distillation. hidden[0] is the embedding output and
/// hidden[l] the output of layer l; scores[l] holds the pre-softmax scaled
/// attention scores of layer l, shaped [batch, heads, n, n].
struct ForwardTrace {
  std::vector<Var> hidden;
  std::vector<Var> scores;
  Var logits;
};

/// Shared state of one forward pass.
class ForwardContext {
 public:
  ForwardContext(Graph& graph, ModelState& state, const ForwardOptions& options);

  Graph& graph() const noexcept { return graph_; }
  ModelState& state() const noexcept { return state_; }
  const ForwardOptions& options() const noexcept { return options_; }
  double dropout_rate() const noexcept { return dropout_; }

  int bits_w() const noexcept { return bits_w_; }
  int bits_e() const noexcept { return bits_e_; }
  int bits_a() const noexcept { return bits_a_; }

  /// Parameter leaf, recorded once per pass.
  Var param(Tensor& t);
  Var quantize_weight(ScaleFactor& site, Tensor& weight, int bits);
  Var quantize_activation(ScaleFactor& site, Var x, bool is_signed);
  Var maybe_dropout(Var x);

 private:
  Var quantize(ScaleFactor& site, Var x, const QuantSpec& spec);

  Graph& graph_;
  ModelState& state_;
  ForwardOptions options_;
  int bits_w_;
  int bits_e_;
  int bits_a_;
  double dropout_;
  std::unordered_map<const Tensor*, Var> leaves_;
  std::map<std::pair<const ScaleFactor*, std::size_t>, Var> quantized_;  // (site, input node) -> output
  std::unordered_map<std::string, std::size_t> uses_;
};

/// H_1 = lookup(W^E) + lookup(W^S) + lookup(W^P); only W^E is quantized.
Var embed(ForwardContext& ctx, const Batch& batch);

/// One attention head of `layer` on H [batch, n, d]: returns the head output
/// [batch, n, d_h] and its score tensor [batch, n, n].
std::pair<Var, Var> attention_head(ForwardContext& ctx, std::size_t layer, Var h, std::size_t head);

/// Multi-head attention; returns the projected output and the stacked scores
/// [batch, heads, n, n].
std::pair<Var, Var> mha(ForwardContext& ctx, std::size_t layer, Var h);

Var ffn(ForwardContext& ctx, std::size_t layer, Var x);

/// X = LN(H + MHA(H)); H' = LN(X + FFN(X)). Returns H' and the scores.
std::pair<Var, Var> transformer_layer(ForwardContext& ctx, std::size_t layer, Var h);

/// Full forward pass. Teacher mode disables quantization and dropout.
/// Throws std::logic_error when an enabled site has an uninitialized scale.
ForwardTrace forward_model(Graph& graph, ModelState& state, const Batch& batch, const ForwardOptions& options);

/// Copies every value of `trace` into `graph` as constants.
ForwardTrace detach_trace(const ForwardTrace& trace, Graph& graph);

}  // namespace kdlsq
