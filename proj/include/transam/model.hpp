// Transformer matcher over serialized few-shot episodes.
//
// A query sequence is [CLS, h_1, t_1, ..., h_K, t_K, h_q, t_q]. Each block
// runs, per head, a masked local attention whose queries and keys are
// rotated by head/tail role, and an unmasked global attention whose scores
// add a triple-position term; the two head outputs are summed, concatenated
// across heads and projected. Blocks are post-norm:
//
//   h  = LN(X + MHA(X))
//   X' = LN(h + FFN(h))
//
// The final CLS row feeds a two-way softmax head.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "transam/encoder.hpp"
#include "transam/graph.hpp"
#include "transam/sampling.hpp"
#include "transam/tensor.hpp"

namespace transam {

enum class MaskMode {
  Literal,  // the printed mask rule, including t_i <-> h_{i+1} links
  Block,    // each slot sees itself, its pair partner, and CLS sees all
};

std::string to_string(MaskMode mode);
MaskMode parse_mask_mode(const std::string& text);

struct ModelConfig {
  std::size_t d_e = 100;  // per-head width, also the entity embedding width
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t K = 1;
  double theta_base = 10000.0;
  MaskMode mask_mode = MaskMode::Literal;
  std::size_t ffn_hidden = 0;  // 0 selects 4 * width()
  double dropout = 0.1;

  void validate() const;
  std::size_t width() const { return heads * d_e; }
  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 4 * width(); }
  std::size_t sequence_length() const { return 2 * K + 3; }

  bool operator==(const ModelConfig&) const = default;
};

struct AttentionHeadParams {
  Tensor WQ, WK, WV;  // D x d_e
  Tensor UQ, UK;      // d_e x d_e, position projections
};

struct BlockParams {
  std::vector<AttentionHeadParams> heads;
  Tensor WO;  // D x D
  Tensor ffn_in, ffn_in_bias;    // D x F, F
  Tensor ffn_out, ffn_out_bias;  // F x D, D
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
};

struct HeadParams {
  Tensor W_in;  // d_e x D, entry projection
  Tensor W4;    // d_e x D
  Tensor U2;    // d_e x 2
};

struct QuerySequence {
  std::vector<EntityId> ids;
  int label = 0;
};

/// Label is 1 when `query` is the episode's positive query.
QuerySequence build_sequence(const Episode& episode, const EntityPair& query, EntityId cls_id);

/// (2K+3) x (2K+3) additive mask of 0 and -inf.
Tensor local_mask(std::size_t K, MaskMode mode);

/// 0 for CLS, 1 for heads (odd slots), 2 for tails (even slots >= 2).
int role_index(std::size_t position);
std::vector<int> sequence_roles(std::size_t K);

/// [0, 1, 1, 2, 2, ..., K+1, K+1].
std::vector<std::int32_t> global_positions(std::size_t K);

/// Softmax weights captured for inspection.
struct HeadTrace {
  Tensor local_weights;
  Tensor global_weights;
};

struct ForwardTrace {
  std::vector<std::vector<HeadTrace>> blocks;  // [block][head]
};

/// Masked, role-rotated attention for one head; returns n x d_e.
Tensor local_attention(const Tensor& X, const AttentionHeadParams& head, const Tensor& mask,
                       std::span<const int> roles, double theta_base, Tensor* weights = nullptr);

/// Content plus triple-position attention for one head; returns n x d_e.
Tensor global_attention(const Tensor& X, const Tensor& position_table, const AttentionHeadParams& head,
                        std::span<const std::int32_t> positions, Tensor* weights = nullptr);

/// Per-head local + global, concatenated across heads, times W^O.
Tensor mha_combine(std::span<const Tensor> locals, std::span<const Tensor> globals, const Tensor& WO);

class TransamModel {
 public:
  TransamModel() = default;
  TransamModel(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  std::vector<BlockParams>& blocks() { return blocks_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  Tensor& position_table() { return position_table_; }
  const Tensor& position_table() const { return position_table_; }
  HeadParams& head() { return head_; }
  const HeadParams& head() const { return head_; }

  const Tensor& mask() const { return mask_; }
  std::span<const int> roles() const { return roles_; }
  std::span<const std::int32_t> positions() const { return positions_; }

  std::vector<NamedTensor> named_parameters() const;

 private:
  ModelConfig config_;
  std::vector<BlockParams> blocks_;
  Tensor position_table_;  // (K+2) x d_e, shared by every block
  HeadParams head_;
  Tensor mask_;
  std::vector<int> roles_;
  std::vector<std::int32_t> positions_;
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
  ForwardTrace* trace = nullptr;
};

Tensor transformer_block(const Tensor& X, const BlockParams& block, const TransamModel& model,
                         const ForwardOptions& options = {}, std::vector<HeadTrace>* trace = nullptr);

/// Final CLS state, 1 x D.
Tensor forward(const QuerySequence& sequence, const EncoderParams& encoder, const NeighborIndex& neighbors,
               const TransamModel& model, const ForwardOptions& options = {});

/// 1 x 2 probabilities; column 1 is the probability the query holds.
Tensor predict(const Tensor& z_cls, const HeadParams& head);

Tensor bce_loss(std::span<const Tensor> predictions, std::span<const int> labels);

/// Probability that the sequence's query holds, without recording history.
double score_sequence(const QuerySequence& sequence, const EncoderParams& encoder, const NeighborIndex& neighbors,
                      const TransamModel& model);

}  // namespace transam
