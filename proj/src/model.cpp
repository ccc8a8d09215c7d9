#include "transam/model.hpp"

#include <cmath>
#include <limits>

#include "transam/ops.hpp"

namespace transam {

std::string to_string(MaskMode mode) { return mode == MaskMode::Literal ? "literal" : "block"; }

MaskMode parse_mask_mode(const std::string& text) {
  if (text == "literal") return MaskMode::Literal;
  if (text == "block") return MaskMode::Block;
  throw std::invalid_argument("unknown mask mode '" + text + "' (expected literal or block)");
}

void ModelConfig::validate() const {
  if (d_e < 2 || d_e % 2 != 0) throw std::invalid_argument("d_e must be even and at least 2 for rotary pairs");
  if (heads < 1) throw std::invalid_argument("heads must be at least 1");
  if (layers < 1) throw std::invalid_argument("layers must be at least 1");
  if (K < 1) throw std::invalid_argument("K must be at least 1");
  if (!(theta_base > 0.0)) throw std::invalid_argument("theta_base must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
}

QuerySequence build_sequence(const Episode& episode, const EntityPair& query, EntityId cls_id) {
  QuerySequence seq;
  seq.ids.reserve(2 * episode.support.size() + 3);
  seq.ids.push_back(cls_id);
  for (const EntityPair& pair : episode.support) {
    seq.ids.push_back(pair.head);
    seq.ids.push_back(pair.tail);
  }
  seq.ids.push_back(query.head);
  seq.ids.push_back(query.tail);
  seq.label = query == episode.query_pos ? 1 : 0;
  return seq;
}

Tensor local_mask(std::size_t K, MaskMode mode) {
  if (K < 1) throw std::invalid_argument("local_mask: K must be at least 1");
  const std::size_t n = 2 * K + 3;
  const double blocked = -std::numeric_limits<double>::infinity();
  std::vector<double> m(n * n, blocked);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      bool open = i == 0 || i == j;
      if (mode == MaskMode::Literal) {
        open = open || (j == i + 1 && i >= 1 && i <= 2 * K + 1) || (j + 1 == i && i >= 2 && i <= 2 * K + 2);
      } else if (i >= 1) {
        const std::size_t partner = i % 2 == 1 ? i + 1 : i - 1;
        open = open || j == partner;
      }
      if (open) m[i * n + j] = 0.0;
    }
  }
  return Tensor::matrix(n, n, std::move(m));
}

int role_index(std::size_t position) {
  if (position == 0) return 0;
  return position % 2 == 1 ? 1 : 2;
}

std::vector<int> sequence_roles(std::size_t K) {
  std::vector<int> roles(2 * K + 3);
  for (std::size_t i = 0; i < roles.size(); ++i) roles[i] = role_index(i);
  return roles;
}

std::vector<std::int32_t> global_positions(std::size_t K) {
  if (K < 1) throw std::invalid_argument("global_positions: K must be at least 1");
  std::vector<std::int32_t> positions{0};
  for (std::size_t p = 1; p <= K + 1; ++p) {
    positions.push_back(static_cast<std::int32_t>(p));
    positions.push_back(static_cast<std::int32_t>(p));
  }
  return positions;
}

namespace {

struct Projected {
  Tensor Q, K, V;
};

Projected project(const Tensor& X, const AttentionHeadParams& head) {
  return {matmul(X, head.WQ), matmul(X, head.WK), matmul(X, head.WV)};
}

Tensor local_from_projected(const Projected& p, const Tensor& mask, std::span<const int> roles, double theta_base,
                            Tensor* weights) {
  const double d = static_cast<double>(p.Q.cols());
  const Tensor q = rotary_rows(p.Q, roles, theta_base);
  const Tensor k = rotary_rows(p.K, roles, theta_base);
  const Tensor scores = add(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(d)), mask);
  const Tensor attn = softmax_rows(scores);
  if (weights) *weights = attn.detach();
  return matmul(attn, p.V);
}

Tensor global_from_projected(const Projected& p, const Tensor& position_table, const AttentionHeadParams& head,
                             std::span<const std::int32_t> positions, Tensor* weights) {
  const double d = static_cast<double>(p.Q.cols());
  const Tensor P = gather_rows(position_table, positions);
  const Tensor content = matmul(p.Q, transpose(p.K));
  const Tensor position = matmul(matmul(P, head.UQ), transpose(matmul(P, head.UK)));
  const Tensor attn = softmax_rows(scale(add(content, position), 1.0 / std::sqrt(2.0 * d)));
  if (weights) *weights = attn.detach();
  return matmul(attn, p.V);
}

}  // namespace

Tensor local_attention(const Tensor& X, const AttentionHeadParams& head, const Tensor& mask,
                       std::span<const int> roles, double theta_base, Tensor* weights) {
  return local_from_projected(project(X, head), mask, roles, theta_base, weights);
}

Tensor global_attention(const Tensor& X, const Tensor& position_table, const AttentionHeadParams& head,
                        std::span<const std::int32_t> positions, Tensor* weights) {
  if (positions.size() != X.rows()) {
    throw DimensionError("global_attention: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(X.rows()) + " rows");
  }
  return global_from_projected(project(X, head), position_table, head, positions, weights);
}

Tensor mha_combine(std::span<const Tensor> locals, std::span<const Tensor> globals, const Tensor& WO) {
  if (locals.size() != globals.size() || locals.empty()) {
    throw DimensionError("mha_combine: " + std::to_string(locals.size()) + " local heads vs " +
                         std::to_string(globals.size()) + " global heads");
  }
  std::vector<Tensor> summed;
  summed.reserve(locals.size());
  for (std::size_t h = 0; h < locals.size(); ++h) summed.push_back(add(locals[h], globals[h]));
  return matmul(concat_cols(summed), WO);
}

TransamModel::TransamModel(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t D = config_.width(), d = config_.d_e, F = config_.ffn_width();
  for (std::size_t b = 0; b < config_.layers; ++b) {
    BlockParams block;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      block.heads.push_back({xavier_uniform(D, d, rng), xavier_uniform(D, d, rng), xavier_uniform(D, d, rng),
                             xavier_uniform(d, d, rng), xavier_uniform(d, d, rng)});
    }
    block.WO = xavier_uniform(D, D, rng);
    block.ffn_in = xavier_uniform(D, F, rng);
    block.ffn_in_bias = Tensor::zeros({F}, true);
    block.ffn_out = xavier_uniform(F, D, rng);
    block.ffn_out_bias = Tensor::zeros({D}, true);
    block.ln1_gain = Tensor::full({D}, 1.0, true);
    block.ln1_bias = Tensor::zeros({D}, true);
    block.ln2_gain = Tensor::full({D}, 1.0, true);
    block.ln2_bias = Tensor::zeros({D}, true);
    blocks_.push_back(std::move(block));
  }
  position_table_ = uniform_tensor({config_.K + 2, d}, 0.1, rng);
  head_.W_in = xavier_uniform(d, D, rng);
  head_.W4 = xavier_uniform(d, D, rng);
  // Small output projection so an untrained model predicts close to [0.5, 0.5].
  head_.U2 = uniform_tensor({d, 2}, 0.01, rng);

  mask_ = local_mask(config_.K, config_.mask_mode);
  roles_ = sequence_roles(config_.K);
  positions_ = global_positions(config_.K);
}

std::vector<NamedTensor> TransamModel::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const BlockParams& block = blocks_[b];
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    for (std::size_t h = 0; h < block.heads.size(); ++h) {
      const std::string hp = prefix + "head" + std::to_string(h) + ".";
      const AttentionHeadParams& head = block.heads[h];
      out.push_back({hp + "WQ", head.WQ});
      out.push_back({hp + "WK", head.WK});
      out.push_back({hp + "WV", head.WV});
      out.push_back({hp + "UQ", head.UQ});
      out.push_back({hp + "UK", head.UK});
    }
    out.push_back({prefix + "WO", block.WO});
    out.push_back({prefix + "ffn.W1", block.ffn_in});
    out.push_back({prefix + "ffn.b1", block.ffn_in_bias});
    out.push_back({prefix + "ffn.W2", block.ffn_out});
    out.push_back({prefix + "ffn.b2", block.ffn_out_bias});
    out.push_back({prefix + "ln1.gain", block.ln1_gain});
    out.push_back({prefix + "ln1.bias", block.ln1_bias});
    out.push_back({prefix + "ln2.gain", block.ln2_gain});
    out.push_back({prefix + "ln2.bias", block.ln2_bias});
  }
  out.push_back({"position_table", position_table_});
  out.push_back({"head.W_in", head_.W_in});
  out.push_back({"head.W4", head_.W4});
  out.push_back({"head.U2", head_.U2});
  return out;
}

namespace {

Tensor maybe_dropout(const Tensor& x, const TransamModel& model, const ForwardOptions& options) {
  const double rate = model.config().dropout;
  if (!options.training || rate <= 0.0) return x;
  if (!options.dropout_rng) throw std::invalid_argument("training with dropout needs an rng");
  return dropout(x, rate, *options.dropout_rng);
}

}  // namespace

Tensor transformer_block(const Tensor& X, const BlockParams& block, const TransamModel& model,
                         const ForwardOptions& options, std::vector<HeadTrace>* trace) {
  const ModelConfig& config = model.config();
  if (X.rows() != config.sequence_length() || X.cols() != config.width()) {
    throw DimensionError("transformer_block: input " + shape_to_string(X.shape()) + ", expected " +
                         std::to_string(config.sequence_length()) + "x" + std::to_string(config.width()));
  }
  std::vector<Tensor> locals, globals;
  if (trace) trace->assign(block.heads.size(), {});
  for (std::size_t h = 0; h < block.heads.size(); ++h) {
    const Projected p = project(X, block.heads[h]);
    locals.push_back(local_from_projected(p, model.mask(), model.roles(), config.theta_base,
                                          trace ? &(*trace)[h].local_weights : nullptr));
    globals.push_back(global_from_projected(p, model.position_table(), block.heads[h], model.positions(),
                                            trace ? &(*trace)[h].global_weights : nullptr));
  }
  const Tensor attended = maybe_dropout(mha_combine(locals, globals, block.WO), model, options);
  const Tensor h = layer_norm(add(X, attended), block.ln1_gain, block.ln1_bias);
  const Tensor inner = relu(add(matmul(h, block.ffn_in), block.ffn_in_bias));
  const Tensor ffn = maybe_dropout(add(matmul(inner, block.ffn_out), block.ffn_out_bias), model, options);
  return layer_norm(add(h, ffn), block.ln2_gain, block.ln2_bias);
}

Tensor forward(const QuerySequence& sequence, const EncoderParams& encoder, const NeighborIndex& neighbors,
               const TransamModel& model, const ForwardOptions& options) {
  const ModelConfig& config = model.config();
  if (sequence.ids.size() != config.sequence_length()) {
    throw DimensionError("forward: sequence of length " + std::to_string(sequence.ids.size()) + ", K=" +
                         std::to_string(config.K) + " needs " + std::to_string(config.sequence_length()));
  }
  if (encoder.dim != config.d_e) throw DimensionError("forward: encoder width differs from d_e");
  Tensor X = matmul(encode_sequence(sequence.ids, neighbors, encoder), model.head().W_in);
  if (options.trace) options.trace->blocks.assign(model.blocks().size(), {});
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    X = transformer_block(X, model.blocks()[b], model, options,
                          options.trace ? &options.trace->blocks[b] : nullptr);
  }
  return row(X, 0);
}

Tensor predict(const Tensor& z_cls, const HeadParams& head) {
  return softmax_rows(matmul(matmul(z_cls, transpose(head.W4)), head.U2));
}

Tensor bce_loss(std::span<const Tensor> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("bce_loss: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  return binary_cross_entropy(concat_rows(predictions), labels);
}

double score_sequence(const QuerySequence& sequence, const EncoderParams& encoder, const NeighborIndex& neighbors,
                      const TransamModel& model) {
  NoGradGuard no_grad;
  return predict(forward(sequence, encoder, neighbors, model), model.head()).data()[1];
}

}  // namespace transam
