#include "transam/encoder.hpp"

#include <cmath>

#include "transam/ops.hpp"

namespace transam {

std::vector<NamedTensor> EncoderParams::named_parameters() const {
  return {{"encoder.entity_embedding", entity_embedding},
          {"encoder.relation_embedding", relation_embedding},
          {"encoder.u", u},
          {"encoder.b1", b1},
          {"encoder.W1", W1},
          {"encoder.W2", W2},
          {"encoder.W3", W3}};
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data), true);
}

Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform_tensor({rows, cols}, bound, rng);
}

EncoderParams init_encoder_params(std::size_t entity_count, std::size_t relation_count, std::size_t dim, Rng& rng,
                                  const PretrainedEmbeddings* pretrained, const Graph* graph) {
  if (dim < 1) throw std::invalid_argument("encoder dimension must be positive");
  EncoderParams p;
  p.entity_count = entity_count;
  p.dim = dim;
  const double bound = 0.5 / static_cast<double>(dim);
  p.entity_embedding = uniform_tensor({entity_count + 1, dim}, bound, rng);
  p.relation_embedding = uniform_tensor({std::max<std::size_t>(relation_count, 1), dim}, bound, rng);
  p.u = xavier_uniform(dim, 1, rng);
  p.b1 = Tensor::scalar(0.0, true);
  p.W1 = xavier_uniform(dim, 2 * dim, rng);
  p.W2 = xavier_uniform(dim, dim, rng);
  p.W3 = xavier_uniform(dim, dim, rng);

  if (pretrained) {
    if (!graph) throw std::invalid_argument("pretrained embeddings need the graph vocabulary");
    if (pretrained->dim != dim) {
      throw DataError("pretrained embeddings have dimension " + std::to_string(pretrained->dim) + ", model uses " +
                      std::to_string(dim));
    }
    auto copy_rows = [&](const Vocabulary& vocab, Tensor& table) {
      auto data = table.mutable_data();
      for (std::size_t id = 0; id < vocab.size(); ++id) {
        auto it = pretrained->vectors.find(vocab.name(static_cast<std::int32_t>(id)));
        if (it == pretrained->vectors.end()) continue;
        std::copy(it->second.begin(), it->second.end(), data.begin() + static_cast<std::ptrdiff_t>(id * dim));
      }
    };
    copy_rows(graph->entities, p.entity_embedding);
    copy_rows(graph->relations, p.relation_embedding);
  }
  return p;
}

namespace {

struct NeighborIds {
  std::vector<std::int32_t> relations;
  std::vector<std::int32_t> tails;
};

NeighborIds split(std::span<const Neighbor> neighbors) {
  NeighborIds ids;
  for (const Neighbor& n : neighbors) {
    ids.relations.push_back(n.relation);
    ids.tails.push_back(n.tail);
  }
  return ids;
}

// Attention weights given a precomputed W1 transpose.
Tensor attention_weights(const NeighborIds& ids, const Tensor& W1t, const EncoderParams& p) {
  const Tensor pair_features[] = {gather_rows(p.relation_embedding, ids.relations),
                                  gather_rows(p.entity_embedding, ids.tails)};
  const Tensor hidden = relu(matmul(concat_cols(pair_features), W1t));
  const Tensor logits = add(matmul(hidden, p.u), p.b1);
  return softmax_rows(transpose(logits));
}

}  // namespace

Tensor neighbor_attention(std::span<const Neighbor> neighbors, const EncoderParams& params) {
  if (neighbors.empty()) throw std::invalid_argument("neighbor_attention: empty neighbour list");
  return attention_weights(split(neighbors), transpose(params.W1), params);
}

Tensor aggregate(std::span<const Neighbor> neighbors, const Tensor& alpha, const EncoderParams& params) {
  if (neighbors.empty()) return Tensor::zeros({1, params.dim});
  if (alpha.numel() != neighbors.size()) {
    throw DimensionError("aggregate: " + std::to_string(alpha.numel()) + " weights for " +
                         std::to_string(neighbors.size()) + " neighbours");
  }
  const auto ids = split(neighbors);
  return matmul(alpha, gather_rows(params.entity_embedding, ids.tails));
}

Tensor fuse(const Tensor& v, const Tensor& h, const EncoderParams& params) {
  return tanh(add(matmul(v, transpose(params.W2)), matmul(h, transpose(params.W3))));
}

Tensor encode_sequence(std::span<const EntityId> ids, const NeighborIndex& neighbors, const EncoderParams& params) {
  if (ids.empty()) throw std::invalid_argument("encode_sequence: empty sequence");
  for (EntityId id : ids) {
    if (id < 0 || id > params.cls_id()) throw DataError("encode_sequence: unknown entity id " + std::to_string(id));
  }
  const Tensor W1t = transpose(params.W1);
  const Tensor zero_row = Tensor::zeros({1, params.dim});
  std::vector<Tensor> aggregated;
  aggregated.reserve(ids.size());
  for (EntityId id : ids) {
    auto list = id == params.cls_id() ? std::span<const Neighbor>{} : neighbors.of(id);
    if (list.empty()) {
      aggregated.push_back(zero_row);
      continue;
    }
    const auto split_ids = split(list);
    const Tensor alpha = attention_weights(split_ids, W1t, params);
    aggregated.push_back(matmul(alpha, gather_rows(params.entity_embedding, split_ids.tails)));
  }
  const Tensor own = gather_rows(params.entity_embedding, ids);
  return fuse(own, concat_rows(aggregated), params);
}

}  // namespace transam
