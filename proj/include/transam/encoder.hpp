// Heterogeneous neighbour encoder. For an entity e with background
// neighbours (r_i, t_i):
//
//   alpha = softmax_i( u . relu(W1 [v_r_i ; v_t_i]) + b1 )
//   h_e   = sum_i alpha_i v_t_i                 (zero when e has no neighbours)
//   x_e   = tanh(W2 v_e + W3 h_e)
//
// Row `entity_count` of the entity table is the learned [CLS] embedding.

#pragma once

#include <span>
#include <vector>

#include "transam/graph.hpp"
#include "transam/sampling.hpp"
#include "transam/tensor.hpp"

namespace transam {

struct EncoderParams {
  std::size_t entity_count = 0;  // excluding the CLS row
  std::size_t dim = 0;
  Tensor entity_embedding;    // (entity_count + 1) x d
  Tensor relation_embedding;  // relation_count x d
  Tensor u;                   // d x 1
  Tensor b1;                  // 1
  Tensor W1;                  // d x 2d
  Tensor W2;                  // d x d
  Tensor W3;                  // d x d

  EntityId cls_id() const { return static_cast<EntityId>(entity_count); }
  std::vector<NamedTensor> named_parameters() const;
};

/// Embeddings uniform in +-0.5/d, weights Xavier-uniform, b1 = 0. Rows named
/// in `pretrained` (matched through `graph`) overwrite the random init.
EncoderParams init_encoder_params(std::size_t entity_count, std::size_t relation_count, std::size_t dim, Rng& rng,
                                  const PretrainedEmbeddings* pretrained = nullptr, const Graph* graph = nullptr);

/// 1 x n attention weights over a nonempty neighbour list.
Tensor neighbor_attention(std::span<const Neighbor> neighbors, const EncoderParams& params);

/// 1 x d convex combination of neighbour tail embeddings.
Tensor aggregate(std::span<const Neighbor> neighbors, const Tensor& alpha, const EncoderParams& params);

/// tanh(W2 v + W3 h) for row vectors v and h.
Tensor fuse(const Tensor& v, const Tensor& h, const EncoderParams& params);

/// |ids| x d matrix of fused representations.
Tensor encode_sequence(std::span<const EntityId> ids, const NeighborIndex& neighbors, const EncoderParams& params);

/// Xavier-uniform rows x cols matrix.
Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng);
Tensor uniform_tensor(Shape shape, double bound, Rng& rng);

}  // namespace transam
