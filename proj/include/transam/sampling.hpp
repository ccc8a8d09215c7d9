// Episode construction, tail corruption and ranking candidate pools.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "transam/graph.hpp"

namespace transam {

using Rng = std::mt19937_64;

struct EntityPair {
  EntityId head = 0;
  EntityId tail = 0;

  bool operator==(const EntityPair&) const = default;
};

struct Episode {
  RelationId relation = 0;
  std::vector<EntityPair> support;
  EntityPair query_pos;
  std::vector<EntityPair> query_neg;
};

/// Replaces the query tail with a uniform draw from `candidates` minus
/// `true_tails`.
EntityPair corrupt_tail(const EntityPair& query, std::span<const EntityId> candidates,
                        const std::unordered_set<EntityId>& true_tails, Rng& rng);

/// Draws K support pairs and one positive query, all distinct, from
/// `triples`, then `negatives_per_query` corrupted tails for the query.
Episode sample_episode(std::span<const Triple> triples, RelationId relation, int K, int negatives_per_query,
                       const CandidateSet& candidates, const FactIndex& facts, Rng& rng);

/// Gold tails of every triple of `relation`, then uniformly sampled
/// distractors until `max_candidates`. When the golds alone exceed the cap
/// they are all kept and a warning is printed.
CandidateSet candidates_for_relation(const Graph& graph, const TaskMap& tasks, const std::string& relation,
                                     std::size_t max_candidates, Rng& rng);

}  // namespace transam
