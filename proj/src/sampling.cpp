#include "transam/sampling.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

namespace transam {

EntityPair corrupt_tail(const EntityPair& query, std::span<const EntityId> candidates,
                        const std::unordered_set<EntityId>& true_tails, Rng& rng) {
  std::vector<EntityId> feasible;
  feasible.reserve(candidates.size());
  for (EntityId c : candidates) {
    if (!true_tails.contains(c)) feasible.push_back(c);
  }
  if (feasible.empty()) throw DataError("no valid negative tail: every candidate is a true tail");
  std::uniform_int_distribution<std::size_t> pick(0, feasible.size() - 1);
  return EntityPair{query.head, feasible[pick(rng)]};
}

Episode sample_episode(std::span<const Triple> triples, RelationId relation, int K, int negatives_per_query,
                       const CandidateSet& candidates, const FactIndex& facts, Rng& rng) {
  if (K < 1) throw std::invalid_argument("K must be at least 1");
  if (triples.size() < static_cast<std::size_t>(K) + 1) {
    throw DataError("relation " + std::to_string(relation) + " has " + std::to_string(triples.size()) +
                    " triples, needs at least " + std::to_string(K + 1));
  }
  if (candidates.entities.empty()) throw DataError("empty candidate set for relation " + std::to_string(relation));

  // Partial Fisher-Yates over indices: first K are support, next is query.
  std::vector<std::size_t> order(triples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i <= static_cast<std::size_t>(K); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }

  Episode episode;
  episode.relation = relation;
  for (int i = 0; i < K; ++i) {
    const Triple& t = triples[order[static_cast<std::size_t>(i)]];
    episode.support.push_back({t.head, t.tail});
  }
  const Triple& q = triples[order[static_cast<std::size_t>(K)]];
  episode.query_pos = {q.head, q.tail};

  const auto& true_tails = facts.tails(q.head, relation);
  std::unordered_set<EntityId> excluded(true_tails.begin(), true_tails.end());
  excluded.insert(q.tail);
  for (int n = 0; n < negatives_per_query; ++n) {
    episode.query_neg.push_back(corrupt_tail(episode.query_pos, candidates.entities, excluded, rng));
  }
  return episode;
}

CandidateSet candidates_for_relation(const Graph& graph, const TaskMap& tasks, const std::string& relation,
                                     std::size_t max_candidates, Rng& rng) {
  auto it = tasks.find(relation);
  if (it == tasks.end()) throw DataError("relation '" + relation + "' has no tasks");
  CandidateSet set;
  set.relation = graph.relations.at(relation);

  std::unordered_set<EntityId> seen;
  for (const Triple& t : it->second) {
    if (seen.insert(t.tail).second) set.entities.push_back(t.tail);
  }
  if (set.entities.size() > max_candidates) {
    std::cerr << "warning: relation '" << relation << "' has " << set.entities.size()
              << " gold tails, above max_candidates " << max_candidates << "; keeping all golds\n";
    return set;
  }

  std::vector<EntityId> pool;
  for (std::size_t e = 0; e < graph.entity_count(); ++e) {
    if (!seen.contains(static_cast<EntityId>(e))) pool.push_back(static_cast<EntityId>(e));
  }
  const std::size_t wanted = std::min(max_candidates - set.entities.size(), pool.size());
  for (std::size_t i = 0; i < wanted; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    set.entities.push_back(pool[i]);
  }
  return set;
}

}  // namespace transam
