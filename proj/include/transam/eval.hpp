// Ranking evaluation: MRR, Hits@1 and Hits@10 under the filtered setting
// with pessimistic tie handling.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "transam/graph.hpp"
#include "transam/model.hpp"
#include "transam/sampling.hpp"

namespace transam {

struct RankingMetrics {
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits10 = 0.0;
  std::size_t queries = 0;
};

struct RankingReport {
  RankingMetrics aggregate;
  std::map<std::string, RankingMetrics> per_relation;
};

/// 1 + number of other candidates scoring at least as high as the gold.
std::size_t rank_from_scores(double gold_score, std::span<const double> other_scores);

RankingMetrics metrics_from_ranks(std::span<const std::size_t> ranks);

struct ScoreRequest {
  RelationId relation = 0;
  std::span<const EntityPair> support;
  EntityId head = 0;
  std::span<const EntityId> tails;
};

/// Scores every tail of a request; higher means more plausible. Must be
/// safe to call from several threads at once.
using CandidateScorer = std::function<std::vector<double>(const ScoreRequest&)>;

/// Scores by the model's probability that the query holds.
CandidateScorer model_scorer(const EncoderParams& encoder, const NeighborIndex& neighbors, const TransamModel& model);

/// Ranks the episode's positive tail among `candidates` (which must contain it).
std::size_t rank_query(const CandidateScorer& scorer, const Episode& episode, std::span<const EntityId> candidates);

struct QueryScores {
  std::string relation;
  EntityPair query;
  std::vector<EntityId> candidates;  // gold first
  std::vector<double> scores;
  std::size_t rank = 0;
};

struct EvalOptions {
  std::size_t K = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0 reads TRANSAM_THREADS, else hardware concurrency
  std::vector<QueryScores>* dump = nullptr;
};

/// For each relation a seeded choice of K support pairs is fixed and every
/// remaining triple is a query. A query's candidates are the gold tail plus
/// each candidate that is not a known tail of (head, relation).
RankingReport evaluate(const CandidateScorer& scorer, const TaskMap& tasks, const CandidateMap& candidates,
                       const FactIndex& facts, const Graph& graph, const EvalOptions& options);

std::size_t resolve_thread_count(std::size_t requested);

}  // namespace transam
