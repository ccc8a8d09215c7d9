#include "transam/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace transam {

std::size_t rank_from_scores(double gold_score, std::span<const double> other_scores) {
  std::size_t rank = 1;
  for (double s : other_scores) {
    if (s >= gold_score) ++rank;
  }
  return rank;
}

RankingMetrics metrics_from_ranks(std::span<const std::size_t> ranks) {
  RankingMetrics m;
  m.queries = ranks.size();
  if (ranks.empty()) return m;
  for (std::size_t r : ranks) {
    m.mrr += 1.0 / static_cast<double>(r);
    m.hits1 += r <= 1 ? 1.0 : 0.0;
    m.hits10 += r <= 10 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(ranks.size());
  m.mrr /= n;
  m.hits1 /= n;
  m.hits10 /= n;
  return m;
}

CandidateScorer model_scorer(const EncoderParams& encoder, const NeighborIndex& neighbors, const TransamModel& model) {
  return [&encoder, &neighbors, &model](const ScoreRequest& request) {
    Episode episode;
    episode.relation = request.relation;
    episode.support.assign(request.support.begin(), request.support.end());
    std::vector<double> scores;
    scores.reserve(request.tails.size());
    for (EntityId tail : request.tails) {
      const QuerySequence seq = build_sequence(episode, {request.head, tail}, encoder.cls_id());
      scores.push_back(score_sequence(seq, encoder, neighbors, model));
    }
    return scores;
  };
}

std::size_t rank_query(const CandidateScorer& scorer, const Episode& episode, std::span<const EntityId> candidates) {
  const auto gold = std::find(candidates.begin(), candidates.end(), episode.query_pos.tail);
  if (gold == candidates.end()) throw DataError("rank_query: gold tail is not among the candidates");
  const std::vector<double> scores =
      scorer(ScoreRequest{episode.relation, episode.support, episode.query_pos.head, candidates});
  const auto gold_index = static_cast<std::size_t>(gold - candidates.begin());
  std::vector<double> others;
  others.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != gold_index) others.push_back(scores[i]);
  }
  return rank_from_scores(scores[gold_index], others);
}

std::size_t resolve_thread_count(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TRANSAM_THREADS")) {
    const long value = std::strtol(env, nullptr, 10);
    if (value > 0) return static_cast<std::size_t>(value);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// FNV-1a, so support choice depends only on the relation name.
std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct Job {
  std::string relation;
  RelationId relation_id;
  const std::vector<EntityPair>* support;
  EntityPair query;
  const CandidateSet* candidates;
};

}  // namespace

RankingReport evaluate(const CandidateScorer& scorer, const TaskMap& tasks, const CandidateMap& candidates,
                       const FactIndex& facts, const Graph& graph, const EvalOptions& options) {
  std::map<std::string, std::vector<EntityPair>> supports;
  std::vector<Job> jobs;
  for (const auto& [name, triples] : tasks) {
    if (triples.size() < options.K + 1) {
      throw DataError("relation '" + name + "' has " + std::to_string(triples.size()) + " triples, needs " +
                      std::to_string(options.K + 1));
    }
    auto cand = candidates.find(name);
    if (cand == candidates.end()) throw DataError("no candidates for relation '" + name + "'");
    Rng rng(options.seed ^ name_hash(name));
    std::vector<std::size_t> order(triples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    auto& support = supports[name];
    for (std::size_t i = 0; i < options.K; ++i) support.push_back({triples[order[i]].head, triples[order[i]].tail});
  }
  for (const auto& [name, triples] : tasks) {
    const RelationId relation = graph.relations.at(name);
    const auto& support = supports.at(name);
    for (const Triple& t : triples) {
      const EntityPair query{t.head, t.tail};
      if (std::find(support.begin(), support.end(), query) != support.end()) continue;
      jobs.push_back({name, relation, &support, query, &candidates.at(name)});
    }
  }

  std::vector<QueryScores> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        const Job& job = jobs[i];
        QueryScores& out = results[i];
        out.relation = job.relation;
        out.query = job.query;
        out.candidates.push_back(job.query.tail);
        for (EntityId c : job.candidates->entities) {
          if (c == job.query.tail || facts.holds(job.query.head, job.relation_id, c)) continue;
          out.candidates.push_back(c);
        }
        out.scores = scorer(ScoreRequest{job.relation_id, *job.support, job.query.head, out.candidates});
        out.rank = rank_from_scores(out.scores[0], std::span<const double>(out.scores).subspan(1));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(jobs.size());
        return;
      }
    }
  };
  const std::size_t threads = std::min(resolve_thread_count(options.threads), std::max<std::size_t>(jobs.size(), 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  RankingReport report;
  std::vector<std::size_t> all_ranks;
  std::map<std::string, std::vector<std::size_t>> by_relation;
  for (const QueryScores& q : results) {
    all_ranks.push_back(q.rank);
    by_relation[q.relation].push_back(q.rank);
  }
  report.aggregate = metrics_from_ranks(all_ranks);
  for (const auto& [name, ranks] : by_relation) report.per_relation[name] = metrics_from_ranks(ranks);
  if (options.dump) *options.dump = std::move(results);
  return report;
}

}  // namespace transam
