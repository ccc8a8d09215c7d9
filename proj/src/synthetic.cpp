#include "transam/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "transam/sampling.hpp"

namespace transam {

std::string to_string(RelationPattern pattern) {
  switch (pattern) {
    case RelationPattern::Symmetric:
      return "symmetric";
    case RelationPattern::Inverse:
      return "inverse";
    case RelationPattern::AntiSymmetric:
      return "antisymmetric";
  }
  return "unknown";
}

std::vector<RelationPattern> parse_pattern_mix(const std::string& text) {
  if (text == "mixed") {
    return {RelationPattern::Symmetric, RelationPattern::Inverse, RelationPattern::AntiSymmetric};
  }
  std::vector<RelationPattern> mix;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "symmetric" || item == "symmetric-only") {
      mix.push_back(RelationPattern::Symmetric);
    } else if (item == "inverse") {
      mix.push_back(RelationPattern::Inverse);
    } else if (item == "antisymmetric" || item == "anti-symmetric") {
      mix.push_back(RelationPattern::AntiSymmetric);
    } else {
      throw DataError("unknown relation pattern '" + item + "'");
    }
  }
  if (mix.empty()) throw DataError("empty pattern mix");
  return mix;
}

TaskMap SyntheticKg::all_tasks() const {
  TaskMap all = train;
  all.insert(valid.begin(), valid.end());
  all.insert(test.begin(), test.end());
  return all;
}

namespace {

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

std::size_t draw(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

}  // namespace

SyntheticKg generate_synthetic_kg(const SyntheticSpec& spec) {
  if (spec.entities < 20) throw DataError("synthetic spec needs at least 20 entities");
  if (spec.fewshot_relations < 1) throw DataError("synthetic spec needs at least 1 few-shot relation");
  if (spec.background_relations < 1) throw DataError("synthetic spec needs at least 1 background relation");
  if (spec.triples_per_relation < 2) throw DataError("synthetic spec needs at least 2 triples per relation");
  if (spec.pattern_mix.empty()) throw DataError("synthetic spec has an empty pattern mix");
  const std::size_t pairs = spec.entities * (spec.entities - 1);
  if (spec.background_relations + spec.fewshot_relations > pairs) {
    throw DataError("synthetic spec has more relations than entity pairs");
  }

  const bool wants_symmetric =
      std::ranges::find(spec.pattern_mix, RelationPattern::Symmetric) != spec.pattern_mix.end();
  const bool wants_directed = std::ranges::any_of(
      spec.pattern_mix, [](RelationPattern p) { return p != RelationPattern::Symmetric; });
  if (wants_symmetric && wants_directed && spec.background_relations < 2) {
    throw DataError("mixed patterns need at least 2 background relations");
  }

  Rng rng(spec.seed);
  SyntheticKg kg;
  Graph& graph = kg.graph;
  const int entity_width = spec.entities >= 10000 ? 6 : 4;
  for (std::size_t e = 0; e < spec.entities; ++e) graph.entities.intern(numbered("e", e, entity_width));

  // Background relation kinds: alternate when both are needed.
  std::vector<bool> symmetric_bg(spec.background_relations);
  for (std::size_t j = 0; j < spec.background_relations; ++j) {
    symmetric_bg[j] = wants_symmetric && (!wants_directed || j % 2 == 0);
    graph.relations.intern(numbered("bg", j, 2) + (symmetric_bg[j] ? "_sym" : "_anti"));
  }

  std::vector<std::vector<EntityPair>> bg_edges(spec.background_relations);
  auto try_add = [&](std::size_t j, EntityId h, EntityId t) {
    const auto r = static_cast<RelationId>(j);
    if (h == t || graph.contains({h, r, t})) return false;
    if (symmetric_bg[j]) {
      graph.add_background({h, r, t});
      graph.add_background({t, r, h});
      bg_edges[j].push_back({h, t});
      bg_edges[j].push_back({t, h});
    } else {
      if (graph.contains({t, r, h})) return false;
      graph.add_background({h, r, t});
      bg_edges[j].push_back({h, t});
    }
    return true;
  };

  const auto per_relation = static_cast<std::size_t>(
      std::llround(static_cast<double>(spec.entities) * spec.background_degree /
                   static_cast<double>(spec.background_relations)));
  for (std::size_t j = 0; j < spec.background_relations; ++j) {
    std::size_t attempts = 0;
    while (bg_edges[j].size() < per_relation && attempts++ < per_relation * 50) {
      try_add(j, static_cast<EntityId>(draw(rng, spec.entities)), static_cast<EntityId>(draw(rng, spec.entities)));
    }
  }
  // Every entity gets at least one outgoing background edge.
  std::vector<bool> has_out(spec.entities, false);
  for (const Triple& t : graph.background()) has_out[static_cast<std::size_t>(t.head)] = true;
  for (std::size_t e = 0; e < spec.entities; ++e) {
    while (!has_out[e]) {
      const std::size_t j = draw(rng, spec.background_relations);
      const auto t = static_cast<EntityId>(draw(rng, spec.entities));
      if (try_add(j, static_cast<EntityId>(e), t)) {
        has_out[e] = true;
        if (symmetric_bg[j]) has_out[static_cast<std::size_t>(t)] = true;
      }
    }
  }

  std::vector<std::size_t> symmetric_sources, directed_sources;
  for (std::size_t j = 0; j < spec.background_relations; ++j) {
    (symmetric_bg[j] ? symmetric_sources : directed_sources).push_back(j);
  }

  std::size_t valid_count = spec.valid_relations;
  std::size_t test_count = spec.test_relations;
  if (valid_count + test_count >= spec.fewshot_relations) {
    valid_count = std::min(valid_count, (spec.fewshot_relations - 1) / 2);
    test_count = std::min(test_count, (spec.fewshot_relations - 1) / 2);
  }
  const std::size_t train_count = spec.fewshot_relations - valid_count - test_count;

  std::size_t symmetric_seen = 0, directed_seen = 0;
  for (std::size_t i = 0; i < spec.fewshot_relations; ++i) {
    const RelationPattern pattern = spec.pattern_mix[i % spec.pattern_mix.size()];
    const bool symmetric = pattern == RelationPattern::Symmetric;
    const std::size_t source = symmetric ? symmetric_sources[symmetric_seen++ % symmetric_sources.size()]
                                         : directed_sources[directed_seen++ % directed_sources.size()];
    const std::string name = numbered("fs", i, 2) + "_" + to_string(pattern);
    const RelationId relation = graph.relations.intern(name);

    std::vector<EntityPair> pool;
    for (const EntityPair& edge : bg_edges[source]) {
      if (!symmetric || edge.head < edge.tail) pool.push_back(edge);
    }
    const std::size_t needed = symmetric ? (spec.triples_per_relation + 1) / 2 : spec.triples_per_relation;
    if (pool.size() < needed) {
      throw DataError("background relation " + graph.relations.name(static_cast<RelationId>(source)) + " has " +
                      std::to_string(pool.size()) + " edges, relation " + name + " needs " + std::to_string(needed));
    }
    for (std::size_t k = 0; k < needed; ++k) std::swap(pool[k], pool[k + draw(rng, pool.size() - k)]);

    std::vector<Triple> triples;
    for (std::size_t k = 0; k < needed; ++k) {
      const EntityPair& edge = pool[k];
      switch (pattern) {
        case RelationPattern::Symmetric:
          triples.push_back({edge.head, relation, edge.tail});
          triples.push_back({edge.tail, relation, edge.head});
          break;
        case RelationPattern::AntiSymmetric:
          triples.push_back({edge.head, relation, edge.tail});
          break;
        case RelationPattern::Inverse:
          triples.push_back({edge.tail, relation, edge.head});
          break;
      }
    }
    TaskMap& split = i < train_count ? kg.train : i < train_count + valid_count ? kg.valid : kg.test;
    split.emplace(name, std::move(triples));
    kg.patterns.emplace(name, pattern);
    kg.source_relation.emplace(name, graph.relations.name(static_cast<RelationId>(source)));
  }

  const TaskMap all = kg.all_tasks();
  for (const auto& [name, triples] : all) {
    kg.candidates.emplace(name, candidates_for_relation(graph, all, name, spec.max_candidates, rng));
  }
  return kg;
}

}  // namespace transam
