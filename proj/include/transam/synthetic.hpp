// Seeded synthetic knowledge graphs with planted relation patterns.
//
// Each few-shot relation is a sampled copy of one background relation:
//   symmetric      pairs of a symmetric background relation, both directions
//   antisymmetric  edges of an antisymmetric background relation, same direction
//   inverse        edges of an antisymmetric background relation, reversed
// and each query pair has matching background evidence.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "transam/graph.hpp"

namespace transam {

enum class RelationPattern { Symmetric, Inverse, AntiSymmetric };

std::string to_string(RelationPattern pattern);
/// "mixed", a single pattern name, or a comma-separated list of names.
std::vector<RelationPattern> parse_pattern_mix(const std::string& text);

struct SyntheticSpec {
  std::size_t entities = 200;
  std::size_t background_relations = 5;
  std::size_t fewshot_relations = 12;
  std::vector<RelationPattern> pattern_mix{RelationPattern::Symmetric, RelationPattern::Inverse,
                                           RelationPattern::AntiSymmetric};
  std::uint64_t seed = 7;
  std::size_t triples_per_relation = 30;
  double background_degree = 1.5;
  std::size_t valid_relations = 2;
  std::size_t test_relations = 2;
  std::size_t max_candidates = 50;
};

struct SyntheticKg {
  Graph graph;
  TaskMap train;
  TaskMap valid;
  TaskMap test;
  CandidateMap candidates;
  std::map<std::string, RelationPattern> patterns;
  std::map<std::string, std::string> source_relation;

  TaskMap all_tasks() const;
};

/// Throws DataError when the spec cannot be realised.
SyntheticKg generate_synthetic_kg(const SyntheticSpec& spec);

}  // namespace transam
