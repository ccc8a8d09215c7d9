// Knowledge-graph data model and file formats.
//
//   triples file    head<TAB>relation<TAB>tail per line
//   tasks file      {"relation": [["head", "relation", "tail"], ...], ...}
//   candidates file {"relation": ["entity", ...], ...}
//   embedding file  "count dim" header, then "name v1 ... v_dim" per line

#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace transam {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  auto operator<=>(const Triple&) const = default;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept;
};

/// Dense id <-> name interning in first-appearance order.
class Vocabulary {
 public:
  std::int32_t intern(const std::string& name);
  std::optional<std::int32_t> find(const std::string& name) const;
  std::int32_t at(const std::string& name) const;
  const std::string& name(std::int32_t id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

class Graph {
 public:
  Vocabulary entities;
  Vocabulary relations;

  std::size_t entity_count() const { return entities.size(); }
  std::size_t relation_count() const { return relations.size(); }
  const std::vector<Triple>& background() const { return background_; }

  /// Returns false (and stores nothing) for a duplicate.
  bool add_background(const Triple& triple);
  bool add_background(const std::string& head, const std::string& relation, const std::string& tail);
  bool contains(const Triple& triple) const { return lookup_.contains(triple); }

 private:
  std::vector<Triple> background_;
  std::unordered_set<Triple, TripleHash> lookup_;
};

/// Relation name -> its triples. Ordered so iteration is reproducible.
using TaskMap = std::map<std::string, std::vector<Triple>>;

struct CandidateSet {
  RelationId relation = 0;
  std::vector<EntityId> entities;
};

using CandidateMap = std::map<std::string, CandidateSet>;

struct TripleLoadResult {
  Graph graph;
  std::size_t duplicates = 0;
};

TripleLoadResult load_triples(const std::filesystem::path& path);
void write_triples(const Graph& graph, const std::filesystem::path& path);

/// Interns every name it meets into `graph`'s vocabularies.
TaskMap load_tasks(const std::filesystem::path& path, Graph& graph);
void write_tasks(const TaskMap& tasks, const Graph& graph, const std::filesystem::path& path);

CandidateMap load_candidates(const std::filesystem::path& path, Graph& graph);
void write_candidates(const CandidateMap& candidates, const Graph& graph, const std::filesystem::path& path);

struct PretrainedEmbeddings {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;
};

PretrainedEmbeddings load_pretrained(const std::filesystem::path& path);

/// Known (head, relation) -> tails over the background graph and task
/// triples; used to keep negatives and ranking candidates honest.
class FactIndex {
 public:
  FactIndex() = default;
  FactIndex(const Graph& graph, std::span<const TaskMap* const> task_maps);

  void add(const Triple& triple);
  bool holds(EntityId head, RelationId relation, EntityId tail) const;
  const std::unordered_set<EntityId>& tails(EntityId head, RelationId relation) const;

 private:
  static std::uint64_t key(EntityId head, RelationId relation);
  std::unordered_map<std::uint64_t, std::unordered_set<EntityId>> tails_;
};

struct Neighbor {
  RelationId relation = 0;
  EntityId tail = 0;

  bool operator==(const Neighbor&) const = default;
};

/// Outgoing (relation, tail) lists per entity, capped at `max_neighbors`.
class NeighborIndex {
 public:
  NeighborIndex() = default;
  NeighborIndex(std::size_t entity_count, std::size_t max_neighbors);

  std::span<const Neighbor> of(EntityId entity) const;
  std::size_t entity_count() const { return lists_.size(); }
  std::size_t max_neighbors() const { return max_neighbors_; }
  std::vector<Neighbor>& mutable_list(EntityId entity) { return lists_.at(static_cast<std::size_t>(entity)); }

 private:
  std::vector<std::vector<Neighbor>> lists_;
  std::size_t max_neighbors_ = 0;
};

/// Entities over the cap keep a seeded uniform sample in original order.
NeighborIndex build_neighbor_index(const Graph& graph, std::size_t max_neighbors, std::uint64_t seed);

}  // namespace transam
