#include "transam/graph.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace transam {

using nlohmann::json;

std::size_t TripleHash::operator()(const Triple& t) const noexcept {
  std::uint64_t h = static_cast<std::uint32_t>(t.head);
  h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(t.relation);
  h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(t.tail);
  return static_cast<std::size_t>(h ^ (h >> 29));
}

std::int32_t Vocabulary::intern(const std::string& name) {
  auto [it, inserted] = ids_.try_emplace(name, static_cast<std::int32_t>(names_.size()));
  if (inserted) names_.push_back(name);
  return it->second;
}

std::optional<std::int32_t> Vocabulary::find(const std::string& name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::int32_t Vocabulary::at(const std::string& name) const {
  auto id = find(name);
  if (!id) throw DataError("unknown name '" + name + "'");
  return *id;
}

bool Graph::add_background(const Triple& triple) {
  if (triple.head < 0 || static_cast<std::size_t>(triple.head) >= entity_count() || triple.tail < 0 ||
      static_cast<std::size_t>(triple.tail) >= entity_count() || triple.relation < 0 ||
      static_cast<std::size_t>(triple.relation) >= relation_count()) {
    throw DataError("triple ids outside the graph vocabulary");
  }
  if (!lookup_.insert(triple).second) return false;
  background_.push_back(triple);
  return true;
}

bool Graph::add_background(const std::string& head, const std::string& relation, const std::string& tail) {
  const EntityId h = entities.intern(head);
  const RelationId r = relations.intern(relation);
  const EntityId t = entities.intern(tail);
  return add_background(Triple{h, r, t});
}

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

json read_json(const std::filesystem::path& path) {
  auto in = open_input(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

TripleLoadResult load_triples(const std::filesystem::path& path) {
  auto in = open_input(path);
  TripleLoadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected head<TAB>relation<TAB>tail");
    }
    if (!result.graph.add_background(fields[0], fields[1], fields[2])) ++result.duplicates;
  }
  return result;
}

void write_triples(const Graph& graph, const std::filesystem::path& path) {
  std::string text;
  for (const Triple& t : graph.background()) {
    text += graph.entities.name(t.head) + '\t' + graph.relations.name(t.relation) + '\t' +
            graph.entities.name(t.tail) + '\n';
  }
  write_text(path, text);
}

TaskMap load_tasks(const std::filesystem::path& path, Graph& graph) {
  const json doc = read_json(path);
  if (!doc.is_object()) throw DataError(path.string() + ": tasks file must be a JSON object");
  TaskMap tasks;
  for (const auto& [name, triples] : doc.items()) {
    if (!triples.is_array()) throw DataError(path.string() + ": relation '" + name + "' must map to an array");
    const RelationId relation = graph.relations.intern(name);
    auto& list = tasks[name];
    for (const auto& item : triples) {
      if (!item.is_array() || item.size() != 3 || !item[0].is_string() || !item[1].is_string() ||
          !item[2].is_string()) {
        throw DataError(path.string() + ": relation '" + name + "' has an entry that is not 3 strings");
      }
      if (item[1].get<std::string>() != name) {
        throw DataError(path.string() + ": triple under '" + name + "' names relation '" +
                        item[1].get<std::string>() + "'");
      }
      list.push_back(Triple{graph.entities.intern(item[0].get<std::string>()), relation,
                            graph.entities.intern(item[2].get<std::string>())});
    }
  }
  return tasks;
}

void write_tasks(const TaskMap& tasks, const Graph& graph, const std::filesystem::path& path) {
  json doc = json::object();
  for (const auto& [name, triples] : tasks) {
    json list = json::array();
    for (const Triple& t : triples) {
      list.push_back({graph.entities.name(t.head), name, graph.entities.name(t.tail)});
    }
    doc[name] = std::move(list);
  }
  write_text(path, doc.dump() + "\n");
}

CandidateMap load_candidates(const std::filesystem::path& path, Graph& graph) {
  const json doc = read_json(path);
  if (!doc.is_object()) throw DataError(path.string() + ": candidates file must be a JSON object");
  CandidateMap candidates;
  for (const auto& [name, list] : doc.items()) {
    if (!list.is_array()) throw DataError(path.string() + ": candidates of '" + name + "' must be an array");
    CandidateSet set{graph.relations.intern(name), {}};
    for (const auto& entity : list) {
      if (!entity.is_string()) throw DataError(path.string() + ": candidate of '" + name + "' is not a string");
      set.entities.push_back(graph.entities.intern(entity.get<std::string>()));
    }
    candidates.emplace(name, std::move(set));
  }
  return candidates;
}

void write_candidates(const CandidateMap& candidates, const Graph& graph, const std::filesystem::path& path) {
  json doc = json::object();
  for (const auto& [name, set] : candidates) {
    json list = json::array();
    for (EntityId e : set.entities) list.push_back(graph.entities.name(e));
    doc[name] = std::move(list);
  }
  write_text(path, doc.dump() + "\n");
}

PretrainedEmbeddings load_pretrained(const std::filesystem::path& path) {
  auto in = open_input(path);
  PretrainedEmbeddings result;
  std::size_t count = 0;
  std::string header;
  if (!std::getline(in, header)) throw DataError(path.string() + ": missing 'count dim' header");
  std::istringstream hs(header);
  if (!(hs >> count >> result.dim) || result.dim == 0) {
    throw DataError(path.string() + ":1: expected 'count dim'");
  }
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name)) continue;
    std::vector<double> values(result.dim);
    for (double& v : values) {
      if (!(ls >> v)) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(result.dim) +
                        " values");
      }
    }
    result.vectors[name] = std::move(values);
  }
  if (result.vectors.size() != count) {
    throw DataError(path.string() + ": header declares " + std::to_string(count) + " vectors, found " +
                    std::to_string(result.vectors.size()));
  }
  return result;
}

FactIndex::FactIndex(const Graph& graph, std::span<const TaskMap* const> task_maps) {
  for (const Triple& t : graph.background()) add(t);
  for (const TaskMap* tasks : task_maps) {
    if (!tasks) continue;
    for (const auto& [name, triples] : *tasks) {
      for (const Triple& t : triples) add(t);
    }
  }
}

std::uint64_t FactIndex::key(EntityId head, RelationId relation) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(head)) << 32) | static_cast<std::uint32_t>(relation);
}

void FactIndex::add(const Triple& triple) { tails_[key(triple.head, triple.relation)].insert(triple.tail); }

bool FactIndex::holds(EntityId head, RelationId relation, EntityId tail) const {
  auto it = tails_.find(key(head, relation));
  return it != tails_.end() && it->second.contains(tail);
}

const std::unordered_set<EntityId>& FactIndex::tails(EntityId head, RelationId relation) const {
  static const std::unordered_set<EntityId> kEmpty;
  auto it = tails_.find(key(head, relation));
  return it == tails_.end() ? kEmpty : it->second;
}

NeighborIndex::NeighborIndex(std::size_t entity_count, std::size_t max_neighbors)
    : lists_(entity_count), max_neighbors_(max_neighbors) {}

std::span<const Neighbor> NeighborIndex::of(EntityId entity) const {
  if (entity < 0 || static_cast<std::size_t>(entity) >= lists_.size()) return {};
  return lists_[static_cast<std::size_t>(entity)];
}

NeighborIndex build_neighbor_index(const Graph& graph, std::size_t max_neighbors, std::uint64_t seed) {
  if (max_neighbors < 1) throw std::invalid_argument("max_neighbors must be at least 1");
  NeighborIndex index(graph.entity_count(), max_neighbors);
  for (const Triple& t : graph.background()) index.mutable_list(t.head).push_back({t.relation, t.tail});
  for (std::size_t e = 0; e < graph.entity_count(); ++e) {
    auto& list = index.mutable_list(static_cast<EntityId>(e));
    if (list.size() <= max_neighbors) continue;
    // Per-entity stream.
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (e + 1)));
    std::vector<std::size_t> order(list.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(max_neighbors);
    std::sort(order.begin(), order.end());
    std::vector<Neighbor> kept;
    kept.reserve(max_neighbors);
    for (std::size_t i : order) kept.push_back(list[i]);
    list = std::move(kept);
  }
  return index;
}

}  // namespace transam
