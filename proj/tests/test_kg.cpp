#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "transam/graph.hpp"
#include "transam/sampling.hpp"
#include "transam/synthetic.hpp"

using namespace transam;

namespace {

std::filesystem::path write_file(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
  const auto path = dir / name;
  std::ofstream(path) << text;
  return path;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::set<std::tuple<std::string, std::string, std::string>> named(const Graph& g) {
  std::set<std::tuple<std::string, std::string, std::string>> out;
  for (const Triple& t : g.background()) {
    out.emplace(g.entities.name(t.head), g.relations.name(t.relation), g.entities.name(t.tail));
  }
  return out;
}

}  // namespace

TEST_SUITE("load_triples") {
  TEST_CASE("duplicate dropped and counted") {
    const auto dir = testing::scratch_dir("dup");
    const auto r = load_triples(write_file(dir, "t.tsv", "a\tr\tb\na\tr\tb\n"));
    CHECK(r.graph.background().size() == 1);
    CHECK(r.duplicates == 1);
  }

  TEST_CASE("empty file") {
    const auto dir = testing::scratch_dir("empty");
    const auto r = load_triples(write_file(dir, "t.tsv", ""));
    CHECK(r.graph.entity_count() == 0);
    CHECK(r.graph.background().empty());
  }

  TEST_CASE("ids follow first appearance") {
    const auto dir = testing::scratch_dir("ids");
    const auto r = load_triples(write_file(dir, "t.tsv", "w\tp\tx\nx\tq\ty\ny\tp\tz\nz\tq\tw\nw\tq\ty\n"));
    CHECK(r.graph.entity_count() == 4);
    CHECK(r.graph.entities.names() == std::vector<std::string>{"w", "x", "y", "z"});
    CHECK(r.graph.relations.names() == std::vector<std::string>{"p", "q"});
    CHECK(r.graph.background().size() == 5);
    CHECK(r.graph.background()[4] == Triple{0, 1, 2});
  }

  TEST_CASE("malformed line reports its number") {
    const auto dir = testing::scratch_dir("bad");
    const auto path = write_file(dir, "t.tsv", "a\tr\tb\n\nonly two\tfields\n");
    try {
      load_triples(path);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }
  }

  TEST_CASE("round trip keeps names and triples") {
    const auto dir = testing::scratch_dir("rt");
    Graph g;
    g.add_background("a", "likes", "b");
    g.add_background("b", "likes", "c");
    g.add_background("c", "hates", "a");
    write_triples(g, dir / "g.tsv");
    CHECK(named(load_triples(dir / "g.tsv").graph) == named(g));
  }
}

TEST_SUITE("load_tasks") {
  TEST_CASE("one task") {
    const auto dir = testing::scratch_dir("tasks");
    Graph g;
    const auto tasks = load_tasks(write_file(dir, "t.json", R"({"r1": [["a","r1","b"]]})"), g);
    REQUIRE(tasks.size() == 1);
    CHECK(tasks.at("r1").size() == 1);
    CHECK(g.entities.name(tasks.at("r1")[0].tail) == "b");
  }

  TEST_CASE("empty object") {
    const auto dir = testing::scratch_dir("tasks0");
    Graph g;
    CHECK(load_tasks(write_file(dir, "t.json", "{}"), g).empty());
  }

  TEST_CASE("mismatched relation is named") {
    const auto dir = testing::scratch_dir("tasks_bad");
    Graph g;
    try {
      load_tasks(write_file(dir, "t.json", R"({"r1": [["a","r2","b"]]})"), g);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("r1") != std::string::npos);
    }
  }

  TEST_CASE("tasks and candidates round trip") {
    const auto dir = testing::scratch_dir("tasks_rt");
    Graph g;
    g.add_background("a", "bg", "b");
    TaskMap tasks;
    const RelationId r = g.relations.intern("few");
    tasks["few"] = {{g.entities.intern("a"), r, g.entities.intern("c")}};
    CandidateMap cands{{"few", {r, {g.entities.at("c"), g.entities.at("b")}}}};
    write_tasks(tasks, g, dir / "t.json");
    write_candidates(cands, g, dir / "c.json");
    Graph g2 = g;
    CHECK(load_tasks(dir / "t.json", g2) == tasks);
    const auto back = load_candidates(dir / "c.json", g2);
    CHECK(back.at("few").entities == cands.at("few").entities);
  }
}

TEST_SUITE("neighbors") {
  TEST_CASE("small list kept in order, isolated entity empty") {
    Graph g;
    g.add_background("a", "r", "b");
    g.add_background("a", "s", "c");
    g.entities.intern("lonely");
    const auto idx = build_neighbor_index(g, 50, 1);
    REQUIRE(idx.of(0).size() == 2);
    CHECK(idx.of(0)[0] == Neighbor{0, 1});
    CHECK(idx.of(0)[1] == Neighbor{1, 2});
    CHECK(idx.of(g.entities.at("lonely")).empty());
  }

  TEST_CASE("cap is a deterministic sample") {
    Graph g;
    for (int i = 0; i < 100; ++i) g.add_background("hub", "r", "e" + std::to_string(i));
    const auto a = build_neighbor_index(g, 50, 3), b = build_neighbor_index(g, 50, 3), c = build_neighbor_index(g, 50, 4);
    CHECK(a.of(0).size() == 50);
    CHECK(std::equal(a.of(0).begin(), a.of(0).end(), b.of(0).begin(), b.of(0).end()));
    CHECK_FALSE(std::equal(a.of(0).begin(), a.of(0).end(), c.of(0).begin(), c.of(0).end()));
    CHECK(std::is_sorted(a.of(0).begin(), a.of(0).end(),
                         [](const Neighbor& x, const Neighbor& y) { return x.tail < y.tail; }));
  }
}

TEST_SUITE("sampling") {
  TEST_CASE("corrupt_tail forced choice and empty feasible set") {
    Rng rng(1);
    const std::vector<EntityId> cands{1, 2};
    for (int i = 0; i < 20; ++i) CHECK(corrupt_tail({0, 1}, cands, {1}, rng) == EntityPair{0, 2});
    const std::vector<EntityId> only{1};
    CHECK_THROWS_AS(corrupt_tail({0, 1}, only, {1}, rng), DataError);
  }

  TEST_CASE("corrupt_tail is uniform over feasible tails") {
    Rng rng(8);
    const std::vector<EntityId> cands{10, 11, 12, 13, 14, 15};
    std::map<EntityId, int> counts;
    for (int i = 0; i < 1000; ++i) ++counts[corrupt_tail({0, 10}, cands, {10, 15}, rng).tail];
    CHECK(counts.size() == 4);
    for (const auto& [tail, n] : counts) {
      CHECK(n >= 200);
      CHECK(n <= 300);
    }
  }

  struct Fixture {
    Graph g;
    TaskMap tasks;
    RelationId r = 0;
    Fixture(int triples) {
      for (int i = 0; i < 30; ++i) g.entities.intern("e" + std::to_string(i));
      r = g.relations.intern("r");
      for (int i = 0; i < triples; ++i) tasks["r"].push_back({i, r, i + 10});
    }
  };

  TEST_CASE("two triples force support and query") {
    Fixture f(2);
    const TaskMap* maps[] = {&f.tasks};
    FactIndex facts(f.g, maps);
    const CandidateSet cands{f.r, {10, 11, 20, 21}};
    Rng rng(5);
    for (int i = 0; i < 10; ++i) {
      const Episode e = sample_episode(f.tasks["r"], f.r, 1, 1, cands, facts, rng);
      REQUIRE(e.support.size() == 1);
      CHECK_FALSE(e.support[0] == e.query_pos);
      CHECK(e.query_neg.size() == 1);
      CHECK_FALSE(facts.holds(e.query_pos.head, f.r, e.query_neg[0].tail));
    }
  }

  TEST_CASE("no valid negative and too few triples are errors") {
    Fixture f(2);
    const TaskMap* maps[] = {&f.tasks};
    FactIndex facts(f.g, maps);
    Rng rng(5);
    // Candidates hold only golds, each the true tail of its own head.
    CHECK_THROWS_AS(sample_episode(f.tasks["r"], f.r, 1, 1, CandidateSet{f.r, {10}}, facts, rng), DataError);
    Fixture one(1);
    CHECK_THROWS_AS(sample_episode(one.tasks["r"], one.r, 1, 1, CandidateSet{one.r, {20}}, facts, rng), DataError);
  }

  TEST_CASE("negatives avoid background and task facts") {
    Fixture f(10);
    f.g.add_background({0, f.g.relations.intern("r"), 25});
    const TaskMap* maps[] = {&f.tasks};
    FactIndex facts(f.g, maps);
    std::vector<EntityId> all;
    for (int i = 0; i < 30; ++i) all.push_back(i);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      const Episode e = sample_episode(f.tasks["r"], f.r, 1, 3, CandidateSet{f.r, all}, facts, rng);
      for (const auto& n : e.query_neg) {
        CHECK(n.head == e.query_pos.head);
        CHECK_FALSE(facts.holds(n.head, f.r, n.tail));
      }
      CHECK(std::find(e.support.begin(), e.support.end(), e.query_pos) == e.support.end());
    }
  }

  TEST_CASE("seeded episodes are reproducible") {
    Fixture f(10);
    const TaskMap* maps[] = {&f.tasks};
    FactIndex facts(f.g, maps);
    const CandidateSet cands{f.r, {20, 21, 22, 23}};
    Rng a(42), b(42);
    for (int i = 0; i < 5; ++i) {
      const Episode x = sample_episode(f.tasks["r"], f.r, 1, 2, cands, facts, a);
      const Episode y = sample_episode(f.tasks["r"], f.r, 1, 2, cands, facts, b);
      CHECK(x.support == y.support);
      CHECK(x.query_pos == y.query_pos);
      CHECK(x.query_neg == y.query_neg);
    }
  }

  TEST_CASE("candidate sets") {
    Graph g;
    for (int i = 0; i < 1000; ++i) g.entities.intern("e" + std::to_string(i));
    const RelationId r = g.relations.intern("r");
    TaskMap tasks;
    for (int i = 0; i < 20; ++i) tasks["r"].push_back({i, r, 500 + i});
    Rng a(1), b(1);
    const auto x = candidates_for_relation(g, tasks, "r", 100, a);
    const auto y = candidates_for_relation(g, tasks, "r", 100, b);
    CHECK(x.entities.size() == 100);
    CHECK(x.entities == y.entities);
    CHECK(std::set<EntityId>(x.entities.begin(), x.entities.end()).size() == 100);
    for (int i = 0; i < 20; ++i) {
      CHECK(std::find(x.entities.begin(), x.entities.end(), 500 + i) != x.entities.end());
    }
    const auto small = candidates_for_relation(g, tasks, "r", 5, a);
    CHECK(small.entities.size() == 20);
  }

  TEST_CASE("gold tails always present over random relations") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
      Graph g;
      for (int i = 0; i < 60; ++i) g.entities.intern("e" + std::to_string(i));
      const RelationId r = g.relations.intern("r");
      TaskMap tasks;
      std::uniform_int_distribution<int> e(0, 59), n(1, 30);
      const int count = n(rng);
      for (int i = 0; i < count; ++i) tasks["r"].push_back({e(rng), r, e(rng)});
      const auto c = candidates_for_relation(g, tasks, "r", 10 + static_cast<std::size_t>(trial % 40), rng);
      for (const auto& t : tasks["r"]) CHECK(std::find(c.entities.begin(), c.entities.end(), t.tail) != c.entities.end());
    }
  }
}

TEST_SUITE("synthetic") {
  SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.entities = 50;
    s.background_relations = 5;
    s.fewshot_relations = 4;
    s.pattern_mix = {RelationPattern::Symmetric};
    s.seed = 7;
    s.valid_relations = 1;
    s.test_relations = 1;
    s.triples_per_relation = 10;
    return s;
  }

  TEST_CASE("same seed writes identical files") {
    const auto dir = testing::scratch_dir("synth");
    for (int run = 0; run < 2; ++run) {
      const auto kg = generate_synthetic_kg(small_spec());
      const auto sub = dir / std::to_string(run);
      std::filesystem::create_directories(sub);
      write_triples(kg.graph, sub / "bg.tsv");
      write_tasks(kg.all_tasks(), kg.graph, sub / "tasks.json");
      write_candidates(kg.candidates, kg.graph, sub / "cands.json");
    }
    for (const char* f : {"bg.tsv", "tasks.json", "cands.json"}) CHECK(slurp(dir / "0" / f) == slurp(dir / "1" / f));
  }

  TEST_CASE("planted patterns hold in the default benchmark") {
    const auto kg = generate_synthetic_kg(SyntheticSpec{});
    CHECK(kg.graph.entity_count() == 200);
    const auto all = kg.all_tasks();
    CHECK(all.size() == 12);
    std::set<RelationPattern> seen;
    for (const auto& [name, triples] : all) {
      std::set<std::pair<EntityId, EntityId>> pairs;
      for (const auto& t : triples) pairs.insert({t.head, t.tail});
      const RelationPattern p = kg.patterns.at(name);
      seen.insert(p);
      const RelationId src = kg.graph.relations.at(kg.source_relation.at(name));
      for (const auto& t : triples) {
        if (p == RelationPattern::Symmetric) CHECK(pairs.contains({t.tail, t.head}));
        if (p == RelationPattern::AntiSymmetric) {
          CHECK_FALSE(pairs.contains({t.tail, t.head}));
          CHECK(kg.graph.contains({t.head, src, t.tail}));
        }
        if (p == RelationPattern::Inverse) CHECK(kg.graph.contains({t.tail, src, t.head}));
      }
    }
    CHECK(seen.size() == 3);
    const auto idx = build_neighbor_index(kg.graph, 50, 1);
    for (const auto& [name, triples] : all)
      for (const auto& t : triples) {
        CHECK_FALSE(idx.of(t.head).empty());
        CHECK_FALSE(idx.of(t.tail).empty());
      }
  }

  TEST_CASE("symmetric-only spec") {
    const auto kg = generate_synthetic_kg(small_spec());
    for (const auto& [name, triples] : kg.all_tasks()) {
      std::set<std::pair<EntityId, EntityId>> pairs;
      for (const auto& t : triples) pairs.insert({t.head, t.tail});
      for (const auto& [h, t] : pairs) CHECK(pairs.contains({t, h}));
    }
  }

  TEST_CASE("infeasible specs") {
    SyntheticSpec s = small_spec();
    s.entities = 10;
    CHECK_THROWS_AS(generate_synthetic_kg(s), DataError);
    s = small_spec();
    s.fewshot_relations = 0;
    CHECK_THROWS_AS(generate_synthetic_kg(s), DataError);
    s = small_spec();
    s.entities = 20;
    s.fewshot_relations = 500;
    CHECK_THROWS_AS(generate_synthetic_kg(s), DataError);
  }

  TEST_CASE("pattern mix parsing") {
    CHECK(parse_pattern_mix("mixed").size() == 3);
    CHECK(parse_pattern_mix("symmetric-only") == std::vector<RelationPattern>{RelationPattern::Symmetric});
    CHECK(parse_pattern_mix("inverse,antisymmetric").size() == 2);
    CHECK_THROWS(parse_pattern_mix("sideways"));
  }
}
