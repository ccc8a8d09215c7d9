#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "transam/checkpoint.hpp"
#include "transam/eval.hpp"
#include "transam/synthetic.hpp"
#include "transam/train.hpp"

using namespace transam;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  SyntheticKg kg;
  NeighborIndex neighbors;
  FactIndex facts;
  TaskMap all;

  explicit Fixture(SyntheticSpec spec) : kg(generate_synthetic_kg(spec)) {
    neighbors = build_neighbor_index(kg.graph, 50, 1);
    all = kg.all_tasks();
    const TaskMap* maps[] = {&all};
    facts = FactIndex(kg.graph, maps);
  }

  TrainData data(bool with_valid = false) const {
    TrainData d;
    d.graph = &kg.graph;
    d.neighbors = &neighbors;
    d.facts = &facts;
    d.train = &kg.train;
    d.candidates = &kg.candidates;
    if (with_valid) d.valid = &kg.valid;
    return d;
  }
};

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.entities = 40;
  s.background_relations = 3;
  s.fewshot_relations = 5;
  s.triples_per_relation = 8;
  s.valid_relations = 1;
  s.test_relations = 1;
  s.max_candidates = 15;
  return s;
}

ModelConfig small_model() {
  ModelConfig c;
  c.d_e = 4;
  c.heads = 2;
  c.layers = 1;
  c.K = 1;
  c.ffn_hidden = 8;
  c.dropout = 0.1;
  return c;
}

TrainConfig short_run(std::int64_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_episodes = 2;
  t.schedule = {1e-3, 5, steps};
  t.eval_every = 10;
  t.patience = 0;
  return t;
}

// Scores drawn from a handful of levels; ties are common.
CandidateScorer tied_scorer(std::uint64_t seed, int levels) {
  return [seed, levels](const ScoreRequest& r) {
    std::vector<double> out;
    for (EntityId t : r.tails) {
      std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(r.head) * 1000003ULL) ^
                          (static_cast<std::uint64_t>(t) * 7919ULL) ^ static_cast<std::uint64_t>(r.relation));
      out.push_back(static_cast<double>(rng() % static_cast<std::uint64_t>(levels)) / levels);
    }
    return out;
  };
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("rank_from_scores") {
    const std::vector<double> others{0.1, 0.9, 0.5, 0.5};
    CHECK(rank_from_scores(1.0, others) == 1);
    CHECK(rank_from_scores(0.5, others) == 4);
    CHECK(rank_from_scores(0.0, others) == 5);
    const std::vector<double> tied(9, 0.3);
    CHECK(rank_from_scores(0.3, tied) == 10);
    const std::vector<double> none;
    CHECK(rank_from_scores(0.3, none) == 1);
  }

  TEST_CASE("metrics_from_ranks") {
    const std::vector<std::size_t> ranks{1, 2, 4};
    const auto m = metrics_from_ranks(ranks);
    CHECK(m.mrr == doctest::Approx((1.0 + 0.5 + 0.25) / 3).epsilon(1e-15));
    CHECK(m.hits1 == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(m.hits10 == 1.0);
    CHECK(m.queries == 3);
    const std::vector<std::size_t> far{11};
    CHECK(metrics_from_ranks(far).hits10 == 0.0);
  }

  TEST_CASE("ranks agree with a sort oracle") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng() % 30;
      std::vector<double> scores(n);
      for (double& s : scores) s = static_cast<double>(rng() % 5);
      const std::span<const double> rest(scores.begin() + 1, scores.end());
      CHECK(rank_from_scores(scores[0], rest) == oracle::pessimistic_rank(scores));
    }
  }

  TEST_CASE("monotone transform keeps ranks") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> scores(20), mapped(20);
      for (std::size_t i = 0; i < 20; ++i) {
        scores[i] = static_cast<double>(rng() % 7) / 7.0;
        mapped[i] = std::exp(3.0 * scores[i]) - 2.0;
      }
      CHECK(rank_from_scores(scores[0], std::span<const double>(scores).subspan(1)) ==
            rank_from_scores(mapped[0], std::span<const double>(mapped).subspan(1)));
    }
  }
}

TEST_SUITE("evaluate") {
  TEST_CASE("matches oracle on dumped scores") {
    const Fixture f(small_spec());
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::vector<QueryScores> dump;
      EvalOptions opts;
      opts.seed = seed;
      opts.threads = 1 + seed % 3;
      opts.dump = &dump;
      const auto report = evaluate(tied_scorer(seed, 4), f.kg.train, f.kg.candidates, f.facts, f.kg.graph, opts);
      std::vector<std::size_t> ranks;
      for (const auto& q : dump) {
        REQUIRE(q.candidates.front() == q.query.tail);
        const auto& pool = f.kg.candidates.at(q.relation).entities;
        const RelationId rel = f.kg.graph.relations.at(q.relation);
        std::vector<EntityId> expected{q.query.tail};
        for (EntityId c : pool)
          if (c != q.query.tail && !f.facts.holds(q.query.head, rel, c)) expected.push_back(c);
        CHECK(q.candidates == expected);
        CHECK(q.rank == oracle::pessimistic_rank(q.scores));
        ranks.push_back(oracle::pessimistic_rank(q.scores));
      }
      const auto want = oracle::metrics(ranks);
      CHECK(report.aggregate.mrr == want.mrr);
      CHECK(report.aggregate.hits1 == want.hits1);
      CHECK(report.aggregate.hits10 == want.hits10);
      std::size_t per_relation = 0;
      for (const auto& [name, m] : report.per_relation) per_relation += m.queries;
      CHECK(per_relation == dump.size());
    }
  }

  TEST_CASE("support choice is seeded and excluded from queries") {
    const Fixture f(small_spec());
    EvalOptions opts;
    opts.seed = 5;
    std::vector<QueryScores> a, b;
    opts.dump = &a;
    evaluate(tied_scorer(1, 4), f.kg.valid, f.kg.candidates, f.facts, f.kg.graph, opts);
    opts.dump = &b;
    evaluate(tied_scorer(1, 4), f.kg.valid, f.kg.candidates, f.facts, f.kg.graph, opts);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].query == b[i].query);
    std::size_t triples = 0;
    for (const auto& [name, t] : f.kg.valid) triples += t.size();
    CHECK(a.size() == triples - f.kg.valid.size());
  }

  TEST_CASE("all-tied scores rank last") {
    const Fixture f(small_spec());
    std::vector<QueryScores> dump;
    EvalOptions opts;
    opts.dump = &dump;
    const CandidateScorer flat = [](const ScoreRequest& r) { return std::vector<double>(r.tails.size(), 0.5); };
    evaluate(flat, f.kg.valid, f.kg.candidates, f.facts, f.kg.graph, opts);
    for (const auto& q : dump) CHECK(q.rank == q.candidates.size());
  }

  TEST_CASE("errors") {
    const Fixture f(small_spec());
    EvalOptions opts;
    opts.K = 100;
    CHECK_THROWS_AS(evaluate(tied_scorer(1, 4), f.kg.valid, f.kg.candidates, f.facts, f.kg.graph, opts), DataError);
    CandidateMap empty;
    CHECK_THROWS_AS(evaluate(tied_scorer(1, 4), f.kg.valid, empty, f.facts, f.kg.graph, EvalOptions{}), DataError);
    const CandidateScorer broken = [](const ScoreRequest&) -> std::vector<double> { throw std::runtime_error("x"); };
    EvalOptions threaded;
    threaded.threads = 3;
    CHECK_THROWS_AS(evaluate(broken, f.kg.valid, f.kg.candidates, f.facts, f.kg.graph, threaded), std::runtime_error);
  }

  TEST_CASE("rank_query") {
    Episode e;
    e.query_pos = {0, 3};
    const CandidateScorer by_id = [](const ScoreRequest& r) {
      std::vector<double> out;
      for (EntityId t : r.tails) out.push_back(static_cast<double>(t));
      return out;
    };
    const std::vector<EntityId> cands{1, 3, 5, 7};
    CHECK(rank_query(by_id, e, cands) == 3);
    const std::vector<EntityId> missing{1, 2};
    CHECK_THROWS_AS(rank_query(by_id, e, missing), DataError);
  }

  TEST_CASE("thread count") {
    CHECK(resolve_thread_count(3) == 3);
    CHECK(resolve_thread_count(0) >= 1);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip within f32 precision") {
    Rng rng(1);
    const TransamModel model(small_model(), rng);
    const EncoderParams enc = init_encoder_params(10, 3, 4, rng);
    const auto params = all_parameters(enc, model);
    const fs::path path = testing::scratch_dir("ckpt") / "model.tam";
    CheckpointMeta meta{small_model(), 10, 3, 42, {{"note", "x"}}};
    save_checkpoint(path, params, meta);
    CHECK(fs::exists(path.string() + ".json"));
    const LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.meta.config == small_model());
    CHECK(loaded.meta.step == 42);
    CHECK(loaded.meta.entity_count == 10);
    CHECK(loaded.meta.extra["note"] == "x");

    Rng other(99);
    TransamModel model2(small_model(), other);
    EncoderParams enc2 = init_encoder_params(10, 3, 4, other);
    auto params2 = all_parameters(enc2, model2);
    assign_parameters(loaded, params2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto a = params[k].tensor.data(), b = params2[k].tensor.data();
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));
      }
    }
  }

  TEST_CASE("adam moments survive") {
    Rng rng(2);
    const TransamModel model(small_model(), rng);
    const EncoderParams enc = init_encoder_params(10, 3, 4, rng);
    auto params = all_parameters(enc, model);
    AdamState adam;
    for (auto& p : params) {
      auto g = p.tensor.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.01 * static_cast<double>(i % 7) - 0.03;
    }
    adam_step(params, adam, 1e-3);
    const fs::path path = testing::scratch_dir("ckpt_adam") / "model.tam";
    save_checkpoint(path, params, CheckpointMeta{small_model(), 10, 3, 1, {}}, &adam);
    AdamState restored;
    CHECK(restore_adam(load_checkpoint(path), params, restored));
    CHECK(restored.step == adam.step);
    REQUIRE(restored.first_moment.size() == adam.first_moment.size());
    for (std::size_t k = 0; k < adam.first_moment.size(); ++k) {
      for (std::size_t i = 0; i < adam.first_moment[k].size(); ++i) {
        CHECK(std::abs(restored.first_moment[k][i] - adam.first_moment[k][i]) <=
              1e-6 * std::max(1.0, std::abs(adam.first_moment[k][i])));
        CHECK(std::abs(restored.second_moment[k][i] - adam.second_moment[k][i]) <=
              1e-6 * std::max(1e-12, std::abs(adam.second_moment[k][i])));
      }
    }
    const fs::path bare = testing::scratch_dir("ckpt_bare") / "model.tam";
    save_checkpoint(bare, params, CheckpointMeta{small_model(), 10, 3, 1, {}});
    AdamState none;
    CHECK_FALSE(restore_adam(load_checkpoint(bare), params, none));
  }

  TEST_CASE("corrupt files") {
    Rng rng(3);
    const TransamModel model(small_model(), rng);
    const EncoderParams enc = init_encoder_params(10, 3, 4, rng);
    auto params = all_parameters(enc, model);
    const fs::path dir = testing::scratch_dir("ckpt_bad");
    const fs::path good = dir / "good.tam";
    save_checkpoint(good, params, CheckpointMeta{small_model(), 10, 3, 0, {}});

    auto kind_of = [](const fs::path& p) {
      try {
        load_checkpoint(p);
      } catch (const CheckpointError& e) {
        return static_cast<int>(e.kind());
      }
      return -1;
    };

    std::string bytes;
    {
      std::ifstream in(good, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    const fs::path magic = dir / "magic.tam";
    {
      std::ofstream out(magic, std::ios::binary);
      out << "XXXX" << bytes.substr(4);
    }
    fs::copy_file(good.string() + ".json", magic.string() + ".json", fs::copy_options::overwrite_existing);
    CHECK(kind_of(magic) == static_cast<int>(CheckpointError::Kind::BadMagic));

    const fs::path cut = dir / "cut.tam";
    {
      std::ofstream out(cut, std::ios::binary);
      out << bytes.substr(0, bytes.size() / 2);
    }
    fs::copy_file(good.string() + ".json", cut.string() + ".json", fs::copy_options::overwrite_existing);
    CHECK(kind_of(cut) == static_cast<int>(CheckpointError::Kind::Truncated));
    CHECK(kind_of(dir / "absent.tam") == static_cast<int>(CheckpointError::Kind::Io));

    const LoadedCheckpoint loaded = load_checkpoint(good);
    ModelConfig wider = small_model();
    wider.d_e = 6;
    Rng r2(4);
    TransamModel big(wider, r2);
    EncoderParams big_enc = init_encoder_params(10, 3, 6, r2);
    auto big_params = all_parameters(big_enc, big);
    try {
      assign_parameters(loaded, big_params);
      FAIL("expected shape mismatch");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::ShapeMismatch);
    }
    ModelConfig deeper = small_model();
    deeper.layers = 2;
    TransamModel deep(deeper, r2);
    EncoderParams deep_enc = init_encoder_params(10, 3, 4, r2);
    auto deep_params = all_parameters(deep_enc, deep);
    try {
      assign_parameters(loaded, deep_params);
      FAIL("expected missing tensor");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::MissingTensor);
    }
  }
}

TEST_SUITE("training") {
  TEST_CASE("config validation") {
    TrainConfig t = short_run(10);
    t.steps = 0;
    CHECK_THROWS(t.validate());
    t = short_run(10);
    t.batch_episodes = 0;
    CHECK_THROWS(t.validate());
  }

  TEST_CASE("identical seeds give identical traces") {
    const Fixture f(small_spec());
    auto run = [&](std::uint64_t seed) {
      Rng rng(seed);
      TransamModel model(small_model(), rng);
      EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng);
      TrainConfig cfg = short_run(30);
      cfg.seed = seed;
      TrainState state(seed);
      return train(enc, model, f.data(), cfg, state).trace;
    };
    const auto a = run(3), b = run(3), c = run(4);
    REQUIRE(a.size() == 30);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      same = same && a[i].loss == b[i].loss && a[i].lr == b[i].lr;
      differs = differs || a[i].loss != c[i].loss;
    }
    CHECK(same);
    CHECK(differs);
    CHECK(a[0].lr == 0.0);
  }

  TEST_CASE("resume continues the same trajectory") {
    const Fixture f(small_spec());
    ModelConfig mc = small_model();
    mc.dropout = 0.0;
    Rng rng(5), rng_b(5);
    TransamModel model(mc, rng), model_b(mc, rng_b);
    EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng);
    EncoderParams enc_b = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng_b);
    TrainConfig cfg = short_run(20);
    TrainState whole(1);
    const auto full = train(enc, model, f.data(), cfg, whole).trace;

    TrainState part(1);
    cfg.steps = 10;
    auto first = train(enc_b, model_b, f.data(), cfg, part).trace;
    cfg.steps = 20;
    const auto second = train(enc_b, model_b, f.data(), cfg, part).trace;
    REQUIRE(first.size() == 10);
    REQUIRE(second.size() == 10);
    CHECK(second.front().step == 10);
    first.insert(first.end(), second.begin(), second.end());
    for (std::size_t i = 0; i < full.size(); ++i) CHECK(first[i].loss == full[i].loss);
  }

  TEST_CASE("frozen embeddings except the CLS row") {
    const Fixture f(small_spec());
    Rng rng(6);
    TransamModel model(small_model(), rng);
    EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng);
    const std::vector<double> ent(enc.entity_embedding.data().begin(), enc.entity_embedding.data().end());
    const std::vector<double> rel(enc.relation_embedding.data().begin(), enc.relation_embedding.data().end());
    const std::vector<double> w2(enc.W2.data().begin(), enc.W2.data().end());
    TrainState state(1);
    train(enc, model, f.data(), short_run(20), state);
    const auto now = enc.entity_embedding.data();
    const std::size_t cls = enc.entity_count * 4;
    CHECK(std::equal(ent.begin(), ent.begin() + static_cast<std::ptrdiff_t>(cls), now.begin()));
    CHECK_FALSE(std::equal(ent.begin() + static_cast<std::ptrdiff_t>(cls), ent.end(),
                           now.begin() + static_cast<std::ptrdiff_t>(cls)));
    CHECK(std::equal(rel.begin(), rel.end(), enc.relation_embedding.data().begin()));
    CHECK_FALSE(std::equal(w2.begin(), w2.end(), enc.W2.data().begin()));
  }

  TEST_CASE("validation tracking restores the best parameters") {
    const Fixture f(small_spec());
    Rng rng(7);
    TransamModel model(small_model(), rng);
    EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng);
    TrainConfig cfg = short_run(40);
    std::vector<double> mrrs;
    TrainCallbacks cb;
    cb.on_eval = [&](std::int64_t, const RankingReport& r, bool) { mrrs.push_back(r.aggregate.mrr); };
    TrainState state(1);
    const auto result = train(enc, model, f.data(true), cfg, state, cb);
    REQUIRE(mrrs.size() == 4);
    REQUIRE(result.best_report);
    CHECK(result.best_report->aggregate.mrr == *std::max_element(mrrs.begin(), mrrs.end()));
    EvalOptions opts;
    opts.seed = cfg.seed;
    const auto again = evaluate(model_scorer(enc, f.neighbors, model), f.kg.valid, f.kg.candidates, f.facts,
                                f.kg.graph, opts);
    CHECK(again.aggregate.mrr == result.best_report->aggregate.mrr);
  }

  TEST_CASE("patience stops early") {
    const Fixture f(small_spec());
    Rng rng(8);
    TransamModel model(small_model(), rng);
    EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng);
    TrainConfig cfg = short_run(1000);
    cfg.schedule.peak_rate = 1e-12;
    cfg.patience = 1;
    TrainState state(1);
    const auto result = train(enc, model, f.data(true), cfg, state);
    CHECK(result.early_stopped);
    CHECK(result.trace.size() < 1000);
  }

  TEST_CASE("fixed episode overfit") {
    const Fixture f(small_spec());
    ModelConfig mc = small_model();
    mc.d_e = 8;
    mc.dropout = 0.0;
    Rng rng(9);
    TransamModel model(mc, rng);
    EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 8, rng);
    const auto& [name, triples] = *f.kg.train.begin();
    Episode e;
    e.relation = f.kg.graph.relations.at(name);
    e.support = {{triples[0].head, triples[0].tail}};
    e.query_pos = {triples[1].head, triples[1].tail};
    e.query_neg = {{triples[1].head, triples[0].tail == triples[1].tail ? triples[2].tail : triples[0].tail}};
    const std::vector<Episode> fixed{e};
    TrainData data = f.data();
    data.fixed_episodes = &fixed;
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.batch_episodes = 1;
    cfg.schedule = {1e-2, 10, 200};
    TrainState state(1);
    const auto trace = train(enc, model, data, cfg, state).trace;
    CHECK(std::abs(trace.front().loss - std::log(2.0)) <= 0.15);
    CHECK(trace.back().loss < 0.05);
  }

  TEST_CASE("non-finite loss aborts") {
    const Fixture f(small_spec());
    Rng rng(10);
    TransamModel model(small_model(), rng);
    EncoderParams enc = init_encoder_params(f.kg.graph.entities.size(), f.kg.graph.relations.size(), 4, rng);
    enc.W2.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainState state(1);
    CHECK_THROWS_AS(train(enc, model, f.data(), short_run(5), state), NumericAbort);
  }
}
