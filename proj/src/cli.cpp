#include "transam/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cctype>
#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include "CLI11.hpp"
#include "transam/checkpoint.hpp"
#include "transam/encoder.hpp"
#include "transam/ops.hpp"

namespace transam::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return value;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  return parse_number<std::size_t>(key, text);
}

double parse_real(const std::string& key, const std::string& text) {
  // from_chars for double is missing on some standard libraries.
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw ConfigError("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (expected true or false)");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value, const fs::path& base)>;

fs::path resolve(const fs::path& base, const std::string& value) {
  fs::path p(value);
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

SyntheticSpec& synthetic(RunConfig& c) {
  if (!c.synthetic) c.synthetic.emplace();
  return *c.synthetic;
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto path = [&](const std::string& key, fs::path DataPaths::*field) {
      t[key] = [field](RunConfig& c, const std::string&, const std::string& v, const fs::path& base) {
        c.data.*field = resolve(base, v);
      };
    };
    path("data.triples", &DataPaths::triples);
    path("data.train_tasks", &DataPaths::train_tasks);
    path("data.valid_tasks", &DataPaths::valid_tasks);
    path("data.test_tasks", &DataPaths::test_tasks);
    path("data.candidates", &DataPaths::candidates);
    path("data.pretrained", &DataPaths::pretrained);
    t["data.max_neighbors"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.data.max_neighbors = parse_size(k, v); };
    t["data.max_candidates"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.data.max_candidates = parse_size(k, v); };

    t["synthetic.enabled"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      if (parse_bool(k, v)) {
        synthetic(c);
      } else {
        c.synthetic.reset();
      }
    };
    t["synthetic.entities"] = [](RunConfig& c, auto& k, auto& v, auto&) { synthetic(c).entities = parse_size(k, v); };
    t["synthetic.background_relations"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).background_relations = parse_size(k, v);
    };
    t["synthetic.fewshot_relations"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).fewshot_relations = parse_size(k, v);
    };
    t["synthetic.pattern_mix"] = [](RunConfig& c, auto&, auto& v, auto&) {
      try {
        synthetic(c).pattern_mix = parse_pattern_mix(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    };
    t["synthetic.seed"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).seed = parse_number<std::uint64_t>(k, v);
    };
    t["synthetic.triples_per_relation"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).triples_per_relation = parse_size(k, v);
    };
    t["synthetic.background_degree"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).background_degree = parse_real(k, v);
    };
    t["synthetic.valid_relations"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).valid_relations = parse_size(k, v);
    };
    t["synthetic.test_relations"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).test_relations = parse_size(k, v);
    };
    t["synthetic.max_candidates"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      synthetic(c).max_candidates = parse_size(k, v);
    };

    t["model.d_e"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.d_e = parse_size(k, v); };
    t["model.heads"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.heads = parse_size(k, v); };
    t["model.layers"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.layers = parse_size(k, v); };
    t["model.K"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.K = parse_size(k, v); };
    t["model.theta_base"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.theta_base = parse_real(k, v); };
    t["model.mask_mode"] = [](RunConfig& c, auto&, auto& v, auto&) {
      try {
        c.model.mask_mode = parse_mask_mode(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    };
    t["model.ffn_hidden"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.ffn_hidden = parse_size(k, v); };
    t["model.dropout"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.dropout = parse_real(k, v); };

    t["train.steps"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.steps = parse_number<std::int64_t>(k, v);
    };
    t["train.batch_episodes"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.batch_episodes = parse_size(k, v);
    };
    t["train.negatives_per_positive"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.negatives_per_positive = parse_size(k, v);
    };
    t["train.peak_rate"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.schedule.peak_rate = parse_real(k, v);
    };
    t["train.warmup_steps"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.warmup_steps = parse_number<std::int64_t>(k, v);
    };
    t["train.total_steps"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.total_steps = parse_number<std::int64_t>(k, v);
    };
    t["train.eval_every"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.eval_every = parse_number<std::int64_t>(k, v);
    };
    t["train.patience"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.patience = parse_size(k, v); };
    t["train.fine_tune_embeddings"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.fine_tune_embeddings = parse_bool(k, v);
    };

    t["run.seed"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.seed = parse_number<std::uint64_t>(k, v); };
    t["run.out"] = [](RunConfig& c, auto&, auto& v, auto&) { c.out = v; };
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::finalize() {
  train.seed = seed;
  train.schedule.total_steps = total_steps.value_or(train.steps);
  train.schedule.warmup_steps = warmup_steps.value_or(std::max<std::int64_t>(1, train.schedule.total_steps / 10));
}

void RunConfig::validate() const {
  const bool files = !data.triples.empty();
  if (files && synthetic) throw ConfigError("config names both data files and a [synthetic] spec; choose one");
  if (!files && !synthetic) throw ConfigError("config names no data: set data.triples or add a [synthetic] section");
  if (files) {
    if (data.train_tasks.empty()) throw ConfigError("data.train_tasks is required with data.triples");
    for (const fs::path* p : {&data.triples, &data.train_tasks, &data.valid_tasks, &data.test_tasks,
                              &data.candidates, &data.pretrained}) {
      if (!p->empty() && !fs::is_regular_file(*p)) throw ConfigError("no such file: " + p->string());
    }
  }
  if (data.max_neighbors < 1) throw ConfigError("data.max_neighbors must be at least 1");
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.dropout < 0.0 || model.dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
}

IniDocument parse_ini(std::istream& in, const std::string& source) {
  IniDocument doc;
  std::string section;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#' || text[0] == ';') continue;
    const std::string where = source + ":" + std::to_string(number);
    if (text.front() == '[') {
      if (text.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(text.substr(1, text.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      doc.sections.insert(section);
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    const std::string key = trim(text.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    std::string value = text.substr(eq + 1);
    for (std::size_t i = 1; i < value.size(); ++i) {
      if ((value[i] == '#' || value[i] == ';') && std::isspace(static_cast<unsigned char>(value[i - 1]))) {
        value.resize(i);
        break;
      }
    }
    doc.entries.emplace_back(section + "." + key, trim(value));
  }
  return doc;
}

IniDocument read_ini(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_ini(in, path.string());
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value, const fs::path& base_dir) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(config, key, value, base_dir);
}

void apply_ini(RunConfig& config, const IniDocument& doc, const fs::path& base_dir) {
  if (doc.sections.contains("synthetic")) synthetic(config);
  for (const auto& [key, value] : doc.entries) apply_setting(config, key, value, base_dir);
}

json metrics_to_json(const RankingMetrics& m) {
  return json{{"mrr", m.mrr}, {"hits1", m.hits1}, {"hits10", m.hits10}, {"queries", m.queries}};
}

json report_to_json(const RankingReport& report) {
  json per = json::object();
  for (const auto& [name, m] : report.per_relation) per[name] = metrics_to_json(m);
  return json{{"aggregate", metrics_to_json(report.aggregate)}, {"per_relation", per}};
}

// ---------------------------------------------------------------- data

namespace {

struct Dataset {
  Graph graph;
  TaskMap train, valid, test;
  CandidateMap candidates;
  std::optional<PretrainedEmbeddings> pretrained;

  TaskMap all_tasks() const {
    TaskMap all = train;
    all.insert(valid.begin(), valid.end());
    all.insert(test.begin(), test.end());
    return all;
  }
};

Dataset load_dataset(const RunConfig& config) {
  Dataset d;
  if (config.synthetic) {
    SyntheticKg kg = generate_synthetic_kg(*config.synthetic);
    d.graph = std::move(kg.graph);
    d.train = std::move(kg.train);
    d.valid = std::move(kg.valid);
    d.test = std::move(kg.test);
    d.candidates = std::move(kg.candidates);
  } else {
    d.graph = load_triples(config.data.triples).graph;
    d.train = load_tasks(config.data.train_tasks, d.graph);
    if (!config.data.valid_tasks.empty()) d.valid = load_tasks(config.data.valid_tasks, d.graph);
    if (!config.data.test_tasks.empty()) d.test = load_tasks(config.data.test_tasks, d.graph);
    if (!config.data.candidates.empty()) d.candidates = load_candidates(config.data.candidates, d.graph);
    const TaskMap all = d.all_tasks();
    Rng rng(config.seed ^ 0xC2B2AE3D27D4EB4FULL);
    for (const auto& [name, triples] : all) {
      if (!d.candidates.contains(name)) {
        d.candidates[name] = candidates_for_relation(d.graph, all, name, config.data.max_candidates, rng);
      }
    }
  }
  if (!config.data.pretrained.empty()) d.pretrained = load_pretrained(config.data.pretrained);
  return d;
}

std::string vocabulary_hash(const Graph& graph) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xFF;
    h *= 1099511628211ULL;
  };
  for (const auto& n : graph.entities.names()) feed(n);
  feed("");
  for (const auto& n : graph.relations.names()) feed(n);
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

struct Workbench {
  EncoderParams encoder;
  TransamModel model;
  NeighborIndex neighbors;
  FactIndex facts;
};

Workbench make_workbench(const Dataset& data, const ModelConfig& model_config, const RunConfig& config) {
  Workbench w;
  Rng init_rng(config.seed);
  w.encoder = init_encoder_params(data.graph.entity_count(), data.graph.relation_count(), model_config.d_e, init_rng,
                                  data.pretrained ? &*data.pretrained : nullptr, &data.graph);
  w.model = TransamModel(model_config, init_rng);
  w.neighbors = build_neighbor_index(data.graph, config.data.max_neighbors, config.seed);
  const TaskMap* maps[] = {&data.train, &data.valid, &data.test};
  w.facts = FactIndex(data.graph, maps);
  return w;
}

void check_vocabulary(const LoadedCheckpoint& ckpt, const Graph& graph) {
  const auto& extra = ckpt.meta.extra;
  const bool counts = ckpt.meta.entity_count == graph.entity_count() && ckpt.meta.relation_count == graph.relation_count();
  const bool names = !extra.contains("vocabulary_hash") || extra["vocabulary_hash"] == vocabulary_hash(graph);
  if (!counts || !names) {
    throw ConfigError("checkpoint vocabulary (" + std::to_string(ckpt.meta.entity_count) + " entities, " +
                      std::to_string(ckpt.meta.relation_count) + " relations) does not match the data (" +
                      std::to_string(graph.entity_count()) + " entities, " + std::to_string(graph.relation_count()) +
                      " relations" + (counts ? ", different names" : "") + ")");
  }
}

void quantize_to_f32(std::span<NamedTensor> params) {
  for (auto& p : params) {
    for (double& v : p.tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

TaskMap filter_relations(const TaskMap& tasks, const std::string& csv) {
  if (csv.empty()) return tasks;
  TaskMap kept;
  std::stringstream in(csv);
  std::string name;
  while (std::getline(in, name, ',')) {
    name = trim(name);
    if (name.empty()) continue;
    auto it = tasks.find(name);
    if (it == tasks.end()) throw ConfigError("relation '" + name + "' is not in the evaluated split");
    kept.insert(*it);
  }
  if (kept.empty()) throw ConfigError("--relations selects nothing");
  return kept;
}

// ---------------------------------------------------------------- commands

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string relations;
  std::string mask_mode;
  std::string split = "test";
  std::string episode;
  std::string relation;
  bool inject_gradient_bug = false;
  std::vector<std::string> overrides;
};

/// Splits leftover "--section.key=value" / "--section.key value" tokens.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> result;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.find('.') == std::string::npos) {
      throw ConfigError("unexpected argument '" + tok + "'");
    }
    const auto eq = tok.find('=');
    if (eq != std::string::npos) {
      result.emplace_back(tok.substr(2, eq - 2), tok.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      result.emplace_back(tok.substr(2), extras[++i]);
    } else {
      throw ConfigError("override " + tok + " has no value");
    }
  }
  return result;
}

RunConfig build_config(const Options& o, const RunConfig& defaults = {}) {
  RunConfig config = defaults;
  if (!o.config.empty()) {
    const fs::path path(o.config);
    apply_ini(config, read_ini(path), path.parent_path());
  }
  for (const auto& [key, value] : parse_overrides(o.overrides)) apply_setting(config, key, value);
  if (!o.out.empty()) config.out = o.out;
  if (o.seed) config.seed = *o.seed;
  if (!o.mask_mode.empty()) apply_setting(config, "model.mask_mode", o.mask_mode);
  config.finalize();
  return config;
}

int cmd_generate(const Options& o, std::ostream& out) {
  RunConfig config = build_config(o);
  if (!config.synthetic) throw ConfigError("generate needs a [synthetic] section");
  const SyntheticKg kg = generate_synthetic_kg(*config.synthetic);
  fs::create_directories(config.out);
  write_triples(kg.graph, config.out / "background.tsv");
  write_tasks(kg.train, kg.graph, config.out / "train_tasks.json");
  write_tasks(kg.valid, kg.graph, config.out / "valid_tasks.json");
  write_tasks(kg.test, kg.graph, config.out / "test_tasks.json");
  write_candidates(kg.candidates, kg.graph, config.out / "candidates.json");
  {
    std::ofstream ini(config.out / "dataset.ini");
    ini << "[data]\ntriples = background.tsv\ntrain_tasks = train_tasks.json\nvalid_tasks = valid_tasks.json\n"
           "test_tasks = test_tasks.json\ncandidates = candidates.json\n";
  }
  auto count = [](const TaskMap& m) {
    std::size_t n = 0;
    for (const auto& [name, t] : m) n += t.size();
    return n;
  };
  out << "entities " << kg.graph.entity_count() << '\n'
      << "relations " << kg.graph.relation_count() << '\n'
      << "background triples " << kg.graph.background().size() << '\n'
      << "train relations " << kg.train.size() << " (" << count(kg.train) << " triples)\n"
      << "valid relations " << kg.valid.size() << " (" << count(kg.valid) << " triples)\n"
      << "test relations " << kg.test.size() << " (" << count(kg.test) << " triples)\n"
      << "wrote " << config.out.string() << '\n';
  return kOk;
}

CheckpointMeta make_meta(const RunConfig& config, const Dataset& data, std::int64_t step) {
  CheckpointMeta meta;
  meta.config = config.model;
  meta.entity_count = data.graph.entity_count();
  meta.relation_count = data.graph.relation_count();
  meta.step = step;
  meta.extra["vocabulary_hash"] = vocabulary_hash(data.graph);
  meta.extra["seed"] = config.seed;
  meta.extra["max_neighbors"] = config.data.max_neighbors;
  return meta;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig config = build_config(o);
  config.validate();
  Dataset data = load_dataset(config);
  if (data.valid.empty()) throw ConfigError("train needs validation tasks");

  Workbench w;
  std::optional<LoadedCheckpoint> resume;
  if (!o.checkpoint.empty()) {
    resume = load_checkpoint(o.checkpoint);
    check_vocabulary(*resume, data.graph);
    if (!(resume->meta.config == config.model)) throw ConfigError("checkpoint model config differs from the run config");
  }
  w = make_workbench(data, config.model, config);
  std::vector<NamedTensor> params = all_parameters(w.encoder, w.model);

  TrainState state(config.seed);
  if (resume) {
    assign_parameters(*resume, params);
    restore_adam(*resume, params, state.adam);
    state.step = resume->meta.step;
    const std::uint64_t mix = config.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(state.step + 1));
    state.sample_rng.seed(mix);
    state.dropout_rng.seed(mix ^ 0xD1B54A32D192ED03ULL);
  }

  fs::create_directories(config.out);
  const fs::path loss_path = config.out / "loss.csv";
  const bool append = resume && fs::exists(loss_path);
  std::ofstream loss_csv(loss_path, append ? std::ios::app : std::ios::trunc);
  if (!loss_csv) throw ConfigError("cannot write " + loss_path.string());
  if (!append) loss_csv << "step,loss,lr\n";
  loss_csv << std::setprecision(std::numeric_limits<double>::max_digits10);
  std::ofstream eval_log(config.out / "eval_log.jsonl", append ? std::ios::app : std::ios::trunc);
  std::ofstream run_log(config.out / "run.log", std::ios::app);
  const auto started = std::chrono::system_clock::now();
  run_log << "start " << std::chrono::duration_cast<std::chrono::seconds>(started.time_since_epoch()).count()
          << " step " << state.step << '\n';

  TrainData td;
  td.graph = &data.graph;
  td.neighbors = &w.neighbors;
  td.facts = &w.facts;
  td.train = &data.train;
  td.candidates = &data.candidates;
  td.valid = &data.valid;

  TrainCallbacks callbacks;
  callbacks.on_step = [&](const LossRecord& r) { loss_csv << r.step << ',' << r.loss << ',' << r.lr << '\n'; };
  callbacks.on_eval = [&](std::int64_t step, const RankingReport& report, bool improved) {
    json line = metrics_to_json(report.aggregate);
    line["step"] = step;
    line["improved"] = improved;
    eval_log << line.dump() << '\n';
    err << "step " << step << " valid mrr " << std::fixed << std::setprecision(4) << report.aggregate.mrr
        << std::defaultfloat << (improved ? " (best)" : "") << '\n';
  };

  TrainResult result;
  try {
    result = train(w.encoder, w.model, td, config.train, state, callbacks);
  } catch (const NumericAbort& e) {
    loss_csv.flush();
    err << "numeric abort: " << e.what();
    return kNumericAbort;
  }
  if (result.early_stopped) err << "early stop at step " << state.step << '\n';

  quantize_to_f32(params);
  EvalOptions eval_options;
  eval_options.K = config.model.K;
  eval_options.seed = config.seed;
  const RankingReport report =
      evaluate(model_scorer(w.encoder, w.neighbors, w.model), data.valid, data.candidates, w.facts, data.graph,
               eval_options);
  const json metrics = report_to_json(report);

  CheckpointMeta meta = make_meta(config, data, state.step);
  meta.extra["best_step"] = result.best_step;
  meta.extra["valid_metrics"] = metrics;
  save_checkpoint(config.out / "model.tam", params, meta, &state.adam);
  write_json_file(config.out / "metrics.json", metrics);
  run_log << "done step " << state.step << " seconds "
          << std::chrono::duration<double>(std::chrono::system_clock::now() - started).count() << '\n';
  out << metrics.dump(2) << '\n';
  return kOk;
}

struct LoadedModel {
  LoadedCheckpoint checkpoint;
  Workbench workbench;
};

LoadedModel load_model(const std::string& path, const Dataset& data, RunConfig& config, const Options& o) {
  LoadedModel m;
  m.checkpoint = load_checkpoint(path);
  check_vocabulary(m.checkpoint, data.graph);
  ModelConfig model_config = m.checkpoint.meta.config;
  if (!o.mask_mode.empty()) model_config.mask_mode = config.model.mask_mode;
  config.model = model_config;
  if (m.checkpoint.meta.extra.contains("max_neighbors")) {
    config.data.max_neighbors = m.checkpoint.meta.extra["max_neighbors"].get<std::size_t>();
  }
  m.workbench = make_workbench(data, model_config, config);
  std::vector<NamedTensor> params = all_parameters(m.workbench.encoder, m.workbench.model);
  assign_parameters(m.checkpoint, params);
  return m;
}

std::uint64_t checkpoint_seed(const LoadedCheckpoint& ckpt, const Options& o, const RunConfig& config) {
  if (o.seed) return *o.seed;
  if (ckpt.meta.extra.contains("seed")) return ckpt.meta.extra["seed"].get<std::uint64_t>();
  return config.seed;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  RunConfig config = build_config(o);
  config.validate();
  const Dataset data = load_dataset(config);
  LoadedModel m = load_model(o.checkpoint, data, config, o);
  const TaskMap* split = nullptr;
  if (o.split == "train") split = &data.train;
  if (o.split == "valid") split = &data.valid;
  if (o.split == "test") split = &data.test;
  if (!split) throw ConfigError("unknown split '" + o.split + "'");
  if (split->empty()) throw ConfigError("the " + o.split + " split is empty");
  const TaskMap tasks = filter_relations(*split, o.relations);
  EvalOptions options;
  options.K = config.model.K;
  options.seed = checkpoint_seed(m.checkpoint, o, config);
  const Workbench& w = m.workbench;
  const RankingReport report =
      evaluate(model_scorer(w.encoder, w.neighbors, w.model), tasks, data.candidates, w.facts, data.graph, options);
  out << report_to_json(report).dump(2) << '\n';
  return kOk;
}

json matrix_to_json(const Tensor& t, bool mask = false) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) {
      const double v = t.at(i, j);
      if (mask && std::isinf(v)) {
        row.push_back("-inf");
      } else {
        row.push_back(v);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Episode parse_episode(const std::string& text, std::size_t K, const Graph* graph, std::size_t entity_count) {
  std::vector<EntityPair> pairs;
  std::stringstream in(text);
  std::string item;
  auto entity = [&](const std::string& raw) -> EntityId {
    const std::string name = trim(raw);
    if (graph) return graph->entities.at(name);
    const auto id = parse_number<long long>("--episode", name);
    if (id < 0 || static_cast<std::size_t>(id) >= entity_count) throw ConfigError("entity id out of range: " + name);
    return static_cast<EntityId>(id);
  };
  while (std::getline(in, item, ';')) {
    const auto comma = item.find(',');
    if (comma == std::string::npos) throw ConfigError("--episode pairs are written head,tail");
    pairs.push_back({entity(item.substr(0, comma)), entity(item.substr(comma + 1))});
  }
  if (pairs.size() != K + 1) {
    throw ConfigError("--episode needs " + std::to_string(K) + " support pairs and a query pair");
  }
  Episode e;
  e.support.assign(pairs.begin(), pairs.end() - 1);
  e.query_pos = pairs.back();
  return e;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("inspect needs --checkpoint");
  RunConfig config = build_config(o);
  std::optional<Dataset> data;
  LoadedModel m;
  Episode episode;
  std::function<std::string(EntityId)> name_of;
  if (!o.config.empty()) {
    config.validate();
    data = load_dataset(config);
    m = load_model(o.checkpoint, *data, config, o);
    const std::size_t K = config.model.K;
    name_of = [&](EntityId e) { return e == m.workbench.encoder.cls_id() ? std::string("[CLS]") : data->graph.entities.name(e); };
    if (!o.episode.empty()) {
      episode = parse_episode(o.episode, K, &data->graph, data->graph.entity_count());
    } else {
      const TaskMap& pool = data->valid.empty() ? data->train : data->valid;
      auto it = o.relation.empty() ? pool.begin() : pool.find(o.relation);
      if (it == pool.end()) throw ConfigError("no relation '" + o.relation + "' to inspect");
      if (it->second.size() < K + 1) throw ConfigError("relation '" + it->first + "' has too few triples");
      for (std::size_t i = 0; i < K; ++i) episode.support.push_back({it->second[i].head, it->second[i].tail});
      episode.query_pos = {it->second[K].head, it->second[K].tail};
      episode.relation = data->graph.relations.at(it->first);
    }
  } else {
    if (o.episode.empty()) throw ConfigError("inspect without --config needs --episode with entity ids");
    m.checkpoint = load_checkpoint(o.checkpoint);
    ModelConfig model_config = m.checkpoint.meta.config;
    if (!o.mask_mode.empty()) model_config.mask_mode = config.model.mask_mode;
    config.model = model_config;
    Rng rng(0);
    m.workbench.encoder = init_encoder_params(m.checkpoint.meta.entity_count, m.checkpoint.meta.relation_count,
                                              model_config.d_e, rng);
    m.workbench.model = TransamModel(model_config, rng);
    std::vector<NamedTensor> params = all_parameters(m.workbench.encoder, m.workbench.model);
    assign_parameters(m.checkpoint, params);
    episode = parse_episode(o.episode, model_config.K, nullptr, m.checkpoint.meta.entity_count);
    name_of = [](EntityId e) { return std::to_string(e); };
  }

  const Workbench& w = m.workbench;
  const QuerySequence seq = build_sequence(episode, episode.query_pos, w.encoder.cls_id());
  ForwardTrace trace;
  ForwardOptions options;
  options.trace = &trace;
  double probability = 0.0;
  {
    NoGradGuard guard;
    probability = predict(forward(seq, w.encoder, w.neighbors, w.model, options), w.model.head()).at(0, 1);
  }

  json doc;
  doc["K"] = config.model.K;
  doc["mask_mode"] = to_string(config.model.mask_mode);
  json names = json::array();
  for (EntityId e : seq.ids) names.push_back(name_of(e));
  doc["sequence"] = names;
  doc["mask"] = matrix_to_json(w.model.mask(), true);
  doc["roles"] = std::vector<int>(w.model.roles().begin(), w.model.roles().end());
  doc["positions"] = std::vector<std::int32_t>(w.model.positions().begin(), w.model.positions().end());
  doc["probability"] = probability;
  json blocks = json::array();
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    json heads = json::array();
    for (std::size_t h = 0; h < trace.blocks[b].size(); ++h) {
      heads.push_back({{"head", h},
                       {"local_weights", matrix_to_json(trace.blocks[b][h].local_weights)},
                       {"global_weights", matrix_to_json(trace.blocks[b][h].global_weights)}});
    }
    blocks.push_back({{"block", b}, {"heads", heads}});
  }
  doc["blocks"] = blocks;
  out << doc.dump(2) << '\n';
  return kOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  RunConfig defaults;
  defaults.model.d_e = 4;
  defaults.model.heads = 2;
  defaults.model.layers = 2;
  defaults.model.K = 1;
  defaults.model.ffn_hidden = 8;
  defaults.synthetic = SyntheticSpec{};
  defaults.synthetic->entities = 24;
  defaults.synthetic->background_relations = 2;
  defaults.synthetic->fewshot_relations = 3;
  defaults.synthetic->triples_per_relation = 4;
  defaults.synthetic->valid_relations = 1;
  defaults.synthetic->test_relations = 1;
  defaults.synthetic->max_candidates = 10;
  RunConfig config = build_config(o, defaults);
  if (config.model.d_e > 8 || config.model.layers > 2) {
    throw ConfigError("gradcheck needs a tiny model (d_e <= 8, layers <= 2); got d_e=" +
                      std::to_string(config.model.d_e) + ", layers=" + std::to_string(config.model.layers));
  }
  config.model.dropout = 0.0;
  config.validate();
  const Dataset data = load_dataset(config);
  Workbench w = make_workbench(data, config.model, config);

  Rng rng(config.seed);
  std::vector<Episode> batch;
  for (const auto& [name, triples] : data.train) {
    if (triples.size() < config.model.K + 1) continue;
    batch.push_back(sample_episode(triples, data.graph.relations.at(name), static_cast<int>(config.model.K), 1,
                                   data.candidates.at(name), w.facts, rng));
    break;
  }
  if (batch.empty()) throw ConfigError("no training relation has enough triples for an episode");

  std::vector<NamedTensor> params = all_parameters(w.encoder, w.model);
  GradCheckOptions options;
  options.seed = config.seed;
  if (o.inject_gradient_bug) {
    options.after_backward = [](std::span<NamedTensor> ps) {
      for (auto& p : ps) {
        if (p.name == "blocks.0.head0.WQ") p.tensor.mutable_grad()[0] += 1.0;
      }
    };
  }
  const GradCheckReport report = gradient_check(
      [&] { return batch_loss(batch, w.encoder, w.neighbors, w.model, ForwardOptions{}); }, params, options);

  std::vector<GradCheckEntry> worst = report.worst_per_param;
  std::stable_sort(worst.begin(), worst.end(),
                   [](const auto& a, const auto& b) { return a.relative_error > b.relative_error; });
  out << std::scientific << std::setprecision(3);
  for (const auto& e : worst) {
    out << std::left << std::setw(28) << e.name << ' ' << e.relative_error << "  (coord " << e.index << ", analytic "
        << e.analytic << ", numeric " << e.numeric << ")\n";
  }
  const bool pass = report.max_relative_error <= 1e-4;
  out << "coordinates checked " << report.coordinates_checked << '\n'
      << "max relative error " << report.max_relative_error << '\n'
      << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? kOk : kCheckFailed;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot knowledge graph completion with a local-global attention matcher", "transam"};
  app.require_subcommand(1, 1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config file");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--mask-mode", o.mask_mode, "Local mask: literal or block")
        ->check(CLI::IsMember({"literal", "block"}));
    sub->allow_extras();
  };
  CLI::App* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  common(gen);
  CLI::App* tr = app.add_subcommand("train", "Train a model");
  common(tr);
  tr->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint");
  CLI::App* ev = app.add_subcommand("eval", "Rank candidates with a checkpoint and print metrics JSON");
  common(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--relations", o.relations, "Comma-separated relations to evaluate");
  ev->add_option("--split", o.split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  CLI::App* in = app.add_subcommand("inspect", "Dump masks, roles, positions and attention weights as JSON");
  common(in);
  in->add_option("--checkpoint", o.checkpoint, "Checkpoint to inspect")->required();
  in->add_option("--episode", o.episode, "Pairs 'h1,t1;...;hq,tq' (names, or ids without --config)");
  in->add_option("--relation", o.relation, "Relation whose first triples form the episode");
  CLI::App* gc = app.add_subcommand("gradcheck", "Compare gradients with finite differences");
  common(gc);
  gc->add_flag("--inject-gradient-bug", o.inject_gradient_bug)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  }

  try {
    CLI::App* chosen = app.get_subcommands().front();
    o.overrides = chosen->remaining();
    if (chosen == gen) return cmd_generate(o, out);
    if (chosen == tr) return cmd_train(o, out, err);
    if (chosen == ev) return cmd_eval(o, out);
    if (chosen == in) return cmd_inspect(o, out);
    return cmd_gradcheck(o, out);
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"transam"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace transam::cli
