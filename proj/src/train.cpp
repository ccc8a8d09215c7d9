#include "transam/train.hpp"

#include <cmath>
#include <sstream>

#include "transam/ops.hpp"

namespace transam {

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("train: steps must be at least 1");
  if (eval_every < 1) throw std::invalid_argument("train: eval_every must be at least 1");
  if (batch_episodes < 1) throw std::invalid_argument("train: batch_episodes must be at least 1");
  schedule.validate();
}

std::vector<NamedTensor> all_parameters(const EncoderParams& encoder, const TransamModel& model) {
  std::vector<NamedTensor> params = encoder.named_parameters();
  for (auto& p : model.named_parameters()) params.push_back(std::move(p));
  return params;
}

Tensor batch_loss(std::span<const Episode> episodes, const EncoderParams& encoder, const NeighborIndex& neighbors,
                  const TransamModel& model, const ForwardOptions& options) {
  std::vector<Tensor> predictions;
  std::vector<int> labels;
  for (const Episode& episode : episodes) {
    auto run = [&](const EntityPair& query) {
      const QuerySequence seq = build_sequence(episode, query, encoder.cls_id());
      predictions.push_back(predict(forward(seq, encoder, neighbors, model, options), model.head()));
      labels.push_back(seq.label);
    };
    run(episode.query_pos);
    for (const EntityPair& neg : episode.query_neg) run(neg);
  }
  return scale(bce_loss(predictions, labels), 1.0 / static_cast<double>(labels.size()));
}

namespace {

std::string describe_batch(const std::vector<Episode>& batch, const Graph& graph) {
  std::ostringstream out;
  for (const Episode& e : batch) {
    out << "  relation " << graph.relations.name(e.relation) << " support";
    for (const auto& p : e.support) out << " (" << graph.entities.name(p.head) << "," << graph.entities.name(p.tail) << ")";
    out << " query (" << graph.entities.name(e.query_pos.head) << "," << graph.entities.name(e.query_pos.tail)
        << ") negatives";
    for (const auto& p : e.query_neg) out << " (" << graph.entities.name(p.head) << "," << graph.entities.name(p.tail) << ")";
    out << '\n';
  }
  return out.str();
}

// Zeroes embedding gradients except the CLS row. Adam moments of frozen
// entries stay 0, so their updates are exactly 0.
void freeze_embeddings(EncoderParams& encoder) {
  auto entity = encoder.entity_embedding.mutable_grad();
  std::fill(entity.begin(), entity.end() - static_cast<std::ptrdiff_t>(encoder.dim), 0.0);
  auto relation = encoder.relation_embedding.mutable_grad();
  std::fill(relation.begin(), relation.end(), 0.0);
}

}  // namespace

TrainResult train(EncoderParams& encoder, TransamModel& model, const TrainData& data, const TrainConfig& config,
                  TrainState& state, const TrainCallbacks& callbacks) {
  config.validate();
  if (!data.graph || !data.neighbors || !data.facts || !data.train || !data.candidates) {
    throw std::invalid_argument("train: incomplete training data");
  }
  const std::size_t K = model.config().K;

  struct Source {
    const std::string* name;
    const std::vector<Triple>* triples;
    const CandidateSet* candidates;
  };
  std::vector<Source> sources;
  if (!data.fixed_episodes) {
    for (const auto& [name, triples] : *data.train) {
      if (triples.size() < K + 1) continue;
      auto cand = data.candidates->find(name);
      if (cand == data.candidates->end()) throw DataError("no candidates for training relation '" + name + "'");
      sources.push_back({&name, &triples, &cand->second});
    }
    if (sources.empty()) throw DataError("no training relation has at least K+1 triples");
  } else if (data.fixed_episodes->empty()) {
    throw std::invalid_argument("train: empty fixed episode list");
  }

  std::vector<NamedTensor> params = all_parameters(encoder, model);
  ForwardOptions options;
  options.training = true;
  options.dropout_rng = &state.dropout_rng;

  TrainResult result;
  std::vector<std::vector<double>> best_values;
  std::size_t evals_without_gain = 0;
  std::size_t fixed_cursor = 0;

  for (; state.step < config.steps; ++state.step) {
    std::vector<Episode> batch;
    for (std::size_t b = 0; b < config.batch_episodes; ++b) {
      if (data.fixed_episodes) {
        batch.push_back((*data.fixed_episodes)[fixed_cursor++ % data.fixed_episodes->size()]);
        continue;
      }
      std::uniform_int_distribution<std::size_t> pick(0, sources.size() - 1);
      const Source& src = sources[pick(state.sample_rng)];
      batch.push_back(sample_episode(*src.triples, src.candidates->relation, static_cast<int>(K),
                                     static_cast<int>(config.negatives_per_positive), *src.candidates, *data.facts,
                                     state.sample_rng));
    }

    zero_grads(params);
    Tensor loss;
    try {
      loss = batch_loss(batch, encoder, *data.neighbors, model, options);
    } catch (const NumericError& e) {
      throw NumericAbort(std::string(e.what()) + " at step " + std::to_string(state.step) + "; batch:\n" +
                         describe_batch(batch, *data.graph));
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericAbort("non-finite loss at step " + std::to_string(state.step) + "; batch:\n" +
                         describe_batch(batch, *data.graph));
    }
    loss.backward();
    if (!config.fine_tune_embeddings) freeze_embeddings(encoder);
    const double rate = lr_at(config.schedule, state.step);
    adam_step(params, state.adam, rate);

    const LossRecord record{state.step, value, rate};
    result.trace.push_back(record);
    if (callbacks.on_step) callbacks.on_step(record);

    const std::int64_t done = state.step + 1;
    if (data.valid && (done % config.eval_every == 0 || done == config.steps)) {
      EvalOptions eval_options;
      eval_options.K = K;
      eval_options.seed = config.seed;
      const RankingReport report = evaluate(model_scorer(encoder, *data.neighbors, model), *data.valid,
                                            *data.candidates, *data.facts, *data.graph, eval_options);
      const bool improved = !result.best_report || report.aggregate.mrr > result.best_report->aggregate.mrr;
      if (improved) {
        result.best_report = report;
        result.best_step = done;
        best_values.clear();
        for (const auto& p : params) best_values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
        evals_without_gain = 0;
      } else {
        ++evals_without_gain;
      }
      if (callbacks.on_eval) callbacks.on_eval(done, report, improved);
      if (config.patience > 0 && evals_without_gain >= config.patience) {
        result.early_stopped = true;
        ++state.step;
        break;
      }
    }
  }

  if (!best_values.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto dst = params[k].tensor.mutable_data();
      std::copy(best_values[k].begin(), best_values[k].end(), dst.begin());
    }
  }
  return result;
}

}  // namespace transam
