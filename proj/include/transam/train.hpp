// Episodic training loop.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "transam/eval.hpp"
#include "transam/graph.hpp"
#include "transam/model.hpp"
#include "transam/optim.hpp"
#include "transam/sampling.hpp"

namespace transam {

struct TrainConfig {
  std::int64_t steps = 1000;
  std::size_t batch_episodes = 8;
  std::size_t negatives_per_positive = 1;
  LrSchedule schedule;
  std::int64_t eval_every = 500;
  std::uint64_t seed = 1;
  std::size_t patience = 10;  // evaluations without improvement; 0 disables
  /// Entity and relation embeddings stay fixed unless set; the CLS row
  /// always trains.
  bool fine_tune_embeddings = false;

  void validate() const;
};

struct TrainData {
  const Graph* graph = nullptr;
  const NeighborIndex* neighbors = nullptr;
  const FactIndex* facts = nullptr;
  const TaskMap* train = nullptr;
  const CandidateMap* candidates = nullptr;
  const TaskMap* valid = nullptr;  // optional; enables validation and best-model tracking
  /// When set, every batch cycles through these episodes instead of sampling.
  const std::vector<Episode>* fixed_episodes = nullptr;
};

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Everything needed to continue a run where it stopped.
struct TrainState {
  std::int64_t step = 0;
  AdamState adam;
  Rng sample_rng;
  Rng dropout_rng;

  explicit TrainState(std::uint64_t seed = 1) : sample_rng(seed), dropout_rng(seed ^ 0xD1B54A32D192ED03ULL) {}
};

struct TrainCallbacks {
  /// After each validation pass; `improved` marks a new best MRR.
  std::function<void(std::int64_t step, const RankingReport& report, bool improved)> on_eval;
  std::function<void(const LossRecord& record)> on_step;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::optional<RankingReport> best_report;
  std::int64_t best_step = -1;
  bool early_stopped = false;
};

/// NaN or infinite loss; the message carries the offending batch.
class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs from state.step to config.steps. Step s uses lr_at(schedule, s).
/// The batch loss is the mean cross-entropy over its query sequences. With
/// validation data the best-scoring parameters are restored at the end.
TrainResult train(EncoderParams& encoder, TransamModel& model, const TrainData& data, const TrainConfig& config,
                  TrainState& state, const TrainCallbacks& callbacks = {});

std::vector<NamedTensor> all_parameters(const EncoderParams& encoder, const TransamModel& model);

/// Mean loss of one batch of episodes, with history recorded.
Tensor batch_loss(std::span<const Episode> episodes, const EncoderParams& encoder, const NeighborIndex& neighbors,
                  const TransamModel& model, const ForwardOptions& options);

}  // namespace transam
