#pragma once

// Minibatch training of a ModelGraph: per language, forward along its path,
// CTC loss, backward, and an Adam update of exactly the parameters on that
// path before moving on to the next language.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tet/corpus.h"
#include "tet/langtree.h"

namespace tet {

enum class UpdateMode {
  kSequential,  // one update per language, gradients zeroed in between
  kJoint,       // gradients of all languages summed, one update per step
};

struct TrainConfig {
  ArchTag arch = ArchTag::kTet;
  ModelDims dims;
  Real learning_rate = Real(1e-4);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = 0;  // decoupled
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  std::size_t pad_margin = corpus::kDefaultPadMargin;
  // Empty: alphabetical by language code.
  std::vector<std::string> language_order;
  UpdateMode update_mode = UpdateMode::kSequential;
  std::size_t warmup_steps = 0;  // linear warmup, 0 = constant LR
  Real clip_norm = 0;            // per-update global norm clip, 0 = off
  std::size_t eval_every = 0;
  std::size_t eval_examples = 200;
  std::size_t checkpoint_every = 0;
  // Aborted (rolled back) steps tolerated in a row before fit() gives up.
  std::size_t max_consecutive_aborts = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct AdamSlot {
  std::vector<Real> m, v;
  std::uint64_t step = 0;
};

struct AdamHyper {
  Real lr = Real(1e-3);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = 0;
};

class OptimizerState {
 public:
  // Lazily allocated per parameter name.
  AdamSlot& slot(const std::string& name, std::size_t size);
  const AdamSlot* find(const std::string& name) const;
  std::uint64_t step_count(const std::string& name) const;
  const std::map<std::string, AdamSlot>& slots() const { return slots_; }
  std::map<std::string, AdamSlot>& slots() { return slots_; }
  bool operator==(const OptimizerState& o) const;

 private:
  std::map<std::string, AdamSlot> slots_;
};

// Bias-corrected Adam; decay (when > 0) applied directly to the weights.
void adam_update(std::span<Real> param, std::span<const Real> grad, AdamSlot& slot,
                 const AdamHyper& h);

struct LanguageStep {
  Real loss = 0;  // +inf when no row was feasible
  std::size_t rows = 0;
  std::size_t infeasible_rows = 0;
  bool updated = false;
};

struct StepResult {
  std::map<std::string, LanguageStep> languages;
  // Languages in the order their updates were applied.
  std::vector<std::string> update_sequence;
  bool aborted = false;
  std::string incident;
};

std::vector<std::string> language_order(const ModelGraph& g, const TrainConfig& cfg);

// One minibatch. On a non-finite loss the model and optimizer are restored to
// their pre-step values and the result is flagged as aborted.
StepResult train_step(ModelGraph& g, const corpus::Batch& batch, const TrainConfig& cfg,
                      OptimizerState& opt, std::size_t step_index = 0);

// Examples of minibatch `step`: consecutive slices of per-epoch seeded
// permutations.
std::vector<const corpus::Example*> batch_examples(const corpus::ParallelCorpus& train,
                                                   std::uint64_t seed, std::size_t step,
                                                   std::size_t batch_size);
corpus::Batch batch_for_step(const ModelGraph& g, const corpus::ParallelCorpus& train,
                             const TrainConfig& cfg, std::size_t step);

struct TrainingState {
  ModelGraph model;
  OptimizerState optimizer;
  std::size_t step = 0;  // completed steps
};

TrainingState init_training(const LanguageHierarchy& h, const corpus::Vocab& vocab,
                            const TrainConfig& cfg);

// Exact (float64) parameters, Adam moments and step counter.
void save_state(TrainingState& s, const TrainConfig& cfg, const std::filesystem::path& path);
// `s` must already hold a model of the same structure (init_training).
void load_state(TrainingState& s, const std::filesystem::path& path);

struct FitOptions {
  const corpus::ParallelCorpus* eval_set = nullptr;
  std::filesystem::path report_path;     // JSON Lines; empty = none
  std::filesystem::path checkpoint_dir;  // empty = none
  // Stop once this many steps are complete (0 = cfg.steps).
  std::size_t stop_at = 0;
  std::function<void(std::size_t step, const StepResult&)> on_step;
};

struct FitReport {
  std::map<std::string, std::vector<Real>> loss_curves;  // one entry per step
  std::vector<nlohmann::json> records;
  std::size_t aborted_steps = 0;
};

// Continues from s.step up to cfg.steps (or opts.stop_at). Deterministic given
// (cfg.seed, corpus, build). Throws NumericError after too many aborted steps.
FitReport fit(TrainingState& s, const corpus::ParallelCorpus& train, const TrainConfig& cfg,
              const FitOptions& opts = {});

}  // namespace tet
