#include "tet/trainer.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "binio.h"
#include "tet/ctc.h"
#include "tet/encoder.h"
#include "tet/eval.h"

namespace tet {

using json = nlohmann::json;

namespace {

const char* to_string(UpdateMode m) { return m == UpdateMode::kJoint ? "joint" : "sequential"; }

UpdateMode parse_update_mode(const std::string& s) {
  if (s == "sequential") return UpdateMode::kSequential;
  if (s == "joint") return UpdateMode::kJoint;
  throw ConfigError("unknown update mode '" + s + "'");
}

constexpr char kStateMagic[9] = "TETSTATE";
constexpr std::uint32_t kStateVersion = 1;

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(double(learning_rate)))
    throw ConfigError("learning rate must be finite and non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (clip_norm < 0) throw ConfigError("clip norm must be non-negative");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::set<std::string> seen;
  for (const auto& l : language_order)
    if (!seen.insert(l).second) throw ConfigError("language order lists " + l + " twice");
  ModelDims d = dims;
  d.vocab_size = std::max<std::size_t>(d.vocab_size, 2);  // filled in from the vocabulary later
  d.validate();
}

json TrainConfig::to_json() const {
  return {{"arch", tet::to_string(arch)},
          {"dims", dims_to_json(dims)},
          {"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"steps", steps},
          {"seed", seed},
          {"pad_margin", pad_margin},
          {"language_order", language_order},
          {"update_mode", to_string(update_mode)},
          {"warmup_steps", warmup_steps},
          {"clip_norm", clip_norm},
          {"eval_every", eval_every},
          {"eval_examples", eval_examples},
          {"checkpoint_every", checkpoint_every},
          {"max_consecutive_aborts", max_consecutive_aborts},
          {"precision", sizeof(Real) == 8 ? "float64" : "float32"}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("arch")) c.arch = parse_arch(j["arch"].get<std::string>());
    if (j.contains("dims")) {
      const auto& d = j["dims"];
      c.dims.d_model = d.value("d_model", c.dims.d_model);
      c.dims.d_ff = d.value("d_ff", c.dims.d_ff);
      c.dims.n_heads = d.value("n_heads", c.dims.n_heads);
      c.dims.vocab_size = d.value("vocab_size", c.dims.vocab_size);
      if (d.value("positional", std::string("sinusoidal")) == "learned")
        c.dims.positional = PositionalKind::kLearned;
      c.dims.max_positions = d.value("max_positions", c.dims.max_positions);
      c.dims.ln_eps = d.value("ln_eps", c.dims.ln_eps);
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.pad_margin = j.value("pad_margin", c.pad_margin);
    c.language_order = j.value("language_order", c.language_order);
    if (j.contains("update_mode")) c.update_mode = parse_update_mode(j["update_mode"]);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_examples = j.value("eval_examples", c.eval_examples);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.max_consecutive_aborts = j.value("max_consecutive_aborts", c.max_consecutive_aborts);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

AdamSlot& OptimizerState::slot(const std::string& name, std::size_t size) {
  auto& s = slots_[name];
  if (s.m.empty()) {
    s.m.assign(size, Real{0});
    s.v.assign(size, Real{0});
  } else if (s.m.size() != size) {
    throw DimensionError("optimizer slot " + name + " holds " + std::to_string(s.m.size()) +
                         " values, parameter has " + std::to_string(size));
  }
  return s;
}

const AdamSlot* OptimizerState::find(const std::string& name) const {
  auto it = slots_.find(name);
  return it == slots_.end() ? nullptr : &it->second;
}

std::uint64_t OptimizerState::step_count(const std::string& name) const {
  const auto* s = find(name);
  return s ? s->step : 0;
}

bool OptimizerState::operator==(const OptimizerState& o) const {
  if (slots_.size() != o.slots_.size()) return false;
  for (const auto& [name, s] : slots_) {
    const auto* t = o.find(name);
    if (!t || t->step != s.step || t->m != s.m || t->v != s.v) return false;
  }
  return true;
}

void adam_update(std::span<Real> param, std::span<const Real> grad, AdamSlot& slot,
                 const AdamHyper& h) {
  if (param.size() != grad.size() || slot.m.size() != param.size() ||
      slot.v.size() != param.size())
    throw DimensionError("adam_update: parameter, gradient and moment sizes differ");
  ++slot.step;
  const Real bc1 = 1 - std::pow(h.beta1, Real(slot.step));
  const Real bc2 = 1 - std::pow(h.beta2, Real(slot.step));
  const Real decay = 1 - h.lr * h.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const Real g = grad[i];
    slot.m[i] = h.beta1 * slot.m[i] + (1 - h.beta1) * g;
    slot.v[i] = h.beta2 * slot.v[i] + (1 - h.beta2) * g * g;
    const Real m_hat = slot.m[i] / bc1;
    const Real v_hat = slot.v[i] / bc2;
    if (h.weight_decay > 0) param[i] *= decay;
    param[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

std::vector<std::string> language_order(const ModelGraph& g, const TrainConfig& cfg) {
  auto langs = g.languages();
  std::sort(langs.begin(), langs.end());
  if (cfg.language_order.empty()) return langs;
  for (const auto& l : cfg.language_order)
    if (!g.has_language(l)) throw ConfigError("language order names unknown language " + l);
  // Listed languages first, the rest alphabetically.
  std::vector<std::string> order = cfg.language_order;
  for (const auto& l : langs)
    if (std::find(order.begin(), order.end(), l) == order.end()) order.push_back(l);
  return order;
}

namespace {

struct Snapshot {
  std::vector<std::vector<Real>> values;
  OptimizerState optimizer;
};

Snapshot take_snapshot(ModelGraph& g, const OptimizerState& opt) {
  Snapshot s;
  for (auto& p : g.parameters())
    s.values.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  s.optimizer = opt;
  return s;
}

void restore(ModelGraph& g, OptimizerState& opt, Snapshot& s) {
  auto params = g.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(s.values[i].begin(), s.values[i].end(), params[i].tensor.values().begin());
    params[i].tensor.zero_grad();
  }
  opt = std::move(s.optimizer);
}

bool grads_finite(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (Real v : p.tensor.grad())
      if (!std::isfinite(double(v))) return false;
  }
  return true;
}

AdamHyper hyper_for(const TrainConfig& cfg, std::size_t step_index) {
  AdamHyper h{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  if (cfg.warmup_steps > 0 && step_index < cfg.warmup_steps)
    h.lr = cfg.learning_rate * Real(step_index + 1) / Real(cfg.warmup_steps);
  return h;
}

void apply_update(std::vector<NamedParam>& params, OptimizerState& opt, const AdamHyper& h,
                  Real clip_norm) {
  Real factor = 1;
  if (clip_norm > 0) {
    double sq = 0;
    for (const auto& p : params)
      if (p.tensor.has_grad())
        for (Real v : p.tensor.grad()) sq += double(v) * double(v);
    const double norm = std::sqrt(sq);
    if (norm > double(clip_norm)) factor = Real(double(clip_norm) / norm);
  }
  std::vector<Real> scaled;
  for (auto& p : params) {
    auto& slot = opt.slot(p.name, p.tensor.numel());
    std::span<const Real> g = p.tensor.grad();
    if (factor != 1) {
      scaled.assign(g.begin(), g.end());
      for (Real& v : scaled) v *= factor;
      g = scaled;
    }
    adam_update(p.tensor.values(), g, slot, h);
    p.tensor.zero_grad();
  }
}

// Forward + CTC for one language; backward when the loss is usable.
// Returns false when the step must be aborted.
bool language_pass(ModelGraph& g, const corpus::Batch& batch, const std::string& lang,
                   LanguageStep& ls, std::string& incident) {
  const auto& tg = batch.targets.at(lang);
  ad::Tape tape;
  auto logits = forward_path(tape, g, lang, batch);
  auto log_probs = ad::log_softmax_rows(tape, logits);
  ctc::BatchLossStats stats;
  auto loss = ctc::ctc_loss_batch(tape, log_probs, tg.sequences, tg.present,
                                  g.vocab.blank_id(), &stats);
  ls.rows = stats.rows_used;
  ls.infeasible_rows = stats.rows_infeasible;
  ls.loss = loss.item();
  if (stats.rows_used == 0) return true;  // nothing to learn from
  if (!std::isfinite(double(ls.loss))) {
    incident = "non-finite loss for " + lang;
    return false;
  }
  ad::backward(loss, tape);
  return true;
}

}  // namespace

StepResult train_step(ModelGraph& g, const corpus::Batch& batch, const TrainConfig& cfg,
                      OptimizerState& opt, std::size_t step_index) {
  StepResult result;
  Snapshot snap = take_snapshot(g, opt);
  const AdamHyper h = hyper_for(cfg, step_index);
  const auto order = language_order(g, cfg);
  for (auto& p : g.parameters()) p.tensor.zero_grad();

  auto abort = [&](std::string why) {
    restore(g, opt, snap);
    result.aborted = true;
    result.incident = std::move(why);
    result.update_sequence.clear();
    for (auto& [_, ls] : result.languages) ls.updated = false;
    spdlog::warn("step {} aborted and rolled back: {}", step_index, result.incident);
    return result;
  };

  std::vector<std::string> contributed;
  for (const auto& lang : order) {
    auto& ls = result.languages[lang];
    ls.loss = std::numeric_limits<Real>::infinity();
    auto it = batch.targets.find(lang);
    if (it == batch.targets.end() || it->second.rows_present() == 0) continue;
    std::string incident;
    if (!language_pass(g, batch, lang, ls, incident)) return abort(incident);
    if (ls.rows == 0) continue;
    if (cfg.update_mode == UpdateMode::kJoint) {
      contributed.push_back(lang);
      continue;
    }
    auto params = g.path_parameters(lang);
    if (!grads_finite(params)) return abort("non-finite gradient for " + lang);
    apply_update(params, opt, h, cfg.clip_norm);
    for (const auto& p : params)
      for (Real v : p.tensor.values())
        if (!std::isfinite(double(v))) return abort("non-finite parameter after update of " + lang);
    ls.updated = true;
    result.update_sequence.push_back(lang);
  }

  if (cfg.update_mode == UpdateMode::kJoint && !contributed.empty()) {
    // Union of the contributing paths, each parameter updated once.
    std::vector<NamedParam> params;
    std::set<std::string> seen;
    for (const auto& lang : contributed)
      for (auto& p : g.path_parameters(lang))
        if (seen.insert(p.name).second) params.push_back(p);
    if (!grads_finite(params)) return abort("non-finite gradient in joint update");
    apply_update(params, opt, h, cfg.clip_norm);
    for (const auto& lang : contributed) {
      result.languages[lang].updated = true;
      result.update_sequence.push_back(lang);
    }
  }
  return result;
}

std::vector<const corpus::Example*> batch_examples(const corpus::ParallelCorpus& train,
                                                   std::uint64_t seed, std::size_t step,
                                                   std::size_t batch_size) {
  const std::size_t n = train.size();
  if (n == 0) throw DataError("training set is empty");
  std::vector<const corpus::Example*> out;
  out.reserve(batch_size);
  std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = step * batch_size; i < (step + 1) * batch_size; ++i) {
    const std::size_t epoch = i / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(mix_seed(seed, epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(&train.examples[perm[i % n]]);
  }
  return out;
}

corpus::Batch batch_for_step(const ModelGraph& g, const corpus::ParallelCorpus& train,
                             const TrainConfig& cfg, std::size_t step) {
  const auto examples = batch_examples(train, mix_seed(cfg.seed, 0xba7c), step, cfg.batch_size);
  return corpus::make_batch(std::span<const corpus::Example* const>(examples), g.languages(),
                            mix_seed(cfg.seed ^ 0x9ad, step), batch_options_for(g, cfg.pad_margin));
}

TrainingState init_training(const LanguageHierarchy& h, const corpus::Vocab& vocab,
                            const TrainConfig& cfg) {
  cfg.validate();
  ModelDims dims = cfg.dims;
  dims.vocab_size = vocab.size();
  return TrainingState{build_model(h, cfg.arch, dims, vocab, cfg.seed), {}, 0};
}

void save_state(TrainingState& s, const TrainConfig& cfg, const std::filesystem::path& path) {
  json header;
  header["step"] = s.step;
  header["config"] = cfg.to_json();
  header["vocab_hash"] = hex64(s.model.base_vocab_hash);
  auto params = s.model.parameters();
  header["params"] = params.size();
  json steps = json::object();
  for (const auto& [name, slot] : s.optimizer.slots()) steps[name] = slot.step;
  header["adam_steps"] = steps;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write training state " + path.string());
    binio::write_preamble(out, kStateMagic, kStateVersion, header);
    for (auto& p : params)
      binio::write_block<double>(out, p.name, p.tensor.shape(), p.tensor.values());
    for (const auto& [name, slot] : s.optimizer.slots()) {
      const ad::Shape shape{slot.m.size()};
      binio::write_block<double>(out, "m:" + name, shape, slot.m);
      binio::write_block<double>(out, "v:" + name, shape, slot.v);
    }
    if (!out) throw DataError("failed writing training state " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void load_state(TrainingState& s, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read training state " + path.string());
  const json header = binio::read_preamble(in, kStateMagic, kStateVersion);
  try {
    if (header.at("vocab_hash").get<std::string>() != hex64(s.model.base_vocab_hash))
      throw DataError("training state " + path.string() + " belongs to another vocabulary");
    std::map<std::string, ad::Tensor> by_name;
    for (auto& p : s.model.parameters()) by_name.emplace(p.name, p.tensor);
    const auto n_params = header.at("params").get<std::size_t>();
    if (n_params != by_name.size())
      throw DataError("training state has " + std::to_string(n_params) +
                      " parameters, model expects " + std::to_string(by_name.size()));
    for (std::size_t i = 0; i < n_params; ++i) {
      auto b = binio::read_block<double>(in);
      auto it = by_name.find(b.name);
      if (it == by_name.end() || it->second.shape() != b.shape)
        throw DataError("training state block " + b.name + " does not fit the model");
      std::copy(b.values.begin(), b.values.end(), it->second.values().begin());
      it->second.zero_grad();
      by_name.erase(it);
    }
    OptimizerState opt;
    for (const auto& [name, step] : header.at("adam_steps").items()) {
      auto m = binio::read_block<double>(in);
      auto v = binio::read_block<double>(in);
      if (m.name != "m:" + name || v.name != "v:" + name || m.values.size() != v.values.size())
        throw DataError("training state moments for " + name + " are malformed");
      auto& slot = opt.slot(name, m.values.size());
      slot.m = std::move(m.values);
      slot.v = std::move(v.values);
      slot.step = step.get<std::uint64_t>();
    }
    s.optimizer = std::move(opt);
    s.step = header.at("step").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError("training state " + path.string() + ": " + e.what());
  }
}

FitReport fit(TrainingState& s, const corpus::ParallelCorpus& train, const TrainConfig& cfg,
              const FitOptions& opts) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const std::size_t stop = opts.stop_at ? std::min(opts.stop_at, cfg.steps) : cfg.steps;
  const auto languages = s.model.languages();
  FitReport report;
  std::ofstream log;
  if (!opts.report_path.empty()) {
    log.open(opts.report_path, std::ios::app);
    if (!log) throw DataError("cannot write training report " + opts.report_path.string());
  }
  if (!opts.checkpoint_dir.empty()) std::filesystem::create_directories(opts.checkpoint_dir);

  std::size_t consecutive_aborts = 0;
  while (s.step < stop) {
    const std::size_t step = s.step;
    const auto batch = batch_for_step(s.model, train, cfg, step);
    const auto result = train_step(s.model, batch, cfg, s.optimizer, step);
    ++s.step;
    for (const auto& l : languages) {
      auto it = result.languages.find(l);
      report.loss_curves[l].push_back(it != result.languages.end() && it->second.rows > 0
                                          ? it->second.loss
                                          : std::numeric_limits<Real>::quiet_NaN());
    }
    if (result.aborted) {
      ++report.aborted_steps;
      if (++consecutive_aborts > cfg.max_consecutive_aborts)
        throw NumericError("training aborted " + std::to_string(consecutive_aborts) +
                           " steps in a row: " + result.incident);
    } else {
      consecutive_aborts = 0;
    }
    if (opts.on_step) opts.on_step(s.step, result);

    const bool eval_now = cfg.eval_every && (s.step % cfg.eval_every == 0 || s.step == stop);
    if (eval_now) {
      json rec;
      rec["step"] = s.step;
      json loss = json::object();
      for (const auto& [l, ls] : result.languages)
        loss[l] = std::isfinite(double(ls.loss)) ? json(ls.loss) : json(nullptr);
      rec["loss"] = loss;
      if (opts.eval_set) {
        eval::EvalOptions eo;
        eo.pad_margin = cfg.pad_margin;
        eo.max_examples = cfg.eval_examples;
        eo.samples_per_language = 0;
        const auto er = eval::evaluate(s.model, *opts.eval_set, languages, eo);
        json w = json::object();
        for (const auto& [l, r] : er.languages) w[l] = r.wer_percent();
        rec["wer"] = w;
      }
      rec["wall_ms"] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      if (log.is_open()) log << rec.dump() << '\n' << std::flush;
      spdlog::info("step {} {}", s.step, rec.dump());
      report.records.push_back(std::move(rec));
    }
    if (!opts.checkpoint_dir.empty() && cfg.checkpoint_every &&
        s.step % cfg.checkpoint_every == 0) {
      const auto stem = opts.checkpoint_dir / ("step-" + std::to_string(s.step));
      save_checkpoint(s.model, stem.string() + ".ckpt");
      save_state(s, cfg, stem.string() + ".state");
    }
  }
  if (!opts.checkpoint_dir.empty()) {
    save_checkpoint(s.model, opts.checkpoint_dir / "final.ckpt");
    save_state(s, cfg, opts.checkpoint_dir / "final.state");
  }
  return report;
}

}  // namespace tet
