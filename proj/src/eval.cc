#include "tet/eval.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "tet/ctc.h"
#include "tet/encoder.h"

namespace tet::eval {

using json = nlohmann::json;

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

WordErrors word_errors(std::string_view reference, std::string_view hypothesis) {
  const auto ref = split_words(reference);
  const auto hyp = split_words(hypothesis);
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return {prev[hyp.size()], ref.size()};
}

double wer(std::string_view reference, std::string_view hypothesis) {
  const auto e = word_errors(reference, hypothesis);
  return double(e.edits) / double(std::max<std::size_t>(1, e.reference_words));
}

double LanguageResult::wer_percent() const {
  return 100.0 * double(edits) / double(std::max<std::size_t>(1, reference_words));
}

double EvalReport::average() const {
  if (languages.empty()) return 0.0;
  double s = 0;
  for (const auto& [_, r] : languages) s += r.wer_percent();
  return s / double(languages.size());
}

json EvalReport::to_json() const {
  json j;
  j["languages"] = json::object();
  for (const auto& [lang, r] : languages) {
    json samples = json::array();
    for (const auto& s : r.samples)
      samples.push_back({{"id", s.id}, {"reference", s.reference}, {"hypothesis", s.hypothesis}});
    j["languages"][lang] = {{"wer", r.wer_percent()},
                            {"examples", r.examples},
                            {"edits", r.edits},
                            {"reference_words", r.reference_words},
                            {"samples", samples}};
  }
  j["average_wer"] = average();
  return j;
}

namespace {

std::vector<TokenId> decode_row(const ad::Tensor& log_probs, std::size_t row, TokenId blank) {
  const std::size_t T = log_probs.dim(1);
  const std::size_t V = log_probs.dim(2);
  auto raw = ctc::greedy_decode(log_probs.values().subspan(row * T * V, T * V), T, V);
  return ctc::collapse(raw, blank);
}

ForwardFn model_forward(const ModelGraph& g, std::size_t threads) {
  return [&g, threads](const corpus::Batch& batch) {
    ad::Tape tape = ad::Tape::inference();
    ForwardOptions fo;
    fo.threads = threads;
    auto logits = forward_all(tape, g, batch, fo);
    for (auto& [_, t] : logits) t = ad::log_softmax_rows(tape, t);
    return logits;
  };
}

}  // namespace

EvalReport evaluate_with(const ForwardFn& forward, const corpus::Vocab& vocab,
                         const corpus::BatchOptions& batch_opts,
                         const corpus::ParallelCorpus& testset,
                         const std::vector<std::string>& languages, const EvalOptions& opts) {
  EvalReport report;
  std::vector<std::string> active;
  for (const auto& lang : languages) {
    if (testset.count(lang) == 0) {
      spdlog::warn("language {} has no test examples; excluded from the report", lang);
      continue;
    }
    active.push_back(lang);
    report.languages[lang];
  }
  if (active.empty()) return report;
  const std::size_t n = opts.max_examples ? std::min(opts.max_examples, testset.size())
                                          : testset.size();
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    std::vector<std::vector<TokenId>> sources;
    for (std::size_t i = start; i < end; ++i) sources.push_back(testset.examples[i].source);
    auto batch = corpus::make_source_batch(sources, active, mix_seed(opts.seed, start), batch_opts);
    auto log_probs = forward(batch);
    for (const auto& lang : active) {
      auto& res = report.languages[lang];
      const auto& lp = log_probs.at(lang);
      for (std::size_t r = 0; r < sources.size(); ++r) {
        const auto& ex = testset.examples[start + r];
        auto it = ex.targets.find(lang);
        if (it == ex.targets.end()) continue;
        const std::string ref = vocab.detokenize(it->second);
        const std::string hyp = vocab.detokenize(decode_row(lp, r, vocab.blank_id()));
        const auto e = word_errors(ref, hyp);
        res.edits += e.edits;
        res.reference_words += e.reference_words;
        ++res.examples;
        if (res.samples.size() < opts.samples_per_language)
          res.samples.push_back({ex.id, ref, hyp});
      }
    }
  }
  return report;
}

EvalReport evaluate(const ModelGraph& g, const corpus::ParallelCorpus& testset,
                    const std::vector<std::string>& languages, const EvalOptions& opts) {
  for (const auto& lang : languages)
    if (!g.has_language(lang)) throw LookupError("model has no output for language " + lang);
  return evaluate_with(model_forward(g, opts.threads), g.vocab,
                       batch_options_for(g, opts.pad_margin), testset, languages, opts);
}

std::map<std::string, std::vector<std::string>> translate(
    const ModelGraph& g, const std::vector<std::vector<TokenId>>& sources,
    const EvalOptions& opts) {
  const auto languages = g.languages();
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& l : languages) out[l];
  auto forward = model_forward(g, opts.threads);
  const auto batch_opts = batch_options_for(g, opts.pad_margin);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t start = 0; start < sources.size(); start += bs) {
    const std::size_t end = std::min(sources.size(), start + bs);
    std::vector<std::vector<TokenId>> chunk(sources.begin() + std::ptrdiff_t(start),
                                            sources.begin() + std::ptrdiff_t(end));
    auto batch = corpus::make_source_batch(chunk, languages, mix_seed(opts.seed, start), batch_opts);
    auto log_probs = forward(batch);
    for (const auto& l : languages)
      for (std::size_t r = 0; r < chunk.size(); ++r)
        out[l].push_back(g.vocab.detokenize(decode_row(log_probs.at(l), r, g.vocab.blank_id())));
  }
  return out;
}

std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& rows,
                         const std::vector<std::string>& languages) {
  std::size_t name_w = 5;
  for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
  std::ostringstream os;
  os << std::left << std::setw(int(name_w)) << "Model" << " |";
  for (const auto& l : languages) {
    std::string up = l;
    if (!up.empty()) up[0] = char(std::toupper(static_cast<unsigned char>(up[0])));
    os << std::right << std::setw(6) << up;
  }
  os << " | " << std::setw(6) << "Avg." << '\n';
  os << std::string(name_w, '-') << "-+" << std::string(6 * languages.size(), '-') << "-+-"
     << std::string(6, '-') << '\n';
  os << std::fixed << std::setprecision(1);
  for (const auto& [name, report] : rows) {
    os << std::left << std::setw(int(name_w)) << name << " |" << std::right;
    for (const auto& l : languages) {
      auto it = report.languages.find(l);
      if (it == report.languages.end()) os << std::setw(6) << "--";
      else os << std::setw(6) << it->second.wer_percent();
    }
    os << " | " << std::setw(6) << report.average() << '\n';
  }
  return os.str();
}

json BenchReport::to_json() const {
  return {{"layers_executed", {{"shared", layers_shared}, {"per_language_sum", layers_per_language}}},
          {"layers_predicted", {{"shared", predicted_shared}, {"per_language_sum", predicted_per_language}}},
          {"theoretical_ratio", theoretical_ratio()},
          {"forward_all_ms", forward_all_ms},
          {"per_language_ms", per_language_ms},
          {"forward_all_ms_per_sentence", rows ? forward_all_ms / double(rows) : 0.0},
          {"per_language_ms_per_sentence", rows ? per_language_ms / double(rows) : 0.0},
          {"speedup", speedup},
          {"sentences_per_second", sentences_per_second},
          {"rows", rows},
          {"width", width},
          {"repetitions", repetitions},
          {"threads", threads}};
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BenchReport bench(const ModelGraph& g, const corpus::Batch& batch, std::size_t repetitions,
                  std::size_t threads) {
  if (repetitions < 3) throw ContractError("bench needs at least 3 repetitions");
  using clock = std::chrono::steady_clock;
  BenchReport r;
  r.rows = batch.rows;
  r.width = batch.width;
  r.repetitions = repetitions;
  r.threads = std::max<std::size_t>(1, threads);
  r.predicted_shared = layer_count(g, CountMode::kMultiTargetShared);
  r.predicted_per_language = layer_count(g, CountMode::kPerLanguageSum);
  const auto languages = g.languages();
  ForwardOptions fo;
  fo.threads = r.threads;

  auto run_all = [&] {
    ad::Tape tape = ad::Tape::inference();
    return forward_all(tape, g, batch, fo).size();
  };
  auto run_each = [&] {
    std::size_t n = 0;
    for (const auto& l : languages) {
      ad::Tape tape = ad::Tape::inference();
      n += forward_path(tape, g, l, batch).numel() > 0;
    }
    return n;
  };

  run_all();
  run_each();
  std::vector<double> all_ms, each_ms;
  for (std::size_t i = 0; i < repetitions; ++i) {
    reset_layer_invocations();
    auto t0 = clock::now();
    run_all();
    auto t1 = clock::now();
    r.layers_shared = layer_invocations();
    reset_layer_invocations();
    auto t2 = clock::now();
    run_each();
    auto t3 = clock::now();
    r.layers_per_language = layer_invocations();
    all_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    each_ms.push_back(std::chrono::duration<double, std::milli>(t3 - t2).count());
  }
  r.forward_all_ms = median(all_ms);
  r.per_language_ms = median(each_ms);
  r.speedup = r.forward_all_ms > 0 ? r.per_language_ms / r.forward_all_ms : 0.0;
  r.sentences_per_second = r.forward_all_ms > 0 ? 1000.0 * double(r.rows) / r.forward_all_ms : 0.0;
  return r;
}

std::string ClusteringReport::distances_csv(std::size_t layer) const {
  const auto& m = distances.at(layer);
  std::ostringstream os;
  os << "language";
  for (const auto& l : languages) os << ',' << l;
  os << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < languages.size(); ++i) {
    os << languages[i];
    for (std::size_t j = 0; j < languages.size(); ++j) os << ',' << m[i][j];
    os << '\n';
  }
  return os.str();
}

json ClusteringReport::to_json() const {
  json j;
  j["languages"] = languages;
  j["families"] = families;
  j["layers"] = json::array();
  for (std::size_t layer : layers) {
    const auto r = ratio.at(layer);
    j["layers"].push_back({{"layer", layer},
                           {"distances", distances.at(layer)},
                           {"ratio", r ? json(*r) : json(nullptr)}});
  }
  return j;
}

ClusteringReport embedding_clustering(const ModelGraph& g,
                                      const std::vector<std::vector<TokenId>>& sentences,
                                      const std::vector<std::size_t>& layers,
                                      const std::vector<std::string>& languages,
                                      const std::map<std::string, std::string>& families,
                                      std::uint64_t seed, std::size_t batch_size) {
  if (g.arch != ArchTag::kTencAll)
    spdlog::info("clustering diagnostic on a {} model (reported separately from TENC_ALL)",
                 to_string(g.arch));
  ClusteringReport rep;
  rep.languages = languages;
  rep.layers = layers;
  for (const auto& l : languages) rep.families[l] = families.count(l) ? families.at(l) : l;
  const std::size_t d = g.dims.d_model;
  const auto batch_opts = batch_options_for(g);

  for (const auto& lang : languages) {
    const auto path = path_for(g, lang);
    std::map<int, std::size_t> layer_of_node;
    for (std::size_t layer : layers) {
      if (layer >= path.size())
        throw ContractError("layer " + std::to_string(layer) + " beyond depth " +
                            std::to_string(path.size()) + " of " + lang);
      layer_of_node[path[layer]] = layer;
      rep.vectors[layer][lang].assign(d, 0.0);
    }
    std::size_t frames = 0;
    for (std::size_t start = 0; start < sentences.size(); start += batch_size) {
      const std::size_t end = std::min(sentences.size(), start + batch_size);
      std::vector<std::vector<TokenId>> chunk(sentences.begin() + std::ptrdiff_t(start),
                                              sentences.begin() + std::ptrdiff_t(end));
      // Same seed for every language: identical padding placement.
      auto batch = corpus::make_source_batch(chunk, {lang}, mix_seed(seed, start), batch_opts);
      const auto& tokens = batch.inputs_for(lang);
      std::size_t chunk_frames = 0;
      for (TokenId t : tokens) chunk_frames += t != g.vocab.pad_id();
      frames += chunk_frames;
      ad::Tape tape = ad::Tape::inference();
      forward_path(tape, g, lang, batch, [&](int node, const ad::Tensor& h) {
        auto it = layer_of_node.find(node);
        if (it == layer_of_node.end()) return;
        auto& acc = rep.vectors[it->second][lang];
        auto hv = h.values();
        for (std::size_t i = 0; i < tokens.size(); ++i) {
          if (tokens[i] == g.vocab.pad_id()) continue;
          for (std::size_t k = 0; k < d; ++k) acc[k] += double(hv[i * d + k]);
        }
      });
    }
    for (std::size_t layer : layers)
      for (double& v : rep.vectors[layer][lang]) v /= double(std::max<std::size_t>(1, frames));
  }

  const std::size_t n = languages.size();
  std::set<std::string> fams;
  for (const auto& l : languages) fams.insert(rep.families[l]);
  for (std::size_t layer : layers) {
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const auto& a = rep.vectors[layer][languages[i]];
        const auto& b = rep.vectors[layer][languages[j]];
        double dot = 0, na = 0, nb = 0;
        for (std::size_t k = 0; k < d; ++k) {
          dot += a[k] * b[k];
          na += a[k] * a[k];
          nb += b[k] * b[k];
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        const double dist = denom > 0 ? 1.0 - dot / denom : 0.0;
        m[i][j] = m[j][i] = dist;
      }
    double within = 0, cross = 0;
    std::size_t n_within = 0, n_cross = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        if (rep.families[languages[i]] == rep.families[languages[j]]) {
          within += m[i][j];
          ++n_within;
        } else {
          cross += m[i][j];
          ++n_cross;
        }
      }
    std::optional<double> r;
    if (fams.size() >= 2 && n_within > 0 && n_cross > 0 && cross > 0)
      r = (within / double(n_within)) / (cross / double(n_cross));
    rep.distances[layer] = std::move(m);
    rep.ratio[layer] = r;
  }
  return rep;
}

}  // namespace tet::eval
