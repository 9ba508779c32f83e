#pragma once

// Word error rate, per-language evaluation tables, compute-sharing benchmark
// and the embedding-clustering diagnostic.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tet/corpus.h"
#include "tet/langtree.h"

namespace tet::eval {

// Splits on spaces; runs of spaces count as one separator.
std::vector<std::string> split_words(std::string_view text);

struct WordErrors {
  std::size_t edits = 0;
  std::size_t reference_words = 0;
};

// Unit-cost Levenshtein distance over words.
WordErrors word_errors(std::string_view reference, std::string_view hypothesis);

// edits / max(1, reference words): an empty reference scores the hypothesis
// length, two empty strings score 0.
double wer(std::string_view reference, std::string_view hypothesis);

struct Sample {
  std::string id;
  std::string reference;
  std::string hypothesis;
};

struct LanguageResult {
  std::size_t examples = 0;
  std::size_t edits = 0;
  std::size_t reference_words = 0;
  std::vector<Sample> samples;
  // Corpus-level: total edits over total reference words, in percent.
  double wer_percent() const;
};

struct EvalReport {
  std::map<std::string, LanguageResult> languages;
  // Unweighted mean of the per-language WERs.
  double average() const;
  nlohmann::json to_json() const;
};

struct EvalOptions {
  std::size_t batch_size = 32;
  std::uint64_t seed = 20240917;
  std::size_t pad_margin = corpus::kDefaultPadMargin;
  std::size_t samples_per_language = 3;
  std::size_t threads = 1;
  std::size_t max_examples = 0;  // 0 = all
};

// Produces logits [rows, width, |V|] for every language of a batch.
using ForwardFn =
    std::function<std::map<std::string, ad::Tensor>(const corpus::Batch& batch)>;

// Inference batches only look at sources: width = longest source + margin.
EvalReport evaluate_with(const ForwardFn& forward, const corpus::Vocab& vocab,
                         const corpus::BatchOptions& batch_opts,
                         const corpus::ParallelCorpus& testset,
                         const std::vector<std::string>& languages, const EvalOptions& opts);

// forward_all -> greedy decode -> collapse -> detokenize -> WER. Languages
// missing from the test set are skipped with a warning.
EvalReport evaluate(const ModelGraph& g, const corpus::ParallelCorpus& testset,
                    const std::vector<std::string>& languages, const EvalOptions& opts = {});

// Hypotheses for every language of the model, one forward_all per chunk.
std::map<std::string, std::vector<std::string>> translate(
    const ModelGraph& g, const std::vector<std::vector<TokenId>>& sources,
    const EvalOptions& opts = {});

// Aligned text table: one row per model, one column per language, plus Avg.
std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& rows,
                         const std::vector<std::string>& languages);

struct BenchReport {
  std::size_t layers_shared = 0;         // measured, forward_all
  std::size_t layers_per_language = 0;   // measured, per-language loop
  std::size_t predicted_shared = 0;
  std::size_t predicted_per_language = 0;
  double forward_all_ms = 0;     // median
  double per_language_ms = 0;    // median
  double speedup = 0;            // per_language_ms / forward_all_ms
  double sentences_per_second = 0;
  std::size_t rows = 0;
  std::size_t width = 0;
  std::size_t repetitions = 0;
  std::size_t threads = 1;

  double theoretical_ratio() const {
    return layers_shared ? double(layers_per_language) / double(layers_shared) : 0.0;
  }
  nlohmann::json to_json() const;
};

// Median wall-clock of forward_all vs a per-language forward_path loop on the
// same batch; one warm-up round is excluded. repetitions >= 3.
BenchReport bench(const ModelGraph& g, const corpus::Batch& batch, std::size_t repetitions,
                  std::size_t threads = 1);

struct ClusteringReport {
  std::vector<std::string> languages;
  std::map<std::string, std::string> families;
  std::vector<std::size_t> layers;  // 0-based positions along the chain
  // layer -> language -> mean-pooled hidden state
  std::map<std::size_t, std::map<std::string, std::vector<double>>> vectors;
  // layer -> cosine-distance matrix in `languages` order
  std::map<std::size_t, std::vector<std::vector<double>>> distances;
  // layer -> mean within-family / mean cross-family distance
  std::map<std::size_t, std::optional<double>> ratio;

  std::string distances_csv(std::size_t layer) const;
  nlohmann::json to_json() const;
};

// Mean-pools hidden states over non-PAD frames and sentences for each
// (language, layer) and compares languages by cosine distance.
ClusteringReport embedding_clustering(const ModelGraph& g,
                                      const std::vector<std::vector<TokenId>>& sentences,
                                      const std::vector<std::size_t>& layers,
                                      const std::vector<std::string>& languages,
                                      const std::map<std::string, std::string>& families,
                                      std::uint64_t seed = 7, std::size_t batch_size = 32);

}  // namespace tet::eval
