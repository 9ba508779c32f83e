#pragma once

// Parallel corpus ingestion, character vocabulary, splitting and the
// random-padded batch format consumed by the encoder tree.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tet/common.h"

namespace tet::corpus {

inline constexpr TokenId kBlankId = 0;
inline constexpr TokenId kPadId = 1;
inline constexpr const char* kBlankToken = "<BLANK>";
inline constexpr const char* kPadToken = "<PAD>";
inline constexpr std::size_t kDefaultPadMargin = 50;

// Splits UTF-8 into code points, one string per code point. Invalid bytes
// become U+FFFD.
std::vector<std::string> utf8_chars(std::string_view text);

class Vocab {
 public:
  // Only the reserved BLANK and PAD entries.
  Vocab();

  TokenId blank_id() const { return kBlankId; }
  TokenId pad_id() const { return kPadId; }
  std::size_t size() const { return id_to_token_.size(); }

  // Adds a token if absent; returns its id.
  TokenId add(const std::string& token);
  bool contains(const std::string& token) const;
  TokenId id(const std::string& token) const;  // LookupError when absent
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // Character-level; throws DataError on characters missing from the vocab.
  std::vector<TokenId> tokenize(std::string_view text) const;
  // Drops BLANK and PAD.
  std::string detokenize(std::span<const TokenId> ids) const;

  std::uint64_t hash() const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const {
    return id_to_token_ == other.id_to_token_;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

struct PostProcessOptions {
  // Drop sentences containing any of , . ? ! "  (Tatoeba-style data).
  bool punctuation_filter = true;
  bool allow_latin = true;
  bool allow_cyrillic = true;
  bool allow_greek = false;
};

enum class DropReason { kNone, kEmpty, kFilteredPunctuation };
const char* to_string(DropReason r);

struct Cleaned {
  std::string text;
  DropReason reason = DropReason::kNone;
  bool kept() const { return reason == DropReason::kNone; }
};

// Uppercases, removes characters outside the allowed scripts, collapses
// whitespace. Flags sentences for exclusion by the punctuation filter.
Cleaned post_process(std::string_view text, const PostProcessOptions& opts = {});

// Vocabulary in order of first appearance after the reserved ids.
Vocab build_vocab(const std::vector<std::string>& sentences);

struct TextExample {
  std::string id;
  std::string source;
  std::map<std::string, std::string> targets;
};

struct TextCorpus {
  std::vector<TextExample> examples;
  std::size_t dropped = 0;
  std::vector<std::string> languages() const;
  std::vector<std::string> all_sentences() const;
};

// {"id": str, "src": str, "tgt": {"fr": str, ...}} per line; applies
// post_process. Dropped sentences are logged with their reason.
TextCorpus load_jsonl(const std::filesystem::path& path,
                      const PostProcessOptions& opts = {});
TextCorpus parse_jsonl(std::istream& in, const PostProcessOptions& opts = {});
void save_jsonl(const TextCorpus& corpus, const std::filesystem::path& path);

struct Example {
  std::string id;
  std::vector<TokenId> source;
  std::map<std::string, std::vector<TokenId>> targets;
};

struct ParallelCorpus {
  std::vector<Example> examples;
  std::vector<std::string> languages;
  std::uint64_t split_seed = 0;

  std::size_t size() const { return examples.size(); }
  std::size_t count(const std::string& language) const;
  // Only the examples that carry every listed language.
  ParallelCorpus complete_subset(const std::vector<std::string>& languages) const;
};

ParallelCorpus encode(const TextCorpus& text, const Vocab& vocab);

// Seeded shuffle of the id-sorted examples followed by a prefix split;
// n_train = floor(ratio * n), clamped to [1, n - 1].
std::pair<ParallelCorpus, ParallelCorpus> split(const ParallelCorpus& corpus,
                                                double ratio, std::uint64_t seed);

// Places source tokens at a uniformly drawn set of positions in a row of
// total_len and fills the rest with PAD.
std::vector<TokenId> random_pad(std::span<const TokenId> source,
                                std::size_t total_len, std::uint64_t seed,
                                TokenId pad_id = kPadId);

struct LanguageTargets {
  std::vector<std::vector<TokenId>> sequences;  // one per row, empty if absent
  std::vector<std::uint8_t> present;            // loss mask
  std::size_t max_length = 0;
  std::size_t rows_present() const;
};

struct Batch {
  std::size_t rows = 0;
  std::size_t width = 0;                // T_in
  std::vector<TokenId> inputs;          // rows x width, row-major
  std::vector<std::size_t> input_lengths;
  std::vector<std::string> example_ids;
  std::map<std::string, LanguageTargets> targets;
  // Per-language inputs when a target-language token is prepended to the
  // source (single shared encoder); same layout as `inputs`.
  std::map<std::string, std::vector<TokenId>> prefixed_inputs;

  const std::vector<TokenId>& inputs_for(const std::string& language) const;
  std::span<const TokenId> row(std::size_t r) const {
    return std::span<const TokenId>(inputs).subspan(r * width, width);
  }
};

struct BatchOptions {
  std::size_t pad_margin = kDefaultPadMargin;
  // Language -> token prepended to that language's input rows.
  std::map<std::string, TokenId> language_tokens;
};

// T_in = longest present target + pad_margin, widened to the longest
// (prefixed) source.
Batch make_batch(std::span<const Example* const> examples,
                 const std::vector<std::string>& languages, std::uint64_t seed,
                 const BatchOptions& opts = {});
Batch make_batch(std::span<const Example> examples,
                 const std::vector<std::string>& languages, std::uint64_t seed,
                 const BatchOptions& opts = {});

// Inference batch: no targets; T_in = longest (prefixed) source + pad_margin.
Batch make_source_batch(std::span<const std::vector<TokenId>> sources,
                        const std::vector<std::string>& languages, std::uint64_t seed,
                        const BatchOptions& opts = {});

}  // namespace tet::corpus
