#include "tet/corpus.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace tet::corpus {
namespace {

using json = nlohmann::json;

std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (c < 0x80) { cp = c; len = 1; }
    else if ((c >> 5) == 0x6) { cp = c & 0x1f; len = 2; }
    else if ((c >> 4) == 0xe) { cp = c & 0x0f; len = 3; }
    else if ((c >> 3) == 0x1e) { cp = c & 0x07; len = 4; }
    bool ok = len > 0 && i + len <= s.size();
    for (int k = 1; ok && k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) ok = false;
      else cp = (cp << 6) | (cc & 0x3f);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(char(cp));
  } else if (cp < 0x800) {
    out.push_back(char(0xc0 | (cp >> 6)));
    out.push_back(char(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    out.push_back(char(0xe0 | (cp >> 12)));
    out.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(char(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(char(0xf0 | (cp >> 18)));
    out.push_back(char(0x80 | ((cp >> 12) & 0x3f)));
    out.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(char(0x80 | (cp & 0x3f)));
  }
}

// Upper/lower pairs laid out as (even, odd) or (odd, even) code points.
char32_t pair_upper(char32_t cp, bool upper_is_even) {
  const bool even = (cp % 2) == 0;
  return even == upper_is_even ? cp : cp - 1;
}

char32_t to_upper(char32_t cp) {
  if (cp >= 'a' && cp <= 'z') return cp - 32;
  if (cp < 0x80) return cp;
  if (cp >= 0xE0 && cp <= 0xFE && cp != 0xF7) return cp - 0x20;
  if (cp == 0xFF) return 0x178;
  if (cp == 0x131) return 'I';
  if (cp == 0x17F) return 'S';
  if (cp >= 0x100 && cp <= 0x137) return pair_upper(cp, true);
  if (cp >= 0x139 && cp <= 0x148) return pair_upper(cp, false);
  if (cp >= 0x14A && cp <= 0x177) return pair_upper(cp, true);
  if (cp >= 0x179 && cp <= 0x17E) return pair_upper(cp, false);
  if (cp >= 0x200 && cp <= 0x21F) return pair_upper(cp, true);
  if (cp == 0x3C2) return 0x3A3;
  if (cp >= 0x3B1 && cp <= 0x3C9) return cp - 0x20;
  if (cp >= 0x430 && cp <= 0x44F) return cp - 0x20;
  if (cp >= 0x450 && cp <= 0x45F) return cp - 0x50;
  if (cp >= 0x460 && cp <= 0x481) return pair_upper(cp, true);
  if (cp >= 0x48A && cp <= 0x4BF) return pair_upper(cp, true);
  if (cp >= 0x4C1 && cp <= 0x4CE) return pair_upper(cp, false);
  if (cp >= 0x4D0 && cp <= 0x4FF) return pair_upper(cp, true);
  if (cp >= 0x1E00 && cp <= 0x1E95) return pair_upper(cp, true);
  if (cp >= 0x1EA0 && cp <= 0x1EFF) return pair_upper(cp, true);
  return cp;
}

bool is_space(char32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == 0xA0 ||
         cp == 0x2009 || cp == 0x202F;
}

bool allowed(char32_t cp, const PostProcessOptions& o) {
  const bool ascii_letter = (cp >= 'A' && cp <= 'Z') || (cp >= 'a' && cp <= 'z');
  if (cp >= 0x20 && cp < 0x7F) return !ascii_letter || o.allow_latin;
  const bool latin = (cp >= 0xA1 && cp <= 0x24F && cp != 0xD7 && cp != 0xF7) ||
                     (cp >= 0x1E00 && cp <= 0x1EFF);
  if (latin) return o.allow_latin;
  if (cp >= 0x400 && cp <= 0x4FF) return o.allow_cyrillic;
  if (cp >= 0x370 && cp <= 0x3FF) return o.allow_greek;
  return false;
}

}  // namespace

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  for (char32_t cp : decode_utf8(text)) {
    std::string s;
    append_utf8(s, cp);
    out.push_back(std::move(s));
  }
  return out;
}

Vocab::Vocab() {
  add(kBlankToken);
  add(kPadToken);
}

TokenId Vocab::add(const std::string& token) {
  if (auto it = token_to_id_.find(token); it != token_to_id_.end()) return it->second;
  const auto id = static_cast<TokenId>(id_to_token_.size());
  id_to_token_.push_back(token);
  token_to_id_.emplace(token, id);
  return id;
}

bool Vocab::contains(const std::string& token) const {
  return token_to_id_.count(token) != 0;
}

TokenId Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) throw LookupError("token not in vocabulary: '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || std::size_t(id) >= id_to_token_.size())
    throw LookupError("token id out of range: " + std::to_string(id));
  return id_to_token_[std::size_t(id)];
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& ch : utf8_chars(text)) {
    auto it = token_to_id_.find(ch);
    if (it == token_to_id_.end())
      throw DataError("character '" + ch + "' is not in the vocabulary");
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kBlankId || id == kPadId) continue;
    out += token(id);
  }
  return out;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = fnv1a("tet-vocab");
  for (const auto& t : id_to_token_) {
    h = fnv1a(t, h);
    h = fnv1a(std::string_view("\n", 1), h);
  }
  return h;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  for (const auto& t : id_to_token_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read vocabulary " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  if (lines.size() < 2 || lines[0] != kBlankToken || lines[1] != kPadToken)
    throw DataError("vocabulary " + path.string() +
                    " must start with <BLANK> and <PAD> on lines 0 and 1");
  Vocab v;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (v.contains(lines[i]))
      throw DataError("duplicate token on line " + std::to_string(i) + " of " +
                      path.string());
    v.add(lines[i]);
  }
  return v;
}

const char* to_string(DropReason r) {
  switch (r) {
    case DropReason::kNone: return "kept";
    case DropReason::kEmpty: return "empty after cleaning";
    case DropReason::kFilteredPunctuation: return "contains filtered punctuation";
  }
  return "?";
}

Cleaned post_process(std::string_view text, const PostProcessOptions& opts) {
  Cleaned result;
  if (opts.punctuation_filter &&
      text.find_first_of(",.?!\"") != std::string_view::npos) {
    result.reason = DropReason::kFilteredPunctuation;
    return result;
  }
  bool pending_space = false;
  for (char32_t cp : decode_utf8(text)) {
    if (is_space(cp)) {
      pending_space = !result.text.empty();
      continue;
    }
    if (!allowed(cp, opts)) continue;
    if (pending_space) result.text.push_back(' ');
    pending_space = false;
    append_utf8(result.text, to_upper(cp));
  }
  if (result.text.empty()) result.reason = DropReason::kEmpty;
  return result;
}

Vocab build_vocab(const std::vector<std::string>& sentences) {
  Vocab v;
  for (const auto& s : sentences)
    for (const auto& ch : utf8_chars(s)) v.add(ch);
  return v;
}

std::vector<std::string> TextCorpus::languages() const {
  std::set<std::string> langs;
  for (const auto& ex : examples)
    for (const auto& [lang, _] : ex.targets) langs.insert(lang);
  return {langs.begin(), langs.end()};
}

std::vector<std::string> TextCorpus::all_sentences() const {
  std::vector<std::string> out;
  for (const auto& ex : examples) {
    out.push_back(ex.source);
    for (const auto& [_, t] : ex.targets) out.push_back(t);
  }
  return out;
}

TextCorpus parse_jsonl(std::istream& in, const PostProcessOptions& opts) {
  TextCorpus corpus;
  std::size_t line_no = 0;
  std::set<std::string> ids;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("src") || !j["src"].is_string())
      throw DataError("corpus line " + std::to_string(line_no) +
                      ": expected an object with a string \"src\"");
    TextExample ex;
    ex.id = j.contains("id") ? j["id"].get<std::string>() : std::to_string(line_no);
    if (!ids.insert(ex.id).second)
      throw DataError("corpus line " + std::to_string(line_no) + ": duplicate id " + ex.id);
    auto src = post_process(j["src"].get<std::string>(), opts);
    if (!src.kept()) {
      spdlog::debug("dropping example {}: source {}", ex.id, to_string(src.reason));
      ++corpus.dropped;
      continue;
    }
    ex.source = std::move(src.text);
    if (j.contains("tgt")) {
      if (!j["tgt"].is_object())
        throw DataError("corpus line " + std::to_string(line_no) + ": \"tgt\" must be an object");
      for (const auto& [lang, val] : j["tgt"].items()) {
        if (!val.is_string())
          throw DataError("corpus line " + std::to_string(line_no) + ": target " +
                          lang + " is not a string");
        auto t = post_process(val.get<std::string>(), opts);
        if (!t.kept()) {
          spdlog::debug("dropping {} target of {}: {}", lang, ex.id, to_string(t.reason));
          continue;
        }
        ex.targets.emplace(lang, std::move(t.text));
      }
    }
    if (ex.targets.empty()) {
      spdlog::debug("dropping example {}: no usable targets", ex.id);
      ++corpus.dropped;
      continue;
    }
    corpus.examples.push_back(std::move(ex));
  }
  if (corpus.dropped > 0)
    spdlog::info("corpus: kept {} examples, dropped {}", corpus.examples.size(),
                 corpus.dropped);
  return corpus;
}

TextCorpus load_jsonl(const std::filesystem::path& path, const PostProcessOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus " + path.string());
  return parse_jsonl(in, opts);
}

void save_jsonl(const TextCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus " + path.string());
  for (const auto& ex : corpus.examples) {
    json j;
    j["id"] = ex.id;
    j["src"] = ex.source;
    j["tgt"] = json::object();
    for (const auto& [lang, t] : ex.targets) j["tgt"][lang] = t;
    out << j.dump() << '\n';
  }
}

std::size_t ParallelCorpus::count(const std::string& language) const {
  return std::size_t(std::count_if(examples.begin(), examples.end(), [&](const Example& e) {
    return e.targets.count(language) != 0;
  }));
}

ParallelCorpus ParallelCorpus::complete_subset(const std::vector<std::string>& langs) const {
  ParallelCorpus out;
  out.languages = langs;
  out.split_seed = split_seed;
  for (const auto& ex : examples) {
    const bool complete = std::all_of(langs.begin(), langs.end(), [&](const std::string& l) {
      return ex.targets.count(l) != 0;
    });
    if (!complete) continue;
    Example e{ex.id, ex.source, {}};
    for (const auto& l : langs) e.targets[l] = ex.targets.at(l);
    out.examples.push_back(std::move(e));
  }
  return out;
}

ParallelCorpus encode(const TextCorpus& text, const Vocab& vocab) {
  ParallelCorpus out;
  out.languages = text.languages();
  out.examples.reserve(text.examples.size());
  for (const auto& ex : text.examples) {
    Example e;
    e.id = ex.id;
    e.source = vocab.tokenize(ex.source);
    for (const auto& [lang, t] : ex.targets) e.targets.emplace(lang, vocab.tokenize(t));
    out.examples.push_back(std::move(e));
  }
  return out;
}

std::pair<ParallelCorpus, ParallelCorpus> split(const ParallelCorpus& corpus,
                                                double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ContractError("split ratio must lie in (0, 1), got " + std::to_string(ratio));
  const std::size_t n = corpus.size();
  if (n < 2) throw ContractError("cannot split a corpus of fewer than 2 examples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus.examples[a].id < corpus.examples[b].id;
  });
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::floor(ratio * double(n) + 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  ParallelCorpus train, test;
  for (auto* part : {&train, &test}) {
    part->languages = corpus.languages;
    part->split_seed = seed;
  }
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? train : test).examples.push_back(corpus.examples[order[i]]);
  return {std::move(train), std::move(test)};
}

std::vector<TokenId> random_pad(std::span<const TokenId> source, std::size_t total_len,
                                std::uint64_t seed, TokenId pad_id) {
  if (total_len < source.size())
    throw ContractError("random_pad: total length " + std::to_string(total_len) +
                        " is shorter than the source (" + std::to_string(source.size()) + ")");
  // Partial Fisher-Yates: the first |source| slots form a uniform subset.
  std::vector<std::size_t> slots(total_len);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < source.size(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total_len - 1);
    std::swap(slots[i], slots[pick(rng)]);
  }
  std::sort(slots.begin(), slots.begin() + std::ptrdiff_t(source.size()));
  std::vector<TokenId> out(total_len, pad_id);
  for (std::size_t i = 0; i < source.size(); ++i) out[slots[i]] = source[i];
  return out;
}

std::size_t LanguageTargets::rows_present() const {
  return std::size_t(std::count(present.begin(), present.end(), std::uint8_t{1}));
}

const std::vector<TokenId>& Batch::inputs_for(const std::string& language) const {
  if (auto it = prefixed_inputs.find(language); it != prefixed_inputs.end())
    return it->second;
  return inputs;
}

namespace {

void fill_inputs(Batch& b, std::span<const Example* const> examples,
                 const std::vector<std::string>& languages, std::uint64_t seed,
                 const BatchOptions& opts) {
  auto fill = [&](std::vector<TokenId>& dst, std::optional<TokenId> prefix) {
    dst.resize(b.rows * b.width);
    std::vector<TokenId> src;
    for (std::size_t r = 0; r < b.rows; ++r) {
      src.clear();
      if (prefix) src.push_back(*prefix);
      src.insert(src.end(), examples[r]->source.begin(), examples[r]->source.end());
      // Same placement stream for every language of a row.
      auto row = random_pad(src, b.width, mix_seed(seed, r));
      std::copy(row.begin(), row.end(), dst.begin() + std::ptrdiff_t(r * b.width));
    }
  };
  if (opts.language_tokens.empty()) {
    fill(b.inputs, std::nullopt);
    return;
  }
  for (const auto& lang : languages) {
    auto it = opts.language_tokens.find(lang);
    if (it == opts.language_tokens.end())
      throw ContractError("make_batch: no language token for " + lang);
    fill(b.prefixed_inputs[lang], it->second);
  }
}

}  // namespace

Batch make_batch(std::span<const Example* const> examples,
                 const std::vector<std::string>& languages, std::uint64_t seed,
                 const BatchOptions& opts) {
  Batch b;
  b.rows = examples.size();
  std::size_t longest_target = 0;
  std::size_t longest_source = 0;
  const std::size_t prefix = opts.language_tokens.empty() ? 0 : 1;
  for (const auto& lang : languages) {
    auto& lt = b.targets[lang];
    lt.sequences.resize(b.rows);
    lt.present.assign(b.rows, 0);
  }
  for (std::size_t r = 0; r < b.rows; ++r) {
    const Example& ex = *examples[r];
    b.example_ids.push_back(ex.id);
    b.input_lengths.push_back(ex.source.size());
    longest_source = std::max(longest_source, ex.source.size() + prefix);
    for (const auto& lang : languages) {
      auto it = ex.targets.find(lang);
      if (it == ex.targets.end()) continue;
      auto& lt = b.targets[lang];
      lt.sequences[r] = it->second;
      lt.present[r] = 1;
      lt.max_length = std::max(lt.max_length, it->second.size());
      longest_target = std::max(longest_target, it->second.size());
    }
  }
  b.width = std::max(longest_target + opts.pad_margin, longest_source);
  fill_inputs(b, examples, languages, seed, opts);
  return b;
}

Batch make_batch(std::span<const Example> examples,
                 const std::vector<std::string>& languages, std::uint64_t seed,
                 const BatchOptions& opts) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(examples.size());
  for (const auto& e : examples) ptrs.push_back(&e);
  return make_batch(std::span<const Example* const>(ptrs), languages, seed, opts);
}

Batch make_source_batch(std::span<const std::vector<TokenId>> sources,
                        const std::vector<std::string>& languages, std::uint64_t seed,
                        const BatchOptions& opts) {
  std::vector<Example> examples(sources.size());
  std::vector<const Example*> ptrs;
  Batch b;
  b.rows = sources.size();
  const std::size_t prefix = opts.language_tokens.empty() ? 0 : 1;
  std::size_t longest_source = 0;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    examples[i].id = std::to_string(i);
    examples[i].source = sources[i];
    ptrs.push_back(&examples[i]);
    b.example_ids.push_back(examples[i].id);
    b.input_lengths.push_back(sources[i].size());
    longest_source = std::max(longest_source, sources[i].size() + prefix);
  }
  b.width = longest_source + opts.pad_margin;
  fill_inputs(b, ptrs, languages, seed, opts);
  return b;
}

}  // namespace tet::corpus
