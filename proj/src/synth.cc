#include "tet/synth.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace tet::synth {

void SynthOptions::validate() const {
  if (!(overlap >= 0.0 && overlap <= 1.0))
    throw ConfigError("overlap must lie in [0, 1], got " + std::to_string(overlap));
  if (families == 0 || languages_per_family == 0) throw ConfigError("need at least one language");
  if (families > 26 || languages_per_family > 9) throw ConfigError("too many synthetic languages");
  if (alphabet < 2 || alphabet > 26) throw ConfigError("alphabet size must lie in [2, 26]");
  if (examples == 0 || lexicon == 0) throw ConfigError("examples and lexicon must be positive");
  if (min_words == 0 || min_words > max_words) throw ConfigError("bad sentence length range");
  if (min_word_length == 0 || min_word_length > max_word_length)
    throw ConfigError("bad word length range");
  if (root_layers == 0 || family_layers == 0 || leaf_layers == 0)
    throw ConfigError("every hierarchy level needs at least one layer");
  for (const auto& [lang, f] : resources)
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("resource fraction for " + lang + " outside [0, 1]");
}

std::string language_code(std::size_t family, std::size_t member) {
  return std::string(1, char('a' + family)) + std::to_string(member + 1);
}

double agreement(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("mappings differ in size");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return double(same) / double(a.size());
}

SynthCorpus generate(const SynthOptions& opts) {
  opts.validate();
  SynthCorpus out;
  const std::size_t n = opts.alphabet;
  for (std::size_t i = 0; i < n; ++i) out.alphabet.emplace_back(1, char('A' + i));
  for (const auto& [lang, _] : opts.resources) {
    bool known = false;
    for (std::size_t f = 0; f < opts.families; ++f)
      for (std::size_t m = 0; m < opts.languages_per_family; ++m)
        known |= language_code(f, m) == lang;
    if (!known) throw ConfigError("resource fraction given for unknown language " + lang);
  }

  // Symbols each member rotates away from its family base; a single symbol
  // cannot be deranged, so one becomes two.
  std::size_t k = std::size_t(std::lround((1.0 - opts.overlap) * double(n)));
  if (k == 1) k = 2;

  std::mt19937_64 rng(mix_seed(opts.seed, 1));
  for (std::size_t f = 0; f < opts.families; ++f) {
    std::vector<std::string> base = out.alphabet;
    if (!opts.copy_task) std::shuffle(base.begin(), base.end(), rng);
    for (std::size_t m = 0; m < opts.languages_per_family; ++m) {
      const auto code = language_code(f, m);
      auto map = base;
      if (m > 0 && k > 0 && !opts.copy_task) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(k);
        for (std::size_t j = 0; j < k; ++j) map[idx[j]] = base[idx[(j + 1) % k]];
      }
      out.mappings[code] = std::move(map);
      out.families[code] = std::string(1, char('a' + f));
    }
  }

  std::set<std::string> seen;
  std::vector<std::string> words;
  std::uniform_int_distribution<std::size_t> letter(0, n - 1);
  std::uniform_int_distribution<std::size_t> word_len(opts.min_word_length, opts.max_word_length);
  std::size_t attempts = 0;
  while (words.size() < opts.lexicon && attempts++ < opts.lexicon * 100) {
    std::string w;
    for (std::size_t i = word_len(rng); i > 0; --i) w += out.alphabet[letter(rng)];
    if (seen.insert(w).second) words.push_back(std::move(w));
  }

  std::uniform_int_distribution<std::size_t> sent_len(opts.min_words, opts.max_words);
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const std::size_t id_width = std::to_string(opts.examples).size();
  for (std::size_t e = 0; e < opts.examples; ++e) {
    corpus::TextExample ex;
    std::string id = std::to_string(e);
    ex.id = "s" + std::string(id_width - id.size(), '0') + id;
    for (std::size_t i = sent_len(rng); i > 0; --i) {
      if (!ex.source.empty()) ex.source += ' ';
      ex.source += words[pick(rng)];
    }
    for (const auto& [lang, map] : out.mappings) {
      auto it = opts.resources.find(lang);
      const double keep = it == opts.resources.end() ? 1.0 : it->second;
      if (coin(rng) >= keep) continue;
      std::string t;
      for (char c : ex.source) t += c == ' ' ? std::string(" ") : map[std::size_t(c - 'A')];
      ex.targets[lang] = std::move(t);
    }
    out.corpus.examples.push_back(std::move(ex));
  }

  HierarchyNode root{"root", opts.root_layers, {}, ""};
  for (std::size_t f = 0; f < opts.families; ++f) {
    std::vector<HierarchyNode> leaves;
    for (std::size_t m = 0; m < opts.languages_per_family; ++m) {
      const auto code = language_code(f, m);
      leaves.push_back({code, opts.leaf_layers, {}, code});
    }
    if (opts.families == 1) {
      root.children = std::move(leaves);
    } else {
      root.children.push_back({std::string("family_") + char('a' + f), opts.family_layers,
                               std::move(leaves), ""});
    }
  }
  out.hierarchy.root = std::move(root);
  out.hierarchy.validate();
  return out;
}

}  // namespace tet::synth
