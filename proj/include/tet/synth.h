#pragma once

// Synthetic family-structured "languages": every target is a character-level
// substitution of the source sentence. Languages in one family share a base
// substitution and differ from it on a small set of symbols.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tet/corpus.h"
#include "tet/langtree.h"

namespace tet::synth {

struct SynthOptions {
  std::size_t families = 2;
  std::size_t languages_per_family = 2;
  double overlap = 0.9;  // fraction of symbols a member shares with its family base
  std::size_t examples = 10000;
  std::size_t alphabet = 20;  // source letters A.. (at most 26)
  std::size_t lexicon = 500;
  std::size_t min_words = 2, max_words = 4;
  std::size_t min_word_length = 2, max_word_length = 6;
  // Language -> fraction of examples carrying that target (default 1).
  std::map<std::string, double> resources;
  bool copy_task = false;  // every mapping is the identity
  // Layers of the root, family and leaf nodes of the generated hierarchy. The
  // family level is omitted when there is only one family.
  std::size_t root_layers = 1, family_layers = 1, leaf_layers = 1;
  std::uint64_t seed = 1;

  void validate() const;  // ConfigError
};

struct SynthCorpus {
  corpus::TextCorpus corpus;
  LanguageHierarchy hierarchy;
  std::vector<std::string> alphabet;                         // source letters
  std::map<std::string, std::vector<std::string>> mappings;  // language -> image of each letter
  std::map<std::string, std::string> families;               // language -> family name
};

// "a1", "a2", ..., "b1", ...
std::string language_code(std::size_t family, std::size_t member);

SynthCorpus generate(const SynthOptions& opts);

// Fraction of source letters on which two mappings agree.
double agreement(const std::vector<std::string>& a, const std::vector<std::string>& b);

}  // namespace tet::synth
