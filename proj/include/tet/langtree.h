#pragma once

// Language-family hierarchy and its compilation into a graph of encoder
// layers: the tree model, its random-leaf twin, and the two flat baselines.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tet/corpus.h"
#include "tet/layers.h"

namespace tet {

struct HierarchyNode {
  std::string name;
  std::size_t layers = 1;
  std::vector<HierarchyNode> children;
  std::string language;  // leaves only

  bool is_leaf() const { return children.empty(); }
};

struct LanguageHierarchy {
  HierarchyNode root;

  // Throws ConfigError: zero layers, leaf without language, duplicate codes.
  void validate() const;
  // Leaves in depth-first order.
  std::vector<std::string> languages() const;
  // Sum of layers along root -> leaf.
  std::size_t depth(const std::string& language) const;
  // Language -> name of its top-level group below the first branching node.
  std::map<std::string, std::string> families() const;

  nlohmann::json to_json() const;
  static LanguageHierarchy from_json(const nlohmann::json& j);
  static LanguageHierarchy load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Eight Indo-European targets, depth-6 paths over 24 layers; level widths
  // 1,1,2,4,8,8 (Germanic: da sv / nl de, Romance: fr it / pt ro).
  static LanguageHierarchy indo_european();
  // A single language on a plain encoder stack.
  static LanguageHierarchy chain(const std::string& language, std::size_t layers);
};

enum class ArchTag { kTet, kTetRnd, kTencLang, kTencAll };
std::string to_string(ArchTag arch);
ArchTag parse_arch(const std::string& s);  // ConfigError on unknown names

struct GraphNode {
  int id = 0;
  std::optional<int> parent;
  std::string name;
  EncoderLayerParams params;
};

struct LeafBinding {
  int node = 0;
  std::size_t head = 0;
};

struct NamedParam {
  std::string name;
  ad::Tensor tensor;
};

class ModelGraph {
 public:
  ArchTag arch = ArchTag::kTet;
  ModelDims dims;
  LanguageHierarchy hierarchy;
  corpus::Vocab vocab;              // includes language tokens for kTencAll
  std::uint64_t base_vocab_hash = 0;  // of the corpus vocabulary
  Embedding embedding;
  std::vector<GraphNode> nodes;     // nodes[i].id == i, parents precede children
  std::vector<LeafHead> heads;
  std::map<std::string, LeafBinding> leaves;
  std::map<std::string, TokenId> language_tokens;

  std::vector<std::string> languages() const;
  const GraphNode& node(int id) const;
  std::vector<int> children(int id) const;
  bool has_language(const std::string& language) const {
    return leaves.count(language) != 0;
  }

  // Canonical order: embedding, nodes by id, heads by index.
  std::vector<NamedParam> parameters();
  // Embedding, nodes on path_for(language), and that language's head.
  std::vector<NamedParam> path_parameters(const std::string& language);
  std::size_t parameter_count() const;
  // Encoder-layer parameters only (excludes embedding and heads).
  std::size_t encoder_parameter_count() const;

  ModelGraph clone() const;
};

ModelGraph build_tet(const LanguageHierarchy& h, ModelDims dims,
                     const corpus::Vocab& vocab, std::uint64_t seed);
// kTetRnd: same topology, leaf languages permuted by leaf_permutation().
// kTencLang: one independent chain per language, depth = its tree depth.
// kTencAll: one chain shared by every language, selected by a <2XX> token
// prepended to the input.
ModelGraph build_variant(const LanguageHierarchy& h, ArchTag variant, ModelDims dims,
                         const corpus::Vocab& vocab, std::uint64_t seed);
ModelGraph build_model(const LanguageHierarchy& h, ArchTag arch, ModelDims dims,
                       const corpus::Vocab& vocab, std::uint64_t seed);

// perm[k] = index (in depth-first leaf order) of the language placed at leaf k.
std::vector<std::size_t> leaf_permutation(std::size_t n, std::uint64_t seed);

// "<2FR>" for "fr".
std::string language_token(const std::string& language);

// Root-first node ids; LookupError for unknown languages.
std::vector<int> path_for(const ModelGraph& g, const std::string& language);

enum class CountMode { kMultiTargetShared, kPerLanguageSum };
// Encoder-layer evaluations needed to produce every language. Shared mode
// counts each (node, input stream) once; kTencAll feeds a different input per
// language, so nothing is shared there.
std::size_t layer_count(const ModelGraph& g, CountMode mode);

nlohmann::json dims_to_json(const ModelDims& d);
ModelDims dims_from_json(const nlohmann::json& j);  // ConfigError on invalid dims

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Header {format version, arch, dims, hierarchy, vocab hash, structure}
// followed by named little-endian float32 parameter blocks.
void save_checkpoint(ModelGraph& g, const std::filesystem::path& path);
// DataError when the file is malformed or `vocab` does not match the hash.
ModelGraph load_checkpoint(const std::filesystem::path& path, const corpus::Vocab& vocab);

}  // namespace tet
