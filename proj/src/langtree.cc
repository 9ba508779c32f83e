#include "tet/langtree.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "binio.h"

namespace tet {

using json = nlohmann::json;

namespace {

void collect_leaves(const HierarchyNode& n, std::vector<std::string>& out) {
  if (n.is_leaf()) {
    out.push_back(n.language);
    return;
  }
  for (const auto& c : n.children) collect_leaves(c, out);
}

json node_to_json(const HierarchyNode& n) {
  json j;
  j["name"] = n.name;
  j["layers"] = n.layers;
  if (n.is_leaf()) {
    j["language"] = n.language;
  } else {
    j["children"] = json::array();
    for (const auto& c : n.children) j["children"].push_back(node_to_json(c));
  }
  return j;
}

HierarchyNode node_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("hierarchy node must be an object");
  HierarchyNode n;
  n.language = j.value("language", std::string{});
  n.name = j.value("name", n.language);
  if (j.contains("layers")) {
    if (!j["layers"].is_number_integer() || j["layers"].get<long long>() < 1)
      throw ConfigError("node '" + n.name + "': layers must be a positive integer");
    n.layers = j["layers"].get<std::size_t>();
  }
  if (j.contains("children")) {
    if (!j["children"].is_array()) throw ConfigError("node '" + n.name + "': children must be an array");
    for (const auto& c : j["children"]) n.children.push_back(node_from_json(c));
  }
  return n;
}

HierarchyNode leaf(const std::string& lang, std::size_t layers) {
  return {lang, layers, {}, lang};
}

HierarchyNode group(const std::string& name, std::size_t layers,
                    std::vector<HierarchyNode> children) {
  return {name, layers, std::move(children), {}};
}

}  // namespace

void LanguageHierarchy::validate() const {
  std::set<std::string> seen;
  std::function<void(const HierarchyNode&)> walk = [&](const HierarchyNode& n) {
    if (n.layers < 1) throw ConfigError("node '" + n.name + "' must have at least one layer");
    if (n.is_leaf()) {
      if (n.language.empty()) throw ConfigError("leaf '" + n.name + "' has no language");
      if (!seen.insert(n.language).second)
        throw ContractError("duplicate language code '" + n.language + "' in hierarchy");
    } else if (!n.language.empty()) {
      throw ConfigError("internal node '" + n.name + "' must not carry a language");
    }
    for (const auto& c : n.children) walk(c);
  };
  walk(root);
}

std::vector<std::string> LanguageHierarchy::languages() const {
  std::vector<std::string> out;
  collect_leaves(root, out);
  return out;
}

std::size_t LanguageHierarchy::depth(const std::string& language) const {
  std::function<std::optional<std::size_t>(const HierarchyNode&)> walk =
      [&](const HierarchyNode& n) -> std::optional<std::size_t> {
    if (n.is_leaf()) return n.language == language ? std::optional(n.layers) : std::nullopt;
    for (const auto& c : n.children)
      if (auto d = walk(c)) return *d + n.layers;
    return std::nullopt;
  };
  auto d = walk(root);
  if (!d) throw LookupError("language not in hierarchy: " + language);
  return *d;
}

std::map<std::string, std::string> LanguageHierarchy::families() const {
  const HierarchyNode* n = &root;
  while (n->children.size() == 1) n = &n->children.front();
  std::map<std::string, std::string> out;
  if (n->is_leaf()) {
    out[n->language] = n->name;
    return out;
  }
  for (const auto& c : n->children) {
    std::vector<std::string> langs;
    collect_leaves(c, langs);
    for (const auto& l : langs) out[l] = c.name;
  }
  return out;
}

json LanguageHierarchy::to_json() const { return node_to_json(root); }

LanguageHierarchy LanguageHierarchy::from_json(const json& j) {
  LanguageHierarchy h{node_from_json(j)};
  h.validate();
  return h;
}

LanguageHierarchy LanguageHierarchy::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read hierarchy " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("hierarchy " + path.string() + ": " + e.what());
  }
}

void LanguageHierarchy::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write hierarchy " + path.string());
  out << to_json().dump(2) << '\n';
}

LanguageHierarchy LanguageHierarchy::indo_european() {
  return {group("indo-european", 2,
                {group("germanic", 1,
                       {group("north-germanic", 1, {leaf("da", 2), leaf("sv", 2)}),
                        group("west-germanic", 1, {leaf("nl", 2), leaf("de", 2)})}),
                 group("romance", 1,
                       {group("italo-western", 1, {leaf("fr", 2), leaf("it", 2)}),
                        group("ibero-eastern", 1, {leaf("pt", 2), leaf("ro", 2)})})})};
}

LanguageHierarchy LanguageHierarchy::chain(const std::string& language, std::size_t layers) {
  return {leaf(language, layers)};
}

std::string to_string(ArchTag arch) {
  switch (arch) {
    case ArchTag::kTet: return "TET";
    case ArchTag::kTetRnd: return "TET_RND";
    case ArchTag::kTencLang: return "TENC_LANG";
    case ArchTag::kTencAll: return "TENC_ALL";
  }
  return "?";
}

ArchTag parse_arch(const std::string& s) {
  std::string k;
  for (char c : s) k.push_back(c == '-' ? '_' : char(std::toupper(static_cast<unsigned char>(c))));
  if (k == "TET") return ArchTag::kTet;
  if (k == "TET_RND") return ArchTag::kTetRnd;
  if (k == "TENC_LANG") return ArchTag::kTencLang;
  if (k == "TENC_ALL") return ArchTag::kTencAll;
  throw ConfigError("unknown architecture '" + s + "' (tet|tet-rnd|tenc-lang|tenc-all)");
}

std::string language_token(const std::string& language) {
  std::string up;
  for (char c : language) up.push_back(char(std::toupper(static_cast<unsigned char>(c))));
  return "<2" + up + ">";
}

std::vector<std::string> ModelGraph::languages() const {
  std::vector<std::string> out;
  for (const auto& [l, _] : leaves) out.push_back(l);
  return out;
}

const GraphNode& ModelGraph::node(int id) const {
  if (id < 0 || std::size_t(id) >= nodes.size())
    throw LookupError("no graph node " + std::to_string(id));
  return nodes[std::size_t(id)];
}

std::vector<int> ModelGraph::children(int id) const {
  std::vector<int> out;
  for (const auto& n : nodes)
    if (n.parent && *n.parent == id) out.push_back(n.id);
  return out;
}

std::vector<NamedParam> ModelGraph::parameters() {
  std::vector<NamedParam> out;
  auto push = [&](const std::string& name, ad::Tensor& t) { out.push_back({name, t}); };
  embedding.for_each("embed", push);
  for (auto& n : nodes) n.params.for_each("node" + std::to_string(n.id), push);
  for (std::size_t i = 0; i < heads.size(); ++i) heads[i].for_each("head" + std::to_string(i), push);
  return out;
}

std::vector<NamedParam> ModelGraph::path_parameters(const std::string& language) {
  std::vector<NamedParam> out;
  auto push = [&](const std::string& name, ad::Tensor& t) { out.push_back({name, t}); };
  embedding.for_each("embed", push);
  for (int id : path_for(*this, language))
    nodes[std::size_t(id)].params.for_each("node" + std::to_string(id), push);
  const std::size_t h = leaves.at(language).head;
  heads[h].for_each("head" + std::to_string(h), push);
  return out;
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : const_cast<ModelGraph*>(this)->parameters()) n += p.tensor.numel();
  return n;
}

std::size_t ModelGraph::encoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& node : nodes) n += node.params.parameter_count();
  return n;
}

ModelGraph ModelGraph::clone() const {
  ModelGraph g = *this;
  // Re-point every tensor handle at a private copy.
  g.embedding = Embedding{};
  g.embedding.tokens = embedding.tokens.clone();
  if (embedding.positions.defined()) g.embedding.positions = embedding.positions.clone();
  for (auto& n : g.nodes) {
    std::vector<ad::Tensor*> dst;
    n.params.for_each("", [&](const std::string&, ad::Tensor& t) { dst.push_back(&t); });
    for (auto* t : dst) *t = t->clone();
  }
  for (auto& h : g.heads) {
    h.w = h.w.clone();
    h.b = h.b.clone();
  }
  return g;
}

namespace {

ModelGraph skeleton(ArchTag arch, ModelDims dims, const LanguageHierarchy& h,
                    const corpus::Vocab& vocab) {
  ModelGraph g;
  g.arch = arch;
  g.hierarchy = h;
  g.vocab = vocab;
  g.base_vocab_hash = vocab.hash();
  g.dims = dims;
  return g;
}

int add_node(ModelGraph& g, std::optional<int> parent, const std::string& name) {
  const int id = int(g.nodes.size());
  g.nodes.push_back({id, parent, name, EncoderLayerParams::zeros(g.dims)});
  return id;
}

void allocate_rest(ModelGraph& g, std::size_t n_heads) {
  g.embedding = Embedding::zeros(g.dims);
  g.heads.clear();
  for (std::size_t i = 0; i < n_heads; ++i) g.heads.push_back(LeafHead::zeros(g.dims));
}

void initialize(ModelGraph& g, std::uint64_t seed) {
  g.embedding.initialize(mix_seed(seed, 1));
  for (auto& n : g.nodes) n.params.initialize(mix_seed(seed, 1000 + std::uint64_t(n.id)));
  for (std::size_t i = 0; i < g.heads.size(); ++i)
    g.heads[i].initialize(mix_seed(seed, 100000 + i));
}

// Expands hierarchy nodes into chains of layers; returns leaf node ids in
// depth-first order.
void expand(ModelGraph& g, const HierarchyNode& hn, std::optional<int> parent,
            std::vector<int>& leaf_nodes) {
  std::optional<int> last = parent;
  for (std::size_t i = 0; i < hn.layers; ++i)
    last = add_node(g, last, hn.name + "." + std::to_string(i));
  if (hn.is_leaf()) {
    leaf_nodes.push_back(*last);
    return;
  }
  for (const auto& c : hn.children) expand(g, c, last, leaf_nodes);
}

void relabel_leaves(HierarchyNode& n, const std::vector<std::string>& labels,
                    std::size_t& next) {
  if (n.is_leaf()) {
    n.language = labels[next++];
    return;
  }
  for (auto& c : n.children) relabel_leaves(c, labels, next);
}

// Invalid hierarchies handed to the builders are caller bugs, not config errors.
void require_valid(const LanguageHierarchy& h) {
  try {
    h.validate();
  } catch (const ConfigError& e) {
    throw ContractError(e.what());
  }
}

}  // namespace

std::vector<std::size_t> leaf_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, 0x7e7));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

ModelGraph build_tet(const LanguageHierarchy& h, ModelDims dims, const corpus::Vocab& vocab,
                     std::uint64_t seed) {
  require_valid(h);
  dims.vocab_size = vocab.size();
  dims.validate();
  ModelGraph g = skeleton(ArchTag::kTet, dims, h, vocab);
  std::vector<int> leaf_nodes;
  expand(g, h.root, std::nullopt, leaf_nodes);
  const auto langs = h.languages();
  for (std::size_t i = 0; i < langs.size(); ++i) g.leaves[langs[i]] = {leaf_nodes[i], i};
  allocate_rest(g, langs.size());
  initialize(g, seed);
  return g;
}

ModelGraph build_variant(const LanguageHierarchy& h, ArchTag variant, ModelDims dims,
                         const corpus::Vocab& vocab, std::uint64_t seed) {
  require_valid(h);
  const auto langs = h.languages();
  switch (variant) {
    case ArchTag::kTetRnd: {
      ModelGraph g = build_tet(h, dims, vocab, seed);
      g.arch = ArchTag::kTetRnd;
      const auto perm = leaf_permutation(langs.size(), seed);
      std::vector<std::string> labels(langs.size());
      for (std::size_t k = 0; k < langs.size(); ++k) labels[k] = langs[perm[k]];
      std::size_t next = 0;
      relabel_leaves(g.hierarchy.root, labels, next);
      // Leaf k (depth-first) keeps node and head k; only its language changes.
      std::map<std::string, LeafBinding> leaves;
      for (std::size_t k = 0; k < langs.size(); ++k)
        leaves[labels[k]] = g.leaves.at(langs[k]);
      g.leaves = std::move(leaves);
      return g;
    }
    case ArchTag::kTencLang: {
      dims.vocab_size = vocab.size();
      dims.validate();
      ModelGraph g = skeleton(ArchTag::kTencLang, dims, h, vocab);
      for (std::size_t i = 0; i < langs.size(); ++i) {
        std::optional<int> last;
        for (std::size_t k = 0; k < h.depth(langs[i]); ++k)
          last = add_node(g, last, langs[i] + "." + std::to_string(k));
        g.leaves[langs[i]] = {*last, i};
      }
      allocate_rest(g, langs.size());
      initialize(g, seed);
      return g;
    }
    case ArchTag::kTencAll: {
      corpus::Vocab extended = vocab;
      std::map<std::string, TokenId> tokens;
      for (const auto& l : langs) tokens[l] = extended.add(language_token(l));
      dims.vocab_size = extended.size();
      dims.validate();
      ModelGraph g = skeleton(ArchTag::kTencAll, dims, h, extended);
      g.base_vocab_hash = vocab.hash();
      g.language_tokens = std::move(tokens);
      std::size_t depth = 0;
      for (const auto& l : langs) depth = std::max(depth, h.depth(l));
      std::optional<int> last;
      for (std::size_t k = 0; k < depth; ++k) last = add_node(g, last, "all." + std::to_string(k));
      for (const auto& l : langs) g.leaves[l] = {*last, 0};
      allocate_rest(g, 1);
      initialize(g, seed);
      return g;
    }
    case ArchTag::kTet:
      break;
  }
  throw ContractError("build_variant: unsupported variant " + to_string(variant));
}

ModelGraph build_model(const LanguageHierarchy& h, ArchTag arch, ModelDims dims,
                       const corpus::Vocab& vocab, std::uint64_t seed) {
  return arch == ArchTag::kTet ? build_tet(h, dims, vocab, seed)
                               : build_variant(h, arch, dims, vocab, seed);
}

std::vector<int> path_for(const ModelGraph& g, const std::string& language) {
  auto it = g.leaves.find(language);
  if (it == g.leaves.end()) throw LookupError("language not in model: " + language);
  std::vector<int> path;
  std::optional<int> cur = it->second.node;
  while (cur) {
    path.push_back(*cur);
    cur = g.node(*cur).parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

std::size_t layer_count(const ModelGraph& g, CountMode mode) {
  std::size_t per_language = 0;
  std::set<int> distinct;
  for (const auto& [lang, _] : g.leaves) {
    const auto path = path_for(g, lang);
    per_language += path.size();
    distinct.insert(path.begin(), path.end());
  }
  if (mode == CountMode::kPerLanguageSum || g.arch == ArchTag::kTencAll) return per_language;
  return distinct.size();
}

namespace {
constexpr char kCheckpointMagic[9] = "TETCKPT\0";
}  // namespace

json dims_to_json(const ModelDims& d) {
  return {{"d_model", d.d_model}, {"d_ff", d.d_ff}, {"n_heads", d.n_heads},
          {"vocab_size", d.vocab_size},
          {"positional", d.positional == PositionalKind::kLearned ? "learned" : "sinusoidal"},
          {"max_positions", d.max_positions}, {"ln_eps", d.ln_eps}};
}

ModelDims dims_from_json(const json& j) {
  ModelDims d;
  d.d_model = j.at("d_model").get<std::size_t>();
  d.d_ff = j.at("d_ff").get<std::size_t>();
  d.n_heads = j.at("n_heads").get<std::size_t>();
  d.vocab_size = j.at("vocab_size").get<std::size_t>();
  d.positional = j.at("positional").get<std::string>() == "learned" ? PositionalKind::kLearned
                                                                    : PositionalKind::kSinusoidal;
  d.max_positions = j.at("max_positions").get<std::size_t>();
  d.ln_eps = j.at("ln_eps").get<Real>();
  d.validate();
  return d;
}

void save_checkpoint(ModelGraph& g, const std::filesystem::path& path) {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["arch_tag"] = to_string(g.arch);
  header["dims"] = dims_to_json(g.dims);
  header["hierarchy"] = g.hierarchy.to_json();
  header["vocab_hash"] = hex64(g.base_vocab_hash);
  header["language_tokens"] = g.language_tokens;
  json nodes = json::array();
  for (const auto& n : g.nodes)
    nodes.push_back({{"id", n.id}, {"parent", n.parent ? json(*n.parent) : json(nullptr)},
                     {"name", n.name}});
  header["nodes"] = nodes;
  json leaves = json::object();
  for (const auto& [l, b] : g.leaves) leaves[l] = {{"node", b.node}, {"head", b.head}};
  header["leaves"] = leaves;
  header["heads"] = g.heads.size();
  auto params = g.parameters();
  header["blocks"] = params.size();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    binio::write_preamble(out, kCheckpointMagic, kCheckpointVersion, header);
    for (auto& p : params)
      binio::write_block<float>(out, p.name, p.tensor.shape(), p.tensor.values());
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelGraph load_checkpoint(const std::filesystem::path& path, const corpus::Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  const json header = binio::read_preamble(in, kCheckpointMagic, kCheckpointVersion);
  try {
    const auto expected = header.at("vocab_hash").get<std::string>();
    if (expected != hex64(vocab.hash()))
      throw DataError("checkpoint " + path.string() + " was trained with vocabulary " +
                      expected + ", got " + hex64(vocab.hash()));
    ModelGraph g;
    g.arch = parse_arch(header.at("arch_tag").get<std::string>());
    g.dims = dims_from_json(header.at("dims"));
    g.hierarchy = LanguageHierarchy::from_json(header.at("hierarchy"));
    g.vocab = vocab;
    g.base_vocab_hash = vocab.hash();
    for (const auto& [l, tok] : header.at("language_tokens").items()) {
      const TokenId id = g.vocab.add(language_token(l));
      if (id != tok.get<TokenId>()) throw DataError("language token id mismatch for " + l);
      g.language_tokens[l] = id;
    }
    if (g.vocab.size() != g.dims.vocab_size)
      throw DataError("checkpoint vocabulary size " + std::to_string(g.dims.vocab_size) +
                      " does not match " + std::to_string(g.vocab.size()));
    for (const auto& n : header.at("nodes")) {
      std::optional<int> parent;
      if (!n.at("parent").is_null()) parent = n.at("parent").get<int>();
      if (n.at("id").get<int>() != int(g.nodes.size()) || (parent && *parent >= int(g.nodes.size())))
        throw DataError("checkpoint node list is not in topological id order");
      add_node(g, parent, n.at("name").get<std::string>());
    }
    allocate_rest(g, header.at("heads").get<std::size_t>());
    for (const auto& [l, b] : header.at("leaves").items()) {
      LeafBinding lb{b.at("node").get<int>(), b.at("head").get<std::size_t>()};
      if (lb.node < 0 || std::size_t(lb.node) >= g.nodes.size() || lb.head >= g.heads.size())
        throw DataError("checkpoint leaf binding out of range for " + l);
      g.leaves[l] = lb;
    }
    std::map<std::string, ad::Tensor> by_name;
    for (auto& p : g.parameters()) by_name.emplace(p.name, p.tensor);
    const auto n_blocks = header.at("blocks").get<std::size_t>();
    if (n_blocks != by_name.size())
      throw DataError("checkpoint has " + std::to_string(n_blocks) + " blocks, model expects " +
                      std::to_string(by_name.size()));
    for (std::size_t i = 0; i < n_blocks; ++i) {
      auto block = binio::read_block<float>(in);
      auto it = by_name.find(block.name);
      if (it == by_name.end()) throw DataError("unexpected checkpoint block " + block.name);
      if (it->second.shape() != block.shape)
        throw DataError("block " + block.name + " has shape " + ad::shape_str(block.shape) +
                        ", expected " + ad::shape_str(it->second.shape()));
      std::copy(block.values.begin(), block.values.end(), it->second.values().begin());
      by_name.erase(it);
    }
    return g;
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace tet
