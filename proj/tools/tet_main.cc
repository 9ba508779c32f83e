// tet: synthetic data generation, training, evaluation, translation,
// benchmarking and tree inspection for Transformer Encoder Tree models.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tet/corpus.h"
#include "tet/encoder.h"
#include "tet/eval.h"
#include "tet/langtree.h"
#include "tet/synth.h"
#include "tet/trainer.h"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tet;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

json build_info() {
  return {{"version", kVersion},
          {"real", sizeof(Real) == 8 ? "float64" : "float32"},
          {"compiler", __VERSION__}};
}

// Creates <out>/<kind>-<hash of the manifest>/ and writes manifest.json there.
// Manifests carry no timestamps, so identical runs land in the same place.
fs::path run_dir(const fs::path& out, const std::string& kind, json manifest) {
  manifest["command"] = kind;
  manifest["build"] = build_info();
  const std::string h = hex64(fnv1a(manifest.dump()));
  const fs::path dir = out / (kind + "-" + h);
  fs::create_directories(dir);
  manifest["manifest_hash"] = h;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  return dir;
}

void print_result(const fs::path& dir, json extra = json::object()) {
  extra["run_dir"] = dir.string();
  std::cout << extra.dump() << std::endl;
}

ModelDims parse_dims(const std::string& s) {
  ModelDims d;
  std::size_t a = 0, b = 0, c = 0;
  char sep1 = 0, sep2 = 0;
  std::istringstream in(s);
  if (!(in >> a >> sep1 >> b >> sep2 >> c) || sep1 != ',' || sep2 != ',' || !in.eof())
    throw ConfigError("--dims expects d_model,d_ff,heads; got '" + s + "'");
  d.d_model = a;
  d.d_ff = b;
  d.n_heads = c;
  return d;
}

LanguageHierarchy load_tree(const std::string& path) {
  if (path.empty() || path == "indo_european") return LanguageHierarchy::indo_european();
  return LanguageHierarchy::load(path);
}

corpus::Vocab vocab_for(const std::string& vocab_path, const corpus::TextCorpus& text) {
  if (!vocab_path.empty()) return corpus::Vocab::load(vocab_path);
  return corpus::build_vocab(text.all_sentences());
}

struct Common {
  std::string arch = "tet";
  std::string tree;
  std::string data;
  std::string vocab;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  std::size_t batch = 16;
  std::size_t steps = 1000;
  std::string dims = "128,512,4";
  std::size_t threads = 1;
  std::string out = ".";
};

// --- gen-synth ---------------------------------------------------------------

struct SynthArgs {
  synth::SynthOptions opts;
  std::vector<std::string> resources;
  std::string out = ".";
};

int cmd_gen_synth(SynthArgs& a) {
  for (const auto& r : a.resources) {
    const auto eq = r.find('=');
    if (eq == std::string::npos) throw ConfigError("--resource expects lang=fraction, got " + r);
    try {
      a.opts.resources[r.substr(0, eq)] = std::stod(r.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("--resource fraction is not a number: " + r);
    }
  }
  a.opts.validate();
  const auto sc = synth::generate(a.opts);
  json m;
  m["options"] = {{"families", a.opts.families},
                  {"languages_per_family", a.opts.languages_per_family},
                  {"overlap", a.opts.overlap},
                  {"examples", a.opts.examples},
                  {"alphabet", a.opts.alphabet},
                  {"lexicon", a.opts.lexicon},
                  {"resources", a.opts.resources},
                  {"copy_task", a.opts.copy_task},
                  {"seed", a.opts.seed}};
  const auto dir = run_dir(a.out, "synth", m);
  corpus::save_jsonl(sc.corpus, dir / "data.jsonl");
  sc.hierarchy.save(dir / "tree.json");
  json maps = json::object();
  for (const auto& [lang, map] : sc.mappings)
    maps[lang] = {{"family", sc.families.at(lang)}, {"mapping", map}};
  std::ofstream(dir / "mappings.json") << json{{"alphabet", sc.alphabet}, {"languages", maps}}.dump(2)
                                       << '\n';
  print_result(dir, {{"examples", sc.corpus.examples.size()}, {"data", (dir / "data.jsonl").string()},
                     {"tree", (dir / "tree.json").string()}});
  return 0;
}

// --- build-vocab -------------------------------------------------------------

int cmd_build_vocab(const Common& c) {
  if (c.data.empty()) throw ConfigError("--data is required");
  const auto text = corpus::load_jsonl(c.data);
  const auto vocab = corpus::build_vocab(text.all_sentences());
  json m{{"data", c.data}, {"data_hash", file_hash(c.data)}};
  const auto dir = run_dir(c.out, "vocab", m);
  vocab.save(dir / "vocab.txt");
  print_result(dir, {{"size", vocab.size()}, {"hash", hex64(vocab.hash())}});
  return 0;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  double split_ratio = 0.9;
  std::size_t eval_every = 0;
  std::size_t checkpoint_every = 0;
  std::size_t warmup = 0;
  std::string update_mode;
  std::string resume;
};

corpus::TextCorpus subset(const corpus::TextCorpus& text, const corpus::ParallelCorpus& part) {
  std::set<std::string> ids;
  for (const auto& e : part.examples) ids.insert(e.id);
  corpus::TextCorpus out;
  for (const auto& e : text.examples)
    if (ids.count(e.id)) out.examples.push_back(e);
  return out;
}

int cmd_train(const Common& c, const TrainArgs& t, const CLI::App& app) {
  if (c.data.empty()) throw ConfigError("--data is required");
  // flag > config file > default
  TrainConfig cfg;
  if (!t.config.empty()) {
    std::ifstream in(t.config);
    if (!in) throw ConfigError("cannot read config " + t.config);
    try {
      cfg = TrainConfig::from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw ConfigError("config " + t.config + ": " + e.what());
    }
  }
  auto given = [&](const char* name) { return app.count(name) > 0; };
  if (given("--arch")) cfg.arch = parse_arch(c.arch);
  if (given("--dims")) {
    const auto d = parse_dims(c.dims);
    cfg.dims.d_model = d.d_model;
    cfg.dims.d_ff = d.d_ff;
    cfg.dims.n_heads = d.n_heads;
  }
  if (given("--seed")) cfg.seed = c.seed;
  if (given("--lr")) cfg.learning_rate = Real(c.lr);
  if (given("--batch")) cfg.batch_size = c.batch;
  if (given("--steps")) cfg.steps = c.steps;
  if (given("--eval-every")) cfg.eval_every = t.eval_every;
  if (given("--checkpoint-every")) cfg.checkpoint_every = t.checkpoint_every;
  if (given("--warmup")) cfg.warmup_steps = t.warmup;
  if (given("--update-mode")) {
    if (t.update_mode == "joint") cfg.update_mode = UpdateMode::kJoint;
    else if (t.update_mode == "sequential") cfg.update_mode = UpdateMode::kSequential;
    else throw ConfigError("--update-mode must be sequential or joint");
  }
  cfg.validate();

  const auto tree = load_tree(c.tree);
  const auto text = corpus::load_jsonl(c.data);
  const auto vocab = vocab_for(c.vocab, text);
  const auto encoded = corpus::encode(text, vocab);
  auto [train, test] = corpus::split(encoded, t.split_ratio, cfg.seed);
  for (const auto& l : tree.languages())
    if (train.count(l) == 0) spdlog::warn("no training targets for {}", l);

  json m;
  m["config"] = cfg.to_json();
  m["tree"] = tree.to_json();
  m["data"] = c.data;
  m["data_hash"] = file_hash(c.data);
  m["vocab_hash"] = hex64(vocab.hash());
  m["split"] = {{"ratio", t.split_ratio}, {"seed", cfg.seed}, {"train", train.size()}, {"test", test.size()}};
  if (!t.resume.empty()) m["resume"] = {{"state", t.resume}, {"hash", file_hash(t.resume)}};
  const auto dir = run_dir(c.out, "train", m);
  vocab.save(dir / "vocab.txt");
  tree.save(dir / "tree.json");
  corpus::save_jsonl(subset(text, test), dir / "test.jsonl");

  auto state = init_training(tree, vocab, cfg);
  if (!t.resume.empty()) load_state(state, t.resume);
  FitOptions fo;
  fo.eval_set = &test;
  fo.report_path = dir / "report.jsonl";
  fo.checkpoint_dir = dir / "checkpoints";
  fs::remove(fo.report_path);
  fit(state, train, cfg, fo);
  save_checkpoint(state.model, dir / "model.ckpt");
  print_result(dir, {{"checkpoint", (dir / "model.ckpt").string()}, {"steps", state.step},
                     {"parameters", state.model.parameter_count()}});
  return 0;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::size_t max_examples = 0;
  bool table = true;
};

int cmd_eval(const Common& c, const EvalArgs& e) {
  if (e.checkpoint.empty() || c.vocab.empty() || c.data.empty())
    throw ConfigError("eval needs --checkpoint, --vocab and --data");
  const auto vocab = corpus::Vocab::load(c.vocab);
  const auto g = load_checkpoint(e.checkpoint, vocab);
  const auto text = corpus::load_jsonl(c.data);
  const auto testset = corpus::encode(text, vocab);
  eval::EvalOptions eo;
  eo.seed = c.seed;
  eo.threads = c.threads;
  eo.max_examples = e.max_examples;
  const auto languages = g.languages();
  const auto report = eval::evaluate(g, testset, languages, eo);
  json m{{"checkpoint", e.checkpoint}, {"checkpoint_hash", file_hash(e.checkpoint)},
         {"data", c.data}, {"data_hash", file_hash(c.data)}, {"seed", c.seed},
         {"max_examples", e.max_examples}};
  const auto dir = run_dir(c.out, "eval", m);
  std::ofstream(dir / "eval.json") << report.to_json().dump(2) << '\n';
  std::vector<std::string> shown;
  for (const auto& l : languages)
    if (report.languages.count(l)) shown.push_back(l);
  const auto table = eval::render_table({{to_string(g.arch), report}}, shown);
  std::ofstream(dir / "table.txt") << table;
  if (e.table) std::cerr << table;
  print_result(dir, {{"average_wer", report.average()}});
  return 0;
}

// --- translate ---------------------------------------------------------------

int cmd_translate(const Common& c, const std::string& checkpoint, const std::string& input) {
  if (checkpoint.empty() || c.vocab.empty() || input.empty())
    throw ConfigError("translate needs --checkpoint, --vocab and --input");
  const auto vocab = corpus::Vocab::load(c.vocab);
  const auto g = load_checkpoint(checkpoint, vocab);
  std::ifstream in(input);
  if (!in) throw DataError("cannot read " + input);
  std::vector<std::vector<TokenId>> sources;
  std::string line;
  while (std::getline(in, line)) {
    const auto cleaned = corpus::post_process(line, {.punctuation_filter = false});
    sources.push_back(vocab.tokenize(cleaned.text));
  }
  eval::EvalOptions eo;
  eo.seed = c.seed;
  eo.threads = c.threads;
  const auto out = eval::translate(g, sources, eo);
  json m{{"checkpoint", checkpoint}, {"checkpoint_hash", file_hash(checkpoint)},
         {"input", input}, {"input_hash", file_hash(input)}, {"seed", c.seed}};
  const auto dir = run_dir(c.out, "translate", m);
  for (const auto& [lang, lines] : out) {
    std::ofstream f(dir / (lang + ".txt"));
    for (const auto& l : lines) f << l << '\n';
  }
  print_result(dir, {{"sentences", sources.size()}, {"languages", out.size()}});
  return 0;
}

// --- bench -------------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint;
  std::size_t reps = 5;
  std::size_t rows = 32;
  std::size_t source_length = 30;
  std::size_t vocab_size = 64;
};

int cmd_bench(const Common& c, const BenchArgs& b) {
  ModelGraph g;
  corpus::Vocab vocab;
  if (!b.checkpoint.empty()) {
    if (c.vocab.empty()) throw ConfigError("--checkpoint needs --vocab");
    vocab = corpus::Vocab::load(c.vocab);
    g = load_checkpoint(b.checkpoint, vocab);
  } else {
    for (std::size_t i = 0; vocab.size() < b.vocab_size; ++i) vocab.add("t" + std::to_string(i));
    auto dims = parse_dims(c.dims);
    dims.vocab_size = vocab.size();
    g = build_model(load_tree(c.tree), parse_arch(c.arch), dims, vocab, c.seed);
  }
  std::mt19937_64 rng(c.seed);
  std::uniform_int_distribution<TokenId> tok(2, TokenId(vocab.size() - 1));
  std::vector<std::vector<TokenId>> sources(b.rows);
  for (auto& s : sources) {
    s.resize(b.source_length);
    for (auto& t : s) t = tok(rng);
  }
  const auto batch = corpus::make_source_batch(sources, g.languages(), c.seed, batch_options_for(g));
  const auto report = eval::bench(g, batch, b.reps, c.threads);
  json m{{"arch", to_string(g.arch)}, {"dims", dims_to_json(g.dims)}, {"tree", g.hierarchy.to_json()},
         {"rows", b.rows}, {"source_length", b.source_length}, {"reps", b.reps},
         {"threads", c.threads}, {"seed", c.seed}, {"checkpoint", b.checkpoint}};
  const auto dir = run_dir(c.out, "bench", m);
  std::ofstream(dir / "bench.json") << report.to_json().dump(2) << '\n';
  print_result(dir, report.to_json());
  return 0;
}

// --- inspect-tree ------------------------------------------------------------

int cmd_inspect_tree(const Common& c, std::size_t vocab_size) {
  const auto tree = load_tree(c.tree);
  corpus::Vocab vocab;
  for (std::size_t i = 0; vocab.size() < vocab_size; ++i) vocab.add("t" + std::to_string(i));
  auto dims = parse_dims(c.dims);
  dims.vocab_size = vocab.size();
  auto g = build_model(tree, parse_arch(c.arch), dims, vocab, c.seed);
  std::function<void(int, int)> show = [&](int id, int depth) {
    const auto& n = g.node(id);
    std::cout << std::string(std::size_t(depth) * 2, ' ') << n.name << "  params="
              << n.params.parameter_count();
    for (const auto& [lang, leaf] : g.leaves)
      if (leaf.node == id) std::cout << "  -> " << lang << " (head " << leaf.head << ")";
    std::cout << '\n';
    for (int child : g.children(id)) show(child, depth + 1);
  };
  std::cout << "arch=" << to_string(g.arch) << " nodes=" << g.nodes.size()
            << " parameters=" << g.parameter_count()
            << " encoder_parameters=" << g.encoder_parameter_count() << '\n';
  for (const auto& n : g.nodes)
    if (!n.parent) show(n.id, 0);
  std::cout << "shared=" << layer_count(g, CountMode::kMultiTargetShared)
            << " per_language_sum=" << layer_count(g, CountMode::kPerLanguageSum) << '\n';
  return 0;
}

int fail(int code, const char* kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer Encoder Tree: multi-target CTC translation"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error");
  app.set_version_flag("--version", kVersion);

  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--arch", c.arch, "tet|tet-rnd|tenc-lang|tenc-all");
    sub->add_option("--tree", c.tree, "hierarchy JSON (default: indo_european)");
    sub->add_option("--data", c.data, "JSONL corpus");
    sub->add_option("--vocab", c.vocab, "vocabulary file");
    sub->add_option("--seed", c.seed);
    sub->add_option("--lr", c.lr);
    sub->add_option("--batch", c.batch);
    sub->add_option("--steps", c.steps);
    sub->add_option("--dims", c.dims, "d_model,d_ff,heads");
    sub->add_option("--threads", c.threads);
    sub->add_option("--out", c.out, "output directory");
  };

  SynthArgs sa;
  auto* gen = app.add_subcommand("gen-synth", "write a family-structured synthetic corpus");
  gen->add_option("--families", sa.opts.families);
  gen->add_option("--leaves-per-family,--per-family", sa.opts.languages_per_family);
  gen->add_option("--overlap", sa.opts.overlap);
  gen->add_option("--examples", sa.opts.examples);
  gen->add_option("--alphabet", sa.opts.alphabet);
  gen->add_option("--lexicon", sa.opts.lexicon);
  gen->add_option("--resource", sa.resources, "lang=fraction, repeatable");
  gen->add_flag("--copy-task", sa.opts.copy_task);
  gen->add_option("--seed", sa.opts.seed);
  gen->add_option("--out", sa.out);

  auto* vocab_cmd = app.add_subcommand("build-vocab", "character vocabulary of a corpus");
  add_common(vocab_cmd);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model");
  add_common(train);
  train->add_option("--config", ta.config, "TrainConfig JSON");
  train->add_option("--split-ratio", ta.split_ratio);
  train->add_option("--eval-every", ta.eval_every);
  train->add_option("--checkpoint-every", ta.checkpoint_every);
  train->add_option("--warmup", ta.warmup);
  train->add_option("--update-mode", ta.update_mode, "sequential|joint");
  train->add_option("--resume", ta.resume, "training state file");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "per-language WER of a checkpoint");
  add_common(ev);
  ev->add_option("--checkpoint", ea.checkpoint);
  ev->add_option("--max-examples", ea.max_examples);

  std::string tr_ckpt, tr_input;
  auto* tr = app.add_subcommand("translate", "decode every language for sentences in a file");
  add_common(tr);
  tr->add_option("--checkpoint", tr_ckpt);
  tr->add_option("--input", tr_input, "one source sentence per line");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "forward_all vs per-language forward");
  add_common(bench);
  bench->add_option("--checkpoint", ba.checkpoint);
  bench->add_option("--reps", ba.reps);
  bench->add_option("--rows", ba.rows);
  bench->add_option("--source-length", ba.source_length);

  std::size_t inspect_vocab = 64;
  auto* inspect = app.add_subcommand("inspect-tree", "topology, parameter counts and layer counts");
  add_common(inspect);
  inspect->add_option("--vocab-size", inspect_vocab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "config", e.what());
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    spdlog::set_default_logger(spdlog::default_logger());
    if (*gen) return cmd_gen_synth(sa);
    if (*vocab_cmd) return cmd_build_vocab(c);
    if (*train) return cmd_train(c, ta, *train);
    if (*ev) return cmd_eval(c, ea);
    if (*tr) return cmd_translate(c, tr_ckpt, tr_input);
    if (*bench) return cmd_bench(c, ba);
    if (*inspect) return cmd_inspect_tree(c, inspect_vocab);
  } catch (const ConfigError& e) {
    return fail(2, "config", e.what());
  } catch (const ContractError& e) {
    return fail(2, "config", e.what());
  } catch (const DataError& e) {
    return fail(3, "data", e.what());
  } catch (const LookupError& e) {
    return fail(3, "data", e.what());
  } catch (const NumericError& e) {
    return fail(4, "numeric", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(3, "data", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
  return 0;
}
