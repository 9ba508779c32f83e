#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.h"
#include "tet/langtree.h"

using namespace tet;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run run(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(TET_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path run_dir(const Run& r) { return json::parse(r.out).at("run_dir").get<std::string>(); }

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

// Eight-language model whose heads always emit BLANK, plus vocab and a tiny test set.
struct BlankFixture {
  fs::path dir, ckpt, vocab, data;
};

BlankFixture blank_fixture(const std::string& name) {
  BlankFixture f;
  f.dir = tet::testing::temp_dir(name);
  corpus::TextCorpus text;
  const auto langs = LanguageHierarchy::indo_european().languages();
  for (const std::string id : {"0", "1"}) {
    corpus::TextExample ex{id, "GOOD DAY", {}};
    for (const auto& l : langs) ex.targets[l] = "BON JOUR";
    text.examples.push_back(ex);
  }
  f.data = f.dir / "test.jsonl";
  corpus::save_jsonl(text, f.data);
  auto vocab = corpus::build_vocab(text.all_sentences());
  f.vocab = f.dir / "vocab.txt";
  vocab.save(f.vocab);
  auto g = build_tet(LanguageHierarchy::indo_european(), tet::testing::small_dims(), vocab, 1);
  for (auto& h : g.heads) {
    for (Real& v : h.w.values()) v = 0;
    for (Real& v : h.b.values()) v = 0;
    h.b.values()[corpus::kBlankId] = 10;
  }
  f.ckpt = f.dir / "blank.ckpt";
  save_checkpoint(g, f.ckpt);
  return f;
}

}  // namespace

TEST_CASE("inspect-tree on the default tree") {
  auto dir = tet::testing::temp_dir("cli_inspect");
  auto r = run("inspect-tree --dims 8,16,2", dir);
  CHECK(r.code == 0);
  CHECK(r.out.find("shared=24 per_language_sum=48") != std::string::npos);
  CHECK(r.out.find("-> fr") != std::string::npos);
  auto all = run("inspect-tree --dims 8,16,2 --arch tenc-all", dir);
  CHECK(all.out.find("nodes=6") != std::string::npos);
}

TEST_CASE("translate writes one file per language") {
  auto f = blank_fixture("cli_translate");
  std::ofstream(f.dir / "input.txt") << "good day\n";
  auto r = run("translate --checkpoint " + f.ckpt.string() + " --vocab " + f.vocab.string() +
                   " --input " + (f.dir / "input.txt").string() + " --out " + f.dir.string(),
               f.dir);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto out = run_dir(r);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().extension() != ".txt") continue;
    ++files;
    const auto text = slurp(e.path());
    CHECK(count_of(text, "\n") == 1);
  }
  CHECK(files == 8);
  CHECK(fs::exists(out / "manifest.json"));
}

TEST_CASE("eval of the blank-only checkpoint is all 100") {
  auto f = blank_fixture("cli_eval");
  auto r = run("eval --checkpoint " + f.ckpt.string() + " --vocab " + f.vocab.string() + " --data " +
                   f.data.string() + " --out " + f.dir.string(),
               f.dir);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.err.find("Model |") != std::string::npos);
  CHECK(count_of(r.err, "100.0") == 9);
  CHECK(json::parse(r.out).at("average_wer").get<double>() == 100.0);
  const auto report = json::parse(slurp(run_dir(r) / "eval.json"));
  CHECK(report["languages"].size() == 8);
}

TEST_CASE("runs are reproducible from identical inputs") {
  auto dir = tet::testing::temp_dir("cli_repro");
  const std::string args = "gen-synth --examples 30 --lexicon 20 --seed 3 --out " + dir.string();
  auto a = run(args, dir);
  REQUIRE(a.code == 0);
  const auto first = slurp(run_dir(a) / "data.jsonl");
  auto b = run(args, dir);
  CHECK(run_dir(a) == run_dir(b));
  CHECK(slurp(run_dir(b) / "data.jsonl") == first);
  auto other = run("gen-synth --examples 30 --lexicon 20 --seed 4 --out " + dir.string(), dir);
  CHECK(run_dir(other) != run_dir(a));
}

TEST_CASE("train then eval end to end") {
  auto dir = tet::testing::temp_dir("cli_train");
  auto g = run("gen-synth --families 1 --leaves-per-family 2 --examples 40 --lexicon 20 --out " +
                   dir.string(),
               dir);
  REQUIRE(g.code == 0);
  const auto synth = json::parse(g.out);
  auto t = run("train --data " + synth["data"].get<std::string>() + " --tree " +
                   synth["tree"].get<std::string>() + " --dims 8,16,2 --steps 3 --batch 4 --out " +
                   dir.string(),
               dir);
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const auto res = json::parse(t.out);
  CHECK(res["steps"] == 3);
  const auto td = run_dir(t);
  CHECK(fs::exists(td / "model.ckpt"));
  CHECK(fs::exists(td / "report.jsonl"));
  const auto manifest = json::parse(slurp(td / "manifest.json"));
  CHECK(manifest["config"]["steps"] == 3);
  CHECK(manifest.contains("data_hash"));

  auto e = run("eval --checkpoint " + (td / "model.ckpt").string() + " --vocab " +
                   (td / "vocab.txt").string() + " --data " + (td / "test.jsonl").string() +
                   " --out " + dir.string(),
               dir);
  CHECK_MESSAGE(e.code == 0, e.err);
}

TEST_CASE("exit codes and error JSON") {
  auto dir = tet::testing::temp_dir("cli_errors");
  auto bad_overlap = run("gen-synth --overlap 1.5 --out " + dir.string(), dir);
  CHECK(bad_overlap.code == 2);
  const auto err = json::parse(bad_overlap.err.substr(bad_overlap.err.find('{')));
  CHECK(err["error"] == "config");
  CHECK(err["exit_code"] == 2);

  CHECK(run("inspect-tree --dims 8,16", dir).code == 2);
  CHECK(run("inspect-tree --arch nope", dir).code == 2);
  CHECK(run("bogus-command", dir).code == 2);

  auto missing = run("train --data " + (dir / "absent.jsonl").string() + " --out " + dir.string(), dir);
  CHECK(missing.code == 3);
  CHECK(missing.err.find("\"data\"") != std::string::npos);

  // A checkpoint against the wrong vocabulary is a data error.
  auto f = blank_fixture("cli_errors_vocab");
  corpus::Vocab other;
  other.add("Q");
  other.save(f.dir / "other.txt");
  auto wrong = run("eval --checkpoint " + f.ckpt.string() + " --vocab " + (f.dir / "other.txt").string() +
                       " --data " + f.data.string() + " --out " + f.dir.string(),
                   f.dir);
  CHECK(wrong.code == 3);

  // Exploding updates: every step turns non-finite and training gives up.
  auto g = run("gen-synth --families 1 --leaves-per-family 1 --examples 20 --lexicon 10 --out " +
                   dir.string(),
               dir);
  const auto synth = json::parse(g.out);
  auto boom = run("train --data " + synth["data"].get<std::string>() + " --tree " +
                      synth["tree"].get<std::string>() +
                      " --dims 8,16,2 --steps 40 --batch 4 --lr 1e300 --out " + dir.string(),
                  dir);
  CHECK_MESSAGE(boom.code == 4, boom.err);
}
