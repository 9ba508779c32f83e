#include <set>

#include "doctest.h"
#include "support.h"
#include "tet/encoder.h"

using namespace tet;
using ad::Tape;
using ad::Tensor;
using tet::testing::bitwise_equal;
using tet::testing::four_leaf_tree;
using tet::testing::letter_vocab;
using tet::testing::small_dims;

namespace {

std::vector<corpus::Example> random_examples(const std::vector<std::string>& langs, std::size_t n,
                                             std::uint64_t seed, TokenId max_token) {
  std::mt19937_64 rng(seed);
  std::vector<corpus::Example> ex(n);
  for (std::size_t i = 0; i < n; ++i) {
    ex[i].id = std::to_string(i);
    ex[i].source.resize(1 + rng() % 6);
    for (auto& t : ex[i].source) t = TokenId(2 + rng() % std::uint64_t(max_token - 1));
    for (const auto& l : langs) ex[i].targets[l] = {TokenId(2 + rng() % std::uint64_t(max_token - 1))};
  }
  return ex;
}

corpus::Batch batch_for(const ModelGraph& g, std::size_t rows, std::uint64_t seed, std::size_t margin = 3) {
  auto ex = random_examples(g.languages(), rows, seed, TokenId(letter_vocab().size() - 1));
  return corpus::make_batch(std::span<const corpus::Example>(ex), g.languages(), seed,
                            batch_options_for(g, margin));
}

}  // namespace

TEST_CASE("forward_all equals forward_path bitwise for every architecture") {
  for (auto arch : {ArchTag::kTet, ArchTag::kTetRnd, ArchTag::kTencLang, ArchTag::kTencAll}) {
    for (const auto& h : {LanguageHierarchy::indo_european(), four_leaf_tree(2)}) {
      auto g = build_model(h, arch, small_dims(), letter_vocab(), 11);
      auto batch = batch_for(g, 3, 4);
      Tape tape = Tape::inference();
      auto all = forward_all(tape, g, batch);
      CHECK(all.size() == h.languages().size());
      for (const auto& l : g.languages()) {
        auto one = forward_path(tape, g, l, batch);
        CHECK(one.shape() == ad::Shape{3, batch.width, g.vocab.size()});
        CHECK_MESSAGE(bitwise_equal(all.at(l).values(), one.values()), to_string(arch) << " " << l);
      }
    }
  }
}

TEST_CASE("parallel sibling evaluation gives the same logits") {
  auto g = build_tet(LanguageHierarchy::indo_european(), small_dims(), letter_vocab(), 2);
  auto batch = batch_for(g, 4, 1);
  Tape tape = Tape::inference();
  auto serial = forward_all(tape, g, batch);
  ForwardOptions opts;
  opts.threads = 4;
  for (int rep = 0; rep < 3; ++rep) {
    auto par = forward_all(tape, g, batch, opts);
    for (const auto& l : g.languages()) CHECK(bitwise_equal(par.at(l).values(), serial.at(l).values()));
  }
}

TEST_CASE("layer invocation counts") {
  auto h = LanguageHierarchy::indo_european();
  auto tet = build_tet(h, small_dims(), letter_vocab(), 1);
  auto batch = batch_for(tet, 2, 1);
  Tape tape = Tape::inference();

  reset_layer_invocations();
  forward_path(tape, tet, "fr", batch);
  CHECK(layer_invocations() == 6);

  reset_layer_invocations();
  forward_all(tape, tet, batch);
  CHECK(layer_invocations() == 24);
  CHECK(layer_invocations() == layer_count(tet, CountMode::kMultiTargetShared));

  reset_layer_invocations();
  for (const auto& l : tet.languages()) forward_path(tape, tet, l, batch);
  CHECK(layer_invocations() == 48);

  auto lang = build_variant(h, ArchTag::kTencLang, small_dims(), letter_vocab(), 1);
  reset_layer_invocations();
  forward_all(tape, lang, batch_for(lang, 2, 1));
  CHECK(layer_invocations() == 48);

  auto all = build_variant(h, ArchTag::kTencAll, small_dims(), letter_vocab(), 1);
  reset_layer_invocations();
  forward_all(tape, all, batch_for(all, 2, 1));
  CHECK(layer_invocations() == layer_count(all, CountMode::kMultiTargetShared));
}

TEST_CASE("depth-one model is embed, layer, head") {
  auto g = build_tet(LanguageHierarchy::chain("fr", 1), small_dims(), letter_vocab(), 3);
  auto batch = batch_for(g, 2, 3);
  Tape tape = Tape::inference();
  auto x = embed(tape, batch.inputs, batch.rows, batch.width, g.embedding, g.dims);
  auto direct = project_head(tape, encoder_layer(tape, x, g.nodes[0].params, g.dims), g.heads[0]);
  CHECK(bitwise_equal(forward_path(tape, g, "fr", batch).values(), direct.values()));
}

TEST_CASE("permuting batch rows permutes the outputs") {
  auto g = build_tet(four_leaf_tree(1), small_dims(), letter_vocab(), 5);
  auto batch = batch_for(g, 4, 9);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permuted = batch;
  for (std::size_t r = 0; r < 4; ++r)
    std::copy(batch.row(perm[r]).begin(), batch.row(perm[r]).end(),
              permuted.inputs.begin() + std::ptrdiff_t(r * batch.width));
  Tape tape = Tape::inference();
  auto a = forward_all(tape, g, batch);
  auto b = forward_all(tape, g, permuted);
  const std::size_t stride = batch.width * g.vocab.size();
  for (const auto& l : g.languages())
    for (std::size_t r = 0; r < 4; ++r) {
      auto va = a.at(l).values().subspan(perm[r] * stride, stride);
      auto vb = b.at(l).values().subspan(r * stride, stride);
      for (std::size_t i = 0; i < stride; ++i) CHECK(std::abs(va[i] - vb[i]) <= 1e-12);
    }
}

TEST_CASE("gradients stay on the language's path") {
  for (auto arch : {ArchTag::kTet, ArchTag::kTetRnd, ArchTag::kTencLang}) {
    auto g = build_model(LanguageHierarchy::indo_european(), arch, small_dims(), letter_vocab(), 7);
    auto batch = batch_for(g, 2, 2);
    for (const std::string lang : {"fr", "sv"}) {
      for (auto& p : g.parameters()) p.tensor.zero_grad();
      Tape tape;
      auto logits = forward_path(tape, g, lang, batch);
      auto w = tet::testing::random_tensor(logits.shape(), 3, false);
      ad::backward(ad::sum(tape, ad::mul(tape, logits, w)), tape);

      std::set<std::string> on_path;
      for (const auto& p : g.path_parameters(lang)) on_path.insert(p.name);
      for (auto& p : g.parameters()) {
        bool nonzero = false;
        if (p.tensor.has_grad())
          for (Real v : p.tensor.grad()) nonzero |= v != 0;
        if (!on_path.count(p.name)) CHECK_MESSAGE(!nonzero, p.name);
      }
      // Something on the path actually moved.
      bool any = false;
      for (auto& p : g.path_parameters(lang))
        for (Real v : p.tensor.grad()) any |= v != 0;
      CHECK(any);
    }
  }
}

TEST_CASE("shared-encoder baseline needs language-token inputs") {
  auto g = build_variant(four_leaf_tree(1), ArchTag::kTencAll, small_dims(), letter_vocab(), 1);
  auto ex = random_examples(g.languages(), 2, 1, 6);
  auto plain = corpus::make_batch(std::span<const corpus::Example>(ex), g.languages(), 1);
  Tape tape = Tape::inference();
  CHECK_THROWS_AS(forward_path(tape, g, "w", plain), ContractError);

  // Different language tokens, different outputs from the single chain.
  auto batch = batch_for(g, 2, 1);
  auto all = forward_all(tape, g, batch);
  CHECK_FALSE(bitwise_equal(all.at("w").values(), all.at("x").values()));
}

TEST_CASE("observer sees every layer on the path") {
  auto g = build_tet(LanguageHierarchy::indo_european(), small_dims(), letter_vocab(), 1);
  auto batch = batch_for(g, 2, 1);
  Tape tape = Tape::inference();
  std::vector<int> seen;
  forward_path(tape, g, "pt", batch, [&](int id, const Tensor& h) {
    seen.push_back(id);
    CHECK(h.shape() == ad::Shape{2, batch.width, 8});
  });
  CHECK(seen == path_for(g, "pt"));
}

TEST_CASE("width is preserved end to end") {
  auto g = build_tet(four_leaf_tree(1), small_dims(), letter_vocab(), 1);
  for (std::size_t margin : {0u, 1u, 50u}) {
    auto batch = batch_for(g, 3, 2, margin);
    Tape tape = Tape::inference();
    for (const auto& [l, t] : forward_all(tape, g, batch)) CHECK(t.dim(1) == batch.width);
  }
}
