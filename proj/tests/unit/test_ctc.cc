#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "support.h"
#include "tet/ctc.h"

using namespace tet;
using namespace tet::ctc;
using tet::testing::ctc_path_sum;
using tet::testing::random_log_probs;

namespace {

constexpr TokenId kBlank = 0;

// One-hot-ish log-probabilities: chosen label at each frame gets probability p.
std::vector<Real> peaked(const std::vector<TokenId>& labels, std::size_t vocab, double p) {
  std::vector<Real> lp(labels.size() * vocab, Real(std::log((1 - p) / double(vocab - 1))));
  for (std::size_t t = 0; t < labels.size(); ++t) lp[t * vocab + std::size_t(labels[t])] = Real(std::log(p));
  return lp;
}

}  // namespace

TEST_CASE("a certain path has zero loss") {
  // T=3, target [2]; path blank,2,blank has probability 1.
  std::vector<Real> lp(3 * 3, kLogZero);
  lp[0 * 3 + 0] = 0;
  lp[1 * 3 + 2] = 0;
  lp[2 * 3 + 0] = 0;
  std::vector<TokenId> y{2};
  auto r = ctc_loss(lp, 3, 3, y, kBlank);
  CHECK(r.status == Status::kOk);
  CHECK(std::abs(r.loss) <= 1e-12);
}

TEST_CASE("single certain frame has zero loss") {
  // V = {blank, A}, T = 1, P(A) = 1.
  std::vector<Real> lp{kLogZero, 0};
  CHECK(std::abs(ctc_loss(lp, 1, 2, std::vector<TokenId>{1}, kBlank).loss) <= 1e-12);
}

TEST_CASE("uniform two frames, empty target: only the blank-blank path") {
  std::vector<Real> lp(4, Real(std::log(0.5)));
  auto r = ctc_loss(lp, 2, 2, std::vector<TokenId>{}, kBlank);
  CHECK(std::abs(r.loss - (-std::log(0.25))) <= 1e-12);

  // Target [A] on the same distribution: paths AA, A-, -A carry 3/4.
  CHECK(std::abs(ctc_loss(lp, 2, 2, std::vector<TokenId>{1}, kBlank).loss - (-std::log(0.75))) <= 1e-12);
  // [A, A] needs A-A, three frames.
  CHECK(ctc_loss(lp, 2, 2, std::vector<TokenId>{1, 1}, kBlank).status == Status::kInfeasible);
}

TEST_CASE("four frames, target AB, against all 81 paths") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto lp = random_log_probs(4, 3, 900 + seed);
    std::vector<TokenId> y{1, 2};
    const long double p = ctc_path_sum(lp, 4, 3, y, kBlank);
    CHECK(std::abs(double(ctc_loss(lp, 4, 3, y, kBlank).loss) + double(std::log(p))) <= 1e-10);
  }
}

TEST_CASE("likelihood matches exhaustive path enumeration") {
  // Every target of length <= 3 over two symbols, T up to 6.
  std::vector<std::vector<TokenId>> targets{{}};
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i].size() < 3)
      for (TokenId k : {1, 2}) {
        auto t = targets[i];
        t.push_back(k);
        targets.push_back(t);
      }
  for (std::size_t T = 1; T <= 6; ++T) {
    for (const auto& y : targets) {
      const std::size_t V = 3;
      const std::uint64_t seed = T * 100 + y.size() * 10 + (y.empty() ? 0 : std::size_t(y[0]));
      auto lp = random_log_probs(T, V, seed);
      const long double p = ctc_path_sum(lp, T, V, y, kBlank);
      auto r = ctc_loss(lp, T, V, y, kBlank);
      if (p == 0) {
        CHECK(r.status == Status::kInfeasible);
        continue;
      }
      REQUIRE(r.status == Status::kOk);
      CHECK(std::abs(double(r.loss) + double(std::log(p))) <= 1e-10);
    }
  }
}

TEST_CASE("min_frames counts the blanks between repeats") {
  CHECK(min_frames(std::vector<TokenId>{}) == 0);
  CHECK(min_frames(std::vector<TokenId>{1, 2, 3}) == 3);
  CHECK(min_frames(std::vector<TokenId>{1, 1, 2, 2, 2}) == 8);
}

TEST_CASE("infeasible lattices report +inf with a zero gradient") {
  std::vector<Real> lp = random_log_probs(2, 3, 1);
  std::vector<TokenId> y{1, 2, 1};
  auto lat = build_lattice(lp, 2, 3, y, kBlank);
  CHECK(lat.status == Status::kInfeasible);
  auto r = ctc_loss(lp, 2, 3, y, kBlank);
  CHECK(std::isinf(r.loss));
  for (Real g : ctc_grad(lat)) CHECK(g == 0);
}

TEST_CASE("gradient is -1 on the cells of a certain path") {
  std::vector<Real> lp(3 * 3, kLogZero);
  lp[0] = 0;
  lp[1 * 3 + 2] = 0;
  lp[2 * 3 + 0] = 0;
  std::vector<TokenId> y{2};
  auto g = ctc_grad(build_lattice(lp, 3, 3, y, kBlank));
  CHECK(std::abs(g[0] + 1) <= 1e-12);
  CHECK(std::abs(g[1 * 3 + 2] + 1) <= 1e-12);
  CHECK(std::abs(g[2 * 3 + 0] + 1) <= 1e-12);
  CHECK(std::abs(g[1 * 3 + 1]) <= 1e-12);
}

TEST_CASE("gradient is symmetric under swapping two labels when the target is empty") {
  // V = {blank, A, B}; frames with A and B equally likely.
  std::vector<Real> lp;
  for (int t = 0; t < 3; ++t)
    for (double p : {0.5, 0.25, 0.25}) lp.push_back(Real(std::log(p)));
  auto g = ctc_grad(build_lattice(lp, 3, 3, std::vector<TokenId>{}, kBlank));
  for (std::size_t t = 0; t < 3; ++t) CHECK(g[t * 3 + 1] == g[t * 3 + 2]);
}

TEST_CASE("gradient matches finite differences of the loss") {
  const std::size_t T = 5, V = 4;
  auto lp = random_log_probs(T, V, 42);
  std::vector<TokenId> y{1, 3, 3};
  auto g = ctc_grad(build_lattice(lp, T, V, y, kBlank));
  const double h = 1e-6;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    auto up = lp, down = lp;
    up[i] += Real(h);
    down[i] -= Real(h);
    const double num = (ctc_loss(up, T, V, y, kBlank).loss - ctc_loss(down, T, V, y, kBlank).loss) / (2 * h);
    const double denom = std::max({std::abs(num), std::abs(double(g[i])), 1e-8});
    CHECK(std::abs(num - g[i]) / denom <= 1e-6);
  }
}

TEST_CASE("gradient through log-softmax sums to zero per frame") {
  const std::size_t T = 6, V = 4;
  auto logits = tet::testing::random_tensor({T, V}, 5, true, 2.0);
  ad::Tape tape;
  auto lp = ad::log_softmax_rows(tape, logits);
  auto lp3 = ad::reshape(tape, lp, {1, T, V});
  std::vector<std::vector<TokenId>> targets{{1, 2}};
  std::vector<std::uint8_t> mask{1};
  auto loss = ctc_loss_batch(tape, lp3, targets, mask, kBlank);
  ad::backward(loss, tape);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0;
    for (std::size_t k = 0; k < V; ++k) s += logits.grad()[t * V + k];
    CHECK(std::abs(s) <= 1e-12);
  }
  // And through the whole stack, finite differences agree.
  std::vector<ad::Tensor> params{logits};
  auto rep = ad::finite_diff_check(
      [&](ad::Tape& t) {
        auto l = ad::reshape(t, ad::log_softmax_rows(t, params[0]), {1, T, V});
        return ctc_loss_batch(t, l, targets, mask, kBlank);
      },
      params);
  CHECK_MESSAGE(rep.passed, rep.failure);
}

TEST_CASE("batch loss averages feasible unmasked rows") {
  const std::size_t T = 4, V = 3;
  std::vector<Real> all;
  std::vector<std::vector<Real>> per_row;
  for (std::uint64_t r = 0; r < 3; ++r) {
    per_row.push_back(random_log_probs(T, V, 100 + r));
    all.insert(all.end(), per_row.back().begin(), per_row.back().end());
  }
  auto lp = ad::Tensor::from({3, T, V}, all);
  std::vector<std::vector<TokenId>> targets{{1}, {2, 1}, {1, 1, 1}};  // row 2 infeasible
  std::vector<std::uint8_t> mask{1, 1, 1};
  ad::Tape tape = ad::Tape::inference();
  BatchLossStats stats;
  auto loss = ctc_loss_batch(tape, lp, targets, mask, kBlank, &stats);
  CHECK(stats.rows_used == 2);
  CHECK(stats.rows_infeasible == 1);
  const double l0 = ctc_loss(per_row[0], T, V, targets[0], kBlank).loss;
  const double l1 = ctc_loss(per_row[1], T, V, targets[1], kBlank).loss;
  CHECK(std::abs(loss.item() - (l0 + l1) / 2) <= 1e-12);

  mask = {0, 1, 0};
  auto masked = ctc_loss_batch(tape, lp, targets, mask, kBlank, &stats);
  CHECK(std::abs(masked.item() - l1) <= 1e-12);
  CHECK(std::isnan(stats.row_losses[0]));

  mask = {0, 0, 1};
  CHECK(std::isinf(ctc_loss_batch(tape, lp, targets, mask, kBlank).item()));
}

TEST_CASE("greedy decoding breaks ties toward the lowest id") {
  std::vector<Real> lp{0.5, 0.5, 0.1, -1, 0.2, 0.2};
  auto d = greedy_decode(lp, 2, 3);
  CHECK(d == std::vector<TokenId>{0, 1});
}

TEST_CASE("greedy decode and collapse on a spelled-out alignment") {
  // "BB-O-NN---JO-UUR" -> "BONJOUR"
  const std::string frames = "BB-O-NN---JO-UUR";
  const std::string letters = "BONJUR";
  auto id = [&](char c) { return c == '-' ? kBlank : TokenId(letters.find(c) + 1); };
  std::vector<TokenId> labels;
  for (char c : frames) labels.push_back(id(c));
  const std::size_t V = letters.size() + 1;
  auto lp = peaked(labels, V, 0.9);
  auto raw = greedy_decode(lp, labels.size(), V);
  CHECK(raw == labels);
  std::string out;
  for (TokenId t : collapse(raw, kBlank)) out += letters[std::size_t(t - 1)];
  CHECK(out == "BONJOUR");
}

TEST_CASE("collapse keeps model errors") {
  // "C-OM-E-T ÇA VVA-" -> "COMET ÇA VA"
  auto vocab = tet::corpus::build_vocab({"COMET ÇA VA"});
  std::vector<TokenId> raw;
  for (const auto& ch : tet::corpus::utf8_chars("C-OM-E-T ÇA VVA-"))
    raw.push_back(ch == "-" ? kBlank : vocab.id(ch));
  CHECK(vocab.detokenize(collapse(raw, kBlank)) == "COMET ÇA VA");
}

TEST_CASE("collapse examples and properties") {
  using V = std::vector<TokenId>;
  CHECK(collapse(V{1, 1, 1}, kBlank) == V{1});
  CHECK(collapse(V{}, kBlank) == V{});
  CHECK(collapse(V{0, 0, 0}, kBlank) == V{});
  CHECK(collapse(V{1, 1, 0, 1}, kBlank) == V{1, 1});
  CHECK(collapse(V{1, 2, 2, 3}, kBlank) == V{1, 2, 3});
  CHECK(collapse(V{0, 1, 0, 0, 2, 2, 0}, kBlank) == V{1, 2});

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    V raw(rng() % 20);
    for (auto& t : raw) t = TokenId(rng() % 4);
    auto once = collapse(raw, kBlank);
    // A second pass is a no-op exactly when the first left no adjacent repeats.
    const bool repeats = std::adjacent_find(once.begin(), once.end()) != once.end();
    CHECK((collapse(once, kBlank) == once) == !repeats);
    CHECK(once.size() <= raw.size());
    for (TokenId t : once) CHECK(t != kBlank);
  }
}

TEST_CASE("collapse is not idempotent across blank-separated repeats") {
  using V = std::vector<TokenId>;
  const V raw{1, 0, 1};
  CHECK(collapse(raw, kBlank) == V{1, 1});
  CHECK(collapse(collapse(raw, kBlank), kBlank) == V{1});
}

TEST_CASE("collapse leaves blank-free sequences without repeats unchanged") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TokenId> y;
    for (std::size_t i = rng() % 15; i > 0; --i) {
      TokenId t;
      do t = TokenId(1 + rng() % 4);
      while (!y.empty() && y.back() == t);
      y.push_back(t);
    }
    CHECK(collapse(y, kBlank) == y);
  }
}

TEST_CASE("probabilities of distinct targets sum to at most one") {
  const std::size_t T = 4, V = 3;
  auto lp = random_log_probs(T, V, 77);
  // Every collapse of a length-4 path over {a, b} has length <= 4.
  double total = 0;
  std::vector<std::vector<TokenId>> all{{}};
  for (std::size_t len = 1; len <= T; ++len) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& p : all)
      if (p.size() == len - 1)
        for (TokenId k = 1; k < TokenId(V); ++k) {
          auto q = p;
          q.push_back(k);
          next.push_back(q);
        }
    all.insert(all.end(), next.begin(), next.end());
  }
  for (const auto& y : all) {
    auto r = ctc_loss(lp, T, V, y, kBlank);
    if (r.status == Status::kOk) total += std::exp(-double(r.loss));
  }
  CHECK(total <= 1 + 1e-12);
  CHECK(total >= 1 - 1e-12);  // enumerated every reachable target
}

TEST_CASE("empty input frames") {
  std::vector<Real> lp;
  CHECK(ctc_loss(lp, 0, 3, std::vector<TokenId>{}, kBlank).loss == 0);
  CHECK(ctc_loss(lp, 0, 3, std::vector<TokenId>{1}, kBlank).status == Status::kInfeasible);
  CHECK(greedy_decode(lp, 0, 3).empty());
}

TEST_CASE("NaN inputs give a NaN loss, not an infeasible one") {
  auto lp = random_log_probs(4, 3, 5);
  lp[5] = std::numeric_limits<Real>::quiet_NaN();
  std::vector<TokenId> y{1};
  auto r = ctc_loss(lp, 4, 3, y, kBlank);
  CHECK(r.status == Status::kOk);
  CHECK(std::isnan(r.loss));
  for (Real g : ctc_grad(build_lattice(lp, 4, 3, y, kBlank))) CHECK(std::isnan(g));
}

TEST_CASE("log_sum_exp keeps the zero sentinel") {
  CHECK(log_sum_exp(kLogZero, kLogZero) <= kLogZero);
  CHECK(std::abs(log_sum_exp(0, 0) - std::log(2.0)) <= 1e-15);
  CHECK(log_sum_exp(kLogZero, -3) == Real(-3));
}
