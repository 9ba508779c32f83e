#pragma once

// Fixtures and independent oracles shared by the unit and acceptance tests.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tet/autodiff.h"
#include "tet/corpus.h"
#include "tet/ctc.h"
#include "tet/langtree.h"

namespace tet::testing {

// Uniform [-1, 1) values.
inline std::vector<Real> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Real> v(n);
  for (auto& x : v) x = Real(u(rng));
  return v;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::uint64_t seed, bool requires_grad = true,
                                double scale = 1.0) {
  const auto n = ad::numel(shape);
  return ad::Tensor::from(std::move(shape), random_values(n, seed, scale), requires_grad);
}

// Rows of log-probabilities: log softmax of random logits.
inline std::vector<Real> random_log_probs(std::size_t frames, std::size_t vocab, std::uint64_t seed,
                                          double spread = 2.0) {
  auto v = random_values(frames * vocab, seed, spread);
  for (std::size_t t = 0; t < frames; ++t) {
    double z = 0;
    for (std::size_t k = 0; k < vocab; ++k) z += std::exp(double(v[t * vocab + k]));
    const double lz = std::log(z);
    for (std::size_t k = 0; k < vocab; ++k) v[t * vocab + k] = Real(double(v[t * vocab + k]) - lz);
  }
  return v;
}

// Exhaustive CTC oracle: sums the probability of every frame-label path whose
// collapse equals the target. |V|^T paths.
inline long double ctc_path_sum(const std::vector<Real>& log_probs, std::size_t frames,
                                std::size_t vocab, const std::vector<TokenId>& target,
                                TokenId blank) {
  std::vector<TokenId> path(frames, 0);
  long double total = 0;
  std::size_t count = 1;
  for (std::size_t t = 0; t < frames; ++t) count *= vocab;
  for (std::size_t code = 0; code < count; ++code) {
    std::size_t c = code;
    for (std::size_t t = 0; t < frames; ++t) {
      path[t] = TokenId(c % vocab);
      c /= vocab;
    }
    // Collapse by hand: drop repeats, then blanks.
    std::vector<TokenId> out;
    for (std::size_t t = 0; t < frames; ++t) {
      if (t > 0 && path[t] == path[t - 1]) continue;
      if (path[t] != blank) out.push_back(path[t]);
    }
    if (out != target) continue;
    long double lp = 0;
    for (std::size_t t = 0; t < frames; ++t) lp += log_probs[t * vocab + std::size_t(path[t])];
    total += std::exp(lp);
  }
  return total;
}

// Vocabulary over single uppercase letters A.. plus space.
inline corpus::Vocab letter_vocab(std::size_t letters = 6) {
  corpus::Vocab v;
  for (std::size_t i = 0; i < letters; ++i) v.add(std::string(1, char('A' + i)));
  v.add(" ");
  return v;
}

inline ModelDims small_dims(std::size_t d = 8, std::size_t ff = 16, std::size_t heads = 2) {
  ModelDims dims;
  dims.d_model = d;
  dims.d_ff = ff;
  dims.n_heads = heads;
  return dims;
}

// root(1) -> two groups(1) -> two leaves(1) each.
inline LanguageHierarchy four_leaf_tree(std::size_t layers = 1) {
  auto leaf = [&](const std::string& l) { return HierarchyNode{l, layers, {}, l}; };
  LanguageHierarchy h;
  h.root = {"root", layers,
            {HierarchyNode{"g1", layers, {leaf("w"), leaf("x")}, ""},
             HierarchyNode{"g2", layers, {leaf("y"), leaf("z")}, ""}},
            ""};
  return h;
}

// Batch built straight from token rows (no padding logic), one language set.
inline corpus::Batch raw_batch(const std::vector<std::vector<TokenId>>& rows) {
  corpus::Batch b;
  b.rows = rows.size();
  b.width = rows.empty() ? 0 : rows[0].size();
  for (const auto& r : rows) {
    b.inputs.insert(b.inputs.end(), r.begin(), r.end());
    b.input_lengths.push_back(r.size());
    b.example_ids.push_back(std::to_string(b.example_ids.size()));
  }
  return b;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("tet-test-" + name + "-" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(p);
  return p;
}

inline bool bitwise_equal(std::span<const Real> a, std::span<const Real> b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(),
                    [](Real x, Real y) { return std::memcmp(&x, &y, sizeof(Real)) == 0; });
}

}  // namespace tet::testing
