#include "tet/encoder.h"

#include <atomic>
#include <future>
#include <mutex>
#include <semaphore>

namespace tet {
namespace {

std::atomic<std::uint64_t> g_layer_calls{0};

ad::Tensor run_layer(ad::Tape& tape, const ModelGraph& g, int node, const ad::Tensor& x) {
  g_layer_calls.fetch_add(1, std::memory_order_relaxed);
  return encoder_layer(tape, x, g.node(node).params, g.dims);
}

ad::Tensor embed_for(ad::Tape& tape, const ModelGraph& g, const std::string& language,
                     const corpus::Batch& batch) {
  const auto& tokens = batch.inputs_for(language);
  if (g.arch == ArchTag::kTencAll && !batch.prefixed_inputs.count(language))
    throw ContractError("batch lacks language-token inputs for " + language +
                        "; build it with batch_options_for(model)");
  return embed(tape, tokens, batch.rows, batch.width, g.embedding, g.dims);
}

}  // namespace

std::uint64_t layer_invocations() { return g_layer_calls.load(); }
void reset_layer_invocations() { g_layer_calls = 0; }

corpus::BatchOptions batch_options_for(const ModelGraph& g, std::size_t pad_margin) {
  corpus::BatchOptions o;
  o.pad_margin = pad_margin;
  o.language_tokens = g.language_tokens;
  return o;
}

ad::Tensor forward_path(ad::Tape& tape, const ModelGraph& g, const std::string& language,
                        const corpus::Batch& batch, const LayerObserver& observer) {
  const auto path = path_for(g, language);
  ad::Tensor x = embed_for(tape, g, language, batch);
  for (int id : path) {
    x = run_layer(tape, g, id, x);
    if (observer) observer(id, x);
  }
  return project_head(tape, x, g.heads[g.leaves.at(language).head]);
}

std::map<std::string, ad::Tensor> forward_all(ad::Tape& tape, const ModelGraph& g,
                                              const corpus::Batch& batch,
                                              const ForwardOptions& opts) {
  std::map<std::string, ad::Tensor> out;
  if (g.arch == ArchTag::kTencAll) {
    // Each language has its own input stream; nothing to share.
    for (const auto& lang : g.languages()) out[lang] = forward_path(tape, g, lang, batch);
    return out;
  }

  std::map<int, std::vector<std::string>> languages_at;
  for (const auto& [lang, b] : g.leaves) languages_at[b.node].push_back(lang);
  std::vector<std::vector<int>> children(g.nodes.size());
  std::vector<int> roots;
  for (const auto& n : g.nodes) {
    if (n.parent) children[std::size_t(*n.parent)].push_back(n.id);
    else roots.push_back(n.id);
  }

  const bool parallel = opts.threads > 1 && !tape.enabled();
  std::counting_semaphore<> spare(parallel ? std::ptrdiff_t(opts.threads - 1) : 0);
  std::mutex out_mu;

  std::function<void(int, const ad::Tensor&)> visit = [&](int id, const ad::Tensor& in) {
    const ad::Tensor h = run_layer(tape, g, id, in);
    if (auto it = languages_at.find(id); it != languages_at.end()) {
      for (const auto& lang : it->second) {
        ad::Tensor logits = project_head(tape, h, g.heads[g.leaves.at(lang).head]);
        std::lock_guard lock(out_mu);
        out[lang] = std::move(logits);
      }
    }
    const auto& kids = children[std::size_t(id)];
    std::vector<std::future<void>> pending;
    for (std::size_t i = 0; i < kids.size(); ++i) {
      const bool last = i + 1 == kids.size();
      if (parallel && !last && spare.try_acquire()) {
        pending.push_back(std::async(std::launch::async, [&, child = kids[i]] {
          visit(child, h);
          spare.release();
        }));
      } else {
        visit(kids[i], h);
      }
    }
    for (auto& f : pending) f.get();
  };

  // One embedding shared by every root; independent roots form TENC_LANG's
  // forest of chains.
  const ad::Tensor x = embed(tape, batch.inputs, batch.rows, batch.width, g.embedding, g.dims);
  for (int r : roots) visit(r, x);
  return out;
}

}  // namespace tet
