#pragma once

// Forward passes over a ModelGraph: one language along its root-to-leaf path,
// or every language at once with each shared node evaluated a single time.

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "tet/corpus.h"
#include "tet/langtree.h"

namespace tet {

// Number of encoder_layer() evaluations performed through forward_path /
// forward_all since the last reset (process-wide, thread-safe).
std::uint64_t layer_invocations();
void reset_layer_invocations();

// Called with (node id, output activation [rows, width, d]) after each layer.
using LayerObserver = std::function<void(int node, const ad::Tensor& hidden)>;

// embed -> layers on path_for(language) -> leaf head: [rows, width, |V|].
ad::Tensor forward_path(ad::Tape& tape, const ModelGraph& g, const std::string& language,
                        const corpus::Batch& batch, const LayerObserver& observer = {});

struct ForwardOptions {
  // Sibling subtrees may run concurrently when > 1; only honoured for
  // inference tapes.
  std::size_t threads = 1;
};

std::map<std::string, ad::Tensor> forward_all(ad::Tape& tape, const ModelGraph& g,
                                              const corpus::Batch& batch,
                                              const ForwardOptions& opts = {});

// Batch options (language tokens) matching the model's architecture.
corpus::BatchOptions batch_options_for(const ModelGraph& g,
                                       std::size_t pad_margin = corpus::kDefaultPadMargin);

}  // namespace tet
