#pragma once

#include <span>

#include "fvlab/model.hpp"

namespace fvlab {

struct BatchLoss {
  double loss = 0.0;  // mean NLL over scored positions
  int scored = 0;     // number of scored positions
};

// Scored positions of `seq`: the A marker before every demo answer plus the
// final position. Targets are the demo answer tokens and the gold token.
std::vector<std::pair<int, TokenId>> scored_targets(const TokenSequence& seq);

// Mean next-token NLL over all scored positions of a packed batch. When
// `grad` is non-empty it receives the gradient of that mean with respect to
// every parameter (overwritten, same layout as the flat buffer).
template <typename T>
BatchLoss batch_loss(const ModelParams<T>& params, std::span<const TokenSequence> seqs, SceneTable scenes,
                     std::span<T> grad = {});

}  // namespace fvlab
