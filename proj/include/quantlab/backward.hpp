#pragma once

#include <map>
#include <set>
#include <string>

#include "quantlab/forward.hpp"

namespace quantlab {

// Gradient keys are tensor names; adapter factors use "adapter.<target>.A"
// and "adapter.<target>.B". Names in `frozen` get no entry (and their
// per-weight gradient work is skipped); activation gradients still flow
// through frozen tensors.
struct LossResult {
    double loss = 0.0;
    std::map<std::string, Matrix> grads;
};

// Mean next-token cross-entropy over every target position of every
// sequence (targets are the inputs shifted by one). Sequences may have
// different lengths; each needs >= 2 tokens.
LossResult loss_and_grads(const ModelView& view, const std::vector<TokenSeq>& batch,
                          const std::set<std::string>& frozen = {});

// Loss only (shared path, no gradient work).
double batch_loss(const ModelView& view, const std::vector<TokenSeq>& batch);

std::string adapter_grad_key(const std::string& target, char factor);

}  // namespace quantlab
