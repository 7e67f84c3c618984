#pragma once

#include "quantlab/qmodel.hpp"
#include "quantlab/train.hpp"

namespace quantlab {

// Rank-r factor pair over a frozen base matrix. B starts at zero, so a fresh
// attachment never changes the forward pass.
struct LoraAdapter {
    std::string target;  // base tensor name
    size_t rank = 8;
    double alpha = 16.0;
    Matrix a;  // rank x d_in
    Matrix b;  // d_out x rank

    double scaling() const { return alpha / static_cast<double>(rank); }
};

enum class AdapterMode { pre_quant, post_quant };

// pre_quant: f32 base checkpoint (fine-tune, merge, then quantize).
// post_quant: frozen quantized base; only the factors ever train.
// The base is referenced, not owned, and must outlive the set.
struct AdapterSet {
    AdapterMode mode = AdapterMode::pre_quant;
    const ModelCheckpoint* base_ckpt = nullptr;
    const QuantizedModel* base_q = nullptr;
    std::map<std::string, LoraAdapter> adapters;  // by target name

    const ModelConfig& config() const;
    size_t trainable_params() const;  // sum of r*(d_in + d_out)
};

// One adapter per (layer, target type); A ~ Normal(0, 0.02^2) seeded per
// target name, B = 0.
AdapterSet attach(const ModelCheckpoint& base, const std::set<ProjectionType>& targets,
                  size_t rank, double alpha, uint64_t seed);
AdapterSet attach(const QuantizedModel& base, const std::set<ProjectionType>& targets,
                  size_t rank, double alpha, uint64_t seed);

// View with every adapter bound; base weights are the checkpoint tensors
// (pre_quant) or dequantized entries (post_quant).
ModelView make_view(const AdapterSet& aset);

Matrix adapted_forward(const AdapterSet& aset, const TokenSeq& tokens);

struct AdapterTrainResult {
    std::vector<double> loss_curve;
    size_t trainable_params = 0;
    size_t optimizer_state_bytes = 0;
};

// Adam over adapter factors only; the base never receives gradients.
AdapterTrainResult train_adapters(AdapterSet& aset, SampleStream& stream,
                                  const TrainHyper& hyper);

// pre_quant only: returns a checkpoint with W += scaling * B * A per target.
// post_quant merging cannot land on the quantization grid, so it is refused.
ModelCheckpoint merge_adapters(const AdapterSet& aset);

}  // namespace quantlab
