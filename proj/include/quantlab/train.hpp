#pragma once

#include <functional>
#include <memory>

#include "quantlab/backward.hpp"
#include "quantlab/tasks.hpp"

namespace quantlab {

struct TrainHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    size_t steps = 200;
    size_t batch = 8;
    size_t seq_len = 64;
    uint64_t seed = 0;
    std::set<std::string> frozen;

    void validate() const;
};

// Deterministic batch source: next_batch(step) must depend only on
// (construction arguments, step).
struct SampleStream {
    virtual ~SampleStream() = default;
    virtual std::vector<TokenSeq> next_batch(size_t step, size_t batch_size) = 0;
};

// Random corpus windows of seq_len+1 bytes (plain LM, no BOS).
struct CorpusWindowStream final : SampleStream {
    std::string corpus;
    size_t seq_len;
    uint64_t seed;

    CorpusWindowStream(std::string text, size_t seq_len_, uint64_t seed_);
    std::vector<TokenSeq> next_batch(size_t step, size_t batch_size) override;
};

// Episode sequences (BOS + text + EOS) for icl_mapping / cot_addition.
struct EpisodeStream final : SampleStream {
    TaskSpec spec;
    ModelConfig cfg;
    uint64_t seed;

    EpisodeStream(TaskSpec spec_, ModelConfig cfg_, uint64_t seed_);
    std::vector<TokenSeq> next_batch(size_t step, size_t batch_size) override;
};

// Weighted seeded mixture over component streams; the component choice for
// batch item (step, i) is a counter-RNG draw.
struct MixtureStream final : SampleStream {
    struct Part {
        std::shared_ptr<SampleStream> stream;
        double weight;
    };
    std::vector<Part> parts;
    uint64_t seed;

    MixtureStream(std::vector<Part> parts_, uint64_t seed_);
    std::vector<TokenSeq> next_batch(size_t step, size_t batch_size) override;
};

struct TrainResult {
    std::vector<double> loss_curve;  // one entry per step
};

// Adam over all tensors not in hyper.frozen; mutates `model` in place.
// Deterministic per (model bytes, stream, hyper). Aborts with
// numerical_error naming the step if the loss goes non-finite.
TrainResult train(ModelCheckpoint& model, SampleStream& stream, const TrainHyper& hyper);

// Adam state shared by model and adapter training.
struct AdamState {
    std::map<std::string, Matrix> m, v;
    int64_t t = 0;

    // grads keys define the update set; params maps key -> parameter matrix.
    void step(const std::map<std::string, Matrix*>& params,
              const std::map<std::string, Matrix>& grads, const TrainHyper& hyper);
    size_t state_bytes() const;
};

}  // namespace quantlab
