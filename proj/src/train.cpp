#include "quantlab/train.hpp"

#include <cmath>

#include "quantlab/rng.hpp"

namespace quantlab {

void TrainHyper::validate() const {
    if (!(lr >= 0.0)) throw validation_error("train: lr must be >= 0");
    if (steps < 1) throw validation_error("train: steps must be >= 1");
    if (batch < 1) throw validation_error("train: batch must be >= 1");
    if (seq_len < 2) throw validation_error("train: seq_len must be >= 2");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw validation_error("train: betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw validation_error("train: adam_eps must be > 0");
}

CorpusWindowStream::CorpusWindowStream(std::string text, size_t seq_len_, uint64_t seed_)
    : corpus(std::move(text)), seq_len(seq_len_), seed(seed_) {
    if (corpus.size() < seq_len + 1)
        throw validation_error("corpus shorter than seq_len+1 bytes");
}

std::vector<TokenSeq> CorpusWindowStream::next_batch(size_t step, size_t batch_size) {
    CounterRng rng(sub_seed(seed, "corpus_windows"));
    std::vector<TokenSeq> batch;
    batch.reserve(batch_size);
    const size_t span = corpus.size() - seq_len;  // valid window starts
    for (size_t i = 0; i < batch_size; ++i) {
        const size_t off = rng.below(step * batch_size + i, span);
        TokenSeq seq;
        seq.reserve(seq_len + 1);
        for (size_t j = 0; j <= seq_len; ++j)
            seq.push_back(static_cast<Token>(static_cast<unsigned char>(corpus[off + j])));
        batch.push_back(std::move(seq));
    }
    return batch;
}

EpisodeStream::EpisodeStream(TaskSpec spec_, ModelConfig cfg_, uint64_t seed_)
    : spec(spec_), cfg(cfg_), seed(seed_) {}

std::vector<TokenSeq> EpisodeStream::next_batch(size_t step, size_t batch_size) {
    std::vector<TokenSeq> batch;
    batch.reserve(batch_size);
    for (size_t i = 0; i < batch_size; ++i) {
        const size_t index = step * batch_size + i;
        const Episode ep = spec.kind == TaskSpec::Kind::icl_mapping
                               ? gen_icl_episode(spec, seed, index, cfg)
                               : gen_cot_episode(spec, seed, index, cfg);
        batch.push_back(episode_training_sequence(ep, cfg));
    }
    return batch;
}

MixtureStream::MixtureStream(std::vector<Part> parts_, uint64_t seed_)
    : parts(std::move(parts_)), seed(seed_) {
    if (parts.empty()) throw validation_error("mixture stream needs >= 1 part");
    double total = 0.0;
    for (const auto& p : parts) {
        if (!(p.weight >= 0.0)) throw validation_error("mixture weights must be >= 0");
        total += p.weight;
    }
    if (!(total > 0.0)) throw validation_error("mixture weights sum to zero");
}

std::vector<TokenSeq> MixtureStream::next_batch(size_t step, size_t batch_size) {
    CounterRng rng(sub_seed(seed, "mixture"));
    double total = 0.0;
    for (const auto& p : parts) total += p.weight;
    std::vector<TokenSeq> batch;
    batch.reserve(batch_size);
    for (size_t i = 0; i < batch_size; ++i) {
        const double u = rng.uniform(step * batch_size + i) * total;
        double acc = 0.0;
        size_t pick = parts.size() - 1;
        for (size_t p = 0; p < parts.size(); ++p) {
            acc += parts[p].weight;
            if (u <= acc) {
                pick = p;
                break;
            }
        }
        auto one = parts[pick].stream->next_batch(step * batch_size + i, 1);
        batch.push_back(std::move(one[0]));
    }
    return batch;
}

void AdamState::step(const std::map<std::string, Matrix*>& params,
                     const std::map<std::string, Matrix>& grads, const TrainHyper& hyper) {
    ++t;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        if (pit == params.end())
            throw validation_error("adam: gradient for unknown parameter '" + name + "'");
        Matrix& p = *pit->second;
        auto mit = m.find(name);
        if (mit == m.end()) {
            mit = m.emplace(name, Matrix(g.rows, g.cols)).first;
            v.emplace(name, Matrix(g.rows, g.cols));
        }
        Matrix& mm = mit->second;
        Matrix& vv = v.at(name);
        for (size_t i = 0; i < g.size(); ++i) {
            const double gi = g.data[i];
            mm.data[i] = hyper.beta1 * mm.data[i] + (1.0 - hyper.beta1) * gi;
            vv.data[i] = hyper.beta2 * vv.data[i] + (1.0 - hyper.beta2) * gi * gi;
            const double mhat = mm.data[i] / bc1;
            const double vhat = vv.data[i] / bc2;
            p.data[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.adam_eps);
        }
    }
}

size_t AdamState::state_bytes() const {
    size_t n = 0;
    for (const auto& [name, mat] : m) n += mat.size();
    for (const auto& [name, mat] : v) n += mat.size();
    return n * sizeof(double);
}

TrainResult train(ModelCheckpoint& model, SampleStream& stream, const TrainHyper& hyper) {
    hyper.validate();
    validate_checkpoint(model);
    TrainResult result;
    result.loss_curve.reserve(hyper.steps);
    AdamState adam;
    std::map<std::string, Matrix*> params;
    for (auto& [name, t] : model.tensors)
        if (hyper.frozen.count(name) == 0) params.emplace(name, &t);

    for (size_t step = 0; step < hyper.steps; ++step) {
        const ModelView view = make_view(model);
        const auto batch = stream.next_batch(step, hyper.batch);
        LossResult lr;
        try {
            lr = loss_and_grads(view, batch, hyper.frozen);
        } catch (const numerical_error&) {
            throw numerical_error("training diverged: non-finite loss at step " +
                                  std::to_string(step));
        }
        result.loss_curve.push_back(lr.loss);
        adam.step(params, lr.grads, hyper);
    }
    return result;
}

}  // namespace quantlab
