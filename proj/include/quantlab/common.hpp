#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace quantlab {

// Error taxonomy. The CLI maps these to exit codes:
//   validation_error -> 1, numerical_error -> 2, io_error -> 3.
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numerical_error : std::runtime_error {
    explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// The seven projection kinds plus the two embedding-side tensors.
// q,k,v,o form the attention component; gate,up,down form the FFN component.
enum class ProjectionType {
    q,
    k,
    v,
    o,
    gate,
    up,
    down,
    embed,
    head,
};

// Fixed order used for tie-breaking and aggregate reports.
inline constexpr ProjectionType kProjectionOrder[7] = {
    ProjectionType::q,    ProjectionType::k,  ProjectionType::v,   ProjectionType::o,
    ProjectionType::gate, ProjectionType::up, ProjectionType::down,
};

const char* to_string(ProjectionType t);
ProjectionType projection_type_from_string(const std::string& s);

bool is_attention_type(ProjectionType t);
bool is_ffn_type(ProjectionType t);

// FNV-1a, used for deriving per-tensor RNG streams and for artifact hashing.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Process-wide worker count for parallel_for. 1 = fully serial.
// Thread count never changes results: work is partitioned by index range
// and every output element is written by exactly one worker.
void set_thread_count(int n);
int thread_count();

// Runs fn(begin, end) over [0, n) split into contiguous chunks.
void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn);

}  // namespace quantlab
