#include "quantlab/common.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace quantlab {

const char* to_string(ProjectionType t) {
    switch (t) {
        case ProjectionType::q: return "q";
        case ProjectionType::k: return "k";
        case ProjectionType::v: return "v";
        case ProjectionType::o: return "o";
        case ProjectionType::gate: return "gate";
        case ProjectionType::up: return "up";
        case ProjectionType::down: return "down";
        case ProjectionType::embed: return "embed";
        case ProjectionType::head: return "head";
    }
    return "?";
}

ProjectionType projection_type_from_string(const std::string& s) {
    if (s == "q") return ProjectionType::q;
    if (s == "k") return ProjectionType::k;
    if (s == "v") return ProjectionType::v;
    if (s == "o") return ProjectionType::o;
    if (s == "gate") return ProjectionType::gate;
    if (s == "up") return ProjectionType::up;
    if (s == "down") return ProjectionType::down;
    if (s == "embed") return ProjectionType::embed;
    if (s == "head") return ProjectionType::head;
    throw validation_error("unknown projection type: '" + s + "'");
}

bool is_attention_type(ProjectionType t) {
    return t == ProjectionType::q || t == ProjectionType::k || t == ProjectionType::v ||
           t == ProjectionType::o;
}

bool is_ffn_type(ProjectionType t) {
    return t == ProjectionType::gate || t == ProjectionType::up || t == ProjectionType::down;
}

static std::atomic<int> g_threads{1};

void set_thread_count(int n) {
    if (n < 1) throw validation_error("thread count must be >= 1");
    g_threads.store(n);
}

int thread_count() { return g_threads.load(); }

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    const int nt = thread_count();
    if (n == 0) return;
    if (nt <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    const size_t workers = std::min<size_t>(static_cast<size_t>(nt), n);
    const size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (size_t w = 1; w < workers; ++w) {
        const size_t b = w * chunk;
        const size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace quantlab
