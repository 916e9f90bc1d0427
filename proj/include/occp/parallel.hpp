#ifndef OCCP_PARALLEL_HPP
#define OCCP_PARALLEL_HPP

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace occp {

// Runs body(i) for i in [0, count) on up to n_threads workers. Work items own
// their RNG streams, so results do not depend on the thread count. The first
// exception thrown by any item is rethrown after all workers join.
inline void parallel_for(long count, int n_threads,
                         const std::function<void(long)>& body) {
    if (n_threads <= 1 || count <= 1) {
        for (long i = 0; i < count; ++i) body(i);
        return;
    }
    const int workers = static_cast<int>(std::min<long>(n_threads, count));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (long i = w; i < count; i += workers) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline int default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace occp

#endif
