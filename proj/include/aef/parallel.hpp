#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace aef {

// AEF_THREADS caps worker parallelism; unset means hardware concurrency.
inline int worker_cap() {
    if (const char* env = std::getenv("AEF_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs f(i) for i in [0, n). Units must be independent and write results into
// caller-owned slots indexed by i, so scheduling never affects the outcome.
// Nested calls run serially inside a worker.
template <typename F>
void parallel_for(int n, F&& f) {
    thread_local bool in_worker = false;
    const int cap = std::min(n, worker_cap());
    if (n <= 1 || cap <= 1 || in_worker) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error = nullptr;
    std::mutex error_mutex;
    for (int t = 0; t < cap; ++t) {
        pool.emplace_back([&, t] {
            in_worker = true;
            try {
                for (int i = t; i < n; i += cap) f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace aef
