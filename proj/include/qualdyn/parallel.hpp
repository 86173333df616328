#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace qualdyn {

/// Bounded pool for independent index-addressed work. Results go to
/// caller-owned slots, so output order never depends on scheduling.
class WorkerPool {
public:
    explicit WorkerPool(std::size_t workers = default_workers()) : workers_(std::max<std::size_t>(1, workers)) {}

    std::size_t workers() const { return workers_; }

    /// Runs fn(i) for i in [0, n). The first exception thrown by any task is rethrown.
    template <typename Fn>
    void parallel_for(std::size_t n, Fn&& fn) const {
        const std::size_t threads = std::min(workers_, n);
        if (threads <= 1) {
            for (std::size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mutex;
        auto body = [&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        };
        {
            std::vector<std::jthread> pool;
            pool.reserve(threads - 1);
            for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(body);
            body();
        }
        if (error) std::rethrow_exception(error);
    }

    /// QUALDYN_WORKERS if set to a positive integer, else the hardware concurrency.
    static std::size_t default_workers() {
        if (const char* env = std::getenv("QUALDYN_WORKERS")) {
            try {
                const long v = std::stol(env);
                if (v > 0) return static_cast<std::size_t>(v);
            } catch (...) {
            }
        }
        return std::max(1u, std::thread::hardware_concurrency());
    }

private:
    std::size_t workers_;
};

}  // namespace qualdyn
