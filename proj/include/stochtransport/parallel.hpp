#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace stochtransport {

/// Calls fn(ctx, i) for i in [0, n) on up to `workers` threads, each with its
/// own context from make_ctx(). The first exception is rethrown. Callers
/// write results into per-index slots, so outcomes never depend on the
/// schedule.
template <class MakeCtx, class Fn>
void parallel_for(std::size_t n, unsigned workers, MakeCtx make_ctx, Fn fn) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    auto work = [&] {
        try {
            auto ctx = make_ctx();
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(ctx, i);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lk(mu);
            if (!err) err = std::current_exception();
            next.store(n);
        }
    };
    const unsigned w = static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(workers, n)));
    if (w <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(w);
        for (unsigned i = 0; i < w; ++i) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (err) std::rethrow_exception(err);
}

}  // namespace stochtransport
