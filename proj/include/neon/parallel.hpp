#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <type_traits>
#include <vector>

namespace neon {

inline std::size_t default_concurrency() noexcept
{
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Stops handing out
/// work after the first exception, which is rethrown once all workers join.
/// When several items fail, the one with the smallest index wins so errors
/// are reported deterministically.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn)
{
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex mu;
    std::size_t error_index = n;
    std::exception_ptr error;
    {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                while (!failed.load(std::memory_order_relaxed)) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= n) return;
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (i < error_index) {
                            error_index = i;
                            error = std::current_exception();
                        }
                        failed = true;
                    }
                }
            });
        }
    }
    if (error) std::rethrow_exception(error);
}

/// Order-preserving map: out[i] = fn(in[i]).
template <class In, class F>
auto parallel_map(const std::vector<In>& in, std::size_t threads, F&& fn)
{
    using Out = std::decay_t<std::invoke_result_t<F&, const In&>>;
    std::vector<Out> out(in.size());
    parallel_for(in.size(), threads, [&](std::size_t i) { out[i] = fn(in[i]); });
    return out;
}

}  // namespace neon
