#pragma once

#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace psonet {

// Minimal fixed-size worker pool. Callers index results into preallocated
// slots, so scheduling order never influences floating-point reduction
// order and runs stay reproducible at any thread count.
class ThreadPool {
public:
    explicit ThreadPool(size_t threads = 0) {
        if (threads == 0) {
            threads = std::thread::hardware_concurrency();
            if (threads == 0) threads = 2;
        }
        for (size_t i = 0; i < threads; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    size_t size() const { return workers_.size(); }

    // Runs fn(i) for i in [0, n) and blocks until all complete. Exceptions
    // from tasks are rethrown on the calling thread (first one wins).
    void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
        if (n == 0) return;
        if (n == 1 || workers_.size() <= 1) {
            for (size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        std::mutex done_mutex;
        std::condition_variable done_cv;
        size_t remaining = n;
        std::exception_ptr error;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            for (size_t i = 0; i < n; ++i) {
                tasks_.push([&, i] {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard<std::mutex> dl(done_mutex);
                        if (!error) error = std::current_exception();
                    }
                    std::lock_guard<std::mutex> dl(done_mutex);
                    if (--remaining == 0) done_cv.notify_one();
                });
            }
        }
        cv_.notify_all();
        // The caller helps drain the queue, then waits for stragglers.
        while (run_one()) {
        }
        std::unique_lock<std::mutex> dl(done_mutex);
        done_cv.wait(dl, [&] { return remaining == 0; });
        if (error) std::rethrow_exception(error);
    }

    // Process-wide pool sized to the machine.
    static ThreadPool& global() {
        static ThreadPool pool;
        return pool;
    }

private:
    bool run_one() {
        std::function<void()> task;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            if (tasks_.empty()) return false;
            task = std::move(tasks_.front());
            tasks_.pop();
        }
        task();
        return true;
    }

    void worker_loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_.wait(lock, [this] { return stop_ || !tasks_.empty(); });
                if (stop_ && tasks_.empty()) return;
                task = std::move(tasks_.front());
                tasks_.pop();
            }
            task();
        }
    }

    std::vector<std::thread> workers_;
    std::queue<std::function<void()>> tasks_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool stop_ = false;
};

} // namespace psonet
