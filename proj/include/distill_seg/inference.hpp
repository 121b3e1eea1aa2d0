#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "distill_seg/dataset.hpp"
#include "distill_seg/metrics.hpp"
#include "distill_seg/models.hpp"

namespace distill_seg {

// Worker cap for inference fan-out: DISTILL_SEG_THREADS if set, else the
// hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("DISTILL_SEG_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
// handled by exactly one thread, so writes to per-index slots need no locks.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         unsigned max_workers = 0) {
  unsigned workers = max_workers ? max_workers : worker_count();
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Channel argmax of [N, K, H, W] logits; ties go to the lowest class.
inline std::vector<std::uint8_t> argmax_classes(const Tensor& logits) {
  const std::size_t N = static_cast<std::size_t>(logits.dim(0));
  const std::size_t K = static_cast<std::size_t>(logits.dim(1));
  const std::size_t P = static_cast<std::size_t>(logits.dim(2) * logits.dim(3));
  auto z = logits.data();
  std::vector<std::uint8_t> out(N * P);
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (z[(s * K + k) * P + p] > z[(s * K + best) * P + p]) best = k;
      out[s * P + p] = static_cast<std::uint8_t>(best);
    }
  return out;
}

// Full-slice logits for the given slices, computed without recording a tape.
inline Tensor infer_logits(const SegModel& model, const VolumeStore& store,
                           std::span<const SliceId> ids) {
  NoGradGuard guard;
  return model.forward(stack_images(store, ids));
}

// Argmax masks of every listed slice; chunks fan out over worker threads
// and land in slice order, so results do not depend on the thread count.
inline std::vector<std::vector<std::uint8_t>> predict_masks(const SegModel& model,
                                                            const VolumeStore& store,
                                                            std::span<const SliceId> ids,
                                                            std::size_t chunk = 16) {
  std::vector<std::vector<std::uint8_t>> out(ids.size());
  const std::size_t chunks = (ids.size() + chunk - 1) / chunk;
  const std::size_t P = ids.empty() ? 0 : store.extents().slice_pixels();
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(ids.size(), lo + chunk);
    auto masks = argmax_classes(infer_logits(model, store, ids.subspan(lo, hi - lo)));
    for (std::size_t i = lo; i < hi; ++i)
      out[i].assign(masks.begin() + static_cast<std::ptrdiff_t>((i - lo) * P),
                    masks.begin() + static_cast<std::ptrdiff_t>((i - lo + 1) * P));
  });
  return out;
}

// Confusion matrix of the model's full-slice predictions against ground
// truth over whole volumes.
inline ConfusionMatrix evaluate_volumes(const SegModel& model, const VolumeStore& store,
                                        std::span<const int> volumes) {
  const auto ids = store.slices_of(volumes);
  const auto preds = predict_masks(model, store, ids);
  ConfusionMatrix cm(static_cast<int>(model.config().num_classes));
  for (std::size_t i = 0; i < ids.size(); ++i) cm.accumulate(preds[i], store.mask(ids[i]));
  return cm;
}

}  // namespace distill_seg
