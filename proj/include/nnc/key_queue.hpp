#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "nnc/tensor.hpp"

namespace nnc {

/// FIFO dictionary of unit-norm key embeddings. Keys enter and leave in
/// whole batches: before a batch of n keys is pushed, the oldest batches are
/// dropped until size + n <= capacity.
class KeyQueue {
 public:
  KeyQueue() = default;
  KeyQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    if (capacity == 0 || dim == 0) throw std::invalid_argument("KeyQueue: capacity and dim must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  std::size_t batches() const { return batches_.size(); }

  /// True when a batch of n fits without eviction.
  bool fits(std::size_t n) const { return size_ + n <= capacity_; }

  /// keys: (n, dim). Returns the number of evicted keys.
  std::size_t enqueue(const Tensor<float>& keys, double norm_tol = 1e-5) {
    if (keys.rank() != 2 || keys.dim(1) != dim_) {
      shape_fail("KeyQueue::enqueue", "keys must be (n, " + std::to_string(dim_) + "), got " + to_string(keys.shape()));
    }
    const std::size_t n = keys.dim(0);
    if (n > capacity_) {
      throw std::invalid_argument("KeyQueue::enqueue: batch of " + std::to_string(n) + " exceeds capacity " +
                                  std::to_string(capacity_));
    }
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < dim_; ++j) s += double(keys[r * dim_ + j]) * keys[r * dim_ + j];
      if (std::abs(std::sqrt(s) - 1.0) > norm_tol) {
        throw std::domain_error("KeyQueue::enqueue: key " + std::to_string(r) + " has norm " + std::to_string(std::sqrt(s)));
      }
    }
    std::size_t evicted = 0;
    while (size_ + n > capacity_) {
      const std::size_t k = batches_.front().dim(0);
      batches_.pop_front();
      size_ -= k;
      evicted += k;
    }
    batches_.push_back(keys);
    size_ += n;
    return evicted;
  }

  /// All stored keys, oldest first: (size, dim). Requires a non-empty queue.
  Tensor<float> snapshot() const {
    if (empty()) throw std::logic_error("KeyQueue::snapshot: queue is empty");
    std::vector<float> out;
    out.reserve(size_ * dim_);
    for (const auto& b : batches_) out.insert(out.end(), b.vec().begin(), b.vec().end());
    return Tensor<float>({size_, dim_}, std::move(out));
  }

  std::vector<std::size_t> batch_sizes() const {
    std::vector<std::size_t> out;
    for (const auto& b : batches_) out.push_back(b.dim(0));
    return out;
  }

  /// Rebuilds a queue from a snapshot and its batch boundaries.
  static KeyQueue restore(std::size_t capacity, std::size_t dim, const Tensor<float>* keys,
                          const std::vector<std::size_t>& sizes) {
    KeyQueue q(capacity, dim);
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (total == 0) return q;
    if (keys == nullptr || keys->rank() != 2 || keys->dim(0) != total || keys->dim(1) != dim) {
      throw std::invalid_argument("KeyQueue::restore: stored keys do not match the recorded batch sizes");
    }
    std::size_t row = 0;
    for (std::size_t s : sizes) {
      std::vector<float> part(keys->vec().begin() + long(row * dim), keys->vec().begin() + long((row + s) * dim));
      q.batches_.push_back(Tensor<float>({s, dim}, std::move(part)));
      q.size_ += s;
      row += s;
    }
    if (q.size_ > capacity) throw std::invalid_argument("KeyQueue::restore: stored keys exceed capacity");
    return q;
  }

 private:
  std::size_t capacity_ = 0, dim_ = 0, size_ = 0;
  std::deque<Tensor<float>> batches_;
};

}  // namespace nnc
