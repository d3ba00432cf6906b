#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace voxseg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until touched; same length as data afterwards
  bool requires_grad = false;
  std::uint64_t id = 0;

  TensorStorage(Shape s, bool rg);
};
}  // namespace detail

/// Dense row-major float32 tensor. Value-semantics handle over shared
/// storage: copies alias the same buffer, clone() deep-copies. The gradient
/// buffer is allocated lazily and always matches the data shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::int64_t dim(int axis) const { return s_->shape[static_cast<std::size_t>(axis)]; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }
  std::uint64_t id() const { return s_->id; }

  std::span<float> data() { return s_->data; }
  std::span<const float> data() const { return s_->data; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer, zero-initialized on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();
  void accumulate_grad(std::span<const float> g);

  /// Deep copy of shape/data/requires_grad (fresh id, no grad).
  Tensor clone() const;

  /// Value of a 1-element tensor.
  float scalar() const;

  bool all_finite() const;

 private:
  std::shared_ptr<detail::TensorStorage> s_;
};

struct TapeRecord {
  std::string op;
  std::vector<std::uint64_t> input_ids;
  std::uint64_t output_id = 0;
  std::function<void()> backward;
};

/// Reverse-mode tape. Forward ops append records; backward() replays them
/// in exact reverse order, accumulating into the grad buffers of every
/// requires_grad tensor reachable from the loss. Single-threaded by design.
class Tape {
 public:
  void record(TapeRecord rec) { records_.push_back(std::move(rec)); }

  /// Seeds d(loss)/d(loss) = 1 and replays all records in reverse.
  void backward(const Tensor& loss);

  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  const std::vector<TapeRecord>& records() const { return records_; }

 private:
  std::vector<TapeRecord> records_;
};

/// Shortest op-path length from each tensor id on the tape back to `loss_id`
/// (0 for the loss itself). Ids with no path to the loss are absent.
std::unordered_map<std::uint64_t, int> op_depths_from(const Tape& tape, std::uint64_t loss_id);

}  // namespace voxseg
