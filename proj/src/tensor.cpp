#include "voxseg/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "voxseg/errors.hpp"

namespace voxseg {

namespace {
std::atomic<std::uint64_t> g_next_tensor_id{1};
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
TensorStorage::TensorStorage(Shape s, bool rg) : shape(std::move(s)), requires_grad(rg) {
  for (std::int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
  }
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
  id = g_next_tensor_id.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

Tensor::Tensor(Shape shape, bool requires_grad)
    : s_(std::make_shared<detail::TensorStorage>(std::move(shape), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (float& x : t.data()) x = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  if (data.size() != t.s_->data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(t.shape()));
  }
  t.s_->data = std::move(data);
  return t;
}

std::span<float> Tensor::grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0f);
  return s_->grad;
}

std::span<const float> Tensor::grad() const {
  if (s_->grad.empty()) throw StateError("gradient buffer not populated");
  return s_->grad;
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0f);
}

void Tensor::accumulate_grad(std::span<const float> g) {
  if (g.size() != s_->data.size()) throw DimensionError("gradient length does not match tensor");
  auto dst = grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::clone() const {
  Tensor t(s_->shape, s_->requires_grad);
  t.s_->data = s_->data;
  return t;
}

float Tensor::scalar() const {
  if (numel() != 1) throw DimensionError("scalar() on tensor of shape " + shape_str(shape()));
  return s_->data[0];
}

bool Tensor::all_finite() const {
  for (float x : s_->data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void Tape::backward(const Tensor& loss) {
  Tensor seed = loss;
  if (seed.numel() != 1) throw DimensionError("backward() expects a scalar loss");
  seed.grad()[0] += 1.0f;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->backward) it->backward();
  }
}

std::unordered_map<std::uint64_t, int> op_depths_from(const Tape& tape, std::uint64_t loss_id) {
  std::unordered_map<std::uint64_t, int> depth;
  depth[loss_id] = 0;
  // Records are in forward order, so walking them backwards visits each
  // output after everything downstream of it has been finalized.
  const auto& recs = tape.records();
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
    auto found = depth.find(it->output_id);
    if (found == depth.end()) continue;
    const int d = found->second + 1;
    for (std::uint64_t in : it->input_ids) {
      auto [pos, inserted] = depth.try_emplace(in, d);
      if (!inserted && d < pos->second) pos->second = d;
    }
  }
  return depth;
}

}  // namespace voxseg
