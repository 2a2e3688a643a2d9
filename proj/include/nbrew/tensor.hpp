#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nbrew {

namespace detail {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major matrix of doubles with reverse-mode differentiation.
// Every tensor is two-dimensional; vectors are 1 x n and scalars 1 x 1.
// Copies share storage: a Tensor is a handle to a graph node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double value, bool requires_grad = false);
  static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<std::size_t> shape() const { return {rows(), cols()}; }

  std::span<const double> values() const { return node_->value; }
  // Direct write access, intended for leaves (parameters, optimizer updates).
  std::span<double> mutable_values() { return node_->value; }
  double operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  // Back-propagates from this scalar into every requires_grad ancestor.
  void backward() const;

  // Same values, no history.
  Tensor detach() const;
  // Independent deep copy of the values (and requires_grad flag).
  Tensor clone() const;

  const detail::Node* node_id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise with broadcasting: each operand dimension equals the other's
// or is 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// Row-wise normalization; gamma and beta are 1 x cols.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when not
// training or p == 0.
Tensor dropout(const Tensor& a, double p, bool training, std::mt19937_64& rng);
Tensor dropout(const Tensor& a, double p, bool training, std::uint64_t seed);

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// axis 0 sums over rows (result 1 x cols); axis 1 over columns (rows x 1).
Tensor reduce_sum(const Tensor& a, int axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Entries where mask != 0 are replaced by `value`; gradient is blocked there.
Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double value);

// out[i] = a[i, index[i]], shape rows x 1.
Tensor pick(const Tensor& a, std::span<const int> index);

}  // namespace ops

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Parameter initializers.
Tensor xavier_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng);
Tensor normal_init(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update over `params`, then clears their grads.
// Throws UsageError if a parameter has no gradient buffer.
void adam_step(std::span<Tensor> params, AdamState& state, double lr);

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step must be >= 1.
double lr_schedule(std::int64_t step, std::size_t d_model, std::int64_t warmup);

// Line-oriented checkpoint; values are written as hex floats so a
// save/load cycle is bit-exact.
//   nbrew-checkpoint 1
//   tensors <K>
//   <name> <rows> <cols>
//   <v0> <v1> ...
std::string serialize_tensors(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> deserialize_tensors(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace nbrew
