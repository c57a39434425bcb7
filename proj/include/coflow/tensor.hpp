#pragma once

// Dense float tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a node holding shape, data and an optional
// gradient buffer. Ops record a backward rule on the thread's active Tape
// (see Tape::Recording) whenever at least one input requires grad. Without an
// active tape, ops are plain forward computations.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace coflow {

using Shape = std::vector<int>;

// Cache-line aligned storage. Vectorized reductions peel by address, so
// buffers at varying alignments would round differently from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  FloatBuffer data;
  FloatBuffer grad;  // empty until first accumulation
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, FloatBuffer data);
  Tensor(Shape shape, const std::vector<float>& data);
  Tensor(Shape shape, std::initializer_list<float> data) : Tensor(std::move(shape), FloatBuffer(data)) {}

  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const float> data() const { return node_->data; }
  // Only for parameters, optimizers and freshly built tensors. Forward
  // results must be treated as immutable.
  std::span<float> mutable_data() { return node_->data; }
  float item() const;
  float operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const float> grad() const { return node_->grad; }
  // Grad storage belongs to the shared node, so handles may be const.
  std::span<float> mutable_grad() const;  // allocates zeros on first use
  void zero_grad();

  // Copy of the data with no grad participation.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;  // copies; differentiable

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Ordered record of backward rules. One tape per thread of execution.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_rule);
  std::size_t size() const { return rules_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs the recorded rules newest first.
  // The tape is consumed; a second call throws UsageError.
  void backward(const Tensor& loss);

  static Tape* active();

  // RAII scope making `tape` the active tape of the calling thread.
  class Recording {
   public:
    explicit Recording(Tape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

// Marks `out` as a differentiable result of `inputs` and records `rule` on the
// active tape, if any input requires grad. `rule` reads out.grad() and
// accumulates into the inputs' mutable_grad().
Tensor record_op(Tensor out, std::initializer_list<Tensor> inputs,
                 std::function<void(const Tensor& out)> rule);

// Adds `g` into t's gradient buffer when t requires grad.
void accumulate_grad(const Tensor& t, std::span<const float> g);

// ---------------------------------------------------------------------------
// Ops. Tensors are laid out row-major; image tensors are [C, H, W].

struct ConvSpec {
  int stride = 1;
  int padding = 0;
};

// Cross-correlation. weight is [C_out, C_in, kH, kW], bias is [C_out].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec);

// Transposed convolution, the adjoint of conv2d under the same weight and
// spec. weight is [C_in, C_out, kH, kW] (the conv2d layout read backwards),
// bias is [C_out]. Output side is (H - 1) * stride - 2 * padding + kH.
Tensor deconv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec);

// Number of conv2d/deconv2d calls made by this thread so far.
std::uint64_t conv_invocations();

Tensor relu(const Tensor& x);
// input [N, in], weight [out, in], bias [out] -> [N, out]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float c);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x scaled by a single-element tensor.
Tensor scale_by(const Tensor& x, const Tensor& s);
// Elementwise quotient of single-element tensors.
Tensor div_scalar(const Tensor& num, const Tensor& den);
Tensor sum(const Tensor& x);

// Flattened cosine similarity. Throws DegenerateInputError on a zero norm.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor l1_norm(const Tensor& x);
Tensor l2_norm(const Tensor& x);

float dot(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Named parameter collections and their binary checkpoint encoding.

class ParamSet {
 public:
  Tensor& add(std::string name, Tensor t);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<Tensor> tensors() const;
  // Appends other's entries; names must not collide.
  void merge(const ParamSet& other);
  void zero_grad();
  // Deep copy of the data; the copy shares no storage with this set.
  ParamSet clone() const;
  // Overwrites values of matching names from `src`; shapes must agree.
  void assign(const ParamSet& src);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Little-endian "CFWT" format: magic, u8 version, u32 count, then per entry
// u16 name length, name bytes, u8 rank, u32 dims, f32 payload.
std::string encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes);
inline ParamSet decode_checkpoint(const std::string& bytes) {
  return decode_checkpoint(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

// Adam with bias correction and decoupled weight decay.
struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  // Applies one update using the accumulated grads, scaled by grad_scale.
  // Throws UsageError if any parameter has no gradient buffer.
  void step(float grad_scale = 1.0f);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace coflow
