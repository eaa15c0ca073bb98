#ifndef FIMLORA_MODEL_HPP
#define FIMLORA_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fimlora/errors.hpp"
#include "fimlora/linalg.hpp"
#include "fimlora/lora.hpp"

namespace fimlora {

enum class Activation { tanh, identity };
enum class LossKind { mse, softmax_cross_entropy };
enum class WeightInit { kaiming_uniform, orthogonal };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }
inline std::string to_string(LossKind l) { return l == LossKind::mse ? "mse" : "softmax_cross_entropy"; }
inline std::string to_string(WeightInit w) {
    return w == WeightInit::kaiming_uniform ? "kaiming_uniform" : "orthogonal";
}

inline Activation parse_activation(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + std::string(s) + "' (expected tanh|identity)");
}

inline LossKind parse_loss(std::string_view s) {
    if (s == "mse") return LossKind::mse;
    if (s == "softmax_cross_entropy" || s == "ce") return LossKind::softmax_cross_entropy;
    throw ConfigError("unknown loss '" + std::string(s) + "' (expected mse|softmax_cross_entropy)");
}

inline WeightInit parse_weight_init(std::string_view s) {
    if (s == "kaiming_uniform" || s == "kaiming") return WeightInit::kaiming_uniform;
    if (s == "orthogonal") return WeightInit::orthogonal;
    throw ConfigError("unknown weight init '" + std::string(s) + "' (expected kaiming_uniform|orthogonal)");
}

inline std::string layer_module_id(std::size_t layer) { return "layers." + std::to_string(layer) + ".proj"; }

/// h = act(W x + (alpha/r) B A x) with W frozen.
class LinearLayer {
public:
    LinearLayer(Matrix w, LoraAdapter adapter, Activation activation)
        : w_(std::move(w)), adapter_(std::move(adapter)), activation_(activation) {
        if (adapter_.d_in() != w_.cols() || adapter_.d_out() != w_.rows()) {
            throw ShapeError("LinearLayer '" + adapter_.module_id() + "': adapter (" +
                             std::to_string(adapter_.d_out()) + "x" + std::to_string(adapter_.d_in()) +
                             ") does not match W " + w_.shape());
        }
    }

    [[nodiscard]] const Matrix& w() const noexcept { return w_; }
    [[nodiscard]] const LoraAdapter& adapter() const noexcept { return adapter_; }
    [[nodiscard]] LoraAdapter& adapter() noexcept { return adapter_; }
    [[nodiscard]] Activation activation() const noexcept { return activation_; }
    [[nodiscard]] std::size_t d_in() const noexcept { return w_.cols(); }
    [[nodiscard]] std::size_t d_out() const noexcept { return w_.rows(); }

    /// Replaces the adapter; the frozen W is untouched.
    void set_adapter(LoraAdapter adapter) {
        if (adapter.d_in() != w_.cols() || adapter.d_out() != w_.rows()) {
            throw ShapeError("LinearLayer '" + adapter_.module_id() + "': replacement adapter shape mismatch");
        }
        adapter_ = std::move(adapter);
    }

private:
    Matrix w_;
    LoraAdapter adapter_;
    Activation activation_;
};

class CalibModel {
public:
    CalibModel(std::vector<LinearLayer> layers, LossKind loss) : layers_(std::move(layers)), loss_(loss) {
        if (layers_.empty()) {
            throw ConfigError("CalibModel: at least one layer required");
        }
        for (std::size_t i = 1; i < layers_.size(); ++i) {
            if (layers_[i - 1].d_out() != layers_[i].d_in()) {
                throw ShapeError("CalibModel: layer " + std::to_string(i - 1) + " d_out " +
                                 std::to_string(layers_[i - 1].d_out()) + " != layer " + std::to_string(i) +
                                 " d_in " + std::to_string(layers_[i].d_in()));
            }
        }
    }

    [[nodiscard]] std::size_t num_layers() const noexcept { return layers_.size(); }
    [[nodiscard]] const std::vector<LinearLayer>& layers() const noexcept { return layers_; }
    [[nodiscard]] LinearLayer& layer(std::size_t i) { return layers_.at(i); }
    [[nodiscard]] const LinearLayer& layer(std::size_t i) const { return layers_.at(i); }
    [[nodiscard]] LossKind loss() const noexcept { return loss_; }
    [[nodiscard]] std::size_t input_dim() const noexcept { return layers_.front().d_in(); }
    [[nodiscard]] std::size_t output_dim() const noexcept { return layers_.back().d_out(); }

    [[nodiscard]] std::vector<std::string> module_ids() const {
        std::vector<std::string> ids;
        ids.reserve(layers_.size());
        for (const auto& l : layers_) {
            ids.push_back(l.adapter().module_id());
        }
        return ids;
    }

private:
    std::vector<LinearLayer> layers_;
    LossKind loss_;
};

struct Batch {
    std::vector<Matrix> inputs;
    std::vector<Matrix> targets;

    [[nodiscard]] std::size_t size() const noexcept { return inputs.size(); }
};

struct LayerTrace {
    Matrix x;   // layer input
    Matrix ax;  // A x
    Matrix h;   // activation output
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
    Matrix target;
    double loss = 0.0;
};

struct BatchTrace {
    std::vector<ForwardTrace> examples;
    double mean_loss = 0.0;
};

struct BackwardResult {
    /// Batch-mean dL/dz per layer, z = W x + (alpha/r) B A x the pre-activation output.
    std::vector<Matrix> upstream;
    /// Batch-mean adapter gradients per layer, in layer order.
    std::vector<AdapterGradients> grads;
};

namespace detail {

inline void apply_activation(Activation act, Matrix& z) {
    if (act == Activation::tanh) {
        for (double& v : z.data()) {
            v = std::tanh(v);
        }
    }
}

inline Matrix softmax(const Matrix& z) {
    double top = z[0];
    for (double v : z.data()) {
        top = std::max(top, v);
    }
    Matrix p = z;
    double total = 0.0;
    for (double& v : p.data()) {
        v = std::exp(v - top);
        total += v;
    }
    for (double& v : p.data()) {
        v /= total;
    }
    return p;
}

}  // namespace detail

/// Per-example loss. MSE: (1/d_out) * ||h - y||^2. Cross entropy: -sum_j y_j log softmax(h)_j
/// with y a probability vector.
[[nodiscard]] inline double example_loss(LossKind kind, const Matrix& h, const Matrix& y) {
    detail::require_same_shape(h, y, "loss");
    if (kind == LossKind::mse) {
        double s = 0.0;
        for (std::size_t k = 0; k < h.size(); ++k) {
            const double e = h[k] - y[k];
            s += e * e;
        }
        return s / static_cast<double>(h.size());
    }
    double top = h[0];
    for (double v : h.data()) {
        top = std::max(top, v);
    }
    double total = 0.0;
    for (double v : h.data()) {
        total += std::exp(v - top);
    }
    const double log_norm = top + std::log(total);
    double loss = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) {
        loss -= y[k] * (h[k] - log_norm);
    }
    return loss;
}

/// dL/dh of example_loss.
[[nodiscard]] inline Matrix example_loss_grad(LossKind kind, const Matrix& h, const Matrix& y) {
    detail::require_same_shape(h, y, "loss gradient");
    Matrix g(h.rows(), 1);
    if (kind == LossKind::mse) {
        const double c = 2.0 / static_cast<double>(h.size());
        for (std::size_t k = 0; k < h.size(); ++k) {
            g[k] = c * (h[k] - y[k]);
        }
        return g;
    }
    const Matrix p = detail::softmax(h);
    double mass = 0.0;
    for (double v : y.data()) {
        mass += v;
    }
    for (std::size_t k = 0; k < h.size(); ++k) {
        g[k] = mass * p[k] - y[k];
    }
    return g;
}

[[nodiscard]] inline ForwardTrace forward_example(const CalibModel& model, const Matrix& input, const Matrix& target) {
    if (!input.is_column() || input.rows() != model.input_dim()) {
        throw ShapeError("forward: input " + input.shape() + " does not match layer 0 d_in " +
                         std::to_string(model.input_dim()));
    }
    ForwardTrace trace;
    trace.layers.reserve(model.num_layers());
    Matrix x = input;
    for (const auto& layer : model.layers()) {
        auto [delta, ax] = forward_delta(layer.adapter(), x);
        Matrix h = matmul(layer.w(), x);
        add_inplace(h, delta);
        detail::apply_activation(layer.activation(), h);
        if (!all_finite(h)) {
            throw NumericError("forward: non-finite activation at layer '" + layer.adapter().module_id() + "'");
        }
        trace.layers.push_back({std::move(x), std::move(ax), h});
        x = std::move(h);
    }
    trace.loss = example_loss(model.loss(), trace.layers.back().h, target);
    if (!std::isfinite(trace.loss)) {
        throw NumericError("forward: non-finite loss after layer '" + model.layers().back().adapter().module_id() +
                           "'");
    }
    trace.target = target;
    return trace;
}

[[nodiscard]] inline BatchTrace forward(const CalibModel& model, const Batch& batch) {
    if (batch.inputs.size() != batch.targets.size() || batch.inputs.empty()) {
        throw ShapeError("forward: batch needs matching, non-empty inputs and targets");
    }
    BatchTrace out;
    out.examples.reserve(batch.size());
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out.examples.push_back(forward_example(model, batch.inputs[i], batch.targets[i]));
        total += out.examples.back().loss;
    }
    out.mean_loss = total / static_cast<double>(batch.size());
    return out;
}

/// Output of the frozen network alone (adapters ignored).
[[nodiscard]] inline Matrix frozen_forward(const CalibModel& model, const Matrix& input) {
    Matrix x = input;
    for (const auto& layer : model.layers()) {
        Matrix h = matmul(layer.w(), x);
        detail::apply_activation(layer.activation(), h);
        x = std::move(h);
    }
    return x;
}

[[nodiscard]] inline Matrix model_output(const CalibModel& model, const Matrix& input) {
    Matrix x = input;
    for (const auto& layer : model.layers()) {
        Matrix h = matmul(layer.w(), x);
        add_inplace(h, forward_delta(layer.adapter(), x).delta);
        detail::apply_activation(layer.activation(), h);
        x = std::move(h);
    }
    return x;
}

/// Reverse-mode pass over a batch trace. Gradients are arithmetic means of the
/// per-example gradients.
[[nodiscard]] inline BackwardResult backward(const CalibModel& model, const BatchTrace& trace) {
    if (trace.examples.empty()) {
        throw ShapeError("backward: empty trace");
    }
    const std::size_t n_layers = model.num_layers();
    BackwardResult out;
    out.upstream.reserve(n_layers);
    out.grads.reserve(n_layers);
    for (const auto& layer : model.layers()) {
        const auto& ad = layer.adapter();
        out.upstream.emplace_back(layer.d_out(), 1);
        out.grads.push_back({Matrix(ad.rank(), ad.d_in()), Matrix(ad.d_out(), ad.rank())});
    }

    for (const auto& ex : trace.examples) {
        if (ex.layers.size() != n_layers) {
            throw ShapeError("backward: trace has " + std::to_string(ex.layers.size()) + " layers, model has " +
                             std::to_string(n_layers));
        }
        Matrix grad_h = example_loss_grad(model.loss(), ex.layers.back().h, ex.target);
        for (std::size_t li = n_layers; li-- > 0;) {
            const auto& layer = model.layer(li);
            const auto& lt = ex.layers[li];
            const auto& ad = layer.adapter();
            if (lt.x.rows() != layer.d_in() || lt.h.rows() != layer.d_out() || lt.ax.rows() != ad.rank()) {
                throw ShapeError("backward: trace does not match model state at layer '" + ad.module_id() + "'");
            }
            Matrix dz = grad_h;
            if (layer.activation() == Activation::tanh) {
                for (std::size_t k = 0; k < dz.size(); ++k) {
                    dz[k] *= 1.0 - lt.h[k] * lt.h[k];
                }
            }
            const AdapterGradients g = adapter_gradients(ad, lt.x, lt.ax, dz);
            add_inplace(out.upstream[li], dz);
            add_inplace(out.grads[li].grad_a, g.grad_a);
            add_inplace(out.grads[li].grad_b, g.grad_b);
            if (li > 0) {
                // dL/dx = Wᵀ dz + (alpha/r) Aᵀ Bᵀ dz
                Matrix dx = matmul_tn(layer.w(), dz);
                const Matrix bt_dz = matmul_tn(ad.b(), dz);
                axpy(dx, ad.scaling(), matmul_tn(ad.a(), bt_dz));
                grad_h = std::move(dx);
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(trace.examples.size());
    for (std::size_t li = 0; li < n_layers; ++li) {
        out.upstream[li] = scaled(out.upstream[li], inv);
        out.grads[li].grad_a = scaled(out.grads[li].grad_a, inv);
        out.grads[li].grad_b = scaled(out.grads[li].grad_b, inv);
    }
    return out;
}

/// Layer widths and initialization for a chain of LoRA-injected layers.
struct ModelSpec {
    std::vector<std::size_t> dims{24, 24, 24, 24, 24, 24, 24, 24, 24};  // L + 1 entries
    Activation activation = Activation::tanh;
    LossKind loss = LossKind::mse;
    WeightInit weight_init = WeightInit::orthogonal;
    double weight_gain = 1.0;
    std::size_t base_rank = 2;
    double base_alpha = 4.0;

    [[nodiscard]] std::size_t num_layers() const noexcept { return dims.empty() ? 0 : dims.size() - 1; }

    static std::vector<std::size_t> uniform_dims(std::size_t layers, std::size_t width) {
        return std::vector<std::size_t>(layers + 1, width);
    }
};

/// Builds the frozen stack and fresh adapters. Draw order per layer: W, then A.
[[nodiscard]] inline CalibModel build_model(const ModelSpec& spec, Rng& rng) {
    if (spec.dims.size() < 2) {
        throw ConfigError("ModelSpec: need at least two dims (one layer)");
    }
    if (std::any_of(spec.dims.begin(), spec.dims.end(), [](std::size_t d) { return d == 0; })) {
        throw ConfigError("ModelSpec: dims must be positive");
    }
    if (spec.base_rank == 0 || !(spec.base_alpha > 0.0)) {
        throw ConfigError("ModelSpec: base_rank and base_alpha must be positive");
    }
    std::vector<LinearLayer> layers;
    layers.reserve(spec.num_layers());
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
        const std::size_t d_in = spec.dims[i];
        const std::size_t d_out = spec.dims[i + 1];
        Matrix w = spec.weight_init == WeightInit::orthogonal ? orthogonal_init(d_out, d_in, rng, spec.weight_gain)
                                                              : scaled(kaiming_init(d_out, d_in, rng), spec.weight_gain);
        LoraAdapter ad = LoraAdapter::create(layer_module_id(i), d_in, d_out, spec.base_rank, spec.base_alpha, rng);
        layers.emplace_back(std::move(w), std::move(ad), spec.activation);
    }
    return CalibModel(std::move(layers), spec.loss);
}

/// Teacher-student regression task. Inputs are i.i.d. standard normal vectors;
/// targets are teacher outputs (softmax probabilities under cross entropy).
class SyntheticTask {
public:
    SyntheticTask(CalibModel teacher, std::vector<double> planted_importance, std::size_t batch_size, Rng rng)
        : teacher_(std::move(teacher)),
          planted_importance_(std::move(planted_importance)),
          batch_size_(batch_size),
          rng_(std::move(rng)) {
        if (batch_size_ == 0) {
            throw ConfigError("SyntheticTask: batch size must be positive");
        }
        if (planted_importance_.size() != teacher_.num_layers()) {
            throw ShapeError("SyntheticTask: one planted importance per layer required");
        }
    }

    [[nodiscard]] const CalibModel& teacher() const noexcept { return teacher_; }
    [[nodiscard]] const std::vector<double>& planted_importance() const noexcept { return planted_importance_; }
    [[nodiscard]] std::size_t batch_size() const noexcept { return batch_size_; }
    [[nodiscard]] std::size_t input_dim() const noexcept { return teacher_.input_dim(); }

    [[nodiscard]] Matrix target_for(const Matrix& x) const {
        Matrix y = model_output(teacher_, x);
        return teacher_.loss() == LossKind::softmax_cross_entropy ? detail::softmax(y) : y;
    }

    /// Next calibration batch; batches are drawn sequentially from the task stream.
    Batch next_batch() { return sample(rng_, batch_size_); }

    [[nodiscard]] Batch sample(Rng& rng, std::size_t n) const {
        Batch b;
        b.inputs.reserve(n);
        b.targets.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            Matrix x = gaussian_init(input_dim(), 1, rng);
            b.targets.push_back(target_for(x));
            b.inputs.push_back(std::move(x));
        }
        return b;
    }

private:
    CalibModel teacher_;
    std::vector<double> planted_importance_;
    std::size_t batch_size_;
    Rng rng_;
};

struct PlantedTaskSpec {
    ModelSpec model{};
    std::vector<std::size_t> perturbed_layers{1, 4, 6};
    double magnitude = 1.0;
    std::size_t batch_size = 256;
};

struct PlantedTask {
    CalibModel student;
    SyntheticTask task;
};

/// Student = freshly built model; teacher = the same frozen stack with a
/// rank-1 perturbation magnitude * u vᵀ (unit u, v) added to W on each
/// perturbed layer. v is drawn from the row space of that layer's adapter A,
/// so the teacher is reachable by moving the perturbed layers' B alone.
[[nodiscard]] inline PlantedTask make_planted_task(const PlantedTaskSpec& spec, Rng& rng) {
    const std::size_t n_layers = spec.model.num_layers();
    if (spec.perturbed_layers.empty()) {
        throw ConfigError("make_planted_task: perturbed layer set is empty");
    }
    const std::set<std::size_t> perturbed(spec.perturbed_layers.begin(), spec.perturbed_layers.end());
    if (*perturbed.rbegin() >= n_layers) {
        throw ConfigError("make_planted_task: perturbed layer " + std::to_string(*perturbed.rbegin()) +
                          " out of range for " + std::to_string(n_layers) + " layers");
    }
    if (!(spec.magnitude >= 0.0) || !std::isfinite(spec.magnitude)) {
        throw ConfigError("make_planted_task: magnitude must be finite and >= 0");
    }

    CalibModel student = build_model(spec.model, rng);
    Rng plant_rng = rng.fork();
    Rng data_rng = rng.fork();

    std::vector<LinearLayer> teacher_layers;
    std::vector<double> importance(n_layers, 0.0);
    for (std::size_t i = 0; i < n_layers; ++i) {
        const auto& layer = student.layer(i);
        Matrix w = layer.w();
        if (perturbed.count(i) != 0) {
            const auto& a = layer.adapter().a();
            Matrix u = gaussian_init(layer.d_out(), 1, plant_rng);
            const Matrix c = gaussian_init(a.rows(), 1, plant_rng);
            Matrix v = matmul_tn(a, c);
            u = scaled(u, 1.0 / frobenius_norm(u));
            v = scaled(v, 1.0 / frobenius_norm(v));
            axpy(w, spec.magnitude, outer(u, v));
            importance[i] = spec.magnitude;
        }
        // Teacher adapters are fresh (B = 0) copies, so they contribute nothing.
        teacher_layers.emplace_back(std::move(w), layer.adapter(), layer.activation());
    }
    CalibModel teacher(std::move(teacher_layers), student.loss());
    SyntheticTask task(std::move(teacher), std::move(importance), spec.batch_size, std::move(data_rng));
    return {std::move(student), std::move(task)};
}

struct FinetuneReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t steps = 0;
};

/// Toy plain-SGD loop over every adapter's A and B; losses are measured on a
/// fixed held-out batch drawn from `eval_rng`.
inline FinetuneReport finetune(CalibModel& model, const SyntheticTask& task, std::size_t steps, double lr,
                               Rng& train_rng, Rng& eval_rng, std::size_t eval_examples = 256) {
    const Batch eval = task.sample(eval_rng, eval_examples);
    FinetuneReport report;
    report.steps = steps;
    report.initial_loss = forward(model, eval).mean_loss;
    for (std::size_t step = 0; step < steps; ++step) {
        const Batch batch = task.sample(train_rng, task.batch_size());
        const BackwardResult g = backward(model, forward(model, batch));
        for (std::size_t li = 0; li < model.num_layers(); ++li) {
            auto& ad = model.layer(li).adapter();
            axpy(ad.a(), -lr, g.grads[li].grad_a);
            axpy(ad.b(), -lr, g.grads[li].grad_b);
        }
    }
    report.final_loss = forward(model, eval).mean_loss;
    return report;
}

}  // namespace fimlora

#endif  // FIMLORA_MODEL_HPP
